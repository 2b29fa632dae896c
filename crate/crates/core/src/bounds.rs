//! Inequality chains between InfoNCE, MINE and BPR on a fixed score batch.
//!
//! All quantities are written in the score differences `x_j = ŷ_uj − p̂`:
//! `info = log(1 + Σ e^{x_j})`, `mine = log Σ e^{x_j}`,
//! `bpr = Σ softplus(x_j)`.

use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::ScoreBatch;
use crate::scalar::{log_sum_exp, softplus, Scalar};
use crate::seed::{self, Stream};

/// A relation counts as holding down to this slack.
pub const SLACK_TOLERANCE: f64 = -1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Inequality {
    /// info ≥ mine
    A,
    /// max(0, max x) + log(N+1) ≥ info
    B,
    /// mine ≥ max x
    C,
    /// mine ≥ mean x + log N
    D,
    /// bpr ≥ Σ max(0, x)
    E,
    /// bpr ≥ Σ x
    F,
    /// info ≥ mean x + log N
    G,
}

impl Inequality {
    pub const ALL: [Inequality; 7] = [
        Inequality::A,
        Inequality::B,
        Inequality::C,
        Inequality::D,
        Inequality::E,
        Inequality::F,
        Inequality::G,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Inequality::A => "a",
            Inequality::B => "b",
            Inequality::C => "c",
            Inequality::D => "d",
            Inequality::E => "e",
            Inequality::F => "f",
            Inequality::G => "g",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Inequality::A => "info >= mine",
            Inequality::B => "max(0,max x) + log(N+1) >= info",
            Inequality::C => "mine >= max x",
            Inequality::D => "mine >= mean x + log N",
            Inequality::E => "bpr >= sum max(0,x)",
            Inequality::F => "bpr >= sum x",
            Inequality::G => "info >= mean x + log N",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundRecord<T> {
    pub inequality: Inequality,
    pub lhs: T,
    pub rhs: T,
    pub slack: T,
    pub holds: bool,
}

impl<T: Scalar> BoundRecord<T> {
    fn new(inequality: Inequality, lhs: T, rhs: T) -> Self {
        let slack = lhs - rhs;
        Self {
            inequality,
            lhs,
            rhs,
            slack,
            holds: slack >= T::of(SLACK_TOLERANCE),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport<T> {
    pub records: Vec<BoundRecord<T>>,
    /// The batch the records were computed on; doubles as the counterexample.
    pub batch: ScoreBatch<T>,
}

impl<T: Scalar> BoundReport<T> {
    pub fn all_hold(&self) -> bool {
        self.records.iter().all(|r| r.holds)
    }

    pub fn get(&self, q: Inequality) -> Option<&BoundRecord<T>> {
        self.records.iter().find(|r| r.inequality == q)
    }

    pub fn counterexample(&self) -> Option<String> {
        let failed: Vec<_> = self.records.iter().filter(|r| !r.holds).collect();
        if failed.is_empty() {
            return None;
        }
        let mut s = String::new();
        for r in failed {
            let _ = writeln!(
                s,
                "({}) {}: lhs={:e} rhs={:e} slack={:e}",
                r.inequality.name(),
                r.inequality.describe(),
                r.lhs,
                r.rhs,
                r.slack
            );
        }
        let _ = writeln!(s, "pos={:?}", self.batch.pos);
        let _ = writeln!(s, "negs={:?}", self.batch.negs);
        Some(s)
    }
}

struct Moments<T> {
    n: T,
    info: T,
    mine: T,
    max: T,
    mean: T,
}

fn moments<T: Scalar>(b: &ScoreBatch<T>) -> Result<(Vec<T>, Moments<T>)> {
    if b.negs.is_empty() {
        return Err(Error::Config("bound checks need N ≥ 1".into()));
    }
    let x: Vec<T> = b.negs.iter().map(|&y| y - b.pos).collect();
    let n = T::of_usize(x.len());
    let mut with_zero = Vec::with_capacity(x.len() + 1);
    with_zero.push(T::zero());
    with_zero.extend_from_slice(&x);
    let m = Moments {
        n,
        info: log_sum_exp(&with_zero),
        mine: log_sum_exp(&x),
        max: x.iter().copied().fold(T::neg_infinity(), T::max),
        mean: x.iter().copied().sum::<T>() / n,
    };
    Ok((x, m))
}

/// Inequalities (a)–(d).
pub fn check_info_mine_chain<T: Scalar>(b: &ScoreBatch<T>) -> Result<BoundReport<T>> {
    let (_, m) = moments(b)?;
    let records = vec![
        BoundRecord::new(Inequality::A, m.info, m.mine),
        BoundRecord::new(
            Inequality::B,
            m.max.max(T::zero()) + (m.n + T::one()).ln(),
            m.info,
        ),
        BoundRecord::new(Inequality::C, m.mine, m.max),
        BoundRecord::new(Inequality::D, m.mine, m.mean + m.n.ln()),
    ];
    Ok(BoundReport {
        records,
        batch: b.clone(),
    })
}

/// Inequalities (e)–(g).
pub fn check_bpr_chain<T: Scalar>(b: &ScoreBatch<T>) -> Result<BoundReport<T>> {
    let (x, m) = moments(b)?;
    let bpr = x.iter().map(|&v| softplus(v)).sum::<T>();
    let hinge = x.iter().map(|&v| v.max(T::zero())).sum::<T>();
    let linear = x.iter().copied().sum::<T>();
    let records = vec![
        BoundRecord::new(Inequality::E, bpr, hinge),
        BoundRecord::new(Inequality::F, bpr, linear),
        BoundRecord::new(Inequality::G, m.info, m.mean + m.n.ln()),
    ];
    Ok(BoundReport {
        records,
        batch: b.clone(),
    })
}

/// Both chains on one batch.
pub fn check_all<T: Scalar>(b: &ScoreBatch<T>) -> Result<BoundReport<T>> {
    let mut r = check_info_mine_chain(b)?;
    r.records.extend(check_bpr_chain(b)?.records);
    Ok(r)
}

/// Gaussian batch: positive and negatives drawn i.i.d. from N(0, σ²).
pub fn gaussian_batch<R: rand::Rng + ?Sized>(n: usize, sigma: f64, rng: &mut R) -> ScoreBatch<f64> {
    if sigma == 0.0 {
        return ScoreBatch::new(0.0, vec![0.0; n]);
    }
    let dist = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    let pos = dist.sample(rng);
    ScoreBatch::new(pos, (0..n).map(|_| dist.sample(rng)).collect())
}

/// Score source for a tightness sweep.
#[derive(Debug, Clone)]
pub enum SlackSource {
    Gaussian { sigma: f64 },
    /// Batches taken from a trained model; `label` fills the sigma column.
    Batches { label: String, batches: Vec<ScoreBatch<f64>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub inequality: Inequality,
    pub n: usize,
    pub sigma: String,
    pub mean_slack: f64,
    pub min_slack: f64,
    pub violations: usize,
    /// First violating batch, if any.
    pub counterexample: Option<String>,
}

pub const SWEEP_HEADER: &str = "inequality,N,sigma,mean_slack,min_slack,violations";

#[derive(Default)]
struct Acc {
    sum: f64,
    min: f64,
    count: usize,
    violations: usize,
    counterexample: Option<String>,
}

impl Acc {
    fn merge(mut self, o: Acc) -> Acc {
        self.sum += o.sum;
        self.min = self.min.min(o.min);
        self.count += o.count;
        self.violations += o.violations;
        self.counterexample = self.counterexample.or(o.counterexample);
        self
    }
}

fn accumulate(reports: impl Iterator<Item = BoundReport<f64>>) -> Vec<Acc> {
    let mut acc: Vec<Acc> = Inequality::ALL
        .iter()
        .map(|_| Acc {
            min: f64::INFINITY,
            ..Acc::default()
        })
        .collect();
    for r in reports {
        let dump = r.counterexample();
        for rec in &r.records {
            let a = &mut acc[rec.inequality as usize];
            a.sum += rec.slack;
            a.min = a.min.min(rec.slack);
            a.count += 1;
            if !rec.holds {
                a.violations += 1;
                if a.counterexample.is_none() {
                    a.counterexample = dump.clone();
                }
            }
        }
    }
    acc
}

fn rows(n: usize, sigma: &str, acc: Vec<Acc>) -> Vec<SweepRow> {
    Inequality::ALL
        .iter()
        .zip(acc)
        .map(|(&q, a)| SweepRow {
            inequality: q,
            n,
            sigma: sigma.to_string(),
            mean_slack: a.sum / a.count.max(1) as f64,
            min_slack: a.min,
            violations: a.violations,
            counterexample: a.counterexample,
        })
        .collect()
}

/// Slack statistics per (inequality, N). Deterministic given `seed`:
/// trial `k` for list entry `n_idx` always sees the same RNG.
pub fn tightness_sweep(
    source: &SlackSource,
    ns: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if trials == 0 {
        return Err(Error::Config("tightness sweep needs trials ≥ 1".into()));
    }
    match source {
        SlackSource::Gaussian { sigma } => {
            if !(*sigma >= 0.0) || !sigma.is_finite() {
                return Err(Error::Config(format!("sigma must be ≥ 0, got {sigma}")));
            }
            if let Some(0) = ns.iter().copied().find(|&n| n == 0) {
                return Err(Error::Config("bound checks need N ≥ 1".into()));
            }
            let mut out = Vec::new();
            for (idx, &n) in ns.iter().enumerate() {
                let key = ((idx as u64) << 32) ^ sigma.to_bits().rotate_left(7);
                let acc = (0..trials)
                    .into_par_iter()
                    .fold(
                        || accumulate(std::iter::empty()),
                        |acc, k| {
                            let mut rng = seed::keyed(seed, Stream::Verify, key, k as u64);
                            let b = gaussian_batch(n, *sigma, &mut rng);
                            let r = check_all(&b).expect("N ≥ 1");
                            zip_merge(acc, accumulate(std::iter::once(r)))
                        },
                    )
                    .reduce(|| accumulate(std::iter::empty()), zip_merge);
                out.extend(rows(n, &format!("{sigma}"), acc));
            }
            Ok(out)
        }
        SlackSource::Batches { label, batches } => {
            let mut out = Vec::new();
            for &n in ns {
                let reports: Vec<_> = batches
                    .iter()
                    .filter(|b| b.negs.len() >= n && n > 0)
                    .take(trials)
                    .map(|b| check_all(&ScoreBatch::new(b.pos, b.negs[..n].to_vec())))
                    .collect::<Result<_>>()?;
                out.extend(rows(n, label, accumulate(reports.into_iter())));
            }
            Ok(out)
        }
    }
}

fn zip_merge(a: Vec<Acc>, b: Vec<Acc>) -> Vec<Acc> {
    a.into_iter().zip(b).map(|(x, y)| x.merge(y)).collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.9e},{:.9e},{}",
            r.inequality.name(),
            r.n,
            r.sigma,
            r.mean_slack,
            r.min_slack,
            r.violations
        );
    }
    s
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    crate::data::write_text(path, &sweep_csv(rows))
}
