//! Certification suites behind `recloss verify`.

use std::fmt::Write as _;
use std::path::Path;

use clap::ValueEnum;
use rand::Rng;

use recloss::bounds::{self, Inequality, SlackSource};
use recloss::data::{self, InteractionDataset, SyntheticSpec};
use recloss::linear::{self, EaseRemap, IalsConfig, IalsObjective};
use recloss::seed::{self, Stream};
use recloss::trainer::{self, GradientSuiteConfig};

use crate::{write, CliResult, Failure};

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Bounds,
    Theorem1,
    Theorem2,
    Gradients,
}

pub const BOUND_NS: [usize; 5] = [1, 2, 8, 64, 800];
pub const BOUND_SIGMAS: [f64; 4] = [0.1, 1.0, 3.0, 10.0];
pub const THEOREM_TOLERANCE: f64 = 1e-10;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

pub fn run(suite: Suite, trials: Option<usize>, seed: u64, out: &Path) -> CliResult {
    match suite {
        Suite::Bounds => bounds_suite(trials.unwrap_or(100_000), seed, out),
        Suite::Theorem1 => theorem1_suite(trials.unwrap_or(3), seed, out),
        Suite::Theorem2 => theorem2_suite(trials.unwrap_or(20), seed, out),
        Suite::Gradients => gradient_suite(trials.unwrap_or(100), seed, out),
    }
}

fn verdict(failures: Vec<String>, summary: String) -> CliResult {
    if failures.is_empty() {
        println!("{summary}");
        Ok(())
    } else {
        Err(Failure::Verification(format!("{summary}\n{}", failures.join("\n"))))
    }
}

/// `trials` batches in total, split evenly over the N × σ grid, plus the
/// all-equal batch for every N.
fn bounds_suite(trials: usize, seed: u64, out: &Path) -> CliResult {
    let cells = BOUND_NS.len() * BOUND_SIGMAS.len();
    let per_cell = trials.div_ceil(cells).max(1);
    let mut rows = Vec::new();
    for &sigma in &BOUND_SIGMAS {
        rows.extend(bounds::tightness_sweep(
            &SlackSource::Gaussian { sigma },
            &BOUND_NS,
            per_cell,
            seed,
        )?);
    }
    let equal = bounds::tightness_sweep(&SlackSource::Gaussian { sigma: 0.0 }, &BOUND_NS, 1, seed)?;

    let mut failures = Vec::new();
    for r in rows.iter().chain(&equal) {
        if r.violations > 0 {
            failures.push(format!(
                "({}) {} violated {} times at N={} sigma={}\n{}",
                r.inequality.name(),
                r.inequality.describe(),
                r.violations,
                r.n,
                r.sigma,
                r.counterexample.as_deref().unwrap_or("")
            ));
        }
    }
    for r in &equal {
        let n = r.n as f64;
        let expected = match r.inequality {
            Inequality::A | Inequality::G => ((n + 1.0) / n).ln(),
            Inequality::C => n.ln(),
            _ => continue,
        };
        if (r.min_slack - expected).abs() > 1e-14 {
            failures.push(format!(
                "({}) all-equal slack {:e} at N={}, expected {:e}",
                r.inequality.name(),
                r.min_slack,
                r.n,
                expected
            ));
        }
    }
    rows.extend(equal);
    bounds::write_sweep_csv(&out.join("bounds.csv"), &rows)?;
    let violations: usize = rows.iter().map(|r| r.violations).sum();
    verdict(
        failures,
        format!(
            "bounds: {} batches, {} violations, evidence in {}",
            per_cell * cells + BOUND_NS.len(),
            violations,
            out.join("bounds.csv").display()
        ),
    )
}

/// Synthetic 200-user, 150-item instance number `k`.
pub fn theorem1_data(seed: u64, k: u64) -> recloss::Result<InteractionDataset> {
    data::synthetic(&SyntheticSpec {
        n_users: 200,
        n_items: 150,
        mean_activity: 12.0,
        latent_dim: 4,
        affinity: 2.0,
        popularity_skew: 0.8,
        seed: seed.wrapping_mul(1_000_003).wrapping_add(k),
    })
}

pub const THEOREM1_HEADER: &str = "instance,alpha0,lambda,c,alpha0_prime,lambda_prime,user_k,item_k,\
max_cos_deviation,topk_agreement,topk_agreement_tracked,tracked_cos_deviation";

fn theorem1_suite(trials: usize, seed: u64, out: &Path) -> CliResult {
    let mut csv = format!("{THEOREM1_HEADER}\n");
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for k in 0..trials.max(1) {
        let mut rng = seed::keyed(seed, Stream::Verify, 1, k as u64);
        let train = theorem1_data(seed, k as u64)?;
        let cfg = IalsConfig {
            d: 8,
            alpha0: rng.random_range(0.05..0.5),
            lambda: 10f64.powf(rng.random_range(-3.0..0.0)),
            nu: 0.0,
            objective: IalsObjective::Debiased { c: 1.5 },
            iters: 10,
            init_sigma: 0.1,
            seed: rng.random(),
        };
        let r = linear::verify_theorem1(&train, &cfg, 20)?;
        let dev = r.max_cos_deviation();
        worst = worst.max(dev);
        let _ = writeln!(
            csv,
            "{k},{},{},1.5,{},{},{:.15e},{:.15e},{:e},{},{},{:e}",
            cfg.alpha0,
            cfg.lambda,
            r.alpha0_prime,
            r.lambda_prime,
            r.user_step.k,
            r.item_step.k,
            dev,
            r.topk_agreement,
            r.topk_agreement_tracked,
            r.tracked_cos_deviation
        );
        if !(dev < THEOREM_TOLERANCE) {
            failures.push(format!("instance {k}: half-step cosine deviation {dev:e} with {cfg:?}"));
        }
        if r.topk_agreement_tracked < 1.0 {
            failures.push(format!(
                "instance {k}: top-20 lists agree for {:.4} of users with {cfg:?}",
                r.topk_agreement_tracked
            ));
        }
    }
    write(&out.join("theorem1.csv"), &csv)?;
    verdict(
        failures,
        format!(
            "theorem1: {} instances, max cosine deviation {worst:e}, evidence in {}",
            trials.max(1),
            out.join("theorem1.csv").display()
        ),
    )
}

/// Random instance with 10 to 200 items.
pub fn theorem2_data<R: Rng>(rng: &mut R) -> recloss::Result<InteractionDataset> {
    let n_items = rng.random_range(10..=200);
    data::synthetic(&SyntheticSpec {
        n_users: rng.random_range(n_items..=3 * n_items),
        n_items,
        mean_activity: (n_items as f64 / 8.0).max(3.0),
        latent_dim: 4,
        affinity: 2.0,
        popularity_skew: 0.8,
        seed: rng.random(),
    })
}

pub const THEOREM2_HEADER: &str = "instance,n_users,n_items,lambda,alpha,lambda_prime,\
max_rel_deviation,max_abs_deviation,topk_identical,plain_max_rel_deviation";

fn theorem2_suite(trials: usize, seed: u64, out: &Path) -> CliResult {
    let mut csv = format!("{THEOREM2_HEADER}\n");
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for k in 0..trials.max(1) {
        let mut rng = seed::keyed(seed, Stream::Verify, 2, k as u64);
        let train = theorem2_data(&mut rng)?;
        let lambda = 10f64.powf(rng.random_range(0.0..2.5));
        let alpha = rng.random_range(0.0..0.9);
        let r = linear::verify_theorem2(&train, lambda, alpha, EaseRemap::Simplified, 10)?;
        worst = worst.max(r.max_rel_deviation);
        let _ = writeln!(
            csv,
            "{k},{},{},{lambda},{alpha},{},{:e},{:e},{},{:e}",
            train.n_users(),
            train.n_items(),
            r.lambda_prime,
            r.max_rel_deviation,
            r.max_abs_deviation,
            r.topk_identical,
            r.plain_max_rel_deviation
        );
        if !(r.max_rel_deviation < THEOREM_TOLERANCE) || !r.topk_identical {
            failures.push(format!(
                "instance {k}: {}x{} lambda={lambda} alpha={alpha}: deviation {:e}, top-10 identical {}",
                train.n_users(),
                train.n_items(),
                r.max_rel_deviation,
                r.topk_identical
            ));
        }
    }
    write(&out.join("theorem2.csv"), &csv)?;
    verdict(
        failures,
        format!(
            "theorem2: {} instances, max deviation {worst:e}, evidence in {}",
            trials.max(1),
            out.join("theorem2.csv").display()
        ),
    )
}

fn gradient_suite(trials: usize, seed: u64, out: &Path) -> CliResult {
    let cfg = GradientSuiteConfig {
        instances: trials.max(1),
        seed,
        ..GradientSuiteConfig::default()
    };
    let rows = trainer::gradient_suite(&cfg)?;
    write(&out.join("gradients.csv"), &trainer::gradient_csv(&rows))?;
    let worst = rows.iter().map(|r| r.worst_rel_error).fold(0.0, f64::max);
    let failures = rows
        .iter()
        .filter(|r| !(r.worst_rel_error < GRADIENT_TOLERANCE))
        .map(|r| format!("{}: worst relative error {:e}", r.family, r.worst_rel_error))
        .collect();
    verdict(
        failures,
        format!(
            "gradients: {} families x {} instances, worst relative error {worst:e}, evidence in {}",
            rows.len(),
            cfg.instances,
            out.join("gradients.csv").display()
        ),
    )
}
