//! Direct-formula loss values and random batch generators shared by the
//! integration tests. Nothing here calls into the kernels.

#![allow(dead_code)]

use rand::Rng;
use recloss::data::{synthetic, InteractionDataset, SyntheticSpec};
use recloss::losses::{LossFamily, LossSpec, ScoreBatch};
use recloss::model::ScoreMode;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sum_exp(xs: &[f64], t: f64) -> f64 {
    xs.iter().map(|&y| (y / t).exp()).sum()
}

/// Loss value straight from the written formula, no shifting or fusing.
pub fn oracle(spec: &LossSpec<f64>, b: &ScoreBatch<f64>) -> f64 {
    let p = b.pos;
    let y = &b.negs;
    let n = y.len() as f64;
    let t = spec.temperature.unwrap_or(1.0);
    match spec.family {
        LossFamily::SoftmaxFull => -(p.exp() / (p.exp() + sum_exp(y, 1.0))).ln(),
        LossFamily::SampledSoftmax => {
            let q = b.proposal_probs.as_ref().unwrap();
            let z: f64 = y.iter().zip(q).map(|(&v, &qj)| v.exp() / qj).sum();
            -(p.exp() / (p.exp() + z)).ln()
        }
        LossFamily::Infonce => {
            let e = (p / t).exp();
            -(e / (e + sum_exp(y, t))).ln()
        }
        LossFamily::DebiasedInfonce => {
            let lambda = spec.neg_weight.unwrap_or(n);
            let tau = b.tau_plus;
            let m = b.extra_pos.len() as f64;
            let g = ((sum_exp(y, t) / n - tau * sum_exp(&b.extra_pos, t) / m) / (1.0 - tau))
                .max((-1.0 / t).exp());
            let e = (p / t).exp();
            -(e / (e + lambda * g)).ln()
        }
        LossFamily::Mine => sum_exp(y, 1.0).ln() - p,
        LossFamily::MinePlus => {
            let lambda = spec.neg_weight.unwrap_or(1.0);
            -(p / t - lambda * sum_exp(y, t).ln())
        }
        LossFamily::Bpr => {
            if spec.mean_difference {
                mean(&y.iter().map(|&v| v - p).collect::<Vec<_>>())
            } else {
                y.iter().map(|&v| -(1.0 / (1.0 + (v - p).exp())).ln()).sum()
            }
        }
        LossFamily::Mse => {
            let w = spec.ccl_weight.unwrap_or(1.0);
            (1.0 - p).powi(2) + w / n * y.iter().map(|v| v * v).sum::<f64>()
        }
        LossFamily::Ccl => {
            let w = spec.ccl_weight.unwrap_or(1.0);
            let eps = spec.margin.unwrap_or(0.0);
            (1.0 - p) + w / n * y.iter().map(|&v| (v - eps).max(0.0)).sum::<f64>()
        }
        LossFamily::DebiasedMse | LossFamily::DebiasedCcl => {
            let lambda = spec.neg_weight.unwrap_or(1.0);
            let tau = b.tau_plus;
            let eps = spec.margin.unwrap_or(0.0);
            let (lpos, lneg): (f64, Box<dyn Fn(f64) -> f64>) = if spec.family == LossFamily::DebiasedMse {
                ((1.0 - p).powi(2), Box::new(|v: f64| v * v))
            } else {
                (1.0 - p, Box::new(move |v: f64| (v - eps).max(0.0)))
            };
            let neg = mean(&y.iter().map(|&v| lneg(v)).collect::<Vec<_>>());
            let pos = mean(&b.extra_pos.iter().map(|&v| lneg(v)).collect::<Vec<_>>());
            let bracket = neg - tau * pos;
            let bracket = if spec.clamp_bracket { bracket.max(0.0) } else { bracket };
            tau * lpos + lambda * bracket
        }
    }
}

/// A random spec and batch for `family`. Scores live in [-1, 1] for cosine
/// families and in [-4, 4] otherwise.
pub fn random_case<R: Rng>(family: LossFamily, rng: &mut R) -> (LossSpec<f64>, ScoreBatch<f64>) {
    let mut spec = LossSpec::new(family);
    if family.uses_temperature() {
        spec.temperature = Some(rng.random_range(0.1..1.5));
    }
    if family.uses_neg_weight() && rng.random_bool(0.7) {
        spec.neg_weight = Some(rng.random_range(0.2..3.0));
    }
    if family.uses_margin() {
        spec.margin = Some(rng.random_range(-0.5..0.9));
    }
    if family.uses_ccl_weight() && rng.random_bool(0.7) {
        spec.ccl_weight = Some(rng.random_range(0.1..2.0));
    }
    if family.is_debiased() && family != LossFamily::DebiasedInfonce {
        spec.clamp_bracket = rng.random_bool(0.5);
    }
    if family == LossFamily::Bpr {
        spec.mean_difference = rng.random_bool(0.2);
    }
    let range = if spec.score_mode == ScoreMode::Cosine { 1.0 } else { 4.0 };
    let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.random_range(-range..range)).collect() };
    let n = if family == LossFamily::SoftmaxFull { 40 } else { 1 + (draw(1)[0].abs() * 8.0) as usize };
    let pos = draw(1)[0];
    let negs = draw(n);
    let mut b = ScoreBatch::new(pos, negs);
    if family.is_debiased() {
        let m = 1 + (draw(1)[0].abs() * 3.0) as usize;
        let extra = draw(m);
        b = b.with_extra(extra, rng.random_range(0.01..0.6));
    }
    if family == LossFamily::SampledSoftmax {
        let q = (0..n).map(|_| rng.random_range(0.05..4.0)).collect();
        b = b.with_proposal(q);
    }
    (spec, b)
}

/// Small latent-factor dataset for solver and trainer tests.
pub fn small_dataset(n_users: usize, n_items: usize, activity: f64, seed: u64) -> InteractionDataset {
    synthetic(&SyntheticSpec {
        n_users,
        n_items,
        mean_activity: activity,
        latent_dim: 4,
        affinity: 2.0,
        popularity_skew: 0.8,
        seed,
    })
    .expect("valid synthetic spec")
}
