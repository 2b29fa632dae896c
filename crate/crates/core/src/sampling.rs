//! Negative and extra-positive sampling and the per-user positive prior τ⁺.

use std::str::FromStr;

use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;

use crate::data::{popularity, InteractionDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NegativeMode {
    /// Uniform over the whole catalog `I`.
    #[default]
    UniformAll,
    /// Uniform over `I ∖ I_u⁺`.
    UniformUnobserved,
    /// Proportional to item popularity.
    Popularity,
}

impl NegativeMode {
    pub fn name(self) -> &'static str {
        match self {
            NegativeMode::UniformAll => "uniform-all",
            NegativeMode::UniformUnobserved => "uniform-unobserved",
            NegativeMode::Popularity => "popularity",
        }
    }
}

impl FromStr for NegativeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform-all" => Ok(Self::UniformAll),
            "uniform-unobserved" => Ok(Self::UniformUnobserved),
            "popularity" => Ok(Self::Popularity),
            _ => Err(Error::Config(format!("unknown negative mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub negative_mode: NegativeMode,
    /// `N`, negatives per positive example.
    pub n_negatives: usize,
    /// `M`, extra positives per example for the debiased losses.
    pub m_extra_positives: usize,
    /// Draw one negative pool per batch instead of one per example.
    pub shared_pool: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            negative_mode: NegativeMode::UniformAll,
            n_negatives: 800,
            m_extra_positives: 0,
            shared_pool: false,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, debiased: bool) -> Result<()> {
        if self.n_negatives == 0 {
            return Err(Error::Config("n_negatives must be ≥ 1".into()));
        }
        if debiased && self.m_extra_positives == 0 {
            return Err(Error::Config(
                "debiased losses need m_extra_positives ≥ 1".into(),
            ));
        }
        if self.shared_pool && self.negative_mode == NegativeMode::UniformUnobserved {
            return Err(Error::Config(
                "a shared negative pool cannot exclude per-user positives".into(),
            ));
        }
        Ok(())
    }
}

/// Negative sampler with its tables precomputed for one dataset.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    mode: NegativeMode,
    n_items: usize,
    alias: Option<WeightedAliasIndex<f64>>,
    probs: Option<Vec<f64>>,
}

impl NegativeSampler {
    pub fn new(mode: NegativeMode, ds: &InteractionDataset) -> Result<Self> {
        if ds.n_items() == 0 {
            return Err(Error::EmptyDataset("sampler needs at least one item"));
        }
        let (alias, probs) = match mode {
            NegativeMode::Popularity => {
                let table = popularity(ds)?;
                let alias = WeightedAliasIndex::new(table.probs.clone())
                    .map_err(|e| Error::Config(format!("popularity table: {e}")))?;
                (Some(alias), Some(table.probs))
            }
            _ => (None, None),
        };
        Ok(Self {
            mode,
            n_items: ds.n_items(),
            alias,
            probs,
        })
    }

    pub fn mode(&self) -> NegativeMode {
        self.mode
    }

    /// Draws one item for user `u` (whose positives are `positives`).
    pub fn draw<R: Rng + ?Sized>(&self, positives: &[usize], u: usize, rng: &mut R) -> Result<usize> {
        match self.mode {
            NegativeMode::UniformAll => Ok(rng.random_range(0..self.n_items)),
            NegativeMode::Popularity => Ok(self
                .alias
                .as_ref()
                .expect("popularity sampler has an alias table")
                .sample(rng)),
            NegativeMode::UniformUnobserved => {
                let free = self.n_items - positives.len();
                if free == 0 {
                    return Err(Error::NoNegatives(u));
                }
                if positives.len() * 2 <= self.n_items {
                    loop {
                        let j = rng.random_range(0..self.n_items);
                        if positives.binary_search(&j).is_err() {
                            return Ok(j);
                        }
                    }
                }
                // dense users: pick the r-th unobserved item directly
                let mut r = rng.random_range(0..free);
                let mut prev = 0;
                for &p in positives {
                    let gap = p - prev;
                    if r < gap {
                        return Ok(prev + r);
                    }
                    r -= gap;
                    prev = p + 1;
                }
                Ok(prev + r)
            }
        }
    }

    /// `N` i.i.d. negatives for user `u`, with replacement.
    pub fn sample_negatives<R: Rng + ?Sized>(
        &self,
        ds: &InteractionDataset,
        u: usize,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let positives = ds.items_of(u);
        (0..n).map(|_| self.draw(positives, u, rng)).collect()
    }

    /// Probability that one draw for user `u` returns item `j`.
    pub fn proposal_prob(&self, ds: &InteractionDataset, u: usize, j: usize) -> f64 {
        match self.mode {
            NegativeMode::UniformAll => 1.0 / self.n_items as f64,
            NegativeMode::UniformUnobserved => {
                if ds.contains(u, j) {
                    0.0
                } else {
                    1.0 / (self.n_items - ds.items_of(u).len()) as f64
                }
            }
            NegativeMode::Popularity => self.probs.as_ref().expect("popularity probs")[j],
        }
    }
}

/// `M` draws, uniform with replacement, from `I_u⁺`.
pub fn sample_extra_positives<R: Rng + ?Sized>(
    ds: &InteractionDataset,
    u: usize,
    m: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let items = ds.items_of(u);
    if items.is_empty() {
        return Err(Error::NoPositives(u));
    }
    Ok((0..m).map(|_| items[rng.random_range(0..items.len())]).collect())
}

/// How the positive-class prior τ_u⁺ is estimated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauPolicy {
    /// `(|I_u⁺| + k) / |I|`: known positives plus `k` unknown top items.
    TopK { k: usize },
    /// `(1 + α)|I_u⁺| / |I|`: true positives proportional to known ones.
    Proportional { alpha: f64 },
}

impl Default for TauPolicy {
    fn default() -> Self {
        TauPolicy::Proportional { alpha: 0.0 }
    }
}

impl TauPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TauPolicy::Proportional { alpha } if !(alpha >= 0.0) || !alpha.is_finite() => {
                Err(Error::Config(format!("tau alpha must be ≥ 0, got {alpha}")))
            }
            _ => Ok(()),
        }
    }
}

/// Largest τ⁺ handed to a loss; keeps τ⁻ = 1 − τ⁺ away from zero.
pub const TAU_PLUS_MAX: f64 = 1.0 - 1e-9;

pub fn tau_plus(policy: &TauPolicy, ds: &InteractionDataset, u: usize) -> Result<f64> {
    let known = ds.items_of(u).len();
    if known == 0 {
        return Err(Error::NoPositives(u));
    }
    let n_items = ds.n_items() as f64;
    let raw = match *policy {
        TauPolicy::TopK { k } => (known + k) as f64 / n_items,
        TauPolicy::Proportional { alpha } => (1.0 + alpha) * known as f64 / n_items,
    };
    Ok(raw.min(TAU_PLUS_MAX))
}
