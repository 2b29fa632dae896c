//! Loss kernels over one positive score, `N` sampled scores and optionally
//! `M` extra-positive scores.
//!
//! Every kernel is a pure function returning the value together with its
//! partial derivatives with respect to each raw input score. Families that
//! use a temperature receive raw scores and divide by `t` internally, so the
//! derivatives are always with respect to the undivided scores.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ScoreMode;
use crate::scalar::{log_sum_exp, sigmoid, softmax, softplus, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossFamily {
    SoftmaxFull,
    SampledSoftmax,
    Infonce,
    DebiasedInfonce,
    Mine,
    MinePlus,
    Bpr,
    Mse,
    DebiasedMse,
    Ccl,
    DebiasedCcl,
}

impl LossFamily {
    pub const ALL: [LossFamily; 11] = [
        LossFamily::SoftmaxFull,
        LossFamily::SampledSoftmax,
        LossFamily::Infonce,
        LossFamily::DebiasedInfonce,
        LossFamily::Mine,
        LossFamily::MinePlus,
        LossFamily::Bpr,
        LossFamily::Mse,
        LossFamily::DebiasedMse,
        LossFamily::Ccl,
        LossFamily::DebiasedCcl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossFamily::SoftmaxFull => "softmax_full",
            LossFamily::SampledSoftmax => "sampled_softmax",
            LossFamily::Infonce => "infonce",
            LossFamily::DebiasedInfonce => "debiased_infonce",
            LossFamily::Mine => "mine",
            LossFamily::MinePlus => "mine_plus",
            LossFamily::Bpr => "bpr",
            LossFamily::Mse => "mse",
            LossFamily::DebiasedMse => "debiased_mse",
            LossFamily::Ccl => "ccl",
            LossFamily::DebiasedCcl => "debiased_ccl",
        }
    }

    /// Needs extra positives and τ⁺.
    pub fn is_debiased(self) -> bool {
        matches!(
            self,
            LossFamily::DebiasedInfonce | LossFamily::DebiasedMse | LossFamily::DebiasedCcl
        )
    }

    pub fn uses_temperature(self) -> bool {
        matches!(
            self,
            LossFamily::Infonce | LossFamily::DebiasedInfonce | LossFamily::MinePlus
        )
    }

    pub fn uses_neg_weight(self) -> bool {
        matches!(
            self,
            LossFamily::DebiasedInfonce
                | LossFamily::MinePlus
                | LossFamily::DebiasedMse
                | LossFamily::DebiasedCcl
        )
    }

    pub fn uses_margin(self) -> bool {
        matches!(self, LossFamily::Ccl | LossFamily::DebiasedCcl)
    }

    pub fn uses_ccl_weight(self) -> bool {
        matches!(self, LossFamily::Mse | LossFamily::Ccl)
    }

    /// Cosine for the bounded-score families, dot for the rest.
    pub fn default_score_mode(self) -> ScoreMode {
        match self {
            LossFamily::Infonce
            | LossFamily::DebiasedInfonce
            | LossFamily::MinePlus
            | LossFamily::Ccl
            | LossFamily::DebiasedCcl => ScoreMode::Cosine,
            _ => ScoreMode::Dot,
        }
    }
}

impl fmt::Display for LossFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LossFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss family `{s}`")))
    }
}

/// One loss family and its hyperparameters.
///
/// Hyperparameters a family does not use must stay `None`; [`LossSpec::validate`]
/// rejects them so a misplaced config key fails loudly.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec<T> {
    pub family: LossFamily,
    /// `t`, infonce / debiased_infonce / mine_plus. Defaults to 1.
    pub temperature: Option<T>,
    /// `λ`. Defaults to `N` for debiased_infonce and 1 elsewhere.
    pub neg_weight: Option<T>,
    /// `ε`, CCL families. Defaults to 0.
    pub margin: Option<T>,
    /// `w`, biased mse / ccl. Defaults to 1.
    pub ccl_weight: Option<T>,
    pub score_mode: ScoreMode,
    /// Clamp the debiased pointwise bracket at zero.
    pub clamp_bracket: bool,
    /// bpr only: train on the mean score difference instead of softplus.
    pub mean_difference: bool,
}

impl<T: Scalar> LossSpec<T> {
    pub fn new(family: LossFamily) -> Self {
        Self {
            family,
            temperature: None,
            neg_weight: None,
            margin: None,
            ccl_weight: None,
            score_mode: family.default_score_mode(),
            clamp_bracket: true,
            mean_difference: false,
        }
    }

    pub fn with_temperature(mut self, t: T) -> Self {
        self.temperature = Some(t);
        self
    }

    pub fn with_neg_weight(mut self, lambda: T) -> Self {
        self.neg_weight = Some(lambda);
        self
    }

    pub fn with_margin(mut self, eps: T) -> Self {
        self.margin = Some(eps);
        self
    }

    pub fn with_ccl_weight(mut self, w: T) -> Self {
        self.ccl_weight = Some(w);
        self
    }

    /// The same spec over another scalar type.
    pub fn cast<U: Scalar>(&self) -> LossSpec<U> {
        let c = |x: Option<T>| x.map(|v| U::of(v.as_f64()));
        LossSpec {
            family: self.family,
            temperature: c(self.temperature),
            neg_weight: c(self.neg_weight),
            margin: c(self.margin),
            ccl_weight: c(self.ccl_weight),
            score_mode: self.score_mode,
            clamp_bracket: self.clamp_bracket,
            mean_difference: self.mean_difference,
        }
    }

    pub fn with_score_mode(mut self, mode: ScoreMode) -> Self {
        self.score_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.family;
        let reject = |key: &str| {
            Err(Error::Config(format!("`{key}` is not a parameter of the {f} loss")))
        };
        if let Some(t) = self.temperature {
            if !f.uses_temperature() {
                return reject("temperature");
            }
            if !(t > T::zero()) || !t.is_finite() {
                return Err(Error::Config(format!("temperature must be > 0, got {t}")));
            }
        }
        if let Some(l) = self.neg_weight {
            if !f.uses_neg_weight() {
                return reject("neg_weight");
            }
            if !(l >= T::zero()) || !l.is_finite() {
                return Err(Error::Config(format!("neg_weight must be ≥ 0, got {l}")));
            }
        }
        if let Some(e) = self.margin {
            if !f.uses_margin() {
                return reject("margin");
            }
            if !(e >= T::zero() && e < T::one()) {
                return Err(Error::Config(format!("margin must lie in [0, 1), got {e}")));
            }
        }
        if let Some(w) = self.ccl_weight {
            if !f.uses_ccl_weight() {
                return reject("ccl_weight");
            }
            if !(w >= T::zero()) || !w.is_finite() {
                return Err(Error::Config(format!("ccl_weight must be ≥ 0, got {w}")));
            }
        }
        if f.uses_margin() && self.score_mode != ScoreMode::Cosine {
            return Err(Error::Config(format!("the {f} loss needs cosine scores")));
        }
        if self.mean_difference && f != LossFamily::Bpr {
            return reject("mean_difference");
        }
        Ok(())
    }

    #[inline]
    pub fn t(&self) -> T {
        self.temperature.unwrap_or_else(T::one)
    }

    /// `λ` for a batch with `n` negatives.
    #[inline]
    pub fn lambda(&self, n: usize) -> T {
        self.neg_weight.unwrap_or_else(|| match self.family {
            LossFamily::DebiasedInfonce => T::of_usize(n),
            _ => T::one(),
        })
    }

    #[inline]
    pub fn eps(&self) -> T {
        self.margin.unwrap_or_else(T::zero)
    }

    #[inline]
    pub fn w(&self) -> T {
        self.ccl_weight.unwrap_or_else(T::one)
    }
}

/// Scores for one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBatch<T> {
    /// `ŷ_ui` of the positive item.
    pub pos: T,
    /// `ŷ_uj` of the `N` sampled items.
    pub negs: Vec<T>,
    /// `ŷ_uk` of the `M` extra positives; empty for biased losses.
    pub extra_pos: Vec<T>,
    /// Per-user `τ_u⁺`; only read by the debiased families.
    pub tau_plus: T,
    /// Importance weight per sampled item for sampled softmax. The kernel
    /// divides `exp(ŷ_uj)` by it as is, so pass `N·q(j)` (the expected number
    /// of draws of `j`) for an unbiased estimate of the partition function.
    pub proposal_probs: Option<Vec<T>>,
}

impl<T: Scalar> ScoreBatch<T> {
    pub fn new(pos: T, negs: Vec<T>) -> Self {
        Self {
            pos,
            negs,
            extra_pos: Vec::new(),
            tau_plus: T::zero(),
            proposal_probs: None,
        }
    }

    pub fn with_extra(mut self, extra_pos: Vec<T>, tau_plus: T) -> Self {
        self.extra_pos = extra_pos;
        self.tau_plus = tau_plus;
        self
    }

    pub fn with_proposal(mut self, q: Vec<T>) -> Self {
        self.proposal_probs = Some(q);
        self
    }

    /// Number of scalar inputs: positive, negatives, extra positives.
    pub fn n_inputs(&self) -> usize {
        1 + self.negs.len() + self.extra_pos.len()
    }

    pub fn input(&self, k: usize) -> T {
        let n = self.negs.len();
        match k {
            0 => self.pos,
            k if k <= n => self.negs[k - 1],
            k => self.extra_pos[k - 1 - n],
        }
    }

    pub fn input_mut(&mut self, k: usize) -> &mut T {
        let n = self.negs.len();
        match k {
            0 => &mut self.pos,
            k if k <= n => &mut self.negs[k - 1],
            k => &mut self.extra_pos[k - 1 - n],
        }
    }

    fn check(&self) -> Result<()> {
        let finite = self.pos.is_finite()
            && self.negs.iter().all(|x| x.is_finite())
            && self.extra_pos.iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite("score batch holds a non-finite score".into()));
        }
        if let Some(q) = &self.proposal_probs {
            if q.len() != self.negs.len() {
                return Err(Error::Dimension(format!(
                    "{} proposal probabilities for {} negatives",
                    q.len(),
                    self.negs.len()
                )));
            }
            if q.iter().any(|&p| !(p > T::zero()) || !p.is_finite()) {
                return Err(Error::Config("proposal probabilities must be > 0".into()));
            }
        }
        Ok(())
    }

    fn need_negatives(&self) -> Result<usize> {
        match self.negs.len() {
            0 => Err(Error::Config("loss needs at least one sampled score".into())),
            n => Ok(n),
        }
    }

    fn need_prior(&self) -> Result<(usize, T)> {
        if !(self.tau_plus > T::zero() && self.tau_plus < T::one()) {
            return Err(Error::Config(format!(
                "tau_plus must lie in (0, 1), got {}",
                self.tau_plus
            )));
        }
        match self.extra_pos.len() {
            0 => Err(Error::Config("debiased loss needs M ≥ 1 extra positives".into())),
            m => Ok((m, self.tau_plus)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub value: T,
    pub d_pos: T,
    pub d_negs: Vec<T>,
    pub d_extra_pos: Vec<T>,
}

impl<T: Scalar> LossOutput<T> {
    fn zeros(b: &ScoreBatch<T>) -> Self {
        Self {
            value: T::zero(),
            d_pos: T::zero(),
            d_negs: vec![T::zero(); b.negs.len()],
            d_extra_pos: vec![T::zero(); b.extra_pos.len()],
        }
    }

    /// Derivative with respect to input `k` in [`ScoreBatch::input`] order.
    pub fn grad(&self, k: usize) -> T {
        let n = self.d_negs.len();
        match k {
            0 => self.d_pos,
            k if k <= n => self.d_negs[k - 1],
            k => self.d_extra_pos[k - 1 - n],
        }
    }
}

/// Evaluates `spec` on `b`, dispatching by family.
///
/// For `softmax_full` the batch must hold the positive in `pos` and every
/// other catalog item in `negs`.
pub fn evaluate<T: Scalar>(spec: &LossSpec<T>, b: &ScoreBatch<T>) -> Result<LossOutput<T>> {
    b.check()?;
    match spec.family {
        LossFamily::SoftmaxFull => {
            let mut all = Vec::with_capacity(b.negs.len() + 1);
            all.push(b.pos);
            all.extend_from_slice(&b.negs);
            let out = loss_softmax_full(&[b.pos], &all)?;
            Ok(LossOutput {
                value: out.value,
                d_pos: out.d_pos_scores[0] + out.d_all_scores[0],
                d_negs: out.d_all_scores[1..].to_vec(),
                d_extra_pos: vec![T::zero(); b.extra_pos.len()],
            })
        }
        LossFamily::SampledSoftmax => loss_sampled_softmax(spec, b),
        LossFamily::Infonce => loss_infonce(spec, b),
        LossFamily::DebiasedInfonce => loss_debiased_infonce(spec, b),
        LossFamily::Mine => loss_mine(spec, b),
        LossFamily::MinePlus => loss_mine_plus(spec, b),
        LossFamily::Bpr => loss_bpr(spec, b),
        LossFamily::Mse | LossFamily::Ccl => loss_pointwise(spec, b),
        LossFamily::DebiasedMse | LossFamily::DebiasedCcl => loss_debiased_pointwise(spec, b),
    }
}

/// Full-catalog softmax with derivatives for both argument vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxOutput<T> {
    pub value: T,
    pub d_pos_scores: Vec<T>,
    pub d_all_scores: Vec<T>,
}

/// `−log(Σ_{i∈I_u⁺} exp ŷ_ui / Σ_{j∈I} exp ŷ_uj)`.
///
/// `pos_scores` repeats the entries of `all_scores` that belong to `I_u⁺`;
/// the gradient of an item that appears in both is the sum of the two parts.
pub fn loss_softmax_full<T: Scalar>(pos_scores: &[T], all_scores: &[T]) -> Result<SoftmaxOutput<T>> {
    if pos_scores.is_empty() {
        return Err(Error::Config("softmax needs at least one positive".into()));
    }
    if all_scores.is_empty() {
        return Err(Error::Config("softmax needs the full catalog scores".into()));
    }
    let value = log_sum_exp(all_scores) - log_sum_exp(pos_scores);
    Ok(SoftmaxOutput {
        value,
        d_pos_scores: softmax(pos_scores).into_iter().map(|p| -p).collect(),
        d_all_scores: softmax(all_scores),
    })
}

/// `log(1 + Σ_j exp(z_j))` and the weights `∂/∂z_j`, max-shifted.
fn log1p_sum_exp<T: Scalar>(z: &[T]) -> (T, Vec<T>) {
    let m = z.iter().copied().fold(T::zero(), T::max);
    let base = (-m).exp();
    let e: Vec<T> = z.iter().map(|&x| (x - m).exp()).collect();
    let denom = base + e.iter().copied().sum::<T>();
    let value = m + denom.ln();
    (value, e.into_iter().map(|x| x / denom).collect())
}

/// `−log(e^p / (e^p + Σ_j e^{ŷ_j}/q_j))`.
pub fn loss_sampled_softmax<T: Scalar>(_spec: &LossSpec<T>, b: &ScoreBatch<T>) -> Result<LossOutput<T>> {
    b.need_negatives()?;
    let q = b
        .proposal_probs
        .as_ref()
        .ok_or_else(|| Error::Config("sampled softmax needs proposal_probs".into()))?;
    let z: Vec<T> = b
        .negs
        .iter()
        .zip(q)
        .map(|(&y, &qj)| y - qj.ln() - b.pos)
        .collect();
    let (value, w) = log1p_sum_exp(&z);
    Ok(LossOutput {
        value,
        d_pos: -w.iter().copied().sum::<T>(),
        d_negs: w,
        d_extra_pos: vec![T::zero(); b.extra_pos.len()],
    })
}

/// Biased InfoNCE: `log(1 + Σ_j exp((ŷ_j − p)/t))`.
pub fn loss_infonce<T: Scalar>(spec: &LossSpec<T>, b: &ScoreBatch<T>) -> Result<LossOutput<T>> {
    b.need_negatives()?;
    let t = spec.t();
    let z: Vec<T> = b.negs.iter().map(|&y| (y - b.pos) / t).collect();
    let (value, w) = log1p_sum_exp(&z);
    let d_negs: Vec<T> = w.into_iter().map(|x| x / t).collect();
    Ok(LossOutput {
        value,
        d_pos: -d_negs.iter().copied().sum::<T>(),
        d_negs,
        d_extra_pos: vec![T::zero(); b.extra_pos.len()],
    })
}

/// Inner estimate of the debiased InfoNCE negative term, in log space.
struct DebiasedTerm<T> {
    /// `ln g` with `g = max{(mean_j e^{s_j} − τ⁺ mean_k e^{s_k}) / τ⁻, e^{−1/t}}`.
    ln_g: T,
    floored: bool,
    /// Shift `m` and shifted `g' = g·e^{−m}` for the derivative weights.
    shift: T,
    g_shifted: T,
}

fn debiased_term<T: Scalar>(b: &ScoreBatch<T>, t: T, tau: T) -> DebiasedTerm<T> {
    let s_neg = b.negs.iter().map(|&y| y / t);
    let s_pos = b.extra_pos.iter().map(|&y| y / t);
    let m = s_neg.clone().chain(s_pos.clone()).fold(T::neg_infinity(), T::max);
    let n = T::of_usize(b.negs.len());
    let mm = T::of_usize(b.extra_pos.len());
    let a = s_neg.map(|s| (s - m).exp()).sum::<T>() / n;
    let p = s_pos.map(|s| (s - m).exp()).sum::<T>() / mm;
    let g = (a - tau * p) / (T::one() - tau);
    let floor = (-T::one() / t - m).exp();
    let floored = !(g > floor);
    let g_shifted = if floored { floor } else { g };
    DebiasedTerm {
        ln_g: m + g_shifted.ln(),
        floored,
        shift: m,
        g_shifted,
    }
}

/// Debiased InfoNCE: `−log(e^{p/t} / (e^{p/t} + λ·g))` with the estimator
/// `g` clamped below at its minimum `e^{−1/t}`.
pub fn loss_debiased_infonce<T: Scalar>(spec: &LossSpec<T>, b: &ScoreBatch<T>) -> Result<LossOutput<T>> {
    let n = b.need_negatives()?;
    let (m, tau) = b.need_prior()?;
    let t = spec.t();
    let lambda = spec.lambda(n);
    let mut out = LossOutput::zeros(b);
    if lambda == T::zero() {
        return Ok(out);
    }
    let term = debiased_term(b, t, tau);
    let x = lambda.ln() + term.ln_g - b.pos / t;
    let sx = sigmoid(x);
    out.value = softplus(x);
    out.d_pos = -sx / t;
    if !term.floored {
        let tau_minus = T::one() - tau;
        let base = sx / (t * tau_minus * term.g_shifted);
        let nn = T::of_usize(n);
        let mm = T::of_usize(m);
        for (d, &y) in out.d_negs.iter_mut().zip(&b.negs) {
            *d = base * (y / t - term.shift).exp() / nn;
        }
        for (d, &y) in out.d_extra_pos.iter_mut().zip(&b.extra_pos) {
            *d = -base * tau * (y / t - term.shift).exp() / mm;
        }
    }
    Ok(out)
}

/// MINE: `log Σ_j exp(ŷ_j) − p`.
pub fn loss_mine<T: Scalar>(_spec: &LossSpec<T>, b: &ScoreBatch<T>) -> Result<LossOutput<T>> {
    b.need_negatives()?;
    let value = log_sum_exp(&b.negs) - b.pos;
    Ok(LossOutput {
        value,
        d_pos: -T::one(),
        d_negs: softmax(&b.negs),
        d_extra_pos: vec![T::zero(); b.extra_pos.len()],
    })
}

/// MINE+: `−(p/t − λ·log Σ_j exp(ŷ_j/t))`.
pub fn loss_mine_plus<T: Scalar>(spec: &LossSpec<T>, b: &ScoreBatch<T>) -> Result<LossOutput<T>> {
    let n = b.need_negatives()?;
    let t = spec.t();
    let lambda = spec.lambda(n);
    let scaled: Vec<T> = b.negs.iter().map(|&y| y / t).collect();
    let value = lambda * log_sum_exp(&scaled) - b.pos / t;
    let d_negs = softmax(&scaled)
        .into_iter()
        .map(|p| lambda * p / t)
        .collect();
    Ok(LossOutput {
        value,
        d_pos: -T::one() / t,
        d_negs,
        d_extra_pos: vec![T::zero(); b.extra_pos.len()],
    })
}

/// BPR: `Σ_j softplus(ŷ_j − p)`; with `mean_difference`, `mean_j(ŷ_j − p)`.
pub fn loss_bpr<T: Scalar>(spec: &LossSpec<T>, b: &ScoreBatch<T>) -> Result<LossOutput<T>> {
    let n = b.need_negatives()?;
    let mut out = LossOutput::zeros(b);
    if spec.mean_difference {
        let nn = T::of_usize(n);
        out.value = b.negs.iter().map(|&y| y - b.pos).sum::<T>() / nn;
        out.d_negs.iter_mut().for_each(|d| *d = T::one() / nn);
        out.d_pos = -T::one();
        return Ok(out);
    }
    for (d, &y) in out.d_negs.iter_mut().zip(&b.negs) {
        let x = y - b.pos;
        out.value += softplus(x);
        *d = sigmoid(x);
    }
    out.d_pos = -out.d_negs.iter().copied().sum::<T>();
    Ok(out)
}

/// Single-score losses `l⁺` (towards 1) and `l⁻` (towards 0).
#[derive(Debug, Clone, Copy, PartialEq)]
enum Pointwise<T> {
    Mse,
    Ccl { eps: T },
}

impl<T: Scalar> Pointwise<T> {
    fn of(spec: &LossSpec<T>) -> Self {
        if spec.family.uses_margin() {
            Pointwise::Ccl { eps: spec.eps() }
        } else {
            Pointwise::Mse
        }
    }

    #[inline]
    fn pos(self, y: T) -> (T, T) {
        match self {
            Pointwise::Mse => {
                let r = T::one() - y;
                (r * r, -(r + r))
            }
            Pointwise::Ccl { .. } => (T::one() - y, -T::one()),
        }
    }

    #[inline]
    fn neg(self, y: T) -> (T, T) {
        match self {
            Pointwise::Mse => (y * y, y + y),
            Pointwise::Ccl { eps } => {
                if y > eps {
                    (y - eps, T::one())
                } else {
                    (T::zero(), T::zero())
                }
            }
        }
    }
}

/// Biased MSE `(1−p)² + (w/N)Σ ŷ_j²` or CCL `(1−p) + (w/N)Σ ReLU(ŷ_j − ε)`.
pub fn loss_pointwise<T: Scalar>(spec: &LossSpec<T>, b: &ScoreBatch<T>) -> Result<LossOutput<T>> {
    let n = b.need_negatives()?;
    if spec.family.uses_margin() && spec.score_mode != ScoreMode::Cosine {
        return Err(Error::Config("CCL needs cosine scores".into()));
    }
    let kind = Pointwise::of(spec);
    let scale = spec.w() / T::of_usize(n);
    let mut out = LossOutput::zeros(b);
    let (lp, dp) = kind.pos(b.pos);
    out.value = lp;
    out.d_pos = dp;
    for (d, &y) in out.d_negs.iter_mut().zip(&b.negs) {
        let (l, g) = kind.neg(y);
        out.value += scale * l;
        *d = scale * g;
    }
    Ok(out)
}

/// `τ⁺·l⁺(p) + λ·[(1/N)Σ_j l⁻(ŷ_j) − τ⁺(1/M)Σ_k l⁻(ŷ_k)]`, the bracket
/// clamped at zero when `clamp_bracket` is set.
pub fn loss_debiased_pointwise<T: Scalar>(
    spec: &LossSpec<T>,
    b: &ScoreBatch<T>,
) -> Result<LossOutput<T>> {
    let n = b.need_negatives()?;
    let (m, tau) = b.need_prior()?;
    let kind = Pointwise::of(spec);
    let lambda = spec.lambda(n);
    let (nn, mm) = (T::of_usize(n), T::of_usize(m));
    let mut out = LossOutput::zeros(b);
    let (lp, dp) = kind.pos(b.pos);
    out.value = tau * lp;
    out.d_pos = tau * dp;

    let mut bracket = T::zero();
    for (d, &y) in out.d_negs.iter_mut().zip(&b.negs) {
        let (l, g) = kind.neg(y);
        bracket += l / nn;
        *d = lambda * g / nn;
    }
    for (d, &y) in out.d_extra_pos.iter_mut().zip(&b.extra_pos) {
        let (l, g) = kind.neg(y);
        bracket -= tau * l / mm;
        *d = -lambda * tau * g / mm;
    }
    if spec.clamp_bracket && !(bracket > T::zero()) {
        out.d_negs.iter_mut().for_each(|d| *d = T::zero());
        out.d_extra_pos.iter_mut().for_each(|d| *d = T::zero());
    } else {
        out.value += lambda * bracket;
    }
    Ok(out)
}

/// Which side of every kink (ReLU hinge, clamp) the batch sits on.
///
/// Two batches with equal signatures lie in the same smooth piece of the
/// loss, which is what finite differences need.
pub fn kink_signature<T: Scalar>(spec: &LossSpec<T>, b: &ScoreBatch<T>) -> Vec<bool> {
    let mut sig = Vec::new();
    if spec.family.uses_margin() {
        let eps = spec.eps();
        sig.extend(b.negs.iter().chain(&b.extra_pos).map(|&y| y > eps));
    }
    match spec.family {
        LossFamily::DebiasedInfonce if !b.negs.is_empty() && !b.extra_pos.is_empty() => {
            sig.push(debiased_term(b, spec.t(), b.tau_plus).floored);
        }
        LossFamily::DebiasedMse | LossFamily::DebiasedCcl if spec.clamp_bracket => {
            if let Ok(out) = loss_debiased_pointwise(spec, b) {
                sig.push(out.d_negs.iter().chain(&out.d_extra_pos).all(|&d| d == T::zero()));
                let kind = Pointwise::of(spec);
                let n = T::of_usize(b.negs.len().max(1));
                let m = T::of_usize(b.extra_pos.len().max(1));
                let bracket = b.negs.iter().map(|&y| kind.neg(y).0).sum::<T>() / n
                    - b.tau_plus * b.extra_pos.iter().map(|&y| kind.neg(y).0).sum::<T>() / m;
                sig.push(bracket > T::zero());
            }
        }
        _ => {}
    }
    sig
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error<T: Scalar>(analytic: T, numeric: T, floor: T) -> T {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor for gradient relative errors.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Worst relative error between the analytic derivatives and central finite
/// differences with step `h`, over every score input. Inputs whose ±10h
/// neighbourhood crosses a kink are skipped.
pub fn grad_check<T: Scalar>(spec: &LossSpec<T>, b: &ScoreBatch<T>, h: T) -> Result<GradCheck<T>> {
    if !(h >= T::of(1e-7) && h <= T::of(1e-3)) {
        return Err(Error::Config(format!("grad_check step must lie in [1e-7, 1e-3], got {h}")));
    }
    let out = evaluate(spec, b)?;
    if !out.value.is_finite() {
        return Err(Error::NonFinite(format!("{} loss value {}", spec.family, out.value)));
    }
    let sig = kink_signature(spec, b);
    let ten_h = T::of(10.0) * h;
    let mut report = GradCheck {
        max_rel_error: T::zero(),
        checked: 0,
        skipped: 0,
    };
    let mut probe = b.clone();
    for k in 0..b.n_inputs() {
        let x0 = b.input(k);
        let near_kink = [ten_h, -ten_h, h, -h].iter().any(|&dx| {
            *probe.input_mut(k) = x0 + dx;
            kink_signature(spec, &probe) != sig
        });
        if near_kink {
            *probe.input_mut(k) = x0;
            report.skipped += 1;
            continue;
        }
        *probe.input_mut(k) = x0 + h;
        let up = evaluate(spec, &probe)?.value;
        *probe.input_mut(k) = x0 - h;
        let down = evaluate(spec, &probe)?.value;
        *probe.input_mut(k) = x0;
        let numeric = (up - down) / (h + h);
        let err = relative_error(out.grad(k), numeric, T::of(GRAD_CHECK_FLOOR));
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck<T> {
    pub max_rel_error: T,
    pub checked: usize,
    pub skipped: usize,
}
