//! Closed-form linear recommenders: iALS and EASE with their debiased
//! objectives, plus the parameter remappings that relate the two.
//!
//! iALS objectives, with `ŷ_ui = <w_u, h_i>`, observed set `S` and
//! `λ_u = λ(|I_u⁺| + α₀|I|)^ν`:
//!
//! * original: `Σ_S (ŷ − 1)² + α₀ Σ_{u,i} ŷ² + Σ_u λ_u|w_u|² + Σ_i λ_i|h_i|²`
//! * debiased: `Σ_S [c(ŷ − 1)² − cα₀ŷ²] + α₀ Σ_{u,i} ŷ² + (same regularizer)`
//!
//! The user-side normal equations are `(A_u + α₀G + λ_u I) w = b_u` and
//! `(c(1−α₀)A_u + α₀G + λ_u I) w = c·b_u`, with `A_u = Σ_{i∈I_u⁺} h_i h_iᵀ`,
//! `b_u = Σ_{i∈I_u⁺} h_i`, `G = HᵀH`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{write_text, InteractionDataset};
use crate::error::{Error, Result};
use crate::eval::top_k;
use crate::linalg::{add_outer, axpy, dot, Cholesky, DenseMatrix};
use crate::model::{read_matrix, write_matrix, InitScheme, MfModel, ScoreMode};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IalsObjective {
    Original,
    /// Debiased MSE with a constant weight `c = c_u` for every user.
    Debiased { c: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IalsConfig {
    pub d: usize,
    pub alpha0: f64,
    pub lambda: f64,
    pub nu: f64,
    pub objective: IalsObjective,
    pub iters: usize,
    /// Standard deviation of the initial factors.
    pub init_sigma: f64,
    pub seed: u64,
}

impl Default for IalsConfig {
    fn default() -> Self {
        Self {
            d: 64,
            alpha0: 0.1,
            lambda: 1e-3,
            nu: 1.0,
            objective: IalsObjective::Original,
            iters: 10,
            init_sigma: 0.1,
            seed: 0,
        }
    }
}

impl IalsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("iALS needs d ≥ 1".into()));
        }
        if !(self.alpha0 > 0.0) || !self.alpha0.is_finite() {
            return Err(Error::Config(format!("alpha0 must be > 0, got {}", self.alpha0)));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.nu >= 0.0) || !self.nu.is_finite() {
            return Err(Error::Config(format!("nu must be ≥ 0, got {}", self.nu)));
        }
        if let IalsObjective::Debiased { c } = self.objective {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::Config(format!("c must be > 0, got {c}")));
            }
            if !((1.0 - self.alpha0) * c > 0.0) {
                return Err(Error::Config(format!(
                    "debiased iALS needs (1 − alpha0)·c > 0, got alpha0 = {}",
                    self.alpha0
                )));
            }
        }
        if !(self.init_sigma >= 0.0) || !self.init_sigma.is_finite() {
            return Err(Error::Config(format!("init_sigma must be ≥ 0, got {}", self.init_sigma)));
        }
        Ok(())
    }

    /// `λ(count + α₀·n_other)^ν`.
    fn reg(&self, count: usize, n_other: usize) -> f64 {
        self.lambda * (count as f64 + self.alpha0 * n_other as f64).powf(self.nu)
    }

    /// Weight on `A` and scale of the right-hand side.
    fn observed_weights(&self) -> (f64, f64) {
        match self.objective {
            IalsObjective::Original => (1.0, 1.0),
            IalsObjective::Debiased { c } => (c * (1.0 - self.alpha0), c),
        }
    }
}

/// `α₀' = α₀/((1−α₀)c)` and `λ' = λ/((1−α₀)c)`.
pub fn remap_ials_params(alpha0: f64, lambda: f64, c: f64) -> Result<(f64, f64)> {
    if !(alpha0 < 1.0) {
        return Err(Error::Config(format!("alpha0 must be < 1, got {alpha0}")));
    }
    let s = (1.0 - alpha0) * c;
    if !(s > 0.0) {
        return Err(Error::Config(format!("(1 − alpha0)·c must be > 0, got {s}")));
    }
    Ok((alpha0 / s, lambda / s))
}

/// Solves every row's normal equations against fixed factors `other`.
///
/// `positives[r]` lists the rows of `other` observed with row `r`.
fn solve_side<T: Scalar>(
    positives: &[Vec<usize>],
    other: &DenseMatrix<T>,
    cfg: &IalsConfig,
    side: &str,
) -> Result<DenseMatrix<T>> {
    let d = other.cols();
    let mut gram = other.gram();
    gram.scale(T::of(cfg.alpha0));
    let (obs_w, rhs_w) = cfg.observed_weights();
    let (obs_w, rhs_w) = (T::of(obs_w), T::of(rhs_w));
    let n_other = other.rows();
    let rows: Vec<Vec<T>> = positives
        .par_iter()
        .enumerate()
        .map(|(r, pos)| {
            let mut a = gram.clone();
            let mut b = vec![T::zero(); d];
            for &j in pos {
                let h = other.row(j);
                add_outer(&mut a, h, obs_w);
                axpy(&mut b, rhs_w, h);
            }
            a.add_diagonal(T::of(cfg.reg(pos.len(), n_other)));
            let chol = Cholesky::factor(&a).map_err(|_| {
                Error::NotPositiveDefinite(format!("iALS normal matrix of {side} {r}"))
            })?;
            Ok(chol.solve(&b))
        })
        .collect::<Result<_>>()?;
    let data: Vec<T> = rows.into_iter().flatten().collect();
    DenseMatrix::from_vec(positives.len(), d, data)
}

/// User half-step: new user factors given item factors.
pub fn ials_half_step_users<T: Scalar>(
    train: &InteractionDataset,
    items: &DenseMatrix<T>,
    cfg: &IalsConfig,
) -> Result<DenseMatrix<T>> {
    solve_side(train.pos_by_user(), items, cfg, "user")
}

/// Item half-step: new item factors given user factors.
pub fn ials_half_step_items<T: Scalar>(
    train: &InteractionDataset,
    users: &DenseMatrix<T>,
    cfg: &IalsConfig,
) -> Result<DenseMatrix<T>> {
    solve_side(train.pos_by_item(), users, cfg, "item")
}

/// Seeded initial factors for `train`.
pub fn ials_init<T: Scalar>(train: &InteractionDataset, cfg: &IalsConfig) -> Result<MfModel<T>> {
    MfModel::init(
        train.n_users(),
        train.n_items(),
        cfg.d,
        InitScheme::Normal {
            sigma: cfg.init_sigma,
        },
        ScoreMode::Dot,
        cfg.seed,
    )
}

/// Runs `cfg.iters` sweeps (users, then items) from `start`.
pub fn ials_fit_from<T: Scalar>(
    train: &InteractionDataset,
    cfg: &IalsConfig,
    start: MfModel<T>,
) -> Result<MfModel<T>> {
    cfg.validate()?;
    if start.n_users() != train.n_users() || start.n_items() != train.n_items() {
        return Err(Error::Dimension("initial factors do not match the dataset".into()));
    }
    let mut m = start;
    for _ in 0..cfg.iters {
        m.user_emb = ials_half_step_users(train, &m.item_emb, cfg)?;
        m.item_emb = ials_half_step_items(train, &m.user_emb, cfg)?;
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("iALS factors".into()));
    }
    Ok(m)
}

pub fn ials_fit<T: Scalar>(train: &InteractionDataset, cfg: &IalsConfig) -> Result<LinearModel<T>> {
    cfg.validate()?;
    let start = ials_init(train, cfg)?;
    Ok(LinearModel::Ials(ials_fit_from(train, cfg, start)?))
}

/// The objective `cfg.objective` evaluated by direct summation over all
/// (user, item) cells.
pub fn ials_objective<T: Scalar>(train: &InteractionDataset, m: &MfModel<T>, cfg: &IalsConfig) -> f64 {
    let (c, debiased) = match cfg.objective {
        IalsObjective::Original => (1.0, false),
        IalsObjective::Debiased { c } => (c, true),
    };
    let a0 = cfg.alpha0;
    let mut total = 0.0;
    for u in 0..m.n_users() {
        let w = m.user_emb.row(u);
        for i in 0..m.n_items() {
            let y = dot(w, m.item_emb.row(i)).as_f64();
            total += a0 * y * y;
            if train.contains(u, i) {
                total += c * (y - 1.0) * (y - 1.0);
                if debiased {
                    total -= c * a0 * y * y;
                }
            }
        }
        let n2 = dot(w, w).as_f64();
        total += cfg.reg(train.items_of(u).len(), m.n_items()) * n2;
    }
    for i in 0..m.n_items() {
        let h = m.item_emb.row(i);
        total += cfg.reg(train.users_of(i).len(), m.n_users()) * dot(h, h).as_f64();
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EaseConfig {
    pub lambda: f64,
    /// Debias strength `α = c − 1`, in `[0, 1)`.
    pub alpha: f64,
    pub debiased: bool,
}

impl EaseConfig {
    pub fn original(lambda: f64) -> Self {
        Self {
            lambda,
            alpha: 0.0,
            debiased: false,
        }
    }

    pub fn debiased(lambda: f64, alpha: f64) -> Self {
        Self {
            lambda,
            alpha,
            debiased: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("EASE lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.alpha >= 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("EASE alpha must lie in [0, 1), got {}", self.alpha)));
        }
        if !self.debiased && self.alpha != 0.0 {
            return Err(Error::Config("alpha is only used by debiased EASE".into()));
        }
        Ok(())
    }
}

/// Item–item co-occurrence matrix `XᵀX`.
pub fn item_gram<T: Scalar>(train: &InteractionDataset) -> DenseMatrix<T> {
    let n = train.n_items();
    let mut g = DenseMatrix::zeros(n, n);
    for items in train.pos_by_user() {
        for &a in items {
            for &b in items {
                g[(a, b)] += T::one();
            }
        }
    }
    g
}

/// EASE weights. Minimizes `||X − XW||² − α||XW||² + λ||W||²` under
/// `diag(W) = 0`; `α = 0` is the original objective.
pub fn ease_fit<T: Scalar>(train: &InteractionDataset, cfg: &EaseConfig) -> Result<LinearModel<T>> {
    cfg.validate()?;
    let g = item_gram::<T>(train);
    Ok(LinearModel::Ease(ease_weights(&g, cfg)?))
}

/// [`ease_fit`] on a precomputed Gram matrix.
pub fn ease_weights<T: Scalar>(gram: &DenseMatrix<T>, cfg: &EaseConfig) -> Result<DenseMatrix<T>> {
    cfg.validate()?;
    let n = gram.rows();
    let lambda = T::of(cfg.lambda);
    // Stationarity of either objective under diag(W) = 0 reads
    // ((1−α)G + λI)W = G − diag(μ). With P̃ = ((1−α)G + λI)⁻¹ this gives
    // P̃G = (I − λP̃)/(1−α), and the multipliers that zero the diagonal
    // leave W_ij = −P̃_ij / ((1−α)P̃_jj) off the diagonal.
    let keep = T::one() - T::of(cfg.alpha);
    let mut a = gram.clone();
    if cfg.alpha != 0.0 {
        a.scale(keep);
    }
    a.add_diagonal(lambda);
    let p = Cholesky::factor(&a)?.inverse();
    let dp = p.diagonal();
    let w = DenseMatrix::from_fn(n, n, |i, j| -p[(i, j)] / (keep * dp[j]));
    let mut w = w;
    for j in 0..n {
        w[(j, j)] = T::zero();
    }
    if !w.is_finite() {
        return Err(Error::NonFinite("EASE weights".into()));
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinearModel<T> {
    Ials(MfModel<T>),
    Ease(DenseMatrix<T>),
}

impl<T: Scalar> LinearModel<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            LinearModel::Ials(_) => "ials",
            LinearModel::Ease(_) => "ease",
        }
    }

    pub fn n_items(&self) -> usize {
        match self {
            LinearModel::Ials(m) => m.n_items(),
            LinearModel::Ease(w) => w.rows(),
        }
    }

    /// iALS: the model checkpoint plus `kind.txt`. EASE: `kind.txt` plus the
    /// dense weight matrix in `ease_weights.txt`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        write_text(&dir.join("kind.txt"), &format!("{}\n", self.kind()))?;
        match self {
            LinearModel::Ials(m) => m.save(dir),
            LinearModel::Ease(w) => write_matrix(&dir.join("ease_weights.txt"), w),
        }
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("kind.txt");
        let kind = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        match kind.trim() {
            "ials" => Ok(LinearModel::Ials(MfModel::load(dir)?)),
            "ease" => {
                let w = read_matrix(&dir.join("ease_weights.txt"))?;
                if w.rows() != w.cols() {
                    return Err(Error::Dimension("EASE weights must be square".into()));
                }
                Ok(LinearModel::Ease(w))
            }
            other => Err(Error::Config(format!("unknown linear model kind `{other}`"))),
        }
    }
}

/// Full score vector of user `u`: `x_uᵀW` for EASE, `<w_u, h_i>` for iALS.
pub fn linear_scores<T: Scalar>(m: &LinearModel<T>, train: &InteractionDataset, u: usize) -> Result<Vec<T>> {
    if m.n_items() != train.n_items() {
        return Err(Error::Dimension(format!(
            "model has {} items, data has {}",
            m.n_items(),
            train.n_items()
        )));
    }
    match m {
        LinearModel::Ials(f) => {
            if u >= f.n_users() {
                return Err(Error::OutOfRange(format!("user {u} of {}", f.n_users())));
            }
            Ok(f.item_emb.mul_vec(f.user_emb.row(u)))
        }
        LinearModel::Ease(w) => {
            if u >= train.n_users() {
                return Err(Error::OutOfRange(format!("user {u} of {}", train.n_users())));
            }
            let mut s = vec![T::zero(); w.cols()];
            for &i in train.items_of(u) {
                axpy(&mut s, T::one(), w.row(i));
            }
            Ok(s)
        }
    }
}

/// How two factor matrices relate row by row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleFit {
    /// `max_r (1 − |cos(a_r, b_r)|)`.
    pub max_cos_deviation: f64,
    /// Least-squares `k` in `a ≈ k·b` over the whole matrix.
    pub k: f64,
    /// `max_r ||a_r − k·b_r|| / ||a_r||`.
    pub max_rel_deviation: f64,
}

pub fn scale_fit<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> ScaleFit {
    let ab = dot(a.as_slice(), b.as_slice()).as_f64();
    let bb = dot(b.as_slice(), b.as_slice()).as_f64();
    let k = if bb > 0.0 { ab / bb } else { 0.0 };
    let mut cos_dev = 0.0f64;
    let mut rel_dev = 0.0f64;
    for (ra, rb) in a.row_iter().zip(b.row_iter()) {
        let na = dot(ra, ra).as_f64().sqrt();
        let nb = dot(rb, rb).as_f64().sqrt();
        if na == 0.0 && nb == 0.0 {
            continue;
        }
        let cos = if na > 0.0 && nb > 0.0 {
            dot(ra, rb).as_f64() / (na * nb)
        } else {
            0.0
        };
        cos_dev = cos_dev.max(1.0 - cos.abs().min(1.0));
        let diff: f64 = ra
            .iter()
            .zip(rb)
            .map(|(&x, &y)| {
                let e = x.as_f64() - k * y.as_f64();
                e * e
            })
            .sum::<f64>()
            .sqrt();
        rel_dev = rel_dev.max(if na > 0.0 { diff / na } else { f64::INFINITY });
    }
    ScaleFit {
        max_cos_deviation: cos_dev,
        k,
        max_rel_deviation: rel_dev,
    }
}

/// Fraction of users whose top-`k` lists (training positives masked) agree.
pub fn topk_agreement<T: Scalar>(
    train: &InteractionDataset,
    a: &LinearModel<T>,
    b: &LinearModel<T>,
    k: usize,
) -> Result<f64> {
    let n = train.n_users();
    let same = (0..n)
        .into_par_iter()
        .map(|u| {
            let sa = linear_scores(a, train, u)?;
            let sb = linear_scores(b, train, u)?;
            let mask = train.items_of(u);
            Ok(top_k(&sa, k, mask) == top_k(&sb, k, mask))
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(same.iter().filter(|&&s| s).count() as f64 / n.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Report {
    pub alpha0_prime: f64,
    pub lambda_prime: f64,
    pub user_step: ScaleFit,
    pub item_step: ScaleFit,
    /// Sweeps of the full fits compared below.
    pub sweeps: usize,
    pub top_k: usize,
    /// Agreement of top-K lists between the debiased fit and the original
    /// fit run with `(α₀', λ')` from the same initial factors.
    pub topk_agreement: f64,
    /// Same comparison against the original fit with `(α₀', λ/c)` started
    /// from item factors scaled by `√(1−α₀)`, whose sweeps track the
    /// debiased ones exactly.
    pub topk_agreement_tracked: f64,
    /// Largest cosine deviation between the final factors of the tracked run.
    pub tracked_cos_deviation: f64,
}

impl Theorem1Report {
    pub fn max_cos_deviation(&self) -> f64 {
        self.user_step.max_cos_deviation.max(self.item_step.max_cos_deviation)
    }
}

/// Checks that one debiased half-step equals a global multiple of the
/// remapped original half-step, on both sides, and compares full fits.
///
/// `cfg.objective` must be [`IalsObjective::Debiased`] and `cfg.nu` zero;
/// for `ν > 0` the frequency-scaled λ_u depends on α₀ and the remap is not
/// exact.
pub fn verify_theorem1(train: &InteractionDataset, cfg: &IalsConfig, top: usize) -> Result<Theorem1Report> {
    cfg.validate()?;
    let IalsObjective::Debiased { c } = cfg.objective else {
        return Err(Error::Config("theorem check needs the debiased objective".into()));
    };
    if cfg.nu != 0.0 {
        return Err(Error::Config("theorem check needs nu = 0".into()));
    }
    let (a0p, lp) = remap_ials_params(cfg.alpha0, cfg.lambda, c)?;
    let original = IalsConfig {
        alpha0: a0p,
        lambda: lp,
        objective: IalsObjective::Original,
        ..cfg.clone()
    };
    let start: MfModel<f64> = ials_init(train, cfg)?;

    let wd = ials_half_step_users(train, &start.item_emb, cfg)?;
    let wo = ials_half_step_users(train, &start.item_emb, &original)?;
    let user_step = scale_fit(&wd, &wo);
    let hd = ials_half_step_items(train, &start.user_emb, cfg)?;
    let ho = ials_half_step_items(train, &start.user_emb, &original)?;
    let item_step = scale_fit(&hd, &ho);

    let deb = LinearModel::Ials(ials_fit_from(train, cfg, start.clone())?);
    let orig = LinearModel::Ials(ials_fit_from(train, &original, start.clone())?);
    let agreement = topk_agreement(train, &deb, &orig, top)?;

    let tracked_cfg = IalsConfig {
        lambda: cfg.lambda / c,
        ..original.clone()
    };
    let mut tracked_start = start;
    tracked_start.item_emb.scale((1.0 - cfg.alpha0).sqrt());
    let tracked = LinearModel::Ials(ials_fit_from(train, &tracked_cfg, tracked_start)?);
    let agreement_tracked = topk_agreement(train, &deb, &tracked, top)?;
    let tracked_cos_deviation = match (&deb, &tracked) {
        (LinearModel::Ials(a), LinearModel::Ials(b)) => scale_fit(&a.user_emb, &b.user_emb)
            .max_cos_deviation
            .max(scale_fit(&a.item_emb, &b.item_emb).max_cos_deviation),
        _ => unreachable!(),
    };

    Ok(Theorem1Report {
        alpha0_prime: a0p,
        lambda_prime: lp,
        user_step,
        item_step,
        sweeps: cfg.iters,
        top_k: top,
        topk_agreement: agreement,
        topk_agreement_tracked: agreement_tracked,
        tracked_cos_deviation,
    })
}

/// Which original-EASE regularization the debiased fit is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum EaseRemap {
    /// `λ' = λ/(1−α)`.
    #[default]
    Simplified,
    /// `λ' = λ/((1−α)c)`, the form carrying the user weight `c`.
    CScaled { c: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem2Report {
    pub lambda_prime: f64,
    /// `max_ij |(1−α)Ŵ_ij − W'_ij| / max(|(1−α)Ŵ_ij|, |W'_ij|)`, zero where
    /// both entries vanish, on the refined solves.
    pub max_rel_deviation: f64,
    pub max_abs_deviation: f64,
    /// Top-K lists from `XŴ` and `XW'` agree for every user.
    pub topk_identical: bool,
    pub users_compared: usize,
    /// The same relative deviation for the plain `f64` fits of [`ease_fit`].
    pub plain_max_rel_deviation: f64,
    pub plain_max_abs_deviation: f64,
}

/// Fits debiased EASE `(λ, α)` and original EASE `λ'` and compares them.
///
/// Tiny weights carry relative rounding error far above 1e-10 in a plain
/// `f64` solve, even though the two fits agree to working precision in
/// norm. The comparison therefore uses inverses refined with double-double
/// residuals, with `1 − α` and `λ'` carried exactly; the plain fits are
/// reported alongside.
pub fn verify_theorem2(
    train: &InteractionDataset,
    lambda: f64,
    alpha: f64,
    remap: EaseRemap,
    top: usize,
) -> Result<Theorem2Report> {
    let deb_cfg = EaseConfig::debiased(lambda, alpha);
    deb_cfg.validate()?;
    let keep = dd::Dd::sub(dd::Dd::from(1.0), dd::Dd::from(alpha));
    let lambda_prime_dd = match remap {
        EaseRemap::Simplified => dd::Dd::div(dd::Dd::from(lambda), keep),
        EaseRemap::CScaled { c } => {
            if !(c > 0.0) {
                return Err(Error::Config(format!("c must be > 0, got {c}")));
            }
            dd::Dd::div(dd::Dd::from(lambda), dd::Dd::mul(keep, dd::Dd::from(c)))
        }
    };
    let lambda_prime = lambda_prime_dd.hi;
    let g = item_gram::<f64>(train);

    let plain_d = ease_weights(&g, &deb_cfg)?;
    let plain_o = ease_weights(&g, &EaseConfig::original(lambda_prime))?;
    let (plain_rel, plain_abs) = deviation(&plain_d, &plain_o, keep.hi);

    let wd = dd::ease_refined(&g, keep, dd::Dd::from(lambda))?;
    let wo = dd::ease_refined(&g, dd::Dd::from(1.0), lambda_prime_dd)?;
    let (max_rel, max_abs) = deviation(&wd, &wo, keep.hi);

    let (md, mo) = (LinearModel::Ease(wd), LinearModel::Ease(wo));
    let users: Vec<usize> = (0..train.n_users()).filter(|&u| !train.items_of(u).is_empty()).collect();
    let identical = users
        .par_iter()
        .map(|&u| {
            let mask = train.items_of(u);
            let a = quantized(&linear_scores(&md, train, u)?);
            let b = quantized(&linear_scores(&mo, train, u)?);
            Ok(top_k(&a, top, mask) == top_k(&b, top, mask))
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(Theorem2Report {
        lambda_prime,
        max_rel_deviation: max_rel,
        max_abs_deviation: max_abs,
        topk_identical: identical.iter().all(|&x| x),
        users_compared: users.len(),
        plain_max_rel_deviation: plain_rel,
        plain_max_abs_deviation: plain_abs,
    })
}

fn deviation(wd: &DenseMatrix<f64>, wo: &DenseMatrix<f64>, keep: f64) -> (f64, f64) {
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    for (&a, &b) in wd.as_slice().iter().zip(wo.as_slice()) {
        let a = keep * a;
        let diff = (a - b).abs();
        max_abs = max_abs.max(diff);
        let scale = a.abs().max(b.abs());
        if scale > 0.0 {
            max_rel = max_rel.max(diff / scale);
        }
    }
    (max_rel, max_abs)
}

/// Scores rounded to 1e-12 of the user's largest magnitude, so that ties in
/// exact arithmetic stay ties and fall to the index rule in both models.
pub fn quantized(scores: &[f64]) -> Vec<f64> {
    let scale = scores.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return scores.to_vec();
    }
    let q = scale * 1e-12;
    scores.iter().map(|&x| (x / q).round()).collect()
}

/// Double-double arithmetic for the refined EASE solve.
mod dd {
    use super::*;

    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct Dd {
        pub hi: f64,
        pub lo: f64,
    }

    #[inline]
    fn two_sum(a: f64, b: f64) -> (f64, f64) {
        let s = a + b;
        let bb = s - a;
        (s, (a - (s - bb)) + (b - bb))
    }

    #[inline]
    fn two_prod(a: f64, b: f64) -> (f64, f64) {
        let p = a * b;
        (p, a.mul_add(b, -p))
    }

    impl From<f64> for Dd {
        fn from(x: f64) -> Self {
            Dd { hi: x, lo: 0.0 }
        }
    }

    impl Dd {
        fn norm(hi: f64, lo: f64) -> Self {
            let (h, l) = two_sum(hi, lo);
            Dd { hi: h, lo: l }
        }

        pub fn add(a: Dd, b: Dd) -> Dd {
            let (s, e) = two_sum(a.hi, b.hi);
            Dd::norm(s, e + a.lo + b.lo)
        }

        pub fn sub(a: Dd, b: Dd) -> Dd {
            Dd::add(a, Dd { hi: -b.hi, lo: -b.lo })
        }

        pub fn mul(a: Dd, b: Dd) -> Dd {
            let (p, e) = two_prod(a.hi, b.hi);
            Dd::norm(p, e + a.hi * b.lo + a.lo * b.hi)
        }

        pub fn mul_f(a: Dd, b: f64) -> Dd {
            let (p, e) = two_prod(a.hi, b);
            Dd::norm(p, e + a.lo * b)
        }

        pub fn div(a: Dd, b: Dd) -> Dd {
            let q1 = a.hi / b.hi;
            let r = Dd::sub(a, Dd::mul_f(b, q1));
            let q2 = r.hi / b.hi;
            let r = Dd::sub(r, Dd::mul_f(b, q2));
            let q3 = r.hi / b.hi;
            Dd::add(Dd::norm(q1, q2), Dd::from(q3))
        }
    }

    /// EASE weights for `A = keep·G + λI` with the inverse polished by two
    /// Newton steps `X ← X + X(I − AX)`, the residual formed in double-double.
    pub fn ease_refined(g: &DenseMatrix<f64>, keep: Dd, lambda: Dd) -> Result<DenseMatrix<f64>> {
        let n = g.rows();
        let a: Vec<Dd> = (0..n * n)
            .map(|k| {
                let v = Dd::mul(keep, Dd::from(g.as_slice()[k]));
                if k / n == k % n {
                    Dd::add(v, lambda)
                } else {
                    v
                }
            })
            .collect();
        let mut a64 = DenseMatrix::from_fn(n, n, |i, j| a[i * n + j].hi);
        // keep the f64 copy symmetric so the factorization sees it as such
        for i in 0..n {
            for j in 0..i {
                a64[(i, j)] = a64[(j, i)];
            }
        }
        let mut x = Cholesky::factor(&a64)?.inverse();
        for _ in 0..2 {
            let xt = x.transpose();
            let r: Vec<f64> = (0..n * n)
                .into_par_iter()
                .map(|k| {
                    let (i, j) = (k / n, k % n);
                    let mut acc = Dd::from(if i == j { 1.0 } else { 0.0 });
                    let xc = xt.row(j);
                    for (l, &xv) in xc.iter().enumerate() {
                        acc = Dd::sub(acc, Dd::mul_f(a[i * n + l], xv));
                    }
                    acc.hi + acc.lo
                })
                .collect();
            let r = DenseMatrix::from_vec(n, n, r)?;
            let corr = x.matmul(&r)?;
            for (xv, cv) in x.as_mut_slice().iter_mut().zip(corr.as_slice()) {
                *xv += cv;
            }
        }
        let dp = x.diagonal();
        let k = keep.hi + keep.lo;
        let mut w = DenseMatrix::from_fn(n, n, |i, j| -x[(i, j)] / (k * dp[j]));
        for j in 0..n {
            w[(j, j)] = 0.0;
        }
        if !w.is_finite() {
            return Err(Error::NonFinite("refined EASE weights".into()));
        }
        Ok(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, SyntheticSpec};

    fn small(seed: u64) -> InteractionDataset {
        synthetic(&SyntheticSpec {
            n_users: 50,
            n_items: 40,
            mean_activity: 6.0,
            latent_dim: 3,
            affinity: 2.0,
            popularity_skew: 0.5,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn remap_examples() {
        let (a, l) = remap_ials_params(0.1, 1e-3, 1.5).unwrap();
        assert!((a - 0.1 / 1.35).abs() < 1e-15);
        assert!((l - 1e-3 / 1.35).abs() < 1e-18);
        assert!((a - 0.074_074_1).abs() < 1e-7);
        let (a, l) = remap_ials_params(0.5, 0.3, 2.0).unwrap();
        assert_eq!((a, l), (0.5, 0.3));
        assert!(remap_ials_params(1.0, 0.3, 2.0).is_err());
    }

    #[test]
    fn one_by_one_user_update() {
        let ds = InteractionDataset::from_pairs(1, 1, [(0, 0)]).unwrap();
        let h = DenseMatrix::from_vec(1, 1, vec![0.7f64]).unwrap();
        let mut cfg = IalsConfig {
            d: 1,
            alpha0: 0.1,
            lambda: 0.01,
            nu: 0.0,
            objective: IalsObjective::Debiased { c: 1.0 },
            ..IalsConfig::default()
        };
        let w = ials_half_step_users(&ds, &h, &cfg).unwrap()[(0, 0)];
        assert!((w - 0.7 / (0.9 * 0.49 + 0.1 * 0.49 + 0.01)).abs() < 1e-15);
        cfg.objective = IalsObjective::Original;
        let w = ials_half_step_users(&ds, &h, &cfg).unwrap()[(0, 0)];
        assert!((w - 0.7 / (0.49 + 0.1 * 0.49 + 0.01)).abs() < 1e-15);
    }

    #[test]
    fn half_sweeps_never_increase_objective() {
        let ds = small(4);
        for objective in [IalsObjective::Original, IalsObjective::Debiased { c: 1.5 }] {
            let cfg = IalsConfig {
                d: 4,
                alpha0: 0.2,
                lambda: 0.05,
                nu: 1.0,
                objective,
                iters: 1,
                init_sigma: 0.3,
                seed: 9,
            };
            let mut m: MfModel<f64> = ials_init(&ds, &cfg).unwrap();
            let mut last = ials_objective(&ds, &m, &cfg);
            for _ in 0..6 {
                m.user_emb = ials_half_step_users(&ds, &m.item_emb, &cfg).unwrap();
                let after_u = ials_objective(&ds, &m, &cfg);
                m.item_emb = ials_half_step_items(&ds, &m.user_emb, &cfg).unwrap();
                let after_i = ials_objective(&ds, &m, &cfg);
                assert!(after_u <= last * (1.0 + 1e-12), "{objective:?}: {after_u} > {last}");
                assert!(after_i <= after_u * (1.0 + 1e-12));
                last = after_i;
            }
        }
    }

    #[test]
    fn ease_identity_example() {
        let ds = InteractionDataset::from_pairs(3, 3, [(0, 0), (1, 1), (2, 2)]).unwrap();
        let m: LinearModel<f64> = ease_fit(&ds, &EaseConfig::original(1.0)).unwrap();
        let LinearModel::Ease(w) = &m else { panic!() };
        assert!(w.as_slice().iter().all(|&x| x.abs() < 1e-15));
        assert!(linear_scores(&m, &ds, 1).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ease_alpha_zero_reduces() {
        let ds = small(2);
        let g = item_gram::<f64>(&ds);
        let a = ease_weights(&g, &EaseConfig::original(3.0)).unwrap();
        let b = ease_weights(&g, &EaseConfig::debiased(3.0, 0.0)).unwrap();
        assert_eq!(a, b);
        assert!(EaseConfig::debiased(3.0, 1.0).validate().is_err());
    }

    #[test]
    fn ials_scores_are_dot_products() {
        let ds = small(1);
        let cfg = IalsConfig {
            d: 3,
            iters: 2,
            ..IalsConfig::default()
        };
        let m: LinearModel<f64> = ials_fit(&ds, &cfg).unwrap();
        let LinearModel::Ials(f) = &m else { panic!() };
        for u in [0, 7, 49] {
            let s = linear_scores(&m, &ds, u).unwrap();
            for i in [0, 5, 39] {
                assert!((s[i] - f.score(u, i)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn linear_checkpoint_round_trip() {
        let ds = small(3);
        let dir = tempfile::tempdir().unwrap();
        let m: LinearModel<f64> = ease_fit(&ds, &EaseConfig::original(2.0)).unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(LinearModel::<f64>::load(dir.path()).unwrap(), m);
    }
}
