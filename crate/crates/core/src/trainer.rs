//! Mini-batch Adam training of an [`MfModel`] under any [`LossSpec`].

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::data::{write_text, InteractionDataset};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::losses::{self, kink_signature, relative_error, LossFamily, LossOutput, LossSpec, ScoreBatch};
use crate::model::{pair_score, pair_score_backward, InitScheme, MfModel, ScoreMode};
use crate::sampling::{sample_extra_positives, tau_plus, NegativeSampler, SamplerConfig, TauPolicy};
use crate::scalar::Scalar;
use crate::seed::{self, Stream};

/// Catalog size above which `softmax_full` refuses to train.
pub const FULL_SOFTMAX_MAX_ITEMS: usize = 50_000;

/// Validation Recall gains below this count as no improvement.
pub const PLATEAU_MIN_GAIN: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub lr_decay: f64,
    /// Evaluations without improvement before the learning rate decays.
    pub plateau_patience: usize,
    pub l2_reg: f64,
    pub max_epochs: usize,
    pub d: usize,
    pub init: InitScheme,
    pub sampler: SamplerConfig,
    pub tau: TauPolicy,
    pub loss: LossSpec<f64>,
    pub eval_every: usize,
    /// K of the validation Recall@K.
    pub eval_k: usize,
    /// Treat extra-positive scores as constants.
    pub freeze_extra_positives: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            lr: 1e-4,
            lr_floor: 1e-6,
            lr_decay: 0.5,
            plateau_patience: 5,
            l2_reg: 1e-8,
            max_epochs: 500,
            d: 64,
            init: InitScheme::Normal { sigma: 0.1 },
            sampler: SamplerConfig::default(),
            tau: TauPolicy::default(),
            loss: LossSpec::new(LossFamily::Bpr),
            eval_every: 5,
            eval_k: 20,
            freeze_extra_positives: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.lr_floor >= 0.0 && self.lr_floor < self.lr) {
            return bad(format!("lr_floor must lie in [0, lr), got {}", self.lr_floor));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad(format!("lr_decay must lie in (0, 1), got {}", self.lr_decay));
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience must be ≥ 1".into());
        }
        if !(self.l2_reg >= 0.0) || !self.l2_reg.is_finite() {
            return bad(format!("l2_reg must be ≥ 0, got {}", self.l2_reg));
        }
        if self.d == 0 {
            return bad("d must be ≥ 1".into());
        }
        if self.eval_every == 0 || self.eval_k == 0 {
            return bad("eval_every and eval_k must be ≥ 1".into());
        }
        self.loss.validate()?;
        self.sampler.validate(self.loss.family.is_debiased())?;
        self.tau.validate()?;
        Ok(())
    }
}

/// One positive pair with everything sampled for it.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub user: usize,
    pub item: usize,
    pub negs: Vec<usize>,
    pub extra: Vec<usize>,
    pub tau_plus: f64,
    /// `N·q(j)` per negative, sampled softmax only.
    pub proposal: Option<Vec<f64>>,
}

/// Scores of an example under the current embeddings.
pub fn example_batch<T: Scalar>(m: &MfModel<T>, ex: &Example) -> ScoreBatch<T> {
    let w = m.user_emb.row(ex.user);
    let s = |i: usize| pair_score(m.score_mode, w, m.item_emb.row(i));
    let mut b = ScoreBatch::new(s(ex.item), ex.negs.iter().map(|&j| s(j)).collect());
    if !ex.extra.is_empty() {
        b = b.with_extra(ex.extra.iter().map(|&k| s(k)).collect(), T::of(ex.tau_plus));
    }
    if let Some(q) = &ex.proposal {
        b = b.with_proposal(q.iter().map(|&x| T::of(x)).collect());
    }
    b
}

/// Loss of one example plus its gradient: dense for the user row, and one
/// `(item, ∂loss/∂score)` pair per scored item.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleGrad<T> {
    pub out: LossOutput<T>,
    pub user_grad: Vec<T>,
    pub item_coefs: Vec<(usize, T)>,
}

pub fn example_forward_backward<T: Scalar>(
    m: &MfModel<T>,
    spec: &LossSpec<T>,
    ex: &Example,
    freeze_extra: bool,
) -> Result<ExampleGrad<T>> {
    let b = example_batch(m, ex);
    let out = losses::evaluate(spec, &b)?;
    let mut coefs = Vec::with_capacity(1 + ex.negs.len() + ex.extra.len());
    coefs.push((ex.item, out.d_pos));
    coefs.extend(ex.negs.iter().copied().zip(out.d_negs.iter().copied()));
    if !freeze_extra {
        coefs.extend(ex.extra.iter().copied().zip(out.d_extra_pos.iter().copied()));
    }
    coefs.retain(|&(_, g)| g != T::zero());
    let w = m.user_emb.row(ex.user);
    let mut user_grad = vec![T::zero(); m.dim()];
    for &(i, g) in &coefs {
        pair_score_backward(m.score_mode, w, m.item_emb.row(i), g, Some(&mut user_grad), None);
    }
    Ok(ExampleGrad {
        out,
        user_grad,
        item_coefs: coefs,
    })
}

/// Draws the negatives, extra positives and τ⁺ of positive `(u, i)`.
#[allow(clippy::too_many_arguments)]
fn draw_example<R: rand::Rng + ?Sized>(
    cfg: &TrainConfig,
    sampler: &NegativeSampler,
    ds: &InteractionDataset,
    u: usize,
    i: usize,
    shared: Option<&[usize]>,
    rng: &mut R,
) -> Result<Example> {
    let family = cfg.loss.family;
    let negs = if family == LossFamily::SoftmaxFull {
        (0..ds.n_items()).filter(|&j| j != i).collect()
    } else if let Some(pool) = shared {
        pool.to_vec()
    } else {
        sampler.sample_negatives(ds, u, cfg.sampler.n_negatives, rng)?
    };
    let (extra, tau) = if family.is_debiased() {
        (
            sample_extra_positives(ds, u, cfg.sampler.m_extra_positives, rng)?,
            tau_plus(&cfg.tau, ds, u)?,
        )
    } else {
        (Vec::new(), 0.0)
    };
    let proposal = (family == LossFamily::SampledSoftmax).then(|| {
        let n = negs.len() as f64;
        negs.iter().map(|&j| n * sampler.proposal_prob(ds, u, j)).collect()
    });
    Ok(Example {
        user: u,
        item: i,
        negs,
        extra,
        tau_plus: tau,
        proposal,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    LrFloor,
    MaxEpochs,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::LrFloor => "lr-floor",
            StopReason::MaxEpochs => "max-epochs",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-example loss over the epoch, without the L2 term.
    pub loss: f64,
    /// Validation Recall@K, on evaluation epochs only.
    pub recall: Option<f64>,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub stop: StopReason,
    /// Epoch whose model was kept (best validation Recall).
    pub best_epoch: Option<usize>,
    pub best_recall: Option<f64>,
}

pub const HISTORY_HEADER: &str = "epoch,loss,recall20,lr";

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.records {
            let recall = r.recall.map(|x| format!("{x:.6}")).unwrap_or_default();
            let _ = writeln!(s, "{},{:.9e},{},{:e}", r.epoch, r.loss, recall, r.lr);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_csv())
    }
}

/// Dense Adam over both embedding tables.
struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [T], grads: &[T], offset: usize, lr: f64) {
        let (b1, b2) = (T::of(Self::B1), T::of(Self::B2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let (lr, eps) = (T::of(lr), T::of(Self::EPS));
        let m = &mut self.m[offset..offset + params.len()];
        let v = &mut self.v[offset..offset + params.len()];
        for (((p, &g), mk), vk) in params.iter_mut().zip(grads).zip(m).zip(v) {
            *mk = b1 * *mk + (T::one() - b1) * g;
            *vk = b2 * *vk + (T::one() - b2) * g * g;
            *p -= lr * (*mk / c1) / ((*vk / c2).sqrt() + eps);
        }
    }
}

/// Gradient of the mean batch loss plus `l2_reg·||E||²`, and the summed loss.
fn batch_gradient<T: Scalar>(
    m: &MfModel<T>,
    spec: &LossSpec<T>,
    examples: &[Example],
    cfg: &TrainConfig,
) -> Result<(Vec<T>, Vec<T>, f64)> {
    let grads: Vec<ExampleGrad<T>> = examples
        .par_iter()
        .map(|ex| example_forward_backward(m, spec, ex, cfg.freeze_extra_positives))
        .collect::<Result<_>>()?;
    let d = m.dim();
    let scale = T::one() / T::of_usize(examples.len());
    let l2 = T::of(2.0 * cfg.l2_reg);
    let mut gu: Vec<T> = m.user_emb.as_slice().iter().map(|&x| l2 * x).collect();
    let mut gi: Vec<T> = m.item_emb.as_slice().iter().map(|&x| l2 * x).collect();
    let mut total = 0.0;
    for (ex, g) in examples.iter().zip(&grads) {
        if !g.out.value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} loss {} at user {} item {} ({} negatives)",
                spec.family,
                g.out.value,
                ex.user,
                ex.item,
                ex.negs.len()
            )));
        }
        total += g.out.value.as_f64();
        let row = &mut gu[ex.user * d..(ex.user + 1) * d];
        for (a, &b) in row.iter_mut().zip(&g.user_grad) {
            *a += scale * b;
        }
        let w = m.user_emb.row(ex.user);
        for &(i, c) in &g.item_coefs {
            let row = &mut gi[i * d..(i + 1) * d];
            pair_score_backward(m.score_mode, w, m.item_emb.row(i), scale * c, None, Some(row));
        }
    }
    Ok((gu, gi, total))
}

/// Trains from a seeded initialization. With `valid`, the model with the
/// best validation Recall@K is returned; without it, the last one.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    train_ds: &InteractionDataset,
    valid: Option<&InteractionDataset>,
) -> Result<(MfModel<T>, TrainHistory)> {
    cfg.validate()?;
    let model = MfModel::init(
        train_ds.n_users(),
        train_ds.n_items(),
        cfg.d,
        cfg.init,
        cfg.loss.score_mode,
        cfg.seed,
    )?;
    train_from(cfg, train_ds, valid, model)
}

pub fn train_from<T: Scalar>(
    cfg: &TrainConfig,
    train_ds: &InteractionDataset,
    valid: Option<&InteractionDataset>,
    mut model: MfModel<T>,
) -> Result<(MfModel<T>, TrainHistory)> {
    cfg.validate()?;
    if train_ds.n_interactions() == 0 {
        return Err(Error::EmptyDataset("training set"));
    }
    if model.n_users() != train_ds.n_users() || model.n_items() != train_ds.n_items() {
        return Err(Error::Dimension("model does not match the training set".into()));
    }
    if let Some(v) = valid {
        if v.n_users() != train_ds.n_users() || v.n_items() != train_ds.n_items() {
            return Err(Error::Dimension("validation set does not match the training set".into()));
        }
    }
    if cfg.loss.family == LossFamily::SoftmaxFull && train_ds.n_items() > FULL_SOFTMAX_MAX_ITEMS {
        return Err(Error::Config(format!(
            "softmax_full is limited to {FULL_SOFTMAX_MAX_ITEMS} items"
        )));
    }
    let valid = valid.filter(|v| v.n_interactions() > 0);
    let spec: LossSpec<T> = cfg.loss.cast();
    let sampler = NegativeSampler::new(cfg.sampler.negative_mode, train_ds)?;
    let pairs: Vec<(usize, usize)> = train_ds.pairs().collect();
    let n_user_params = model.user_emb.as_slice().len();
    let mut adam = Adam::<T>::new(n_user_params + model.item_emb.as_slice().len());

    let mut lr = cfg.lr;
    let mut records = Vec::new();
    let mut best: Option<(f64, usize, MfModel<T>)> = None;
    let mut stale = 0usize;
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let mut order = pairs.clone();
        order.shuffle(&mut seed::keyed(cfg.seed, Stream::Shuffle, epoch as u64, 0));
        let mut epoch_loss = 0.0;
        for (b_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let base = b_idx * cfg.batch_size;
            let shared: Option<Vec<usize>> = if cfg.sampler.shared_pool {
                let mut rng = seed::keyed(cfg.sampler.seed, Stream::Sampler, epoch as u64, (1 << 63) | b_idx as u64);
                Some(sampler.sample_negatives(train_ds, chunk[0].0, cfg.sampler.n_negatives, &mut rng)?)
            } else {
                None
            };
            let examples: Vec<Example> = chunk
                .par_iter()
                .enumerate()
                .map(|(k, &(u, i))| {
                    let mut rng = seed::keyed(cfg.sampler.seed, Stream::Sampler, epoch as u64, (base + k) as u64);
                    draw_example(cfg, &sampler, train_ds, u, i, shared.as_deref(), &mut rng)
                })
                .collect::<Result<_>>()?;
            let (gu, gi, total) = batch_gradient(&model, &spec, &examples, cfg)?;
            epoch_loss += total;
            adam.t += 1;
            adam.step(model.user_emb.as_mut_slice(), &gu, 0, lr);
            adam.step(model.item_emb.as_mut_slice(), &gi, n_user_params, lr);
        }
        if !model.is_finite() {
            return Err(Error::NonFinite(format!("embeddings after epoch {epoch}")));
        }
        let mut record = EpochRecord {
            epoch,
            loss: epoch_loss / pairs.len() as f64,
            recall: None,
            lr,
        };
        if let Some(v) = valid.filter(|_| epoch % cfg.eval_every == 0) {
            let r = evaluate(|u| model.score_all_items(u), train_ds, v, cfg.eval_k)?.recall;
            record.recall = Some(r);
            match &best {
                Some((b, _, _)) if r < b + PLATEAU_MIN_GAIN => {
                    stale += 1;
                    if r > *b {
                        best = Some((r, epoch, model.clone()));
                    }
                }
                _ => {
                    stale = 0;
                    best = Some((r, epoch, model.clone()));
                }
            }
            if stale >= cfg.plateau_patience {
                lr *= cfg.lr_decay;
                stale = 0;
            }
        }
        records.push(record);
        if lr < cfg.lr_floor {
            stop = StopReason::LrFloor;
            break;
        }
    }
    let (best_recall, best_epoch, model) = match best {
        Some((r, e, m)) => (Some(r), Some(e), m),
        None => (None, None, model),
    };
    Ok((
        model,
        TrainHistory {
            records,
            stop,
            best_epoch,
            best_recall,
        },
    ))
}

/// One Adam step on a single batch of examples, from fresh optimizer
/// state. Returns the batch objective (mean loss plus L2) before the step.
pub fn single_step<T: Scalar>(
    m: &mut MfModel<T>,
    cfg: &TrainConfig,
    examples: &[Example],
) -> Result<f64> {
    let spec: LossSpec<T> = cfg.loss.cast();
    let before = batch_objective(m, cfg, examples)?;
    let (gu, gi, _) = batch_gradient(m, &spec, examples, cfg)?;
    let n_user = m.user_emb.as_slice().len();
    let mut adam = Adam::<T>::new(n_user + m.item_emb.as_slice().len());
    adam.t = 1;
    adam.step(m.user_emb.as_mut_slice(), &gu, 0, cfg.lr);
    adam.step(m.item_emb.as_mut_slice(), &gi, n_user, cfg.lr);
    Ok(before)
}

/// Mean example loss plus `l2_reg·||E||²`.
pub fn batch_objective<T: Scalar>(m: &MfModel<T>, cfg: &TrainConfig, examples: &[Example]) -> Result<f64> {
    let spec: LossSpec<T> = cfg.loss.cast();
    let mut total = 0.0;
    for ex in examples {
        total += losses::evaluate(&spec, &example_batch(m, ex))?.value.as_f64();
    }
    let sq = |xs: &[T]| xs.iter().map(|&x| (x * x).as_f64()).sum::<f64>();
    Ok(total / examples.len() as f64
        + cfg.l2_reg * (sq(m.user_emb.as_slice()) + sq(m.item_emb.as_slice())))
}

/// Settings of the embedding-level gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSuiteConfig {
    pub families: Vec<LossFamily>,
    pub instances: usize,
    pub d: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub n_negatives: usize,
    pub m_extra: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradientSuiteConfig {
    fn default() -> Self {
        Self {
            families: LossFamily::ALL.to_vec(),
            instances: 20,
            d: 4,
            n_users: 3,
            n_items: 12,
            n_negatives: 5,
            m_extra: 2,
            step: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSuiteRow {
    pub family: LossFamily,
    pub score_mode: ScoreMode,
    pub worst_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

pub const GRADIENT_HEADER: &str = "family,score_mode,worst_rel_error,checked,skipped";

pub fn gradient_csv(rows: &[GradientSuiteRow]) -> String {
    let mut s = String::from(GRADIENT_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:e},{},{}",
            r.family,
            r.score_mode.name(),
            r.worst_rel_error,
            r.checked,
            r.skipped
        );
    }
    s
}

/// Loss spec used for `family` in the gradient suite: mid-range values for
/// every hyperparameter the family takes.
pub fn suite_spec(family: LossFamily) -> LossSpec<f64> {
    let mut s = LossSpec::new(family);
    if family.uses_temperature() {
        s.temperature = Some(0.5);
    }
    if family.uses_neg_weight() {
        s.neg_weight = Some(1.3);
    }
    if family.uses_margin() {
        s.margin = Some(0.3);
    }
    if family.uses_ccl_weight() {
        s.ccl_weight = Some(0.8);
    }
    s
}

/// Central differences through the scoring function, per embedding
/// coordinate, against [`example_forward_backward`]. Coordinates whose
/// ±10h neighbourhood changes a kink of the loss are skipped.
pub fn gradient_suite(cfg: &GradientSuiteConfig) -> Result<Vec<GradientSuiteRow>> {
    let mut rows = Vec::new();
    for (f_idx, &family) in cfg.families.iter().enumerate() {
        let spec = suite_spec(family);
        let mut row = GradientSuiteRow {
            family,
            score_mode: spec.score_mode,
            worst_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for k in 0..cfg.instances {
            let mut rng = seed::keyed(cfg.seed, Stream::Verify, f_idx as u64, k as u64);
            let m: MfModel<f64> = MfModel::init(
                cfg.n_users,
                cfg.n_items,
                cfg.d,
                InitScheme::Normal { sigma: 0.7 },
                spec.score_mode,
                rng.random(),
            )?;
            let ex = micro_example(cfg, family, &mut rng);
            let (worst, checked, skipped) = check_example(&m, &spec, &ex, cfg.step)?;
            row.worst_rel_error = row.worst_rel_error.max(worst);
            row.checked += checked;
            row.skipped += skipped;
        }
        rows.push(row);
    }
    Ok(rows)
}

fn micro_example<R: rand::Rng + ?Sized>(cfg: &GradientSuiteConfig, family: LossFamily, rng: &mut R) -> Example {
    let n_items = cfg.n_items;
    let user = rng.random_range(0..cfg.n_users);
    let item = rng.random_range(0..n_items);
    let negs: Vec<usize> = if family == LossFamily::SoftmaxFull {
        (0..n_items).filter(|&j| j != item).collect()
    } else {
        (0..cfg.n_negatives).map(|_| rng.random_range(0..n_items)).collect()
    };
    let (extra, tau) = if family.is_debiased() {
        (
            (0..cfg.m_extra).map(|_| rng.random_range(0..n_items)).collect(),
            rng.random_range(0.05..0.5),
        )
    } else {
        (Vec::new(), 0.0)
    };
    let proposal = (family == LossFamily::SampledSoftmax)
        .then(|| negs.iter().map(|_| rng.random_range(0.2..3.0)).collect());
    Example {
        user,
        item,
        negs,
        extra,
        tau_plus: tau,
        proposal,
    }
}

/// Worst relative error, checked and skipped coordinate counts.
pub fn check_example(
    m: &MfModel<f64>,
    spec: &LossSpec<f64>,
    ex: &Example,
    h: f64,
) -> Result<(f64, usize, usize)> {
    let g = example_forward_backward(m, spec, ex, false)?;
    let d = m.dim();
    let mut item_grads = vec![0.0; m.n_items() * d];
    let w = m.user_emb.row(ex.user);
    for &(i, c) in &g.item_coefs {
        pair_score_backward(
            m.score_mode,
            w,
            m.item_emb.row(i),
            c,
            None,
            Some(&mut item_grads[i * d..(i + 1) * d]),
        );
    }
    let base_sig = kink_signature(spec, &example_batch(m, ex));
    let mut items: Vec<usize> = std::iter::once(ex.item).chain(ex.negs.iter().copied()).chain(ex.extra.iter().copied()).collect();
    items.sort_unstable();
    items.dedup();

    // (is_user, row, col, analytic)
    let mut coords: Vec<(bool, usize, usize, f64)> = (0..d).map(|c| (true, ex.user, c, g.user_grad[c])).collect();
    for &i in &items {
        coords.extend((0..d).map(|c| (false, i, c, item_grads[i * d + c])));
    }
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    let mut probe = m.clone();
    for (is_user, r, c, analytic) in coords {
        let x0 = if is_user { m.user_emb[(r, c)] } else { m.item_emb[(r, c)] };
        let mut value_at = |x: f64| -> Result<(f64, Vec<bool>)> {
            if is_user {
                probe.user_emb[(r, c)] = x;
            } else {
                probe.item_emb[(r, c)] = x;
            }
            let b = example_batch(&probe, ex);
            let v = losses::evaluate(spec, &b)?.value;
            Ok((v, kink_signature(spec, &b)))
        };
        let (_, s_up) = value_at(x0 + 10.0 * h)?;
        let (_, s_dn) = value_at(x0 - 10.0 * h)?;
        let (up, s1) = value_at(x0 + h)?;
        let (dn, s2) = value_at(x0 - h)?;
        value_at(x0)?;
        if [s_up, s_dn, s1, s2].iter().any(|s| *s != base_sig) {
            skipped += 1;
            continue;
        }
        let numeric = (up - dn) / (2.0 * h);
        worst = worst.max(relative_error(analytic, numeric, losses::GRAD_CHECK_FLOOR));
        checked += 1;
    }
    Ok((worst, checked, skipped))
}
