//! Seeded, deterministic training.
//!
//! A run is a pure function of `(model, data, config)`. The seed feeds two
//! independent streams: one for the initial weights and one for the per-epoch
//! sample order. The order is always a permutation of the *full* index range
//! of the dataset; samples outside the training partition are skipped in
//! place. Training on `D` and on `D_r` with the same seed therefore starts
//! from the same weights and visits the shared samples in the same relative
//! order.

use std::ops::ControlFlow;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ForgetSplit, Partition};
use crate::error::{Error, Result};
use crate::linalgx::{check_floor, mat_exp, sym_eig};
use crate::models::{Decay, ModelKind, ModelSpec, WeightVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Init {
    /// `U(-scale, scale)` per weight.
    Uniform {
        scale: f64,
    },
    Gaussian {
        stddev: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub init: Init,
    #[serde(default)]
    pub early_stop_epochs: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be finite and > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.early_stop_epochs == Some(0) {
            return Err(Error::config("train.early_stop_epochs", "must be >= 1 when set"));
        }
        match self.init {
            Init::Uniform { scale } if !(scale > 0.0 && scale.is_finite()) => {
                Err(Error::config("train.init.scale", "must be finite and > 0"))
            }
            Init::Gaussian { stddev } if !(stddev > 0.0 && stddev.is_finite()) => {
                Err(Error::config("train.init.stddev", "must be finite and > 0"))
            }
            _ => Ok(()),
        }
    }

    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.clone() }
    }

    /// Epochs actually run after early stopping.
    pub fn effective_epochs(&self) -> usize {
        self.early_stop_epochs.map_or(self.epochs, |e| e.min(self.epochs))
    }

    /// Gradient-flow time matching this run, in units of the summed loss.
    ///
    /// SGD on `L/N` with step `lr` takes `N/batch` steps per epoch, which
    /// follows the flow `dw/dt = -grad L(w)` for time `lr * epochs / batch`
    /// regardless of `N`. Runs on `D` and on `D_r` therefore share one `t`.
    pub fn flow_time(&self) -> f64 {
        self.learning_rate * self.effective_epochs() as f64 / self.batch_size as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub final_weights: WeightVector,
    /// Training objective at the end of every epoch.
    pub epoch_losses: Vec<f64>,
    pub epochs_run: usize,
}

/// Mixes a base seed with a stream index (SplitMix64 finalizer), giving
/// independent RNG streams for concurrent runs.
pub fn seed_stream(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const INIT_STREAM: u64 = 0;
const ORDER_STREAM: u64 = 1;

pub fn init_weights(spec: &ModelSpec, cfg: &TrainConfig) -> Result<DVector<f64>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed_stream(cfg.seed, INIT_STREAM));
    let p = spec.param_count();
    Ok(match cfg.init {
        Init::Uniform { scale } => {
            let dist = Uniform::new(-scale, scale).map_err(|e| Error::config("train.init.scale", e.to_string()))?;
            DVector::from_fn(p, |_, _| dist.sample(&mut rng))
        }
        Init::Gaussian { stddev } => {
            let dist = Normal::new(0.0, stddev).map_err(|e| Error::config("train.init.stddev", e.to_string()))?;
            DVector::from_fn(p, |_, _| dist.sample(&mut rng))
        }
    })
}

/// How each sample's gradient enters the update.
#[derive(Debug, Clone, Copy)]
pub(crate) enum SampleRule {
    Standard,
    /// Ascend on the forget samples until their loss reaches `cap`.
    NegGrad {
        cap: f64,
    },
}

/// SGD from random initialization on the retain side of `part`.
pub fn sgd_train(spec: &ModelSpec, part: &Partition<'_>, cfg: &TrainConfig) -> Result<TrainTrace> {
    let w0 = init_weights(spec, cfg)?;
    sgd_train_from(spec, part, cfg, w0)
}

/// [`sgd_train`] on the full dataset.
pub fn train_full(spec: &ModelSpec, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainTrace> {
    sgd_train(spec, &Partition::retain_all(ds), cfg)
}

/// [`sgd_train`] on the retain set of a split, seed-aligned with [`train_full`].
pub fn train_retain(spec: &ModelSpec, split: &ForgetSplit, cfg: &TrainConfig) -> Result<TrainTrace> {
    sgd_train(spec, &split.partition(), cfg)
}

/// SGD starting from the given weights instead of a random draw.
pub fn sgd_train_from(spec: &ModelSpec, part: &Partition<'_>, cfg: &TrainConfig, start: DVector<f64>) -> Result<TrainTrace> {
    run_sgd(spec, part, cfg, start, SampleRule::Standard, |_, _| ControlFlow::Continue(()))
}

/// The SGD loop shared by training, fine-tuning baselines and relearning.
/// `on_epoch(epoch, weights)` runs after every epoch (1-based) and may stop
/// the run early.
pub(crate) fn run_sgd(
    spec: &ModelSpec,
    part: &Partition<'_>,
    cfg: &TrainConfig,
    start: DVector<f64>,
    rule: SampleRule,
    mut on_epoch: impl FnMut(usize, &DVector<f64>) -> ControlFlow<()>,
) -> Result<TrainTrace> {
    cfg.validate()?;
    spec.check_weights(&start)?;
    let data = part.data;
    let n = data.len();
    if let Some(&bad) = part.retain.iter().chain(part.forget.iter()).find(|&&i| i >= n) {
        return Err(Error::DimensionMismatch { expected: n, got: bad + 1 });
    }
    let mut active = vec![false; n];
    let mut forgotten = vec![false; n];
    for &i in part.retain.iter() {
        active[i] = true;
    }
    if let SampleRule::NegGrad { .. } = rule {
        for &i in part.forget.iter() {
            active[i] = true;
            forgotten[i] = true;
        }
    }
    let n_active = active.iter().filter(|&&a| a).count();
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed_stream(cfg.seed, ORDER_STREAM));
    let mut w = start;
    let mut losses = Vec::new();
    let mut grad = DVector::zeros(w.len());
    let mut order: Vec<usize> = (0..n).collect();
    let epochs = cfg.effective_epochs();

    for epoch in 1..=epochs {
        match &spec.kind {
            ModelKind::Quadratic { .. } => {
                let g = spec.grad_on(&w, data, &[], Decay::Include)?;
                w.axpy(-cfg.learning_rate, &g, 1.0);
            }
            _ => {
                order.clear();
                order.extend(0..n);
                order.shuffle(&mut order_rng);
                let decay_scale = spec.weight_decay / n_active.max(1) as f64;
                let mut batch = Vec::with_capacity(cfg.batch_size);
                let mut cursor = order.iter().copied().filter(|&i| active[i]).peekable();
                while cursor.peek().is_some() {
                    batch.clear();
                    batch.extend(cursor.by_ref().take(cfg.batch_size));
                    grad.fill(0.0);
                    let inv = 1.0 / batch.len() as f64;
                    for &i in &batch {
                        let (x, y) = data.sample(i);
                        match rule {
                            SampleRule::NegGrad { cap } if forgotten[i] => {
                                // clamped objective -min(loss, cap): no gradient once at the cap
                                if spec.sample_loss(&w, x, y) < cap {
                                    spec.sample_loss_grad(&w, x, y, -inv, grad.as_mut_slice());
                                }
                            }
                            _ => {
                                spec.sample_loss_grad(&w, x, y, inv, grad.as_mut_slice());
                            }
                        }
                    }
                    grad.axpy(decay_scale, &w, 1.0);
                    w.axpy(-cfg.learning_rate, &grad, 1.0);
                }
            }
        }
        let loss = epoch_objective(spec, part, &w, rule)?;
        if !loss.is_finite() || w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        losses.push(loss);
        if on_epoch(epoch, &w).is_break() {
            break;
        }
    }
    let epochs_run = losses.len();
    Ok(TrainTrace {
        final_weights: WeightVector::new(spec, w)?,
        epoch_losses: losses,
        epochs_run,
    })
}

fn epoch_objective(spec: &ModelSpec, part: &Partition<'_>, w: &DVector<f64>, rule: SampleRule) -> Result<f64> {
    match rule {
        SampleRule::Standard => spec.loss_on(w, part.data, &part.retain, Decay::Include),
        SampleRule::NegGrad { cap, .. } => {
            let retained = spec.loss_on(w, part.data, &part.retain, Decay::Include)?;
            let forgotten: f64 = part
                .forget
                .iter()
                .map(|&i| {
                    let (x, y) = part.data.sample(i);
                    spec.sample_loss(w, x, y).min(cap)
                })
                .sum();
            Ok(retained - forgotten)
        }
    }
}

fn quadratic_parts(spec: &ModelSpec) -> Result<(crate::linalgx::SymMatrix, DVector<f64>)> {
    match &spec.kind {
        ModelKind::Quadratic { a, w_star } => Ok((a.shift(spec.weight_decay), a.as_matrix() * w_star)),
        _ => Err(Error::UnsupportedModel {
            op: "gradient_flow",
            model: spec.model_id(),
        }),
    }
}

/// Minimizer of a quadratic model's loss, including weight decay.
pub fn quadratic_minimizer(spec: &ModelSpec) -> Result<DVector<f64>> {
    let (h, rhs) = quadratic_parts(spec)?;
    if let ModelKind::Quadratic { w_star, .. } = &spec.kind {
        if spec.weight_decay == 0.0 {
            return Ok(w_star.clone());
        }
    }
    h.into_matrix().cholesky().map(|c| c.solve(&rhs)).ok_or(Error::SingularA(0.0))
}

/// Exact gradient-flow path of a quadratic model:
/// `w(t) = w_min + exp(-H t) (w0 - w_min)` with `H` the loss Hessian.
pub fn gradient_flow(spec: &ModelSpec, w0: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    spec.check_weights(w0)?;
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::config("t", "must be finite and >= 0"));
    }
    let (h, _) = quadratic_parts(spec)?;
    if t == 0.0 {
        return Ok(w0.clone());
    }
    let w_min = quadratic_minimizer(spec)?;
    let decay = mat_exp(&h, -t)?;
    Ok(&w_min + decay.as_matrix() * (w0 - &w_min))
}

/// The same path in displacement form,
/// `w0 - (I - exp(-H t)) H^-1 grad L(w0)`. Without a floor a zero
/// eigenvalue of `H` is an error; with one, eigenvalues are floored first.
pub fn gradient_flow_displacement(spec: &ModelSpec, w0: &DVector<f64>, t: f64, floor: Option<f64>) -> Result<DVector<f64>> {
    spec.check_weights(w0)?;
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::config("t", "must be finite and >= 0"));
    }
    let (h, _) = quadratic_parts(spec)?;
    let eig = sym_eig(&h)?;
    let lo = eig.min_value();
    let floor = match floor {
        Some(f) => {
            check_floor(f)?;
            f
        }
        None if lo <= 0.0 => return Err(Error::SingularA(lo)),
        None => 0.0,
    };
    let g = h.as_matrix() * w0 - quadratic_parts(spec)?.1;
    let step = eig.map(|v| {
        let v = v.max(floor);
        (1.0 - (-v * t).exp()) / v
    })?;
    Ok(w0 - step.as_matrix() * g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelearnConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Summed forget-set loss to reach; defaults to `0.1 * |D_f| * ln K`.
    #[serde(default)]
    pub threshold: Option<f64>,
}

impl RelearnConfig {
    pub fn threshold_for(&self, forget_count: usize, classes: usize) -> f64 {
        self.threshold.unwrap_or_else(|| 0.1 * forget_count as f64 * (classes as f64).ln())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relearn {
    Epochs(usize),
    NotReached,
}

impl Relearn {
    /// Epoch count, with `NotReached` ranked after every finite count.
    pub fn rank(self, max_epochs: usize) -> usize {
        match self {
            Relearn::Epochs(e) => e,
            Relearn::NotReached => max_epochs + 1,
        }
    }
}

/// Trains `weights` on the whole dataset and reports the first epoch whose
/// end-of-epoch forget loss is strictly below the threshold.
pub fn relearn_time(spec: &ModelSpec, weights: &DVector<f64>, split: &ForgetSplit, cfg: &RelearnConfig) -> Result<Relearn> {
    let threshold = cfg.threshold_for(split.forget_indices().len(), spec.classes().max(1));
    if !(threshold >= 0.0) {
        return Err(Error::config("relearn.threshold", "must be >= 0"));
    }
    if cfg.max_epochs == 0 {
        return Err(Error::config("relearn.max_epochs", "must be >= 1"));
    }
    let train = TrainConfig {
        seed: cfg.seed,
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        epochs: cfg.max_epochs,
        init: Init::Uniform { scale: 1.0 },
        early_stop_epochs: None,
    };
    let ds = split.dataset();
    let full = Partition::retain_all(ds);
    let forget = split.forget_indices();
    let mut hit = None;
    let mut eval_err = None;
    run_sgd(spec, &full, &train, weights.clone(), SampleRule::Standard, |epoch, w| {
        match spec.loss_on(w, ds, forget, Decay::Exclude) {
            Ok(loss) if loss < threshold => {
                hit = Some(epoch);
                ControlFlow::Break(())
            }
            Ok(_) => ControlFlow::Continue(()),
            Err(e) => {
                eval_err = Some(e);
                ControlFlow::Break(())
            }
        }
    })?;
    if let Some(e) = eval_err {
        return Err(e);
    }
    Ok(hit.map_or(Relearn::NotReached, Relearn::Epochs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpolationPoint {
    pub t: f64,
    pub loss: f64,
    /// 0-1 error in percent; absent for the quadratic model.
    pub error: Option<f64>,
}

/// Loss and error along `w(t) = (1 - t) w_a + t w_b`.
pub fn loss_interpolation(
    spec: &ModelSpec,
    w_a: &DVector<f64>,
    w_b: &DVector<f64>,
    ds: &Dataset,
    grid: &[f64],
) -> Result<Vec<InterpolationPoint>> {
    if w_a.len() != w_b.len() {
        return Err(Error::DimensionMismatch {
            expected: w_a.len(),
            got: w_b.len(),
        });
    }
    let all = ds.all_indices();
    grid.iter()
        .map(|&t| {
            let w = w_a * (1.0 - t) + w_b * t;
            let loss = spec.loss(&w, ds)?;
            let error = if spec.is_classifier() {
                Some(spec.error_rate(&w, ds, &all, None)?)
            } else {
                None
            };
            Ok(InterpolationPoint { t, loss, error })
        })
        .collect()
}

/// `n` evenly spaced points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}
