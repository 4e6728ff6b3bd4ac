//! Forgetting procedures.
//!
//! Every noisy scrub returns the deterministic center of its output
//! distribution alongside the sampled weights, so bounds can be computed in
//! closed form without re-deriving the center.

use std::ops::ControlFlow;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ForgetSplit, Partition};
use crate::error::{Error, Result};
use crate::linalgx::{
    check_floor, clamp_eigs, inv_frac_power_from, mat_exp_from, sym_eig, Covariance, InvPower, SymMatrix, DEFAULT_EIG_FLOOR,
};
use crate::models::{Decay, FisherForm, ModelKind, ModelSpec, WeightVector};
use crate::training::{run_sgd, seed_stream, SampleRule, TrainConfig};

/// Local quadratic model of the full and retain losses around `at_weights`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSurrogate {
    /// Hessian of the full loss.
    pub full_hessian: SymMatrix,
    /// Hessian of the retain loss.
    pub retain_hessian: SymMatrix,
    /// Newton step of the full loss, `A^-1 grad L_D`.
    pub full_step: DVector<f64>,
    /// Newton step of the retain loss, `B^-1 grad L_Dr`.
    pub retain_step: DVector<f64>,
    pub at_weights: DVector<f64>,
}

impl QuadraticSurrogate {
    pub fn new(
        full_hessian: SymMatrix,
        retain_hessian: SymMatrix,
        full_step: DVector<f64>,
        retain_step: DVector<f64>,
        at_weights: DVector<f64>,
    ) -> Result<Self> {
        let p = at_weights.len();
        for got in [full_hessian.dim(), retain_hessian.dim(), full_step.len(), retain_step.len()] {
            if got != p {
                return Err(Error::DimensionMismatch { expected: p, got });
            }
        }
        Ok(QuadraticSurrogate {
            full_hessian,
            retain_hessian,
            full_step,
            retain_step,
            at_weights,
        })
    }

    /// Solves for both Newton steps. The full Hessian is inverted with its
    /// eigenvalues floored; the retain Hessian must clear the floor.
    pub fn from_gradients(
        full_hessian: SymMatrix,
        retain_hessian: SymMatrix,
        full_grad: &DVector<f64>,
        retain_grad: &DVector<f64>,
        at_weights: DVector<f64>,
        floor: f64,
    ) -> Result<Self> {
        check_floor(floor)?;
        let full_inv = inv_frac_power_from(&sym_eig(&full_hessian)?, InvPower::Inverse, floor)?;
        let retain_inv = retain_inverse(&retain_hessian, floor)?;
        let full_step = full_inv.mul_vec(full_grad)?;
        let retain_step = retain_inv.mul_vec(retain_grad)?;
        Self::new(full_hessian, retain_hessian, full_step, retain_step, at_weights)
    }

    /// Exact Hessians and gradients of `L_D` and `L_Dr` at `w`. Weight decay
    /// belongs to both.
    pub fn from_model(spec: &ModelSpec, w: &DVector<f64>, part: &Partition<'_>, floor: f64) -> Result<Self> {
        let all = part.all();
        let a = spec.hessian_on(w, part.data, &all, Decay::Include)?;
        let b = spec.hessian_on(w, part.data, &part.retain, Decay::Include)?;
        let g = spec.grad_on(w, part.data, &all, Decay::Include)?;
        let g_r = spec.grad_on(w, part.data, &part.retain, Decay::Include)?;
        Self::from_gradients(a, b, &g, &g_r, w.clone(), floor)
    }

    pub fn dim(&self) -> usize {
        self.at_weights.len()
    }
}

fn retain_inverse(b: &SymMatrix, floor: f64) -> Result<SymMatrix> {
    let eig = sym_eig(b)?;
    if eig.min_value() < floor {
        return Err(Error::SingularB(eig.min_value()));
    }
    inv_frac_power_from(&eig, InvPower::Inverse, floor)
}

/// `h(w) = w + E d + exp(-Bt) (d_r - d) - d_r` with `E = exp(-Bt) exp(At)`,
/// or `E = exp(clamp(A - B, 1/t) t)` when stabilized. The two exponentials
/// are never merged on the exact path since `A` and `B` need not commute.
pub fn quadratic_scrub(s: &QuadraticSurrogate, t: f64, stabilize: bool) -> Result<DVector<f64>> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::config("t", "must be finite and > 0"));
    }
    let b_eig = sym_eig(&s.retain_hessian)?;
    let decay_b = mat_exp_from(&b_eig, -t)?;
    let carried = if stabilize {
        let gap = clamp_eigs(&s.full_hessian.sub(&s.retain_hessian)?, 1.0 / t)?;
        mat_exp_from(&sym_eig(&gap)?, t)?.mul_vec(&s.full_step)?
    } else {
        let grow_a = mat_exp_from(&sym_eig(&s.full_hessian)?, t)?;
        decay_b.mul_vec(&grow_a.mul_vec(&s.full_step)?)?
    };
    let correction = decay_b.mul_vec(&(&s.retain_step - &s.full_step))?;
    Ok(&s.at_weights + carried + correction - &s.retain_step)
}

/// Which inverse power of the curvature shapes the noise.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseExponent {
    /// `-1/4`, the optimal-noise exponent.
    #[default]
    FourthRoot,
    /// `-1/2`.
    SquareRoot,
}

impl NoiseExponent {
    pub fn value(self) -> f64 {
        match self {
            NoiseExponent::FourthRoot => -0.25,
            NoiseExponent::SquareRoot => -0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScrubMethod {
    Identity,
    Robust,
    Newton,
    Fisher,
    Variational,
    Finetune,
    NegGrad,
    RandomLabels,
    Hiding,
}

impl ScrubMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ScrubMethod::Identity => "identity",
            ScrubMethod::Robust => "robust",
            ScrubMethod::Newton => "newton",
            ScrubMethod::Fisher => "fisher",
            ScrubMethod::Variational => "variational",
            ScrubMethod::Finetune => "finetune",
            ScrubMethod::NegGrad => "neg_grad",
            ScrubMethod::RandomLabels => "random_labels",
            ScrubMethod::Hiding => "hiding",
        }
    }
}

/// Output of a scrub: sampled weights, the center they were drawn around and
/// the noise covariance (absent for deterministic procedures).
#[derive(Debug, Clone, PartialEq)]
pub struct ScrubResult {
    pub weights: WeightVector,
    pub center: DVector<f64>,
    pub noise_cov: Option<Covariance>,
    pub method: ScrubMethod,
    pub lambda: f64,
    pub sigma_h: f64,
    pub t: Option<f64>,
    pub exponent: Option<f64>,
    /// Class masked at prediction time.
    pub hidden_class: Option<usize>,
}

impl ScrubResult {
    fn deterministic(spec: &ModelSpec, w: DVector<f64>, method: ScrubMethod) -> Result<Self> {
        Ok(ScrubResult {
            center: w.clone(),
            weights: WeightVector::new(spec, w)?,
            noise_cov: None,
            method,
            lambda: 0.0,
            sigma_h: 0.0,
            t: None,
            exponent: None,
            hidden_class: None,
        })
    }

    pub fn sidecar(&self) -> ScrubSidecar {
        let noise_cov = self.noise_cov.as_ref().map(|c| match c {
            Covariance::Diagonal(d) => NoiseCovRecord::Diagonal {
                variances: d.iter().copied().collect(),
            },
            Covariance::Full(m) => match sym_eig(m) {
                Ok(eig) => NoiseCovRecord::Eigen {
                    eigenvalues: eig.values.iter().copied().collect(),
                    eigenvectors: eig.vectors.column_iter().map(|c| c.iter().copied().collect()).collect(),
                },
                Err(_) => NoiseCovRecord::Dense {
                    rows: m.as_matrix().row_iter().map(|r| r.iter().copied().collect()).collect(),
                },
            },
        });
        ScrubSidecar {
            method: self.method,
            model_id: self.weights.model_id.clone(),
            lambda: self.lambda,
            sigma_h: self.sigma_h,
            t: self.t,
            exponent: self.exponent,
            hidden_class: self.hidden_class,
            center: self.center.iter().copied().collect(),
            noise_cov,
        }
    }

    pub fn from_sidecar(weights: WeightVector, side: &ScrubSidecar) -> Result<Self> {
        if side.center.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: weights.len(),
                got: side.center.len(),
            });
        }
        let noise_cov = side.noise_cov.as_ref().map(|r| r.to_covariance()).transpose()?;
        Ok(ScrubResult {
            center: DVector::from_column_slice(&side.center),
            weights,
            noise_cov,
            method: side.method,
            lambda: side.lambda,
            sigma_h: side.sigma_h,
            t: side.t,
            exponent: side.exponent,
            hidden_class: side.hidden_class,
        })
    }
}

/// JSON companion of a scrubbed checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScrubSidecar {
    pub method: ScrubMethod,
    pub model_id: String,
    pub lambda: f64,
    pub sigma_h: f64,
    pub t: Option<f64>,
    pub exponent: Option<f64>,
    pub hidden_class: Option<usize>,
    pub center: Vec<f64>,
    pub noise_cov: Option<NoiseCovRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum NoiseCovRecord {
    Diagonal {
        variances: Vec<f64>,
    },
    /// `Sigma = V diag(values) V^T`; `eigenvectors[j]` is the j-th column.
    Eigen {
        eigenvalues: Vec<f64>,
        eigenvectors: Vec<Vec<f64>>,
    },
    Dense {
        rows: Vec<Vec<f64>>,
    },
}

impl NoiseCovRecord {
    pub fn to_covariance(&self) -> Result<Covariance> {
        match self {
            NoiseCovRecord::Diagonal { variances } => Ok(Covariance::Diagonal(DVector::from_column_slice(variances))),
            NoiseCovRecord::Eigen { eigenvalues, eigenvectors } => {
                let p = eigenvalues.len();
                if eigenvectors.len() != p || eigenvectors.iter().any(|c| c.len() != p) {
                    return Err(Error::InvalidSpec("eigenvector record is not square".into()));
                }
                let v = DMatrix::from_fn(p, p, |r, c| eigenvectors[c][r]);
                let d = DMatrix::from_diagonal(&DVector::from_column_slice(eigenvalues));
                Ok(Covariance::Full(SymMatrix::symmetrize(&v * d * v.transpose())?))
            }
            NoiseCovRecord::Dense { rows } => {
                let p = rows.len();
                if rows.iter().any(|r| r.len() != p) {
                    return Err(Error::InvalidSpec("covariance record is not square".into()));
                }
                Ok(Covariance::Full(SymMatrix::new(DMatrix::from_fn(p, p, |r, c| rows[r][c]))?))
            }
        }
    }
}

fn standard_normal(p: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(p, |_, _| rng.sample(StandardNormal))
}

fn check_noise_params(lambda: f64, sigma_h: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config("scrub.lambda", "must be finite and >= 0"));
    }
    if !(sigma_h > 0.0 && sigma_h.is_finite()) {
        return Err(Error::config("scrub.sigma_h", "must be finite and > 0"));
    }
    Ok(())
}

fn require_exact_hessian(spec: &ModelSpec, op: &'static str) -> Result<()> {
    match spec.kind {
        ModelKind::Quadratic { .. } | ModelKind::Logistic { .. } => Ok(()),
        ModelKind::Mlp { .. } => Err(Error::UnsupportedModel {
            op,
            model: spec.model_id(),
        }),
    }
}

/// Covariance `sqrt(lambda sigma_h^2) B^-1/2` and its square-root factor
/// `(lambda sigma_h^2)^1/4 B^-1/4`, from the floored spectrum of `B`.
fn curvature_noise(b: &SymMatrix, lambda: f64, sigma_h: f64, floor: f64) -> Result<(Covariance, SymMatrix)> {
    let eig = sym_eig(b)?;
    let scale = (lambda * sigma_h * sigma_h).sqrt();
    let cov = inv_frac_power_from(&eig, InvPower::InvSqrt, floor)?.scale(scale);
    let factor = inv_frac_power_from(&eig, InvPower::InvFourthRoot, floor)?.scale(scale.sqrt());
    Ok((Covariance::Full(cov), factor))
}

/// `w - B^-1 grad L_Dr(w) + (lambda sigma_h^2)^1/4 B^-1/4 eps`. With
/// `lambda = 0` the step is noiseless and no covariance is recorded.
pub fn newton_scrub(spec: &ModelSpec, w: &DVector<f64>, part: &Partition<'_>, lambda: f64, sigma_h: f64, seed: u64) -> Result<ScrubResult> {
    require_exact_hessian(spec, "newton_scrub")?;
    check_noise_params(lambda, sigma_h)?;
    let b = spec.hessian_on(w, part.data, &part.retain, Decay::Include)?;
    let g_r = spec.grad_on(w, part.data, &part.retain, Decay::Include)?;
    let center = w - retain_inverse(&b, DEFAULT_EIG_FLOOR)?.mul_vec(&g_r)?;
    noisy_result(spec, center, &b, lambda, sigma_h, seed, ScrubMethod::Newton, None)
}

/// The time-dependent quadratic scrub plus curvature-shaped noise.
#[allow(clippy::too_many_arguments)]
pub fn robust_scrub(
    spec: &ModelSpec,
    w: &DVector<f64>,
    part: &Partition<'_>,
    t: f64,
    stabilize: bool,
    lambda: f64,
    sigma_h: f64,
    seed: u64,
) -> Result<ScrubResult> {
    require_exact_hessian(spec, "robust_scrub")?;
    check_noise_params(lambda, sigma_h)?;
    let surrogate = QuadraticSurrogate::from_model(spec, w, part, DEFAULT_EIG_FLOOR)?;
    let center = quadratic_scrub(&surrogate, t, stabilize)?;
    noisy_result(
        spec,
        center,
        &surrogate.retain_hessian,
        lambda,
        sigma_h,
        seed,
        ScrubMethod::Robust,
        Some(t),
    )
}

#[allow(clippy::too_many_arguments)]
fn noisy_result(
    spec: &ModelSpec,
    center: DVector<f64>,
    b: &SymMatrix,
    lambda: f64,
    sigma_h: f64,
    seed: u64,
    method: ScrubMethod,
    t: Option<f64>,
) -> Result<ScrubResult> {
    let (weights, noise_cov) = if lambda > 0.0 {
        let (cov, factor) = curvature_noise(b, lambda, sigma_h, DEFAULT_EIG_FLOOR)?;
        let noise = factor.mul_vec(&standard_normal(center.len(), seed))?;
        (&center + noise, Some(cov))
    } else {
        (center.clone(), None)
    };
    Ok(ScrubResult {
        weights: WeightVector::new(spec, weights)?,
        center,
        noise_cov,
        method,
        lambda,
        sigma_h,
        t,
        exponent: Some(-0.25),
        hidden_class: None,
    })
}

/// `w + n` with independent per-weight noise of stddev
/// `(lambda sigma_h^2)^1/4 max(F_ii, floor)^exponent`, `F` the diagonal
/// Fisher information on the retain samples.
#[allow(clippy::too_many_arguments)]
pub fn fisher_scrub(
    spec: &ModelSpec,
    w: &DVector<f64>,
    part: &Partition<'_>,
    lambda: f64,
    sigma_h: f64,
    exponent: NoiseExponent,
    floor: f64,
    seed: u64,
) -> Result<ScrubResult> {
    check_noise_params(lambda, sigma_h)?;
    check_floor(floor)?;
    let fim = spec.fim_on(w, part.data, &part.retain, FisherForm::Diagonal)?;
    let (weights, noise_cov) = if lambda > 0.0 {
        let scale = (lambda * sigma_h * sigma_h).powf(0.25);
        let stddev = fim.diagonal().map(|f| scale * f.max(floor).powf(exponent.value()));
        let noise = standard_normal(w.len(), seed).component_mul(&stddev);
        (w + noise, Some(Covariance::Diagonal(stddev.map(|s| s * s))))
    } else {
        (w.clone(), None)
    };
    Ok(ScrubResult {
        weights: WeightVector::new(spec, weights)?,
        center: w.clone(),
        noise_cov,
        method: ScrubMethod::Fisher,
        lambda,
        sigma_h,
        t: None,
        exponent: Some(exponent.value()),
        hidden_class: None,
    })
}

/// Adam on per-weight log-stddevs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariationalConfig {
    pub steps: usize,
    pub draws: usize,
    pub learning_rate: f64,
    /// Initial stddev is `init_scale * (1 + |w_i|)`.
    pub init_scale: f64,
    /// Fraction of final steps whose log-stddevs are averaged into the result.
    pub tail_fraction: f64,
}

impl Default for VariationalConfig {
    fn default() -> Self {
        VariationalConfig {
            steps: 500,
            draws: 4,
            learning_rate: 0.01,
            init_scale: 0.01,
            tail_fraction: 0.5,
        }
    }
}

impl VariationalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("scrub.optimizer.steps", "must be >= 1"));
        }
        if self.draws == 0 {
            return Err(Error::config("scrub.optimizer.draws", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("scrub.optimizer.learning_rate", "must be finite and > 0"));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config("scrub.optimizer.init_scale", "must be finite and > 0"));
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return Err(Error::config("scrub.optimizer.tail_fraction", "must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Minimizes `E[L_Dr(w + sigma * eps)] - lambda * sum_i 2 ln sigma_i` over a
/// diagonal noise covariance, then draws one sample around `w`.
pub fn variational_scrub(
    spec: &ModelSpec,
    w: &DVector<f64>,
    part: &Partition<'_>,
    lambda: f64,
    cfg: &VariationalConfig,
    seed: u64,
) -> Result<ScrubResult> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::config("scrub.lambda", "must be finite and > 0"));
    }
    cfg.validate()?;
    let p = w.len();
    let (beta1, beta2, eps_adam) = (0.9, 0.999, 1e-8);
    let mut log_sd = w.map(|v| (cfg.init_scale * (1.0 + v.abs())).ln());
    let mut m = DVector::zeros(p);
    let mut v = DVector::<f64>::zeros(p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed_stream(seed, 0));
    let tail_start = cfg.steps - ((cfg.steps as f64 * cfg.tail_fraction).ceil() as usize).clamp(1, cfg.steps);
    let mut tail_sum = DVector::zeros(p);

    for step in 1..=cfg.steps {
        let sd = log_sd.map(f64::exp);
        let mut grad = DVector::from_element(p, -2.0 * lambda);
        for _ in 0..cfg.draws {
            let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let point = w + sd.component_mul(&z);
            let g = spec.grad_on(&point, part.data, &part.retain, Decay::Include)?;
            // d/ds_i of L(w + e^s * z) = g_i * sigma_i * z_i
            grad += g.component_mul(&sd).component_mul(&z) / cfg.draws as f64;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { epoch: step });
        }
        m = m * beta1 + &grad * (1.0 - beta1);
        v = v * beta2 + grad.map(|g| g * g) * (1.0 - beta2);
        let m_hat = &m / (1.0 - beta1.powi(step as i32));
        let v_hat = &v / (1.0 - beta2.powi(step as i32));
        log_sd -= m_hat.zip_map(&v_hat, |a, b| cfg.learning_rate * a / (b.sqrt() + eps_adam));
        if log_sd.iter().any(|s| !s.is_finite() || *s > 700.0) {
            return Err(Error::Diverged { epoch: step });
        }
        if step > tail_start {
            tail_sum += &log_sd;
        }
    }
    let averaged = tail_sum / (cfg.steps - tail_start) as f64;
    let sd = averaged.map(f64::exp);
    let noise = standard_normal(p, seed_stream(seed, 1)).component_mul(&sd);
    Ok(ScrubResult {
        weights: WeightVector::new(spec, w + noise)?,
        center: w.clone(),
        noise_cov: Some(Covariance::Diagonal(sd.map(|s| s * s))),
        method: ScrubMethod::Variational,
        lambda,
        sigma_h: 0.0,
        t: None,
        exponent: None,
        hidden_class: None,
    })
}

/// Hessian of the full loss stored at training time.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianCache {
    pub hessian: SymMatrix,
    pub at_weights: DVector<f64>,
}

/// Largest tolerated `|grad L_D|_inf` for treating `w` as a minimum.
pub fn minimum_tolerance(w: &DVector<f64>) -> f64 {
    1e-3 * (1.0 + w.amax())
}

/// Recovers retain-side gradient and Hessian from forget-side quantities:
/// at a minimum of `L_D`, `grad L_Dr = -grad L_Df` and
/// `hess L_Dr = hess L_D - hess L_Df`.
pub fn subset_identities(
    grad_forget: &DVector<f64>,
    cache: &HessianCache,
    hessian_forget: &SymMatrix,
    full_grad_norm: f64,
) -> Result<(DVector<f64>, SymMatrix)> {
    let p = cache.at_weights.len();
    for got in [grad_forget.len(), cache.hessian.dim(), hessian_forget.dim()] {
        if got != p {
            return Err(Error::DimensionMismatch { expected: p, got });
        }
    }
    let tolerance = minimum_tolerance(&cache.at_weights);
    if !(full_grad_norm <= tolerance) {
        return Err(Error::NotAtMinimum {
            grad_norm: full_grad_norm,
            tolerance,
        });
    }
    Ok((-grad_forget, cache.hessian.sub(hessian_forget)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Finetune,
    NegGrad,
    RandomLabels,
    Hiding,
}

impl Baseline {
    pub fn method(self) -> ScrubMethod {
        match self {
            Baseline::Finetune => ScrubMethod::Finetune,
            Baseline::NegGrad => ScrubMethod::NegGrad,
            Baseline::RandomLabels => ScrubMethod::RandomLabels,
            Baseline::Hiding => ScrubMethod::Hiding,
        }
    }
}

fn hide_class(spec: &ModelSpec, w: &DVector<f64>, split: &ForgetSplit) -> Result<ScrubResult> {
    let class = split.whole_class().ok_or(Error::HidingRequiresWholeClass)?;
    let mut r = ScrubResult::deterministic(spec, w.clone(), ScrubMethod::Hiding)?;
    r.hidden_class = Some(class);
    Ok(r)
}

const RELABEL_STREAM: u64 = 2;

/// The non-noisy comparison methods. Training-based ones start from `w` and
/// use `cfg` for the step size, batch size, epoch budget and order seed.
pub fn baseline_scrub(kind: Baseline, spec: &ModelSpec, w: &DVector<f64>, split: &ForgetSplit, cfg: &TrainConfig) -> Result<ScrubResult> {
    spec.check_weights(w)?;
    let keep_going = |_: usize, _: &DVector<f64>| ControlFlow::Continue(());
    match kind {
        Baseline::Hiding => hide_class(spec, w, split),
        Baseline::Finetune => {
            let trace = run_sgd(spec, &split.partition(), cfg, w.clone(), SampleRule::Standard, keep_going)?;
            ScrubResult::deterministic(spec, trace.final_weights.values, ScrubMethod::Finetune)
        }
        Baseline::NegGrad => {
            let cap = (spec.classes().max(2) as f64).ln();
            let trace = run_sgd(spec, &split.partition(), cfg, w.clone(), SampleRule::NegGrad { cap }, keep_going)?;
            ScrubResult::deterministic(spec, trace.final_weights.values, ScrubMethod::NegGrad)
        }
        Baseline::RandomLabels => {
            let relabeled = relabel_forget(split, cfg.seed)?;
            let trace = run_sgd(
                spec,
                &Partition::retain_all(&relabeled),
                cfg,
                w.clone(),
                SampleRule::Standard,
                keep_going,
            )?;
            ScrubResult::deterministic(spec, trace.final_weights.values, ScrubMethod::RandomLabels)
        }
    }
}

/// The split's dataset with every forget label redrawn uniformly over the classes.
pub fn relabel_forget(split: &ForgetSplit, seed: u64) -> Result<crate::data::Dataset> {
    let ds = split.dataset();
    let mut rng = ChaCha8Rng::seed_from_u64(seed_stream(seed, RELABEL_STREAM));
    let mut labels = ds.labels().to_vec();
    for &i in split.forget_indices() {
        labels[i] = rng.random_range(0..ds.classes());
    }
    ds.with_labels(labels)
}

/// A scrub procedure with its hyperparameters, as read from configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScrubConfig {
    Identity,
    Robust {
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default = "default_sigma_h")]
        sigma_h: f64,
        /// Scrub time; defaults to the training run's equivalent flow time.
        #[serde(default)]
        t: Option<f64>,
        #[serde(default = "default_true")]
        stabilize: bool,
    },
    Newton {
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default = "default_sigma_h")]
        sigma_h: f64,
    },
    Fisher {
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default = "default_sigma_h")]
        sigma_h: f64,
        #[serde(default)]
        exponent: NoiseExponent,
        #[serde(default = "default_floor")]
        floor: f64,
    },
    Variational {
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default)]
        optimizer: VariationalConfig,
    },
    Finetune {
        train: TrainConfig,
    },
    NegGrad {
        train: TrainConfig,
    },
    RandomLabels {
        train: TrainConfig,
    },
    Hiding,
}

/// Usually far too small for the toy problems in `configs/`; sweep it.
fn default_lambda() -> f64 {
    5e-7
}

fn default_sigma_h() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

fn default_floor() -> f64 {
    DEFAULT_EIG_FLOOR
}

impl ScrubConfig {
    pub fn method(&self) -> ScrubMethod {
        match self {
            ScrubConfig::Identity => ScrubMethod::Identity,
            ScrubConfig::Robust { .. } => ScrubMethod::Robust,
            ScrubConfig::Newton { .. } => ScrubMethod::Newton,
            ScrubConfig::Fisher { .. } => ScrubMethod::Fisher,
            ScrubConfig::Variational { .. } => ScrubMethod::Variational,
            ScrubConfig::Finetune { .. } => ScrubMethod::Finetune,
            ScrubConfig::NegGrad { .. } => ScrubMethod::NegGrad,
            ScrubConfig::RandomLabels { .. } => ScrubMethod::RandomLabels,
            ScrubConfig::Hiding => ScrubMethod::Hiding,
        }
    }

    pub fn baseline(&self) -> Option<(Baseline, Option<&TrainConfig>)> {
        match self {
            ScrubConfig::Finetune { train } => Some((Baseline::Finetune, Some(train))),
            ScrubConfig::NegGrad { train } => Some((Baseline::NegGrad, Some(train))),
            ScrubConfig::RandomLabels { train } => Some((Baseline::RandomLabels, Some(train))),
            ScrubConfig::Hiding => Some((Baseline::Hiding, None)),
            _ => None,
        }
    }

    /// Methods whose output carries a noise covariance (for positive lambda).
    pub fn is_noisy(&self) -> bool {
        matches!(
            self,
            ScrubConfig::Robust { .. } | ScrubConfig::Newton { .. } | ScrubConfig::Fisher { .. } | ScrubConfig::Variational { .. }
        )
    }

    pub fn lambda(&self) -> Option<f64> {
        match self {
            ScrubConfig::Robust { lambda, .. }
            | ScrubConfig::Newton { lambda, .. }
            | ScrubConfig::Fisher { lambda, .. }
            | ScrubConfig::Variational { lambda, .. } => Some(*lambda),
            _ => None,
        }
    }

    /// Same method with a different lambda; a no-op for methods without one.
    pub fn with_lambda(&self, value: f64) -> ScrubConfig {
        let mut out = self.clone();
        match &mut out {
            ScrubConfig::Robust { lambda, .. }
            | ScrubConfig::Newton { lambda, .. }
            | ScrubConfig::Fisher { lambda, .. }
            | ScrubConfig::Variational { lambda, .. } => *lambda = value,
            _ => {}
        }
        out
    }

    /// Model-independent checks, done before any training starts.
    pub fn validate(&self) -> Result<()> {
        match self {
            ScrubConfig::Identity | ScrubConfig::Hiding => Ok(()),
            ScrubConfig::Robust { lambda, sigma_h, t, .. } => {
                check_noise_params(*lambda, *sigma_h)?;
                match t {
                    Some(t) if !(*t > 0.0 && t.is_finite()) => Err(Error::config("scrub.t", "must be finite and > 0")),
                    _ => Ok(()),
                }
            }
            ScrubConfig::Newton { lambda, sigma_h } => check_noise_params(*lambda, *sigma_h),
            ScrubConfig::Fisher {
                lambda, sigma_h, floor, ..
            } => {
                check_noise_params(*lambda, *sigma_h)?;
                if !(*floor > 0.0) {
                    return Err(Error::config("scrub.floor", "must be > 0"));
                }
                Ok(())
            }
            ScrubConfig::Variational { lambda, optimizer } => {
                if !(*lambda > 0.0 && lambda.is_finite()) {
                    return Err(Error::config("scrub.lambda", "must be finite and > 0"));
                }
                optimizer.validate()
            }
            ScrubConfig::Finetune { train } | ScrubConfig::NegGrad { train } | ScrubConfig::RandomLabels { train } => train.validate(),
        }
    }

    /// Checks that need the model and split.
    pub fn validate_for(&self, spec: &ModelSpec, split_is_whole_class: bool) -> Result<()> {
        self.validate()?;
        match self {
            ScrubConfig::Hiding if !split_is_whole_class => Err(Error::HidingRequiresWholeClass),
            ScrubConfig::Robust { .. } => require_exact_hessian(spec, "robust_scrub"),
            ScrubConfig::Newton { .. } => require_exact_hessian(spec, "newton_scrub"),
            ScrubConfig::Fisher { .. } | ScrubConfig::Hiding | ScrubConfig::NegGrad { .. } | ScrubConfig::RandomLabels { .. }
                if !spec.is_classifier() =>
            {
                Err(Error::UnsupportedModel {
                    op: self.method().as_str(),
                    model: spec.model_id(),
                })
            }
            _ => Ok(()),
        }
    }

    /// Applies a noise-based (or identity) scrub to `w` with respect to the
    /// retain/forget sides of `part`. `flow_time` fills in a missing robust
    /// scrub time. Baselines need a [`ForgetSplit`]; see [`Self::apply`].
    pub fn apply_noisy(&self, spec: &ModelSpec, w: &DVector<f64>, part: &Partition<'_>, flow_time: f64, seed: u64) -> Result<ScrubResult> {
        match self {
            ScrubConfig::Identity => ScrubResult::deterministic(spec, w.clone(), ScrubMethod::Identity),
            ScrubConfig::Robust {
                lambda,
                sigma_h,
                t,
                stabilize,
            } => robust_scrub(spec, w, part, t.unwrap_or(flow_time), *stabilize, *lambda, *sigma_h, seed),
            ScrubConfig::Newton { lambda, sigma_h } => newton_scrub(spec, w, part, *lambda, *sigma_h, seed),
            ScrubConfig::Fisher {
                lambda,
                sigma_h,
                exponent,
                floor,
            } => fisher_scrub(spec, w, part, *lambda, *sigma_h, *exponent, *floor, seed),
            ScrubConfig::Variational { lambda, optimizer } => variational_scrub(spec, w, part, *lambda, optimizer, seed),
            _ => Err(Error::NoiselessMethod(self.method().as_str())),
        }
    }

    /// Any scrub, applied to weights trained on the split's full dataset.
    pub fn apply(&self, spec: &ModelSpec, w: &DVector<f64>, split: &ForgetSplit, flow_time: f64, seed: u64) -> Result<ScrubResult> {
        match self.baseline() {
            Some((_, None)) => hide_class(spec, w, split),
            Some((kind, Some(train))) => baseline_scrub(kind, spec, w, split, &train.with_seed(seed)),
            None => self.apply_noisy(spec, w, &split.partition(), flow_time, seed),
        }
    }

    /// The reference scrub for weights trained on the retain set only: the
    /// same procedure, with nothing left to forget.
    pub fn apply_reference(
        &self,
        spec: &ModelSpec,
        w: &DVector<f64>,
        split: &ForgetSplit,
        flow_time: f64,
        seed: u64,
    ) -> Result<ScrubResult> {
        self.apply_noisy(
            spec,
            w,
            &Partition::retain_only(split.dataset(), split.retain_indices()),
            flow_time,
            seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_clusters, make_split, ClusterSpec, SplitRule};
    use crate::training::train_full;

    fn diag(v: &[f64]) -> SymMatrix {
        SymMatrix::from_diagonal(v).unwrap()
    }

    #[test]
    fn empty_forget_is_identity() {
        let b = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5])).unwrap();
        let d = DVector::from_vec(vec![0.3, -0.7]);
        let w = DVector::from_vec(vec![1.0, 2.0]);
        let s = QuadraticSurrogate::new(b.clone(), b, d.clone(), d, w.clone()).unwrap();
        for stabilize in [false, true] {
            let h = quadratic_scrub(&s, 1.5, stabilize).unwrap();
            assert!((h - &w).amax() < 1e-12);
        }
    }

    #[test]
    fn commuting_clamp_inactive_paths_agree() {
        // A - B = diag(0.1, -0.3) stays below 1/t for t = 2
        let a = diag(&[1.1, 0.2]);
        let b = diag(&[1.0, 0.5]);
        let s = QuadraticSurrogate::new(
            a,
            b,
            DVector::from_vec(vec![0.4, 0.1]),
            DVector::from_vec(vec![-0.2, 0.3]),
            DVector::from_vec(vec![0.0, 1.0]),
        )
        .unwrap();
        let exact = quadratic_scrub(&s, 2.0, false).unwrap();
        let stable = quadratic_scrub(&s, 2.0, true).unwrap();
        assert!((exact - stable).amax() < 1e-12);
    }

    #[test]
    fn term_by_term_formula() {
        let a = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[1.2, 0.3, 0.3, 0.8])).unwrap();
        let b = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[0.7, -0.1, -0.1, 0.4])).unwrap();
        let d = DVector::from_vec(vec![0.5, -0.25]);
        let d_r = DVector::from_vec(vec![0.1, 0.9]);
        let w = DVector::from_vec(vec![-1.0, 0.5]);
        let t = 0.7;
        let s = QuadraticSurrogate::new(a.clone(), b.clone(), d.clone(), d_r.clone(), w.clone()).unwrap();
        let eb = crate::linalgx::mat_exp(&b, -t).unwrap().into_matrix();
        let ea = crate::linalgx::mat_exp(&a, t).unwrap().into_matrix();
        let expected = &w + &eb * &ea * &d + &eb * (&d_r - &d) - &d_r;
        assert!((quadratic_scrub(&s, t, false).unwrap() - expected).amax() < 1e-10);
    }

    #[test]
    fn nonpositive_time_rejected() {
        let s = QuadraticSurrogate::new(diag(&[1.0]), diag(&[1.0]), DVector::zeros(1), DVector::zeros(1), DVector::zeros(1)).unwrap();
        assert!(quadratic_scrub(&s, 0.0, false).is_err());
    }

    fn quad(b: SymMatrix, w_star: &[f64]) -> ModelSpec {
        ModelSpec::quadratic(b, DVector::from_column_slice(w_star), 0.0).unwrap()
    }

    fn dummy_data() -> crate::data::Dataset {
        gen_clusters(
            &[
                ClusterSpec {
                    mean: vec![0.0],
                    stddev: 0.0,
                    count: 1,
                    label: 0,
                },
                ClusterSpec {
                    mean: vec![1.0],
                    stddev: 0.0,
                    count: 1,
                    label: 1,
                },
            ],
            0,
        )
        .unwrap()
    }

    #[test]
    fn noiseless_newton_solves_quadratic() {
        let b = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap();
        let spec = quad(b, &[3.0, -1.0]);
        let ds = dummy_data();
        let r = newton_scrub(&spec, &DVector::from_vec(vec![10.0, 7.0]), &Partition::retain_all(&ds), 0.0, 1.0, 0).unwrap();
        assert!((r.weights.values - DVector::from_vec(vec![3.0, -1.0])).amax() < 1e-12);
        assert!(r.noise_cov.is_none());
    }

    #[test]
    fn newton_noise_covariance_spectrum() {
        let spec = quad(diag(&[4.0, 1.0, 1e-12]), &[0.0, 0.0, 0.0]);
        let ds = dummy_data();
        // B has an eigenvalue below the floor, so the step is refused
        let err = newton_scrub(&spec, &DVector::zeros(3), &Partition::retain_all(&ds), 1.0, 1.0, 0).unwrap_err();
        assert!(matches!(err, Error::SingularB(_)));

        let spec = quad(diag(&[4.0, 1.0, 0.25]), &[0.0, 0.0, 0.0]);
        let r = newton_scrub(&spec, &DVector::zeros(3), &Partition::retain_all(&ds), 4.0, 1.0, 0).unwrap();
        let Some(Covariance::Full(cov)) = r.noise_cov else {
            panic!("expected full covariance")
        };
        let got = sym_eig(&cov).unwrap().values;
        // sqrt(4) * (0.25, 1, 4)^-1/2 sorted ascending
        let expected = [1.0, 2.0, 4.0];
        for (g, e) in got.iter().zip(expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    fn two_blobs() -> crate::data::Dataset {
        gen_clusters(
            &[
                ClusterSpec {
                    mean: vec![-1.0, 0.5],
                    stddev: 0.8,
                    count: 40,
                    label: 0,
                },
                ClusterSpec {
                    mean: vec![1.0, -0.5],
                    stddev: 0.8,
                    count: 40,
                    label: 1,
                },
                ClusterSpec {
                    mean: vec![0.0, 2.0],
                    stddev: 0.5,
                    count: 20,
                    label: 2,
                },
            ],
            4,
        )
        .unwrap()
    }

    fn quick_train() -> TrainConfig {
        TrainConfig {
            seed: 3,
            learning_rate: 0.05,
            batch_size: 10,
            epochs: 30,
            init: crate::training::Init::Uniform { scale: 0.1 },
            early_stop_epochs: None,
        }
    }

    #[test]
    fn fisher_noise_is_deterministic_and_monotone() {
        let ds = two_blobs();
        let spec = ModelSpec::logistic(2, 3, 0.01).unwrap();
        let w = train_full(&spec, &ds, &quick_train()).unwrap().final_weights.values;
        let part = Partition::retain_all(&ds);
        let a = fisher_scrub(&spec, &w, &part, 1e-3, 1.0, NoiseExponent::FourthRoot, 1e-8, 1).unwrap();
        let b = fisher_scrub(&spec, &w, &part, 1e-3, 1.0, NoiseExponent::FourthRoot, 1e-8, 2).unwrap();
        assert_eq!(a.noise_cov, b.noise_cov);
        assert_ne!(a.weights, b.weights);
        let f = spec.fim_on(&w, &ds, &part.retain, FisherForm::Diagonal).unwrap().diagonal();
        let Some(Covariance::Diagonal(var)) = a.noise_cov else { panic!() };
        for i in 0..f.len() {
            for j in 0..f.len() {
                if f[i] > f[j] {
                    assert!(var[i] < var[j]);
                }
            }
        }
        let none = fisher_scrub(&spec, &w, &part, 0.0, 1.0, NoiseExponent::SquareRoot, 1e-8, 1).unwrap();
        assert_eq!(none.weights.values, w);
    }

    #[test]
    fn fisher_floor_caps_stddev() {
        let ds = two_blobs();
        let spec = ModelSpec::mlp(2, vec![2], 3, 0.0).unwrap();
        // zero weights: hidden units are dead in the output layer, so some
        // Fisher entries vanish and the floor takes over
        let w = DVector::zeros(spec.param_count());
        let r = fisher_scrub(&spec, &w, &Partition::retain_all(&ds), 1.0, 1.0, NoiseExponent::FourthRoot, 1e-8, 0).unwrap();
        let Some(Covariance::Diagonal(var)) = r.noise_cov else { panic!() };
        let cap = (1e-8f64).powf(-0.25).powi(2);
        assert!(var.iter().all(|v| v.is_finite() && *v <= cap * (1.0 + 1e-12)));
        assert!(var.iter().any(|v| (v - cap).abs() < 1e-6 * cap));
    }

    #[test]
    fn variational_shrinks_with_lambda() {
        let spec = quad(diag(&[2.0, 0.5]), &[0.0, 0.0]);
        let ds = dummy_data();
        let part = Partition::retain_all(&ds);
        let small = variational_scrub(&spec, &DVector::zeros(2), &part, 1e-6, &VariationalConfig::default(), 0).unwrap();
        let large = variational_scrub(&spec, &DVector::zeros(2), &part, 1e-4, &VariationalConfig::default(), 0).unwrap();
        let (Some(Covariance::Diagonal(s)), Some(Covariance::Diagonal(l))) = (small.noise_cov, large.noise_cov) else {
            panic!()
        };
        assert!(s.iter().zip(l.iter()).all(|(a, b)| a < b));
    }

    #[test]
    fn subset_identities_guard_and_zero() {
        let cache = HessianCache {
            hessian: diag(&[2.0, 3.0]),
            at_weights: DVector::from_vec(vec![1.0, 1.0]),
        };
        let (g, h) = subset_identities(&DVector::zeros(2), &cache, &diag(&[0.5, 1.0]), 0.0).unwrap();
        assert_eq!(g, DVector::zeros(2));
        assert_eq!(h, diag(&[1.5, 2.0]));
        assert!(matches!(
            subset_identities(&DVector::zeros(2), &cache, &diag(&[0.5, 1.0]), 1.0),
            Err(Error::NotAtMinimum { .. })
        ));
    }

    #[test]
    fn hiding_needs_whole_class() {
        let ds = two_blobs();
        let spec = ModelSpec::logistic(2, 3, 0.0).unwrap();
        let w = DVector::zeros(spec.param_count());
        let split = make_split(&ds, SplitRule::CountFromClass { class: 2, count: 5 }).unwrap();
        assert!(matches!(
            baseline_scrub(Baseline::Hiding, &spec, &w, &split, &quick_train()),
            Err(Error::HidingRequiresWholeClass)
        ));
        let split = make_split(&ds, SplitRule::WholeClass { class: 2 }).unwrap();
        let r = baseline_scrub(Baseline::Hiding, &spec, &w, &split, &quick_train()).unwrap();
        assert_eq!(r.hidden_class, Some(2));
        let p = spec.predict_proba(&r.weights.values, ds.sample(0).0, r.hidden_class);
        assert_eq!(p[2], 0.0);
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_labels_reproducible() {
        let ds = two_blobs();
        let split = make_split(&ds, SplitRule::WholeClass { class: 2 }).unwrap();
        let a = relabel_forget(&split, 9).unwrap();
        let b = relabel_forget(&split, 9).unwrap();
        assert_eq!(a.labels(), b.labels());
        assert_eq!(&a.labels()[..80], &ds.labels()[..80]);
    }

    #[test]
    fn sidecar_round_trip() {
        let spec = quad(diag(&[4.0, 1.0]), &[0.0, 0.0]);
        let ds = dummy_data();
        let r = newton_scrub(&spec, &DVector::from_vec(vec![1.0, 1.0]), &Partition::retain_all(&ds), 0.5, 2.0, 7).unwrap();
        let json = serde_json::to_string(&r.sidecar()).unwrap();
        let side: ScrubSidecar = serde_json::from_str(&json).unwrap();
        let back = ScrubResult::from_sidecar(r.weights.clone(), &side).unwrap();
        let (Some(Covariance::Full(x)), Some(Covariance::Full(y))) = (&r.noise_cov, &back.noise_cov) else {
            panic!()
        };
        assert!((x.as_matrix() - y.as_matrix()).amax() < 1e-12);
        assert_eq!(back.method, ScrubMethod::Newton);
    }

    #[test]
    fn config_parses_with_defaults() {
        let cfg: ScrubConfig = serde_json::from_str(r#"{"method":"fisher","lambda":1e-6}"#).unwrap();
        assert_eq!(
            cfg,
            ScrubConfig::Fisher {
                lambda: 1e-6,
                sigma_h: 1.0,
                exponent: NoiseExponent::FourthRoot,
                floor: 1e-8
            }
        );
        assert!(serde_json::from_str::<ScrubConfig>(r#"{"method":"fisher","lambda":1e-6,"bogus":1}"#).is_err());
    }
}
