//! How much a scrubbed model still reveals about the forget set.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ForgetSplit, Partition};
use crate::error::{Error, Result};
use crate::linalgx::{gaussian_kl, inv_frac_power, sym_eig, Covariance, GaussianParams, InvPower, SymMatrix};
use crate::models::{entropy, Decay, ModelSpec};
use crate::parallel::{map_seeds, Parallelism};
use crate::scrub::{ScrubConfig, ScrubMethod, ScrubResult};
use crate::training::{relearn_time, train_full, train_retain, Relearn, RelearnConfig, TrainConfig};

/// Per-seed KL between the scrubbed output distributions of a model trained
/// with and without the forget set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoBoundReport {
    pub per_seed_nats: Vec<f64>,
    pub mean_nats: f64,
    pub seeds: Vec<u64>,
    pub method: ScrubMethod,
    pub lambda: Option<f64>,
    pub model_id: String,
}

impl InfoBoundReport {
    fn from_values(seeds: &[u64], per_seed_nats: Vec<f64>, scrub: &ScrubConfig, spec: &ModelSpec) -> Self {
        let mean_nats = per_seed_nats.iter().sum::<f64>() / per_seed_nats.len().max(1) as f64;
        InfoBoundReport {
            per_seed_nats,
            mean_nats,
            seeds: seeds.to_vec(),
            method: scrub.method(),
            lambda: scrub.lambda(),
            model_id: spec.model_id(),
        }
    }
}

/// Trains on `D` and `D_r` with each seed, scrubs both with the same
/// procedure (the retrained one with nothing to forget) and averages the
/// closed-form KL between the two Gaussian outputs.
pub fn local_bound(
    spec: &ModelSpec,
    split: &ForgetSplit,
    train: &TrainConfig,
    scrub: &ScrubConfig,
    seeds: &[u64],
    par: Parallelism,
) -> Result<InfoBoundReport> {
    if !scrub.is_noisy() {
        return Err(Error::NoiselessMethod(scrub.method().as_str()));
    }
    if seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required"));
    }
    scrub.validate_for(spec, split.whole_class().is_some())?;
    let pairs = train_pairs(spec, split, train, seeds, par)?;
    bound_from_pairs(spec, scrub, seeds, &scrub_pairs(spec, split, scrub, &pairs, par)?)
}

/// KL between the Gaussian output distributions of two noisy scrubs.
pub fn output_kl(p: &ScrubResult, q: &ScrubResult) -> Result<f64> {
    let (Some(cp), Some(cq)) = (&p.noise_cov, &q.noise_cov) else {
        return Err(Error::NoiselessMethod(p.method.as_str()));
    };
    gaussian_kl(
        &GaussianParams::new(p.center.clone(), cp.clone())?,
        &GaussianParams::new(q.center.clone(), cq.clone())?,
    )
}

/// Seed-aligned models trained with and without the forget set.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedPairs {
    pub seeds: Vec<u64>,
    /// Trained on `D`.
    pub original: Vec<DVector<f64>>,
    /// Trained on `D_r`.
    pub retrained: Vec<DVector<f64>>,
    /// Equivalent gradient-flow time of each run.
    pub flow_time: f64,
}

pub fn train_pairs(spec: &ModelSpec, split: &ForgetSplit, train: &TrainConfig, seeds: &[u64], par: Parallelism) -> Result<TrainedPairs> {
    train.validate()?;
    let runs = map_seeds(seeds, par, |seed| {
        let cfg = train.with_seed(seed);
        let w = train_full(spec, split.dataset(), &cfg)?.final_weights.values;
        let w_r = train_retain(spec, split, &cfg)?.final_weights.values;
        Ok((w, w_r))
    })?;
    let (original, retrained) = runs.into_iter().unzip();
    Ok(TrainedPairs {
        seeds: seeds.to_vec(),
        original,
        retrained,
        flow_time: train.flow_time(),
    })
}

/// Scrubbed outputs for every pair: the original model with the forget set,
/// the retrained one through the reference scrub.
#[derive(Debug, Clone, PartialEq)]
pub struct ScrubbedPairs {
    pub scrubbed: Vec<ScrubResult>,
    pub reference: Vec<ScrubResult>,
}

pub fn scrub_pairs(
    spec: &ModelSpec,
    split: &ForgetSplit,
    scrub: &ScrubConfig,
    pairs: &TrainedPairs,
    par: Parallelism,
) -> Result<ScrubbedPairs> {
    scrub.validate_for(spec, split.whole_class().is_some())?;
    let index: Vec<u64> = (0..pairs.seeds.len() as u64).collect();
    let runs = map_seeds(&index, par, |i| {
        let i = i as usize;
        let seed = pairs.seeds[i];
        let t = pairs.flow_time;
        let s = scrub.apply(spec, &pairs.original[i], split, t, seed)?;
        let s_r = match scrub.baseline() {
            // the retrained model has nothing to forget
            Some(_) => ScrubConfig::Identity.apply_noisy(spec, &pairs.retrained[i], &split.partition(), t, seed)?,
            None => scrub.apply_reference(spec, &pairs.retrained[i], split, t, seed)?,
        };
        Ok((s, s_r))
    })?;
    let (scrubbed, reference) = runs.into_iter().unzip();
    Ok(ScrubbedPairs { scrubbed, reference })
}

/// Mean per-seed output KL over already scrubbed pairs.
pub fn bound_from_pairs(spec: &ModelSpec, scrub: &ScrubConfig, seeds: &[u64], scrubbed: &ScrubbedPairs) -> Result<InfoBoundReport> {
    if !scrub.is_noisy() {
        return Err(Error::NoiselessMethod(scrub.method().as_str()));
    }
    let values = scrubbed
        .scrubbed
        .iter()
        .zip(&scrubbed.reference)
        .map(|(p, q)| output_kl(p, q))
        .collect::<Result<Vec<_>>>()?;
    Ok(InfoBoundReport::from_values(seeds, values, scrub, spec))
}

/// Weight samples from one seed population.
#[derive(Debug, Clone, PartialEq)]
pub struct Populations {
    pub seeds: Vec<u64>,
    /// Trained on `D`.
    pub original: Vec<DVector<f64>>,
    /// Trained on `D_r`.
    pub retrained: Vec<DVector<f64>>,
    /// `original`, scrubbed.
    pub scrubbed: Vec<DVector<f64>>,
    /// `retrained`, passed through the reference scrub.
    pub reference: Vec<DVector<f64>>,
}

impl Populations {
    pub fn new(pairs: &TrainedPairs, scrubbed: &ScrubbedPairs) -> Self {
        Populations {
            seeds: pairs.seeds.clone(),
            original: pairs.original.clone(),
            retrained: pairs.retrained.clone(),
            scrubbed: scrubbed.scrubbed.iter().map(|r| r.weights.values.clone()).collect(),
            reference: scrubbed.reference.iter().map(|r| r.weights.values.clone()).collect(),
        }
    }
}

pub fn scrub_populations(
    spec: &ModelSpec,
    split: &ForgetSplit,
    train: &TrainConfig,
    scrub: &ScrubConfig,
    seeds: &[u64],
    par: Parallelism,
) -> Result<Populations> {
    scrub.validate_for(spec, split.whole_class().is_some())?;
    let pairs = train_pairs(spec, split, train, seeds, par)?;
    let scrubbed = scrub_pairs(spec, split, scrub, &pairs, par)?;
    Ok(Populations::new(&pairs, &scrubbed))
}

/// Sample mean and covariance (`n - 1` denominator) plus `delta I` with
/// `delta = 1e-4 tr(cov) / p`, floored at `1e-12` so identical samples
/// still give a proper density.
pub fn fit_gaussian(samples: &[DVector<f64>]) -> Result<GaussianParams> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::DegenerateFit(n));
    }
    let p = samples[0].len();
    if let Some(bad) = samples.iter().find(|s| s.len() != p) {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: bad.len(),
        });
    }
    let mean = samples.iter().fold(DVector::zeros(p), |acc, s| acc + s) / n as f64;
    let mut cov = DMatrix::zeros(p, p);
    for s in samples {
        let c = s - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (n - 1) as f64;
    let delta = (1e-4 * cov.trace() / p as f64).max(1e-12);
    for i in 0..p {
        cov[(i, i)] += delta;
    }
    GaussianParams::new(mean, Covariance::Full(SymMatrix::symmetrize(cov)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightKl {
    pub kl_before: f64,
    pub kl_after: f64,
}

/// KL between Gaussian fits of the `D` and `D_r` weight populations, before
/// and after scrubbing.
pub fn population_kl(pops: &Populations) -> Result<WeightKl> {
    let kl_before = gaussian_kl(&fit_gaussian(&pops.original)?, &fit_gaussian(&pops.retrained)?)?;
    let kl_after = gaussian_kl(&fit_gaussian(&pops.scrubbed)?, &fit_gaussian(&pops.reference)?)?;
    Ok(WeightKl { kl_before, kl_after })
}

pub fn empirical_weight_kl(
    spec: &ModelSpec,
    split: &ForgetSplit,
    train: &TrainConfig,
    scrub: &ScrubConfig,
    seeds: &[u64],
    par: Parallelism,
) -> Result<WeightKl> {
    if seeds.len() < 2 {
        return Err(Error::DegenerateFit(seeds.len()));
    }
    population_kl(&scrub_populations(spec, split, train, scrub, seeds, par)?)
}

/// `E[L_Dr(center + n)] + lambda * kl_term`, the expectation estimated with
/// `draws` fresh samples of the recorded noise.
pub fn forgetting_lagrangian(
    spec: &ModelSpec,
    retain: &Partition<'_>,
    result: &ScrubResult,
    lambda: f64,
    kl_term: f64,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if draws == 0 {
        return Err(Error::config("draws", "must be >= 1"));
    }
    let loss_at = |w: &DVector<f64>| spec.loss_on(w, retain.data, &retain.retain, Decay::Include);
    let expected = match &result.noise_cov {
        None => loss_at(&result.weights.values)?,
        Some(cov) => {
            let factor = cov.sqrt_factor()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = result.center.len();
            let mut total = 0.0;
            for _ in 0..draws {
                let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
                total += loss_at(&(&result.center + &factor * z))?;
            }
            total / draws as f64
        }
    };
    Ok(expected + lambda * kl_term)
}

/// `sqrt(lambda sigma_h^2) B^-1/2`, checked against `Sigma B Sigma = lambda sigma_h^2 I`.
pub fn optimal_noise_check(b: &SymMatrix, sigma_h: f64, lambda: f64) -> Result<Covariance> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config("lambda", "must be finite and >= 0"));
    }
    if !(sigma_h > 0.0 && sigma_h.is_finite()) {
        return Err(Error::config("sigma_h", "must be finite and > 0"));
    }
    let lo = sym_eig(b)?.min_value();
    if !(lo > 0.0) {
        return Err(Error::SingularB(lo));
    }
    let target = lambda * sigma_h * sigma_h;
    let sigma = inv_frac_power(b, InvPower::InvSqrt, lo.min(crate::linalgx::DEFAULT_EIG_FLOOR))?.scale(target.sqrt());
    let residual = sigma.as_matrix() * b.as_matrix() * sigma.as_matrix() - DMatrix::identity(b.dim(), b.dim()) * target;
    if residual.amax() > 1e-8 * target.max(1.0) {
        return Err(Error::SingularB(lo));
    }
    Ok(Covariance::Full(sigma))
}

/// `1/2 tr(B Sigma) + lambda/2 tr(Sigma^-1 Sigma_h)` with `Sigma_h = sigma_h^2 I`:
/// the retain-loss increase from noise plus the weighted information term.
pub fn quadratic_noise_lagrangian(b: &SymMatrix, sigma: &Covariance, sigma_h: f64, lambda: f64) -> Result<f64> {
    let spread = sigma.trace_product(b)?;
    let inverse_trace = match sigma {
        Covariance::Diagonal(d) => d.iter().map(|v| 1.0 / v).sum::<f64>(),
        Covariance::Full(m) => inv_frac_power(m, InvPower::Inverse, f64::MIN_POSITIVE)?.as_matrix().trace(),
    };
    Ok(0.5 * spread + 0.5 * lambda * sigma_h * sigma_h * inverse_trace)
}

pub const ENTROPY_BINS: usize = 30;

/// Output-entropy counts on `ENTROPY_BINS` uniform bins over `[0, ln K]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyHistograms {
    pub edges: Vec<f64>,
    pub retain: Vec<usize>,
    pub forget: Vec<usize>,
    pub test: Vec<usize>,
}

impl EntropyHistograms {
    fn empty(classes: usize) -> Self {
        let top = (classes.max(2) as f64).ln();
        EntropyHistograms {
            edges: (0..=ENTROPY_BINS).map(|i| top * i as f64 / ENTROPY_BINS as f64).collect(),
            retain: vec![0; ENTROPY_BINS],
            forget: vec![0; ENTROPY_BINS],
            test: vec![0; ENTROPY_BINS],
        }
    }

    fn bin(&self, h: f64) -> usize {
        let top = self.edges[ENTROPY_BINS];
        let i = (h / top * ENTROPY_BINS as f64).floor();
        (i.max(0.0) as usize).min(ENTROPY_BINS - 1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,bin_right,count_retain,count_forget,count_test\n");
        for i in 0..ENTROPY_BINS {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.edges[i],
                self.edges[i + 1],
                self.retain[i],
                self.forget[i],
                self.test[i]
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutReport {
    pub err_test: Option<f64>,
    pub err_forget: f64,
    pub err_retain: f64,
    pub relearn_epochs: Option<Relearn>,
    pub entropy_histograms: EntropyHistograms,
    pub info_bound: Option<InfoBoundReport>,
}

/// Error rates, relearn time and confidence histograms for a scrubbed model.
/// A hidden class is masked in every prediction.
pub fn readout(
    spec: &ModelSpec,
    result: &ScrubResult,
    split: &ForgetSplit,
    test: Option<&Dataset>,
    relearn: Option<&RelearnConfig>,
) -> Result<ReadoutReport> {
    let w = &result.weights.values;
    let ds = split.dataset();
    let hidden = result.hidden_class;
    let err_forget = spec.error_rate(w, ds, split.forget_indices(), hidden)?;
    let err_retain = spec.error_rate(w, ds, split.retain_indices(), hidden)?;
    let err_test = test.map(|t| spec.error_rate(w, t, &t.all_indices(), hidden)).transpose()?;
    let relearn_epochs = relearn.map(|cfg| relearn_time(spec, w, split, cfg)).transpose()?;

    let mut hist = EntropyHistograms::empty(spec.classes());
    let mut fill = |data: &Dataset, idx: &[usize], which: fn(&mut EntropyHistograms) -> &mut Vec<usize>| {
        for &i in idx {
            let h = entropy(&spec.predict_proba(w, data.sample(i).0, hidden));
            let b = hist.bin(h);
            which(&mut hist)[b] += 1;
        }
    };
    fill(ds, split.retain_indices(), |h| &mut h.retain);
    fill(ds, split.forget_indices(), |h| &mut h.forget);
    if let Some(t) = test {
        fill(t, &t.all_indices(), |h| &mut h.test);
    }
    Ok(ReadoutReport {
        err_test,
        err_forget,
        err_retain,
        relearn_epochs,
        entropy_histograms: hist,
        info_bound: None,
    })
}
