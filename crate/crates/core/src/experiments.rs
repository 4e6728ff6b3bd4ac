//! Multi-seed experiment pipelines: the weight-distribution demo, the
//! lambda and cohort-size sweeps, loss interpolation and relearn comparison.
//!
//! Each pipeline reports rows through a callback as they complete, so a
//! caller can flush partial output if a later step fails.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::{make_split, Dataset, ForgetSplit, SplitRule};
use crate::error::Result;
use crate::infobound::{bound_from_pairs, population_kl, scrub_pairs, train_pairs, Populations, ScrubbedPairs, TrainedPairs};
use crate::models::ModelSpec;
use crate::parallel::{map_seeds, Parallelism};
use crate::scrub::{ScrubConfig, ScrubMethod};
use crate::training::{
    linspace, loss_interpolation, relearn_time, train_full, train_retain, InterpolationPoint, RelearnConfig, TrainConfig,
};

pub const KL_AFTER_MAX_NATS: f64 = 1.0;
pub const KL_RATIO_MAX: f64 = 0.1;
pub const ERR_RETAIN_GAP_MAX_PP: f64 = 2.0;
/// Largest tolerated relative size of the single allowed inversion in a sweep.
pub const INVERSION_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    NonIncreasing,
    NonDecreasing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneCheck {
    pub trend: Trend,
    pub inversions: usize,
    /// Largest inversion relative to the larger of the two values involved.
    pub worst_relative: f64,
    pub ok: bool,
}

/// Accepts a sequence that follows `trend` up to one inversion of relative
/// size at most [`INVERSION_TOLERANCE`].
pub fn check_monotone(values: &[f64], trend: Trend) -> MonotoneCheck {
    let mut inversions = 0;
    let mut worst: f64 = 0.0;
    for pair in values.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let wrong = match trend {
            Trend::NonIncreasing => b - a,
            Trend::NonDecreasing => a - b,
        };
        let scale = a.abs().max(b.abs());
        if wrong > 0.0 && scale > 1e-12 {
            inversions += 1;
            worst = worst.max(wrong / scale);
        }
    }
    MonotoneCheck {
        trend,
        inversions,
        worst_relative: worst,
        ok: inversions == 0 || (inversions == 1 && worst <= INVERSION_TOLERANCE),
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => values[n / 2],
        _ => 0.5 * (values[n / 2 - 1] + values[n / 2]),
    }
}

/// Mean error rates (percent) of a population of scrub outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    pub err_test: Option<f64>,
    pub err_retain: f64,
    pub err_forget: f64,
}

fn scrubbed_errors(spec: &ModelSpec, split: &ForgetSplit, test: Option<&Dataset>, scrubbed: &ScrubbedPairs) -> Result<ErrorRates> {
    let ds = split.dataset();
    let mut test_err = Vec::new();
    let mut retain_err = Vec::new();
    let mut forget_err = Vec::new();
    for r in &scrubbed.scrubbed {
        let w = &r.weights.values;
        retain_err.push(spec.error_rate(w, ds, split.retain_indices(), r.hidden_class)?);
        forget_err.push(spec.error_rate(w, ds, split.forget_indices(), r.hidden_class)?);
        if let Some(t) = test {
            test_err.push(spec.error_rate(w, t, &t.all_indices(), r.hidden_class)?);
        }
    }
    Ok(ErrorRates {
        err_test: test.map(|_| mean(test_err.into_iter())),
        err_retain: mean(retain_err.into_iter()),
        err_forget: mean(forget_err.into_iter()),
    })
}

fn mean_retain_error(spec: &ModelSpec, split: &ForgetSplit, weights: &[DVector<f64>]) -> Result<f64> {
    let errs = weights
        .iter()
        .map(|w| spec.error_rate(w, split.dataset(), split.retain_indices(), None))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(errs.into_iter()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightKlRow {
    pub lambda: f64,
    pub kl_before: f64,
    pub kl_after: f64,
    pub err_retain_scrubbed: f64,
    pub err_retain_retrained: f64,
    pub err_forget_scrubbed: f64,
    pub err_test_scrubbed: Option<f64>,
    pub meets_targets: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightKlSummary {
    pub rows: Vec<WeightKlRow>,
    pub seeds: usize,
    /// Smallest lambda meeting every target.
    pub chosen_lambda: Option<f64>,
    pub kl_before: f64,
    pub kl_after: Option<f64>,
    pub err_retain_gap: Option<f64>,
    pub pass: bool,
}

/// Trains one population per side, then for every lambda scrubs it and
/// compares Gaussian fits of the scrubbed and reference weights.
#[allow(clippy::too_many_arguments)]
pub fn weight_kl_experiment(
    spec: &ModelSpec,
    split: &ForgetSplit,
    train: &TrainConfig,
    scrub: &ScrubConfig,
    lambdas: &[f64],
    seeds: &[u64],
    test: Option<&Dataset>,
    par: Parallelism,
    mut on_row: impl FnMut(&WeightKlRow),
) -> Result<WeightKlSummary> {
    let pairs = train_pairs(spec, split, train, seeds, par)?;
    let err_retrained = mean_retain_error(spec, split, &pairs.retrained)?;
    let mut rows = Vec::with_capacity(lambdas.len());
    let mut kl_before = f64::NAN;
    for &lambda in lambdas {
        let cfg = scrub.with_lambda(lambda);
        let scrubbed = scrub_pairs(spec, split, &cfg, &pairs, par)?;
        let kl = population_kl(&Populations::new(&pairs, &scrubbed))?;
        kl_before = kl.kl_before;
        let errs = scrubbed_errors(spec, split, test, &scrubbed)?;
        let meets_targets = kl.kl_after < KL_AFTER_MAX_NATS
            && kl.kl_after < KL_RATIO_MAX * kl.kl_before
            && (errs.err_retain - err_retrained).abs() <= ERR_RETAIN_GAP_MAX_PP;
        let row = WeightKlRow {
            lambda,
            kl_before: kl.kl_before,
            kl_after: kl.kl_after,
            err_retain_scrubbed: errs.err_retain,
            err_retain_retrained: err_retrained,
            err_forget_scrubbed: errs.err_forget,
            err_test_scrubbed: errs.err_test,
            meets_targets,
        };
        on_row(&row);
        rows.push(row);
    }
    let chosen = rows.iter().filter(|r| r.meets_targets).min_by(|a, b| a.lambda.total_cmp(&b.lambda));
    Ok(WeightKlSummary {
        seeds: seeds.len(),
        chosen_lambda: chosen.map(|r| r.lambda),
        kl_before,
        kl_after: chosen.map(|r| r.kl_after),
        err_retain_gap: chosen.map(|r| (r.err_retain_scrubbed - r.err_retain_retrained).abs()),
        pass: chosen.is_some(),
        rows,
    })
}

/// One point of a sweep: the swept value, the mean local bound and mean
/// error rates of the scrubbed models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub x: f64,
    pub nats: f64,
    pub err_test: Option<f64>,
    pub err_retain: f64,
    pub err_forget: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub nats_check: MonotoneCheck,
    /// Present for the lambda sweep only.
    pub err_retain_check: Option<MonotoneCheck>,
    pub pass: bool,
}

fn sweep_row(
    spec: &ModelSpec,
    split: &ForgetSplit,
    scrub: &ScrubConfig,
    pairs: &TrainedPairs,
    x: f64,
    test: Option<&Dataset>,
    par: Parallelism,
) -> Result<SweepRow> {
    let scrubbed = scrub_pairs(spec, split, scrub, pairs, par)?;
    let bound = bound_from_pairs(spec, scrub, &pairs.seeds, &scrubbed)?;
    let errs = scrubbed_errors(spec, split, test, &scrubbed)?;
    Ok(SweepRow {
        x,
        nats: bound.mean_nats,
        err_test: errs.err_test,
        err_retain: errs.err_retain,
        err_forget: errs.err_forget,
    })
}

/// Local bound and errors as lambda grows, on one trained population.
#[allow(clippy::too_many_arguments)]
pub fn lambda_sweep(
    spec: &ModelSpec,
    split: &ForgetSplit,
    train: &TrainConfig,
    scrub: &ScrubConfig,
    lambdas: &[f64],
    seeds: &[u64],
    test: Option<&Dataset>,
    par: Parallelism,
    mut on_row: impl FnMut(&SweepRow),
) -> Result<SweepSummary> {
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pairs = train_pairs(spec, split, train, seeds, par)?;
    let mut rows = Vec::with_capacity(sorted.len());
    for lambda in sorted {
        let row = sweep_row(spec, split, &scrub.with_lambda(lambda), &pairs, lambda, test, par)?;
        on_row(&row);
        rows.push(row);
    }
    let nats_check = check_monotone(&rows.iter().map(|r| r.nats).collect::<Vec<_>>(), Trend::NonIncreasing);
    let err_check = check_monotone(&rows.iter().map(|r| r.err_retain).collect::<Vec<_>>(), Trend::NonDecreasing);
    Ok(SweepSummary {
        pass: nats_check.ok && err_check.ok,
        nats_check,
        err_retain_check: Some(err_check),
        rows,
    })
}

/// Local bound at fixed lambda as more samples of `class` are forgotten.
#[allow(clippy::too_many_arguments)]
pub fn cohort_sweep(
    spec: &ModelSpec,
    data: &Dataset,
    class: usize,
    counts: &[usize],
    train: &TrainConfig,
    scrub: &ScrubConfig,
    seeds: &[u64],
    test: Option<&Dataset>,
    par: Parallelism,
    mut on_row: impl FnMut(&SweepRow),
) -> Result<SweepSummary> {
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let mut rows = Vec::with_capacity(sorted.len());
    for count in sorted {
        let split = make_split(data, SplitRule::CountFromClass { class, count })?;
        let pairs = train_pairs(spec, &split, train, seeds, par)?;
        let row = sweep_row(spec, &split, scrub, &pairs, count as f64, test, par)?;
        on_row(&row);
        rows.push(row);
    }
    let nats_check = check_monotone(&rows.iter().map(|r| r.nats).collect::<Vec<_>>(), Trend::NonDecreasing);
    Ok(SweepSummary {
        pass: nats_check.ok,
        nats_check,
        err_retain_check: None,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationSummary {
    pub rows: Vec<InterpolationPoint>,
    /// Every second difference of the loss on the grid is nonnegative
    /// (up to rounding).
    pub convex_on_grid: bool,
    pub distance: f64,
}

/// Full-data loss on the line through the model trained on `D` (t = 0) and
/// the one trained on `D_r` (t = 1), same seed.
pub fn interpolation(spec: &ModelSpec, split: &ForgetSplit, train: &TrainConfig, grid: &[f64]) -> Result<InterpolationSummary> {
    let w = train_full(spec, split.dataset(), train)?.final_weights.values;
    let w_r = train_retain(spec, split, train)?.final_weights.values;
    let rows = loss_interpolation(spec, &w, &w_r, split.dataset(), grid)?;
    let convex_on_grid = rows.windows(3).all(|r| {
        let curvature = r[0].loss - 2.0 * r[1].loss + r[2].loss;
        curvature >= -1e-9 * (1.0 + r[1].loss.abs())
    });
    Ok(InterpolationSummary {
        rows,
        convex_on_grid,
        distance: (w - w_r).norm(),
    })
}

/// `n` points spanning a margin beyond both endpoints of the unit segment.
pub fn interpolation_grid(n: usize) -> Vec<f64> {
    linspace(-0.5, 1.5, n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelearnRow {
    pub method: ScrubMethod,
    /// Per seed; unreached thresholds count as `max_epochs + 1`.
    pub epochs: Vec<usize>,
    pub median_epochs: f64,
}

/// Relearn time after each scrub, on models trained on the split's dataset.
pub fn relearn_comparison(
    spec: &ModelSpec,
    split: &ForgetSplit,
    train: &TrainConfig,
    methods: &[ScrubConfig],
    seeds: &[u64],
    relearn: &RelearnConfig,
    par: Parallelism,
) -> Result<Vec<RelearnRow>> {
    let trained = map_seeds(seeds, par, |seed| {
        Ok(train_full(spec, split.dataset(), &train.with_seed(seed))?.final_weights.values)
    })?;
    methods
        .iter()
        .map(|m| {
            let index: Vec<u64> = (0..seeds.len() as u64).collect();
            let epochs = map_seeds(&index, par, |i| {
                let i = i as usize;
                let scrubbed = m.apply(spec, &trained[i], split, train.flow_time(), seeds[i])?;
                let cfg = RelearnConfig {
                    seed: seeds[i],
                    ..relearn.clone()
                };
                Ok(relearn_time(spec, &scrubbed.weights.values, split, &cfg)?.rank(relearn.max_epochs))
            })?;
            let mut as_f64: Vec<f64> = epochs.iter().map(|&e| e as f64).collect();
            Ok(RelearnRow {
                method: m.method(),
                median_epochs: median(&mut as_f64),
                epochs,
            })
        })
        .collect()
}
