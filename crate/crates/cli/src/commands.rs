use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::Serialize;
use serde_json::{json, Value};

use weightscrub::checkpoint;
use weightscrub::data::{to_csv_string, Dataset, SplitRule};
use weightscrub::experiments::{cohort_sweep, interpolation, interpolation_grid, lambda_sweep, relearn_comparison, weight_kl_experiment};
use weightscrub::infobound::{local_bound, readout};
use weightscrub::models::WeightVector;
use weightscrub::parallel::{map_seeds, Parallelism};
use weightscrub::scrub::{ScrubMethod, ScrubResult};
use weightscrub::training::{train_full, train_retain};

use crate::config::{self, Resolved};
use crate::output::{field, opt_field, OutDir, Provenance};
use crate::{CliError, Common, Experiment};

struct Run {
    resolved: Resolved,
    out: OutDir,
    provenance: Provenance,
    par: Parallelism,
}

impl Run {
    fn seeds(&self) -> &[u64] {
        &self.resolved.config.seeds
    }
}

fn start(common: &Common, command: &str) -> Result<Run, CliError> {
    let mut cfg = config::read(&common.config)?;
    if let Some(seeds) = &common.seeds {
        cfg.seeds = seeds.clone();
    }
    let base = common.config.parent().unwrap_or(Path::new("."));
    // validation happens before anything is written
    let resolved = cfg.resolve(base)?;
    let out = OutDir::create(&common.out)?;
    let provenance = Provenance::new(command, &resolved.config);
    Ok(Run {
        resolved,
        out,
        provenance,
        par: Parallelism::from_workers(common.workers),
    })
}

fn invalid(key: &str, constraint: &str) -> CliError {
    CliError::Core(weightscrub::Error::InvalidConfig {
        key: key.into(),
        constraint: constraint.into(),
    })
}

/// CSV text with a provenance comment right after the header line.
fn dataset_csv(ds: &Dataset, provenance: &Provenance) -> Result<String, CliError> {
    let text = to_csv_string(ds);
    let (header, rows) = text.split_once('\n').unwrap_or((&text, ""));
    Ok(format!("{header}\n# provenance: {}\n{rows}", serde_json::to_string(provenance)?))
}

pub fn gen_data(common: &Common) -> Result<(), CliError> {
    let run = start(common, "gen-data")?;
    let r = &run.resolved;
    run.out
        .write_atomic("dataset.csv", dataset_csv(&r.data, &run.provenance)?.as_bytes())?;
    if let Some(test) = &r.test {
        run.out.write_atomic("test.csv", dataset_csv(test, &run.provenance)?.as_bytes())?;
    }
    Ok(())
}

pub fn train(common: &Common, retain: bool) -> Result<(), CliError> {
    let command = if retain { "train --retain" } else { "train" };
    let run = start(common, command)?;
    let r = &run.resolved;
    let traces = map_seeds(run.seeds(), run.par, |seed| {
        let cfg = r.config.train.with_seed(seed);
        if retain {
            train_retain(&r.spec, &r.split, &cfg)
        } else {
            train_full(&r.spec, &r.data, &cfg)
        }
    })?;
    let stem = if retain { "retrained" } else { "model" };
    for (seed, trace) in run.seeds().iter().zip(&traces) {
        run.out
            .write_atomic(&format!("{stem}-seed{seed}.ckpt"), &checkpoint::encode(&trace.final_weights))?;
        let body = json!({
            "seed": seed,
            "retain_only": retain,
            "model_id": trace.final_weights.model_id,
            "epochs_run": trace.epochs_run,
            "final_loss": trace.epoch_losses.last(),
        });
        run.out.write_json(&format!("{stem}-seed{seed}.json"), &run.provenance, body)?;
    }
    Ok(())
}

fn load_weights(run: &Run, path: &Path) -> Result<DVector<f64>, CliError> {
    let w = checkpoint::load(path)?;
    let expected = run.resolved.spec.model_id();
    if w.model_id != expected {
        return Err(invalid(
            "--weights",
            &format!("holds a `{}` model but the config describes `{expected}`", w.model_id),
        ));
    }
    Ok(WeightVector::new(&run.resolved.spec, w.values)?.values)
}

/// The given checkpoint for every seed, or one freshly trained model per seed.
fn starting_weights(run: &Run, weights: Option<&Path>) -> Result<Vec<DVector<f64>>, CliError> {
    let r = &run.resolved;
    match weights {
        Some(path) => {
            let w = load_weights(run, path)?;
            Ok(vec![w; run.seeds().len()])
        }
        None => Ok(map_seeds(run.seeds(), run.par, |seed| {
            Ok(train_full(&r.spec, &r.data, &r.config.train.with_seed(seed))?.final_weights.values)
        })?),
    }
}

fn scrub_all(run: &Run, weights: Option<&Path>) -> Result<Vec<ScrubResult>, CliError> {
    let r = &run.resolved;
    let start = starting_weights(run, weights)?;
    let index: Vec<u64> = (0..start.len() as u64).collect();
    let flow_time = r.config.train.flow_time();
    Ok(map_seeds(&index, run.par, |i| {
        let i = i as usize;
        r.config.scrub.apply(&r.spec, &start[i], &r.split, flow_time, run.seeds()[i])
    })?)
}

#[derive(Serialize)]
struct ScrubSidecar {
    seed: u64,
    source: Option<PathBuf>,
    model_id: String,
    method: ScrubMethod,
    lambda: f64,
    sigma_h: f64,
    t: Option<f64>,
    exponent: Option<f64>,
    hidden_class: Option<usize>,
    mean_noise_variance: Option<f64>,
}

pub fn scrub(common: &Common, weights: Option<&Path>) -> Result<(), CliError> {
    let run = start(common, "scrub")?;
    let results = scrub_all(&run, weights)?;
    for (&seed, res) in run.seeds().iter().zip(&results) {
        run.out
            .write_atomic(&format!("scrubbed-seed{seed}.ckpt"), &checkpoint::encode(&res.weights))?;
        let sidecar = ScrubSidecar {
            seed,
            source: weights.map(Path::to_path_buf),
            model_id: res.weights.model_id.clone(),
            method: res.method,
            lambda: res.lambda,
            sigma_h: res.sigma_h,
            t: res.t,
            exponent: res.exponent,
            hidden_class: res.hidden_class,
            mean_noise_variance: res
                .noise_cov
                .as_ref()
                .map(|c| c.to_full().into_matrix().trace() / c.dim().max(1) as f64),
        };
        run.out.write_json(&format!("scrubbed-seed{seed}.json"), &run.provenance, sidecar)?;
    }
    Ok(())
}

/// Reads `hidden_class` from the checkpoint's sidecar, if there is one.
fn sidecar_hidden_class(ckpt: &Path) -> Result<Option<usize>, CliError> {
    let path = ckpt.with_extension("json");
    let Ok(text) = std::fs::read_to_string(&path) else {
        return Ok(None);
    };
    let doc: Value = serde_json::from_str(&text)?;
    Ok(doc.get("hidden_class").and_then(Value::as_u64).map(|k| k as usize))
}

fn write_readout(run: &Run, stem: &str, res: &ScrubResult) -> Result<(), CliError> {
    let r = &run.resolved;
    let report = readout(&r.spec, res, &r.split, r.test.as_ref(), r.config.relearn.as_ref())?;
    run.out.write_json(&format!("readout{stem}.json"), &run.provenance, &report)?;
    let csv = format!(
        "# provenance: {}\n{}",
        serde_json::to_string(&run.provenance)?,
        report.entropy_histograms.to_csv()
    );
    run.out.write_atomic(&format!("entropy{stem}.csv"), csv.as_bytes())?;
    Ok(())
}

pub fn eval(common: &Common, weights: Option<&Path>) -> Result<(), CliError> {
    let run = start(common, "eval")?;
    match weights {
        Some(path) => {
            let w = load_weights(&run, path)?;
            let res = ScrubResult {
                weights: WeightVector::new(&run.resolved.spec, w.clone())?,
                center: w,
                noise_cov: None,
                method: ScrubMethod::Identity,
                lambda: 0.0,
                sigma_h: 0.0,
                t: None,
                exponent: None,
                hidden_class: sidecar_hidden_class(path)?,
            };
            write_readout(&run, "", &res)
        }
        None => {
            let results = scrub_all(&run, None)?;
            for (seed, res) in run.seeds().iter().zip(&results) {
                write_readout(&run, &format!("-seed{seed}"), res)?;
            }
            Ok(())
        }
    }
}

pub fn bound(common: &Common) -> Result<(), CliError> {
    let run = start(common, "bound")?;
    let r = &run.resolved;
    let report = local_bound(&r.spec, &r.split, &r.config.train, &r.config.scrub, run.seeds(), run.par)?;
    run.out.write_json("bound.json", &run.provenance, &report)?;
    println!("{}", json!({ "mean_nats": report.mean_nats, "seeds": report.seeds.len() }));
    Ok(())
}

/// Streams rows to the CSV; a write failure is kept and reported after the run.
struct RowSink {
    rows: crate::output::CsvRows,
    failed: Option<CliError>,
}

impl RowSink {
    fn push(&mut self, fields: Vec<String>) {
        if self.failed.is_none() {
            if let Err(e) = self.rows.row(&fields) {
                self.failed = Some(e);
            }
        }
    }

    fn finish(self) -> Result<(), CliError> {
        self.failed.map_or(Ok(()), Err)
    }
}

fn split_class(rule: &SplitRule) -> Option<usize> {
    match rule {
        SplitRule::WholeClass { class } | SplitRule::CountFromClass { class, .. } => Some(*class),
        SplitRule::ExplicitIndices { .. } => None,
    }
}

pub fn experiment(common: &Common, which: Experiment) -> Result<(), CliError> {
    let name = which.name();
    let run = start(common, &format!("experiment {name}"))?;
    let r = &run.resolved;
    let cfg = &r.config;
    let test = r.test.as_ref();
    let sink = |columns: &[&str]| -> Result<RowSink, CliError> {
        Ok(RowSink {
            rows: run.out.csv(&format!("{name}.csv"), &run.provenance, columns)?,
            failed: None,
        })
    };
    let sweep_columns = |x: &'static str| [x, "nats", "err_test", "err_retain", "err_forget"];
    let sweep_fields = |row: &weightscrub::experiments::SweepRow| {
        vec![
            field(row.x),
            field(row.nats),
            opt_field(row.err_test),
            field(row.err_retain),
            field(row.err_forget),
        ]
    };

    let (summary, pass): (Value, Option<bool>) = match which {
        Experiment::Fig1Logistic => {
            let mut out = sink(&[
                "lambda",
                "kl_before",
                "kl_after",
                "err_retain_scrubbed",
                "err_retain_retrained",
                "err_forget_scrubbed",
                "err_test_scrubbed",
                "meets_targets",
            ])?;
            let s = weight_kl_experiment(
                &r.spec,
                &r.split,
                &cfg.train,
                &cfg.scrub,
                &cfg.experiment.lambdas,
                run.seeds(),
                test,
                run.par,
                |row| {
                    out.push(vec![
                        field(row.lambda),
                        field(row.kl_before),
                        field(row.kl_after),
                        field(row.err_retain_scrubbed),
                        field(row.err_retain_retrained),
                        field(row.err_forget_scrubbed),
                        opt_field(row.err_test_scrubbed),
                        row.meets_targets.to_string(),
                    ])
                },
            )?;
            out.finish()?;
            (serde_json::to_value(&s)?, Some(s.pass))
        }
        Experiment::LambdaSweep => {
            let mut out = sink(&sweep_columns("lambda"))?;
            let s = lambda_sweep(
                &r.spec,
                &r.split,
                &cfg.train,
                &cfg.scrub,
                &cfg.experiment.lambdas,
                run.seeds(),
                test,
                run.par,
                |row| out.push(sweep_fields(row)),
            )?;
            out.finish()?;
            (serde_json::to_value(&s)?, Some(s.pass))
        }
        Experiment::CohortSweep => {
            let class = cfg
                .experiment
                .class
                .or_else(|| split_class(&cfg.split))
                .ok_or_else(|| invalid("experiment.class", "is required when the split lists explicit indices"))?;
            if cfg.experiment.counts.is_empty() {
                return Err(invalid("experiment.counts", "must list at least one forget-set size"));
            }
            let mut out = sink(&sweep_columns("count"))?;
            let s = cohort_sweep(
                &r.spec,
                &r.data,
                class,
                &cfg.experiment.counts,
                &cfg.train,
                &cfg.scrub,
                run.seeds(),
                test,
                run.par,
                |row| out.push(sweep_fields(row)),
            )?;
            out.finish()?;
            (serde_json::to_value(&s)?, Some(s.pass))
        }
        Experiment::Interpolation => {
            let mut out = sink(&["t", "loss", "error"])?;
            let train = cfg.train.with_seed(run.seeds()[0]);
            let s = interpolation(&r.spec, &r.split, &train, &interpolation_grid(cfg.experiment.grid_points))?;
            for p in &s.rows {
                out.push(vec![field(p.t), field(p.loss), opt_field(p.error)]);
            }
            out.finish()?;
            (serde_json::to_value(&s)?, None)
        }
        Experiment::Relearn => {
            let relearn = cfg
                .relearn
                .as_ref()
                .ok_or_else(|| invalid("relearn", "is required by the relearn experiment"))?;
            let methods = if cfg.experiment.methods.is_empty() {
                vec![cfg.scrub.clone()]
            } else {
                cfg.experiment.methods.clone()
            };
            let mut out = sink(&["method", "median_epochs", "epochs"])?;
            let rows = relearn_comparison(&r.spec, &r.split, &cfg.train, &methods, run.seeds(), relearn, run.par)?;
            for row in &rows {
                let epochs: Vec<String> = row.epochs.iter().map(usize::to_string).collect();
                out.push(vec![row.method.as_str().to_string(), field(row.median_epochs), epochs.join(";")]);
            }
            out.finish()?;
            (json!({ "rows": rows }), None)
        }
    };
    run.out.write_json(
        &format!("{name}.json"),
        &run.provenance,
        json!({ "experiment": name, "summary": summary, "pass": pass }),
    )?;
    println!("{}", json!({ "experiment": name, "pass": pass }));
    Ok(())
}
