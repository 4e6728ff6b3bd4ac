//! Run configuration: one TOML file per run, unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use weightscrub::data::{default_cluster_specs, gen_clusters, load_csv, make_split, ClusterSpec, Dataset, ForgetSplit, SplitRule};
use weightscrub::linalgx::SymMatrix;
use weightscrub::models::ModelSpec;
use weightscrub::scrub::{NoiseExponent, ScrubConfig};
use weightscrub::training::{RelearnConfig, TrainConfig};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    pub data: DataSource,
    /// Held-out data for test error and entropy readouts.
    #[serde(default)]
    pub test: Option<DataSource>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitRule,
    #[serde(default = "default_scrub")]
    pub scrub: ScrubConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub relearn: Option<RelearnConfig>,
    #[serde(default)]
    pub experiment: ExperimentSettings,
}

fn default_scrub() -> ScrubConfig {
    ScrubConfig::Fisher {
        lambda: 5e-7,
        sigma_h: 1.0,
        exponent: NoiseExponent::FourthRoot,
        floor: 1e-8,
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Gaussian clusters; the built-in two-class layout when `clusters` is absent.
    Clusters {
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        clusters: Option<Vec<ClusterSpec>>,
    },
    Csv {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Logistic {
        dim: usize,
        classes: usize,
        #[serde(default)]
        weight_decay: f64,
    },
    Mlp {
        dim: usize,
        hidden: Vec<usize>,
        classes: usize,
        #[serde(default)]
        weight_decay: f64,
    },
    /// `1/2 (w - minimizer)^T hessian (w - minimizer)`, data ignored.
    Quadratic {
        hessian: Vec<Vec<f64>>,
        minimizer: Vec<f64>,
        #[serde(default)]
        weight_decay: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSettings {
    /// Swept by `fig1_logistic` and `lambda_sweep`.
    pub lambdas: Vec<f64>,
    /// Forget-set sizes for `cohort_sweep`.
    pub counts: Vec<usize>,
    /// Class sampled by `cohort_sweep`; defaults to the split's class.
    pub class: Option<usize>,
    /// Points on the interpolation line, spanning [-0.5, 1.5].
    pub grid_points: usize,
    /// Procedures compared by `relearn`; the run's `scrub` when empty.
    pub methods: Vec<ScrubConfig>,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings {
            lambdas: vec![5e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2],
            counts: Vec::new(),
            class: None,
            grid_points: 41,
            methods: Vec::new(),
        }
    }
}

/// A validated configuration with its data loaded.
pub struct Resolved {
    pub config: Config,
    pub spec: ModelSpec,
    pub data: Dataset,
    pub test: Option<Dataset>,
    pub split: ForgetSplit,
}

pub fn read(path: &Path) -> Result<Config, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::ConfigParse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn invalid(key: &str, constraint: impl Into<String>) -> CliError {
    CliError::Core(weightscrub::Error::InvalidConfig {
        key: key.into(),
        constraint: constraint.into(),
    })
}

impl ModelConfig {
    pub fn build(&self) -> Result<ModelSpec, CliError> {
        Ok(match self {
            ModelConfig::Logistic {
                dim,
                classes,
                weight_decay,
            } => ModelSpec::logistic(*dim, *classes, *weight_decay)?,
            ModelConfig::Mlp {
                dim,
                hidden,
                classes,
                weight_decay,
            } => ModelSpec::mlp(*dim, hidden.clone(), *classes, *weight_decay)?,
            ModelConfig::Quadratic {
                hessian,
                minimizer,
                weight_decay,
            } => {
                let p = minimizer.len();
                if hessian.len() != p || hessian.iter().any(|row| row.len() != p) {
                    return Err(invalid("model.hessian", format!("must be {p} x {p} to match model.minimizer")));
                }
                let a = SymMatrix::new(DMatrix::from_fn(p, p, |i, j| hessian[i][j]))?;
                ModelSpec::quadratic(a, DVector::from_column_slice(minimizer), *weight_decay)?
            }
        })
    }
}

impl DataSource {
    /// Relative CSV paths resolve against the config file's directory.
    pub fn load(&self, base: &Path) -> Result<Dataset, CliError> {
        Ok(match self {
            DataSource::Clusters { seed, clusters } => {
                let specs = clusters.clone().unwrap_or_else(default_cluster_specs);
                gen_clusters(&specs, *seed)?
            }
            DataSource::Csv { path } => load_csv(base.join(path))?,
        })
    }
}

fn is_whole_class(rule: &SplitRule) -> bool {
    matches!(rule, SplitRule::WholeClass { .. })
}

impl Config {
    /// Checks every key that can be checked without data.
    pub fn validate(&self) -> Result<ModelSpec, CliError> {
        if self.version != CONFIG_VERSION {
            return Err(invalid("version", format!("must be {CONFIG_VERSION}, got {}", self.version)));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "must list at least one seed"));
        }
        let spec = self.model.build()?;
        self.train.validate()?;
        self.scrub.validate_for(&spec, is_whole_class(&self.split))?;
        if let Some(r) = &self.relearn {
            if r.max_epochs == 0 || r.batch_size == 0 || !(r.learning_rate > 0.0 && r.learning_rate.is_finite()) {
                return Err(invalid("relearn", "needs learning_rate > 0, batch_size >= 1 and max_epochs >= 1"));
            }
        }
        if self.experiment.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(invalid("experiment.lambdas", "must be finite and >= 0"));
        }
        for m in &self.experiment.methods {
            m.validate_for(&spec, is_whole_class(&self.split))?;
        }
        if self.experiment.grid_points < 3 {
            return Err(invalid("experiment.grid_points", "must be >= 3"));
        }
        Ok(spec)
    }

    /// Validates, loads the data and builds the split.
    pub fn resolve(self, base: &Path) -> Result<Resolved, CliError> {
        let spec = self.validate()?;
        let data = self.data.load(base)?;
        let test = self.test.as_ref().map(|t| t.load(base)).transpose()?;
        if let Some(dim) = spec.input_dim() {
            for (key, ds) in std::iter::once(("data", &data)).chain(test.iter().map(|t| ("test", t))) {
                if ds.dim() != dim {
                    return Err(invalid("model.dim", format!("is {dim} but {key} has {} features", ds.dim())));
                }
                if ds.classes() > spec.classes() {
                    return Err(invalid(
                        "model.classes",
                        format!("is {} but {key} has {} classes", spec.classes(), ds.classes()),
                    ));
                }
            }
        }
        let split = make_split(&data, self.split.clone())?;
        Ok(Resolved {
            config: self,
            spec,
            data,
            test,
            split,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_configs_resolve() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut seen = 0;
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "toml") {
                let cfg = read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                cfg.resolve(&dir).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                seen += 1;
            }
        }
        assert!(seen >= 5);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let text = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/interpolation.toml")).unwrap();
        let cfg: Config = toml::from_str(&text.replace("version = 1", "version = 2")).unwrap();
        assert!(matches!(
            cfg.validate(),
            Err(CliError::Core(weightscrub::Error::InvalidConfig { .. }))
        ));
    }
}
