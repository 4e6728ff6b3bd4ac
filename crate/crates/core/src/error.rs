use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("matrix is not symmetric: |m[{row}][{col}] - m[{col}][{row}]| = {gap:e}")]
    NotSymmetric { row: usize, col: usize, gap: f64 },
    #[error("symmetric eigendecomposition did not converge within {max_iter} iterations")]
    ConvergenceFailure { max_iter: usize },
    #[error("matrix exponential overflows: eigenvalue * t = {exponent} > 700")]
    Overflow { exponent: f64 },
    #[error("eigenvalue floor must be strictly positive, got {0}")]
    InvalidFloor(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("covariance is singular or not positive definite")]
    SingularCovariance,
    #[error("mixed diagonal/full covariance in dimension {0} exceeds the 512 promotion limit")]
    CovarianceTooLarge(usize),

    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("forget set would be empty")]
    EmptyForget,
    #[error("retain set would be empty")]
    EmptyRetain,
    #[error("no samples with class {0}")]
    NoSuchClass(usize),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("label {label} at line {line} is outside [0, {classes})")]
    LabelOutOfRange { line: usize, label: usize, classes: usize },

    #[error("operation `{op}` is not supported for model `{model}`")]
    UnsupportedModel { op: &'static str, model: String },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid configuration: `{key}` {constraint}")]
    InvalidConfig { key: String, constraint: String },
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("matrix A has an eigenvalue {0:e} that cannot be inverted without a floor")]
    SingularA(f64),
    #[error("retain Hessian B has an eigenvalue {0:e} below the floor")]
    SingularB(f64),
    #[error("weights are not at a minimum of the full loss: |grad|_inf = {grad_norm:e} > {tolerance:e}")]
    NotAtMinimum { grad_norm: f64, tolerance: f64 },
    #[error("hiding requires a whole-class forget split")]
    HidingRequiresWholeClass,
    #[error("scrub method `{0}` adds no noise; the information bound is undefined")]
    NoiselessMethod(&'static str),
    #[error("cannot fit a Gaussian to {0} samples (need at least 2)")]
    DegenerateFit(usize),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn config(key: impl Into<String>, constraint: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            constraint: constraint.into(),
        }
    }

    /// Stable machine-readable tag, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonFinite => "non_finite",
            Error::NotSymmetric { .. } => "not_symmetric",
            Error::ConvergenceFailure { .. } => "convergence_failure",
            Error::Overflow { .. } => "overflow",
            Error::InvalidFloor(_) => "invalid_floor",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::SingularCovariance => "singular_covariance",
            Error::CovarianceTooLarge(_) => "covariance_too_large",
            Error::InvalidSpec(_) => "invalid_spec",
            Error::EmptyForget => "empty_forget",
            Error::EmptyRetain => "empty_retain",
            Error::NoSuchClass(_) => "no_such_class",
            Error::Parse { .. } => "parse_error",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::UnsupportedModel { .. } => "unsupported_model",
            Error::InvalidModel(_) => "invalid_model",
            Error::InvalidConfig { .. } => "invalid_config",
            Error::Diverged { .. } => "diverged",
            Error::SingularA(_) => "singular_a",
            Error::SingularB(_) => "singular_b",
            Error::NotAtMinimum { .. } => "not_at_minimum",
            Error::HidingRequiresWholeClass => "hiding_requires_whole_class",
            Error::NoiselessMethod(_) => "noiseless_method",
            Error::DegenerateFit(_) => "degenerate_fit",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
