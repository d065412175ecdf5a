use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    #[error("leaf `{name}` has no binding")]
    UnboundLeaf { name: String },

    #[error("node {0} is not a leaf")]
    NotALeaf(usize),

    #[error("leaf `{name}` is not differentiable")]
    NotDifferentiable { name: String },

    #[error("backward needs a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: f64, classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss in {stage} at step {step}")]
    NanLoss { stage: &'static str, step: usize },

    #[error("trajectory diverged at step {step} (norm {norm})")]
    Diverged { step: usize, norm: f64 },

    #[error("zero variance in feature column {dim}")]
    ZeroVariance { dim: usize },

    #[error("class {class} has no examples")]
    EmptyClass { class: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("truncated file while reading {what}")]
    Truncated { what: &'static str },

    #[error("wrong model kind: expected {expected}, found {found}")]
    KindMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("precision mismatch: file holds {found}, requested {expected}")]
    PrecisionMismatch {
        expected: &'static str,
        found: String,
    },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("poison noise does not belong to this base dataset")]
    BaseMismatch,

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by numerical blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::NanLoss { .. } | Error::Diverged { .. }
        )
    }

    /// Short stable name for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::UnboundLeaf { .. } => "unbound_leaf",
            Error::NotALeaf(_) => "not_a_leaf",
            Error::NotDifferentiable { .. } => "not_differentiable",
            Error::NonScalarOutput { .. } => "non_scalar_output",
            Error::NonFinite { .. } => "non_finite",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::InvalidConfig(_) => "invalid_config",
            Error::NanLoss { .. } => "nan_loss",
            Error::Diverged { .. } => "diverged",
            Error::ZeroVariance { .. } => "zero_variance",
            Error::EmptyClass { .. } => "empty_class",
            Error::BadMagic { .. } => "bad_magic",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::Truncated { .. } => "truncated",
            Error::KindMismatch { .. } => "kind_mismatch",
            Error::PrecisionMismatch { .. } => "precision_mismatch",
            Error::Malformed(_) => "malformed",
            Error::BaseMismatch => "base_mismatch",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    /// True for bad configuration rather than a failed computation.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::InvalidConfig(_) | Error::Json(_))
    }
}
