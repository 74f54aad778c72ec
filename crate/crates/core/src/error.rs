use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NumericOverflow { op: &'static str },

    #[error("loss node must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate mirror between classes {source_class} and {target}: class weights are identical")]
    DegenerateMirror { source_class: usize, target: usize },

    #[error("classification never flips to class {target} along the trajectory")]
    NoFlip { target: usize },

    #[error("line search stalled after {iterations} iterations (best value {best_value:e})")]
    LineSearchStalled {
        iterations: usize,
        best_value: f64,
        best_x: Vec<f64>,
    },

    #[error("reflection target unreachable: best logit residual {residual:e}")]
    ReflectionUnreachable { residual: f64, best: Vec<f64> },

    #[error("triangulation ratio is degenerate: source and KFE latents coincide")]
    RatioDegenerate,

    #[error("training diverged at epoch {epoch}, step {step}: {what} is not finite")]
    Diverged {
        epoch: usize,
        step: usize,
        what: String,
    },

    #[error("frozen classifier was modified (checksum {before} -> {after})")]
    ClassifierMutated { before: String, after: String },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("image format: {0}")]
    Image(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Short stable identifier, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NumericOverflow { .. } => "numeric_overflow",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::MissingGradient(_) => "missing_gradient",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DegenerateMirror { .. } => "degenerate_mirror",
            Error::NoFlip { .. } => "no_flip",
            Error::LineSearchStalled { .. } => "line_search_stalled",
            Error::ReflectionUnreachable { .. } => "reflection_unreachable",
            Error::RatioDegenerate => "ratio_degenerate",
            Error::Diverged { .. } => "diverged",
            Error::ClassifierMutated { .. } => "classifier_mutated",
            Error::Checkpoint(_) => "checkpoint",
            Error::Image(_) => "image",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
