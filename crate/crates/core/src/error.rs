use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error in {context}: {detail}")]
    Shape { context: String, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("degenerate network: {0}")]
    DegenerateNetwork(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("softmax has empty support (every entry is masked)")]
    EmptySupport,

    #[error("training diverged at epoch {epoch}: {detail}")]
    TrainingDiverged { epoch: usize, detail: String },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("decode exceeded the step guard of {0} steps")]
    DecodeRunaway(usize),

    #[error("latent ascent failed: {0}")]
    Ascent(String),

    #[error("iteration {iteration} failed: {detail}")]
    Iteration { iteration: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable snake-case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape { .. } => "shape",
            Error::Domain(_) => "domain",
            Error::Parse { .. } => "parse",
            Error::DegenerateNetwork(_) => "degenerate_network",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::EmptySupport => "empty_support",
            Error::TrainingDiverged { .. } => "training_diverged",
            Error::NonFiniteGradient(_) => "non_finite_gradient",
            Error::DecodeRunaway(_) => "decode_runaway",
            Error::Ascent(_) => "ascent",
            Error::Iteration { .. } => "iteration",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            detail: detail.into(),
        }
    }
}
