use thiserror::Error;

/// Errors raised anywhere in the forecasting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("integration diverged at t = {time}")]
    IntegrationDiverged { time: f64 },

    #[error("closure evaluation failed at t = {time} (x_{index} = {value}): {message}")]
    Closure {
        time: f64,
        index: usize,
        value: f64,
        message: String,
    },

    #[error("degenerate density bandwidth: q\u{302} underflowed to zero at sample {index} (delta = {delta})")]
    DegenerateBandwidth { index: usize, delta: f64 },

    #[error("bandwidth tuning failed: {0}; set epsilon/delta/m manually")]
    TuningFailed(String),

    #[error("kernel graph is disconnected ({components} components); increase knn")]
    DisconnectedGraph { components: usize },

    #[error("spectral solver did not converge after {iterations} restarts (max residual {max_residual:e})")]
    SpectralFailure { iterations: usize, max_residual: f64 },

    #[error("eigenvalue {value:e} at index {index} is below the floor {floor:e}; truncate the basis")]
    TruncationRequired { index: usize, value: f64, floor: f64 },

    #[error("undefined normalization: truth has zero variance")]
    ZeroVariance,

    #[error("empty validation set")]
    EmptyValidation,

    #[error("integration grid too narrow: tail density ratio {0:e}")]
    GridTooNarrow(f64),

    #[error("ill-conditioned Gram matrix (jitter reached {0:e})")]
    IllConditioned(f64),

    #[error("rerun differs from the manifest in: {0}")]
    NotReproduced(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad inputs or configuration rather than numerics.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_)
            | Error::DimensionMismatch { .. }
            | Error::LengthMismatch(_)
            | Error::EmptyValidation
            | Error::Format(_)
            | Error::Io(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }

    pub(crate) fn in_stage(self, stage: &str) -> Error {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
