use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point cloud is empty")]
    EmptyCloud,

    /// The inferred latent occupancy came out non-positive, so no distance can
    /// be reverted at this query. Expected far from the surface; callers decide
    /// whether it is fatal.
    #[error("latent field not positive at query (value {value:.3e})")]
    FieldNotPositive { value: f64 },

    #[error("Gram matrix not positive definite even with jitter {max_jitter:.3e}")]
    GramNotPositiveDefinite { max_jitter: f64 },

    #[error("no echo above threshold in correlation envelope")]
    NoEcho,

    #[error("measurement has no energy, nothing to correlate")]
    EmptyMeasurement,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
