use thiserror::Error;

/// Errors raised anywhere in the planning / simulation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("wrench outside rotor envelope: squared rotor speeds {squared:?}")]
    InfeasibleWrench { squared: [f64; 4] },

    #[error("singular attitude: pitch {theta} rad")]
    SingularAttitude { theta: f64 },

    #[error("decoupling map singular: {0}")]
    DecouplingSingular(String),

    #[error("leader reference positions are collinear")]
    SingularReference,

    #[error("degenerate topology: {0}")]
    DegenerateTopology(String),

    #[error("innovation covariance is singular")]
    FilterDegenerate,

    #[error("no path from start to goal")]
    NoPath,

    #[error("degenerate path segment {index}: consecutive waypoints coincide")]
    DegenerateSegment { index: usize },

    #[error("travel time {t_hi} s is already unsafe ({reason})")]
    InitialTimeUnsafe { t_hi: f64, reason: String },

    #[error("incomplete trace: {0}")]
    IncompleteTrace(String),

    #[error("scenario error at `{path}`: {reason}")]
    Scenario { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn scenario(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Scenario {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
