use thiserror::Error;

/// Errors surfaced by the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// The weighted cross-covariance has rank < 2, so the rotation is
    /// ambiguous. Raised instead of silently returning a reflection.
    #[error("degenerate correspondences: weighted cross-covariance rank < 2")]
    DegenerateCorrespondences,

    /// Squared singular values are too close for the SVD differential.
    #[error("singular-value gap {gap:e} below threshold; gradient undefined")]
    NearDegenerateSpectrum { gap: f64 },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),

    #[error("point {index} coincides with the cloud centroid")]
    CentroidCoincidence { index: usize },

    #[error("reference direction is parallel to the symmetry axis")]
    ParallelReference,

    #[error("goal context has length {got}, model expects {expected}")]
    GoalContextMismatch { expected: usize, got: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("unknown goal `{0}`")]
    UnknownGoal(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid {what}: {why}")]
    Invalid { what: &'static str, why: String },

    #[error("unsupported checkpoint format version {0}")]
    UnsupportedFormatVersion(u32),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(what: &'static str, why: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            why: why.into(),
        }
    }
}
