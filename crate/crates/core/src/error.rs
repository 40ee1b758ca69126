use crate::grid::Geometry;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("geometry mismatch: {expected} vs {found}")]
    GeometryMismatch { expected: Geometry, found: Geometry },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("non-finite sample coordinate ({0}, {1}, {2})")]
    NonFiniteCoordinate(f64, f64, f64),

    #[error("axis {axis} has {len} voxels, at least {min} required")]
    TooFewVoxels { axis: usize, len: usize, min: usize },

    #[error("invalid `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("tag frequency {frequency:.4} cycles/voxel is too close to DC (minimum {minimum:.4})")]
    TagFrequencyTooLow { frequency: f64, minimum: f64 },

    #[error("vector-Jacobian product requested before a forward pass was cached")]
    MissingForwardCache,

    #[error("shape mismatch: expected {expected} elements, found {found}")]
    ShapeMismatch { expected: usize, found: usize },

    #[error("non-finite {term} loss at iteration {iteration}")]
    NonFiniteLoss { term: &'static str, iteration: usize },

    #[error("{0}: total weight is zero")]
    ZeroWeight(&'static str),

    #[error("malformed volume file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }
}
