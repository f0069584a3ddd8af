use thiserror::Error;

/// Errors shared across the simulation modules.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("region too small: {0}")]
    RegionTooSmall(String),

    #[error("point {x}, {y} outside the field region")]
    OutsideRegion { x: f64, y: f64 },

    #[error("point {x}, {y} outside the mask rectangle")]
    OutsideMask { x: f64, y: f64 },

    #[error("target unreachable from source (masked off)")]
    NoPath,

    #[error("calibration unreliable: {0}")]
    CalibrationUnreliable(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("restricted distance undefined for vertical boundary pairs (both endpoints on x = {x})")]
    VerticalBoundaryPair { x: f64 },

    #[error("point {x}, {y} outside the conforming strip")]
    OutsideStrip { x: f64, y: f64 },

    #[error("requested tolerance {requested} too small; achievable epsilon is {achievable}")]
    Tolerance { requested: f64, achievable: f64 },

    #[error("block ({i}, {j}) outside the lattice ranges")]
    BlockOutOfRange { i: i64, j: i64 },

    #[error("domain error: {0}")]
    Domain(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
