use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point at infinity cannot be demoted")]
    PointAtInfinity,
    #[error("homogeneous point has all coordinates zero")]
    ZeroHomogeneous,
    #[error("point not in front of camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("bearing outside field of view (phi = {phi}, theta = {theta})")]
    BearingOutsideFov { phi: f64, theta: f64 },
    #[error("vector is not unit length (norm = {0})")]
    NotUnit(f64),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("matrix is not a rotation (|RᵀR - I| = {orthogonality:e}, det = {determinant})")]
    NotARotation { orthogonality: f64, determinant: f64 },
    #[error("feature {feature} behind camera {camera} at keyframe {keyframe} (z = {z})")]
    FeatureBehindCamera { feature: usize, camera: usize, keyframe: u8, z: f64 },
    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange { what: &'static str, index: usize, len: usize },
    #[error("keyframe must be 1 or 2, got {0}")]
    BadKeyframe(u8),
    #[error("state length {got} does not match {expected} for {features} features")]
    StateLength { got: usize, expected: usize, features: usize },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("cannot satisfy assumptions: {0}")]
    CannotSatisfy(String),
    #[error("finite-difference step must be positive")]
    NonPositiveStep,
    #[error("normal matrix singular (condition {condition:e})")]
    NormalMatrixSingular { condition: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("scale direction undefined: all depths and translation are zero")]
    ZeroScaleDirection,
    #[error("sweep requires at least six observations, got {0}")]
    TooFewObservations(usize),
}
