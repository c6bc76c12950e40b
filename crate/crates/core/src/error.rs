use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("operator is not Hermitian (max |A - A^dag| = {residual:.3e})")]
    NotHermitian { residual: f64 },

    #[error("state is not normalized (norm = {norm})")]
    NotNormalized { norm: f64 },

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid projector family: {0}")]
    InvalidFamily(String),

    #[error("non-transition condition violated: max leakage {max_leakage:.3e} > eps_x {eps_x:.3e} (label {label}, t = {time})")]
    NtcViolated {
        max_leakage: f64,
        eps_x: f64,
        label: i64,
        time: f64,
    },

    #[error("vector has weight {weight:.3e} outside the declared subspace")]
    OutsideSubspace { weight: f64 },

    #[error("window [{start}, {end}] is shorter than the decoherence time {tau_d}")]
    WindowTooShort { start: f64, end: f64, tau_d: f64 },

    #[error("path count {count} exceeds the cap {cap}")]
    PathOverflow { count: usize, cap: usize },

    #[error("component of path {path} straddles subspaces: weights {weights:?}")]
    Straddle { path: String, weights: Vec<f64> },

    #[error("transition row for label {label} is undefined (no path carries it)")]
    UndefinedRow { label: i64 },

    #[error("series too short: {0}")]
    SeriesTooShort(String),

    #[error("premeasurement incomplete: pointer fidelity {fidelity:.3e} for outcome {outcome}")]
    PremeasurementIncomplete { outcome: usize, fidelity: f64 },

    #[error("state is not a product state (reduced purity {purity})")]
    NotProduct { purity: f64 },

    #[error("trees were grown from different initial vectors (distance {distance:.3e})")]
    DifferentInitialVectors { distance: f64 },

    #[error("schedule is not path-independent: {0}")]
    NotIdealSchedule(String),
}
