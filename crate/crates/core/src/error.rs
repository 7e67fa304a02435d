use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("label grids differ ({left} vs {right} nodes)")]
    GridMismatch { left: usize, right: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("kernel {name} is not symmetric (max deviation {deviation:.3e})")]
    NotSymmetric { name: String, deviation: f64 },

    #[error("{name} is not positive semidefinite (min eigenvalue {min_eig:.3e} at label {label})")]
    NotPsd {
        name: String,
        label: usize,
        min_eig: f64,
    },

    #[error("coercivity violated: min eigenvalue of R is {min_eig:.3e} at knot {knot}, label {label} (declared c = {declared:.3e})")]
    CoercivityViolated {
        knot: usize,
        label: usize,
        min_eig: f64,
        declared: f64,
    },

    #[error("coercivity lost along trajectory: min eigenvalue of O is {min_eig:.3e} at knot {knot}, label {label}")]
    CoercivityLost {
        knot: usize,
        label: usize,
        min_eig: f64,
    },

    #[error("Riccati blow-up at knot {knot}: operator norm of Kbar is {norm:.3e} (cap {cap:.3e}); check positivity assumptions")]
    BlowUp { knot: usize, norm: f64, cap: f64 },

    #[error("simulation produced a non-finite state at knot {knot}")]
    SimulationDiverged { knot: usize },

    #[error("unsupported policy: {0}")]
    UnsupportedPolicy(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("corrupted data in {path}: {reason}")]
    Corrupted { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by the model or the numerics, as opposed to
    /// usage or I/O problems.
    pub fn is_numerical(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::Config(_) | Error::Json(_))
    }
}

pub(crate) fn ensure_same_grid(left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(Error::GridMismatch { left, right });
    }
    Ok(())
}
