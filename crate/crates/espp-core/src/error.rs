use thiserror::Error;

/// Errors produced by planning, fitting, solving and simulation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("quadratic program is infeasible: {0}")]
    Infeasible(String),

    #[error("matrix is not positive semidefinite (min eigenvalue {0:.3e})")]
    NotConvex(f64),

    #[error("solver failed to converge after {0} iterations")]
    NonConvergence(usize),

    #[error("rank-deficient fit: {0}")]
    RankDeficient(String),

    #[error("no feasible stop point in the escape region")]
    NoFeasibleStopPoint,

    #[error("waypoints are not monotone in x after frame transform: {0}")]
    NonMonotoneWaypoints(String),

    #[error("planner geometry is invalid: {0}")]
    InvalidGeometry(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures that should abort a run with a numerical exit status.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_) | Error::NotConvex(_) | Error::NonConvergence(_)
        )
    }
}
