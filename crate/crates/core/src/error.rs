use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("singular matrix: {0}")]
    Singular(&'static str),

    #[error("matrix exponential did not converge")]
    ExpmNotConverged,

    #[error("switching constraint violated on phase {phase}: {from} -> {to}")]
    ShootThrough { phase: usize, from: i8, to: i8 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("solver failed ({status}): {detail}")]
    Solver { status: SolverStatus, detail: String },

    #[error("tail cost fingerprint mismatch: {0}")]
    FingerprintMismatch(String),

    #[error("no feasible candidate among {0} sequences")]
    NoFeasibleCandidate(usize),

    #[error("state blow-up at step {step}: |x| = {norm}")]
    StateBlowUp { step: usize, norm: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("artifact parse error: {0}")]
    Artifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Termination status reported by a conic solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverStatus {
    Optimal,
    /// Stalled at reduced accuracy with a feasible iterate.
    NearOptimal,
    Infeasible,
    Unbounded,
    MaxIterations,
    NumericalFailure,
}

impl std::fmt::Display for SolverStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SolverStatus::Optimal => "optimal",
            SolverStatus::NearOptimal => "near-optimal",
            SolverStatus::Infeasible => "infeasible",
            SolverStatus::Unbounded => "unbounded",
            SolverStatus::MaxIterations => "max-iterations",
            SolverStatus::NumericalFailure => "numerical-failure",
        };
        f.write_str(s)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
