use thiserror::Error;

/// Every failure the library can report.
///
/// Variants split into input errors (bad configuration or geometry) and
/// assertion failures (a numerical invariant did not hold). The CLI maps the
/// former to exit code 1 and the latter to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("point outside domain: ({0}, {1})")]
    OutsideDomain(f64, f64),

    #[error("sampled Lipschitz quotient {sampled} exceeds declared M = {declared}")]
    Lipschitz { sampled: f64, declared: f64 },

    #[error("domain not convex: second difference {0:.3e} at x = {1}")]
    NotConvex(f64, f64),

    #[error("graph recovery: Newton did not converge at x = {x}")]
    GraphRecovery { x: f64 },

    #[error("linear solve failed: {0}")]
    Solver(String),

    #[error("inside Hessian collar at ({0}, {1})")]
    InsideHessianCollar(f64, f64),

    #[error("frame degenerate at node ({i}, {j}): |v~| = {norm:.3e}")]
    FrameDegenerate { i: usize, j: usize, norm: f64 },

    #[error("w-frame degenerate (ε too large) at node ({i}, {j}): |w~| = {norm:.3e}")]
    WFrameDegenerate { i: usize, j: usize, norm: f64 },

    #[error("quadrature did not converge at ({0}, {1})")]
    Quadrature(f64, f64),

    #[error("B/C partition inconsistent: residual {0:.3e}")]
    BcPartition(f64),

    #[error("invariant `{name}` violated: {detail}")]
    Invariant { name: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("config: {0}")]
    Config(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invariant(name: &'static str, detail: impl Into<String>) -> Self {
        Error::Invariant { name, detail: detail.into() }
    }

    /// True for failures of a numerical invariant, false for input errors.
    pub fn is_assertion(&self) -> bool {
        !matches!(
            self,
            Error::InvalidInput(_)
                | Error::OutsideDomain(..)
                | Error::Lipschitz { .. }
                | Error::NotConvex(..)
                | Error::Io(_)
                | Error::Config(_)
                | Error::Csv(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
