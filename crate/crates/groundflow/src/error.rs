use thiserror::Error;

/// Unified error type for the crate.
#[derive(Debug, Error)]
pub enum GfError {
    /// A precondition or input validation failed.
    #[error("invalid {what}: {why}")]
    Invalid { what: &'static str, why: String },

    /// Root bracketing/bisection did not converge.
    #[error("root finding failed in bracket [{lo:.6e}, {hi:.6e}]: {why}")]
    RootFind { lo: f64, hi: f64, why: String },

    /// The iterative linear solver missed its residual target.
    #[error(
        "linear solver stalled after {iters} iterations: relative residual {residual:.3e} > tolerance {tol:.1e}"
    )]
    SolverStalled {
        iters: usize,
        residual: f64,
        tol: f64,
    },

    /// Training produced a non-finite loss.
    #[error("non-finite loss at epoch {epoch} (total = {total})")]
    NonFiniteLoss { epoch: usize, total: f64 },

    /// A config/spec document failed to parse or validate.
    #[error("config error: {0}")]
    Config(String),

    /// A data file failed to parse.
    #[error("parse error in {context}: {why}")]
    Parse { context: String, why: String },

    /// Filesystem failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A pipeline stage failed; wraps the underlying error with the stage name.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<GfError>,
    },
}

/// Coarse classification used by the CLI to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad spec/config/arguments.
    Spec,
    /// Numerical failure (solver, root finding, diverged training).
    Numeric,
    /// Filesystem or parsing of on-disk artifacts.
    Io,
}

impl GfError {
    pub fn invalid(what: &'static str, why: impl Into<String>) -> Self {
        GfError::Invalid {
            what,
            why: why.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        GfError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        GfError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            GfError::Invalid { .. } | GfError::Config(_) => ErrorClass::Spec,
            GfError::RootFind { .. }
            | GfError::SolverStalled { .. }
            | GfError::NonFiniteLoss { .. } => ErrorClass::Numeric,
            GfError::Parse { .. } | GfError::Io { .. } => ErrorClass::Io,
            GfError::Stage { source, .. } => source.class(),
        }
    }
}

pub type Result<T> = std::result::Result<T, GfError>;
