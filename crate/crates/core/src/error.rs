use thiserror::Error;

/// Errors raised anywhere in the solver, adjoint, training and experiment layers.
#[derive(Debug, Error)]
pub enum NddeError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("integration diverged at t = {t}: {detail}")]
    Divergence { t: f64, detail: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("state error: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NddeError>;

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(NddeError::Dimension {
            context,
            expected,
            got,
        })
    }
}
