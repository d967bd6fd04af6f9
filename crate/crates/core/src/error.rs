use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, QsdError>;

#[derive(Debug, Error)]
pub enum QsdError {
    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// The Euler scheme left the physical region badly enough that
    /// renormalizing the trace would hide a diverging integration.
    #[error("numerical blowup at step {step}: trace deviation {trace_deviation:.3e}")]
    NumericalBlowup { step: usize, trace_deviation: f64 },

    /// The state sits at (or numerically at) |g>, where alpha and xi diverge.
    #[error("state is at the south pole (|g>); alpha/xi undefined")]
    AtSouthPole,

    #[error("invalid readout fidelities (F_g={f_g}, F_e={f_e})")]
    InvalidFidelity { f_g: f64, f_e: f64 },

    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("{}:{line}: {msg}", file.display())]
    Parse {
        file: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
