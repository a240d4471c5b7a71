use thiserror::Error;

#[derive(Debug, Error)]
pub enum DpgError {
    #[error("unknown state id `{0}`")]
    UnknownState(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("communication graph is disconnected")]
    Disconnected,

    #[error("invalid mixing matrix: {0}")]
    InvalidMixing(String),

    #[error("divergence at iteration {iteration}: agent {agent} has |theta|_inf = {norm:e}")]
    Divergence {
        iteration: usize,
        agent: usize,
        norm: f64,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DpgError>;

pub(crate) fn domain(msg: impl Into<String>) -> DpgError {
    DpgError::Domain(msg.into())
}
