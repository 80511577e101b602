use std::path::PathBuf;

/// Errors raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation received arguments that violate its shape or range contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("empty neighborhood: k must be at least 1")]
    EmptyNeighborhood,

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    /// k-NN requested more neighbors than the cloud can supply.
    #[error("insufficient points: k = {k} needs at least {} points, cloud has {n}", k + 1)]
    InsufficientPoints { k: usize, n: usize },

    /// Residual addition between tensors of different widths.
    #[error("residual shape mismatch: layer maps {d_in} channels to {d_out}")]
    ResidualShape { d_in: usize, d_out: usize },

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("validation: {0}")]
    Validation(String),

    #[error("config: {0}")]
    Config(String),

    /// Training produced a non-finite loss; carries per-layer activation norms.
    #[error("non-finite loss at epoch {epoch}, step {step}\n{diagnostics}")]
    NonFinite {
        epoch: usize,
        step: usize,
        diagnostics: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
