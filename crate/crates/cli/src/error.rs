use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// `pointer` is a JSON pointer into the offending document.
    #[error("invalid document at `{pointer}`: {message}")]
    Document { pointer: String, message: String },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint config differs from the requested config ({0}); pass --force to override")]
    ConfigMismatch(String),
    #[error(transparent)]
    Core(#[from] motion_mae_core::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
