use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Tensor dimensions disagree with what an op requires.
    Shape(String),
    /// Invalid configuration value or key.
    Config(String),
    /// API misuse (non-scalar loss, missing gradients, ...).
    Usage(String),
    /// An op produced NaN or infinity.
    NonFinite(String),
    /// Input data outside its documented domain.
    Input(String),
    /// Malformed binary file.
    Parse { offset: usize, msg: String },
    /// The ANN cannot be mapped onto a spiking network.
    Conversion(String),
    /// A pipeline stage needs an artifact an earlier stage has not produced.
    MissingArtifact(PathBuf),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "dimension error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::Parse { offset, msg } => write!(f, "parse error at byte {offset}: {msg}"),
            Error::Conversion(m) => write!(f, "conversion error: {m}"),
            Error::MissingArtifact(p) => write!(
                f,
                "missing prerequisite artifact {} (run the producing subcommand first)",
                p.display()
            ),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
