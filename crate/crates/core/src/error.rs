use thiserror::Error;

/// Errors raised by the library.
///
/// The variants map one-to-one onto the CLI exit codes: configuration
/// problems exit with 2, certification failures with 3 and everything else
/// with 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("missing gains for subsets: {}", .0.join(", "))]
    MissingGains(Vec<String>),

    #[error("missing certificates for subsets: {}", .0.join(", "))]
    MissingCertificates(Vec<String>),

    #[error("certification failed for observer {subset}: {reason}")]
    Certification { subset: String, reason: String },

    #[error("parse error in {file}: {message}")]
    Parse { file: String, message: String },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. }
            | Error::MissingGains(_)
            | Error::MissingCertificates(_)
            | Error::Parse { .. } => 2,
            Error::Certification { .. } => 3,
            Error::Invariant(_) | Error::Aggregation(_) | Error::Io { .. } => 4,
        }
    }

    /// Short machine-readable tag for stderr reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::MissingGains(_) => "missing_gains",
            Error::MissingCertificates(_) => "missing_certificates",
            Error::Certification { .. } => "certification",
            Error::Parse { .. } => "parse",
            Error::Invariant(_) => "invariant",
            Error::Aggregation(_) => "aggregation",
            Error::Io { .. } => "io",
        }
    }
}
