use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("matrix not positive-definite{}", class_suffix(*.class))]
    Factorization { class: Option<usize> },

    #[error("class {class} has {count} confident samples, need at least {needed}; lower tau_fit")]
    Estimation {
        class: usize,
        count: usize,
        needed: usize,
    },

    #[error(
        "pseudo-dataset generation kept {kept} of {drawn} draws (kept_fraction {kept_fraction:.4}), \
         below half of the {target} requested"
    )]
    Generation {
        kept: usize,
        drawn: usize,
        target: usize,
        kept_fraction: f64,
    },

    #[error("non-finite gradient for parameter {0}; update rejected")]
    NonFiniteGradient(usize),

    #[error("loss diverged at step {step}")]
    Divergence { step: usize },

    #[error("usage: {0}")]
    Usage(String),

    #[error("invalid config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("source data forbidden during adaptation: {}", .0.display())]
    SourceForbidden(PathBuf),

    #[error("bad file format in {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn class_suffix(class: Option<usize>) -> String {
    match class {
        Some(c) => format!(" (class {c})"),
        None => String::new(),
    }
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config { .. } => 2,
            Error::Estimation { .. } | Error::Factorization { .. } | Error::Generation { .. } => 3,
            Error::SourceForbidden(_) => 4,
            Error::Divergence { .. } | Error::NonFiniteGradient(_) | Error::NonFinite(_) => 5,
            Error::Dimension { .. } | Error::Format { .. } | Error::Io { .. } => 1,
        }
    }
}
