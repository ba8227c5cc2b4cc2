use std::path::Path;

use hso_core::Error;

/// A failed command, grouped by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Io(String),
    Config(String),
    Input(String),
    Runtime(String),
    Check(String),
    Diverged(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Io(_) => 3,
            Self::Config(_) => 4,
            Self::Input(_) => 5,
            Self::Runtime(_) => 6,
            Self::Check(_) => 7,
            Self::Diverged(_) => 8,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Io(_) => "io",
            Self::Config(_) => "config",
            Self::Input(_) => "input",
            Self::Runtime(_) => "runtime",
            Self::Check(_) => "check",
            Self::Diverged(_) => "diverged",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Self::Usage(m)
            | Self::Io(m)
            | Self::Config(m)
            | Self::Input(m)
            | Self::Runtime(m)
            | Self::Check(m)
            | Self::Diverged(m) => m,
        }
    }

    /// One JSON line on stderr.
    pub fn report(&self) {
        let line = serde_json::json!({
            "error": { "kind": self.kind(), "code": self.code(), "message": self.message() }
        });
        eprintln!("{line}");
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::Io(format!("{}: {e}", path.display()))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io(_) => Self::Io(msg),
            Error::Config(_) => Self::Config(msg),
            Error::Checkpoint(_) | Error::Parse(_) | Error::Json(_) | Error::InsufficientPool(_) => {
                Self::Input(msg)
            }
            Error::Diverged { .. } => Self::Diverged(msg),
            _ => Self::Runtime(msg),
        }
    }
}

/// Attaches a path to core errors raised while reading it.
pub fn at(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| match Failure::from(e) {
        Failure::Io(m) => Failure::Io(format!("{}: {m}", path.display())),
        Failure::Input(m) => Failure::Input(format!("{}: {m}", path.display())),
        other => other,
    }
}
