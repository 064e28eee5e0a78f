use std::fmt;

use ercforge_core::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
    Backend,
}

impl Kind {
    pub fn exit_code(self) -> u8 {
        match self {
            Kind::Usage => 2,
            Kind::Data => 3,
            Kind::Backend => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Data => "data",
            Kind::Backend => "backend",
        }
    }
}

/// A command failure, printed as one `error[kind]: message` line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub kind: Kind,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Data,
            message: message.into(),
        }
    }

    pub fn backend(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Backend,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let one_line = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        write!(f, "error[{}]: {one_line}", self.kind.name())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Backend(_) => Kind::Backend,
            Error::Config(_) | Error::UnknownElement(_) | Error::UnknownVariant(_) | Error::InvalidRatio(_) => {
                Kind::Usage
            }
            _ => Kind::Data,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<ercforge_core::BackendError> for Failure {
    fn from(e: ercforge_core::BackendError) -> Self {
        Failure::backend(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::data(e.to_string())
    }
}

pub trait IoContext<T> {
    fn at(self, path: &std::path::Path) -> Result<T, Failure>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &std::path::Path) -> Result<T, Failure> {
        self.map_err(|e| Failure::data(format!("{}: {e}", path.display())))
    }
}
