//! Exit-code taxonomy: 0 ok, 2 usage, 3 I/O, 4 codec, 5 data.

use std::fmt;

use kquant::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Code {
    Usage = 2,
    Io = 3,
    Codec = 4,
    Data = 5,
}

/// A command failure carrying the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: Code,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl Failure {
    pub fn new(code: Code, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }

    pub fn usage(msg: impl fmt::Display) -> Self {
        Self::new(Code::Usage, anyhow::anyhow!("{msg}"))
    }
}

/// Default code for a library error.
pub fn classify(e: &Error) -> Code {
    match e {
        Error::Io { .. } | Error::Csv { .. } => Code::Io,
        Error::Parameter(_) => Code::Usage,
        Error::InvalidShape { .. }
        | Error::InvalidValue { .. }
        | Error::Scheme(_)
        | Error::ShapeMismatch { .. }
        | Error::CorruptData(_)
        | Error::BadMagic { .. }
        | Error::VersionMismatch(_)
        | Error::Truncated { .. }
        | Error::Checksum { .. } => Code::Codec,
        Error::InvalidConfig(_)
        | Error::Resource(_)
        | Error::Math(_)
        | Error::Aborted { .. }
        | Error::Capability(_) => Code::Data,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::new(classify(&e), e)
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

/// Attaches context to a library error while keeping its exit code.
pub trait Context<T> {
    fn ctx(self, what: impl fmt::Display) -> Outcome<T>;
    fn ctx_code(self, code: Code, what: impl fmt::Display) -> Outcome<T>;
}

impl<T> Context<T> for kquant::Result<T> {
    fn ctx(self, what: impl fmt::Display) -> Outcome<T> {
        self.map_err(|e| {
            let code = classify(&e);
            Failure::new(code, anyhow::Error::new(e).context(what.to_string()))
        })
    }

    fn ctx_code(self, code: Code, what: impl fmt::Display) -> Outcome<T> {
        self.map_err(|e| Failure::new(code, anyhow::Error::new(e).context(what.to_string())))
    }
}
