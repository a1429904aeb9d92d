use signtok_core::Error;

/// Command failure, mapped onto the documented exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config values or paths the user named (2).
    Usage(String),
    /// Unreadable or inconsistent input data (3).
    Data(String),
    /// A numerical check failed or training diverged (4).
    Numeric(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Data(_) => 3,
            Self::Numeric(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Data(_) => "data",
            Self::Numeric(_) => "numeric",
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Data(m) | Self::Numeric(m) => m,
        }
    }

    /// One JSON object on one line.
    pub fn line(&self) -> String {
        serde_json::json!({
            "status": "error",
            "kind": self.kind(),
            "code": self.code(),
            "message": self.message(),
        })
        .to_string()
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Invalid(_) => Self::Usage(e.to_string()),
            Error::NonFinite(_) => Self::Numeric(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::Data(e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;
