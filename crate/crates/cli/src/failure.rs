use mrgpssm::Error;

/// Exit codes: 1 failed run or verification, 2 bad configuration or usage,
/// 3 data, window or dimension problems.
pub const EXIT_FAILED: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(EXIT_DATA, message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::WindowTooLong { .. }
            | Error::DimensionMismatch(_)
            | Error::MalformedHeader(_)
            | Error::NonUniformSpacing { .. }
            | Error::NonFiniteValue { .. } => EXIT_DATA,
            Error::InvalidParameter(_) | Error::Serde(_) => EXIT_CONFIG,
            _ => EXIT_FAILED,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T = ()> = std::result::Result<T, Failure>;
