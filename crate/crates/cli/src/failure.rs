use neurossl::Error;

/// A command failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub const CONFIG: u8 = 2;
pub const COMPAT: u8 = 3;
pub const NUMERIC: u8 = 4;

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure { code: CONFIG, message: message.into() }
    }

    pub fn compat(message: impl Into<String>) -> Self {
        Failure { code: COMPAT, message: message.into() }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::ConfigParse { .. } | Error::InvalidConfig(_) | Error::Overlap(_) | Error::Empty(_) => CONFIG,
        Error::Cutoff { .. } | Error::Factor { .. } => CONFIG,
        Error::NonFiniteLoss { .. } => NUMERIC,
        _ => COMPAT,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: exit_code(&e), message: e.to_string() }
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_follow_error_kind() {
        assert_eq!(exit_code(&Error::ConfigParse { line: 1, message: String::new() }), CONFIG);
        assert_eq!(exit_code(&Error::Shape("x".into())), COMPAT);
        assert_eq!(exit_code(&Error::UnknownDataset("x".into())), COMPAT);
        assert_eq!(exit_code(&Error::NonFiniteLoss { epoch: 1, batch: 0 }), NUMERIC);
        let staged = Error::Stage { stage: "input", source: Box::new(Error::Factor { from_hz: 1.0, to_hz: 2.0 }) };
        assert_eq!(exit_code(&staged), CONFIG);
    }
}
