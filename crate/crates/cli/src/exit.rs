use std::fmt;

use starflow::Error;

pub const SUCCESS: i32 = 0;
pub const INPUT: i32 = 2;
pub const DIVERGENCE: i32 = 3;
pub const INCOMPATIBLE: i32 = 4;
pub const VERIFICATION: i32 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        CliError {
            code: INPUT,
            message: message.into(),
        }
    }

    pub fn incompatible(message: impl Into<String>) -> Self {
        CliError {
            code: INCOMPATIBLE,
            message: message.into(),
        }
    }

    pub fn verification(message: impl Into<String>) -> Self {
        CliError {
            code: VERIFICATION,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence { .. } => DIVERGENCE,
            Error::Incompatible(_) => INCOMPATIBLE,
            _ => INPUT,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}
