//! Exit-status mapping.

use std::fmt;
use std::path::Path;

use adlens::actv::ActvError;
use adlens::chat::ChatError;
use adlens::dataprep::DataError;
use adlens::lens::LensError;
use adlens::loss::LossError;
use adlens::probe::ProbeError;

pub const EXIT_OPERATIONAL: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    pub fn operational(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_OPERATIONAL,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn actv_code(e: &ActvError) -> u8 {
    match e {
        ActvError::Io(_) => EXIT_OPERATIONAL,
        _ => EXIT_DATA,
    }
}

fn data_code(e: &DataError) -> u8 {
    match e {
        DataError::Io { .. } => EXIT_OPERATIONAL,
        DataError::Parse {
            source: ChatError::Io { .. },
            ..
        } => EXIT_OPERATIONAL,
        _ => EXIT_DATA,
    }
}

impl From<ActvError> for CliError {
    fn from(e: ActvError) -> Self {
        CliError {
            code: actv_code(&e),
            message: e.to_string(),
        }
    }
}

impl From<ChatError> for CliError {
    fn from(e: ChatError) -> Self {
        let code = match e {
            ChatError::Io { .. } => EXIT_OPERATIONAL,
            _ => EXIT_DATA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError {
            code: data_code(&e),
            message: e.to_string(),
        }
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        let code = match &e {
            ProbeError::Actv(a) => actv_code(a),
            ProbeError::Data(d) => data_code(d),
            _ => EXIT_DATA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<LensError> for CliError {
    fn from(e: LensError) -> Self {
        let code = match &e {
            LensError::Actv(a) => actv_code(a),
            _ => EXIT_DATA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::operational(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            CliError::operational(e.to_string())
        } else {
            CliError::data(format!("invalid JSON: {e}"))
        }
    }
}

/// Prefixes an error with the file it concerns.
pub trait AtPath<T> {
    fn at(self, path: &Path) -> CliResult<T>;
}

impl<T, E: Into<CliError>> AtPath<T> for Result<T, E> {
    fn at(self, path: &Path) -> CliResult<T> {
        self.map_err(|e| {
            let mut e: CliError = e.into();
            e.message = format!("{}: {}", path.display(), e.message);
            e
        })
    }
}
