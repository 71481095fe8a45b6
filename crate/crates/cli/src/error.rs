use std::process::ExitCode;

use storage_impact::Error;

#[derive(Debug)]
pub enum CliError {
    Schema(String),
    Data(String),
    NotConverged(String),
    Other(String),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Schema(_) => "schema",
            CliError::Data(_) => "data",
            CliError::NotConverged(_) => "non-convergence",
            CliError::Other(_) => "other",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Schema(m) | CliError::Data(m) | CliError::NotConverged(m) | CliError::Other(m) => m,
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Schema(_) => 2,
            CliError::Data(_) => 3,
            CliError::NotConverged(_) => 4,
            CliError::Other(_) => 1,
        })
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::InvalidParameter { .. } | Error::Domain { .. } | Error::UnknownScenario(_) | Error::LengthMismatch { .. } => {
                CliError::Schema(m)
            }
            Error::Data(_) | Error::NonStationaryFit { .. } | Error::Io(_) => CliError::Data(m),
            Error::Singular(_) | Error::BasisDegeneracy { .. } => CliError::Other(m),
        }
    }
}
