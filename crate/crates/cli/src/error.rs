//! Error type with stable machine-readable codes.

use std::fmt;
use std::path::Path;

#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub detail: String,
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn new(code: &'static str, detail: impl Into<String>) -> Self {
        Self { code, detail: detail.into() }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Self::new("E_CONFIG", detail)
    }

    pub fn usage(detail: impl Into<String>) -> Self {
        Self::new("E_USAGE", detail)
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new("E_IO", format!("{}: {e}", path.display()))
    }

    /// `error: code=E_... detail=...` on a single line.
    pub fn line(&self) -> String {
        format!("error: code={} detail={}", self.code, self.detail.replace(['\n', '\r'], " "))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.detail)
    }
}

impl std::error::Error for CliError {}

macro_rules! code_from {
    ($ty:ty, $code:literal) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                Self::new($code, e.to_string())
            }
        }
    };
}

code_from!(poseinn::scene::SceneError, "E_SCENE");
code_from!(poseinn::dataset::DatasetError, "E_DATASET");
code_from!(poseinn::model::ModelError, "E_MODEL");
code_from!(poseinn::trainer::TrainError, "E_TRAIN");
code_from!(poseinn::checkpoint::CheckpointError, "E_CHECKPOINT");
code_from!(poseinn::localizer::LocalizeError, "E_LOCALIZE");

impl From<poseinn::sampler::SamplerError> for CliError {
    fn from(e: poseinn::sampler::SamplerError) -> Self {
        let code = match e {
            poseinn::sampler::SamplerError::Budget { .. } => "E_SAMPLER_BUDGET",
            _ => "E_SAMPLER",
        };
        Self::new(code, e.to_string())
    }
}
