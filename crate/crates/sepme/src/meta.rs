//! `<checkpoint>.meta.toml` sidecars.
//!
//! ```toml
//! format_version = 1
//! kind = "theta_dm"        # theta_dm | increment | edited
//! seed = 0                 # global seed of the producing run
//! data_seed = 0            # seed of the dataset the model was trained on
//! [dims]                   # model dimensions
//! ...
//! [increment]              # increment files only
//! concept = "A"
//! form = "decoupled"       # decoupled | dense
//! covered = ["∅", "B", "C"]
//! [config]                 # effective experiment config
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use sepme_core::diffusion::ModelDims;

use crate::checkpoint::sidecar;
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    ThetaDm,
    Increment,
    Edited,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncrementMeta {
    pub concept: String,
    pub form: String,
    #[serde(default)]
    pub covered: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub format_version: u32,
    pub kind: Kind,
    pub seed: u64,
    pub data_seed: u64,
    pub dims: ModelDims,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub increment: Option<IncrementMeta>,
    pub config: ExperimentConfig,
}

impl Meta {
    pub fn new(kind: Kind, cfg: &ExperimentConfig) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind,
            seed: cfg.seed,
            data_seed: cfg.seed,
            dims: cfg.dims(),
            subset: None,
            increment: None,
            config: cfg.clone(),
        }
    }

    /// Writes the sidecar of `checkpoint`.
    pub fn save(&self, checkpoint: &Path) -> CliResult<()> {
        let path = sidecar(checkpoint);
        let text = toml::to_string(self).map_err(|e| CliError::Format(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }

    /// Reads the sidecar of `checkpoint`.
    pub fn load(checkpoint: &Path) -> CliResult<Self> {
        let path = sidecar(checkpoint);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let meta: Self =
            toml::from_str(&text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(CliError::Format(format!(
                "{}: format version {} is not supported",
                path.display(),
                meta.format_version
            )));
        }
        Ok(meta)
    }
}
