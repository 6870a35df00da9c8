use std::path::{Path, PathBuf};

use apl_core::{SynthSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything one invocation needs. Sections irrelevant to a subcommand are
/// carried along unchanged so a single file can drive a whole pipeline.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub gradcheck: GradcheckOptions,
    pub run: RunOptions,
    pub paths: Paths,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Write `embeddings.csv` with one pooled feature row per image.
    pub dump_embeddings: bool,
    /// Write the similarity report and its histograms.
    pub similarity_report: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Negative control: flips the sign of one backward rule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inject_fault: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunOptions {
    /// End training after this many completed epochs, leaving `last.aplc`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_after_epoch: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset directory (holding `features.aplf`) or the file itself.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

pub const DATA_FILE: &str = "features.aplf";
pub const TRUTH_FILE: &str = "ground_truth.json";

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.paths
            .out
            .as_deref()
            .ok_or_else(|| CliError::Config("no output directory (use --out or paths.out)".into()))
    }

    /// Writes `<command>.resolved.toml` into the output directory.
    pub fn echo(&self, command: &str) -> Result<(), CliError> {
        let dir = self.out_dir()?;
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(format!("{command}.resolved.toml"));
        std::fs::write(&path, self.to_toml()?).map_err(|e| CliError::io(&path, e))
    }

    pub fn data_file(&self) -> Result<PathBuf, CliError> {
        let p = self
            .paths
            .data
            .as_deref()
            .ok_or_else(|| CliError::Config("no dataset (use --data or paths.data)".into()))?;
        Ok(if p.is_dir() {
            p.join(DATA_FILE)
        } else {
            p.to_path_buf()
        })
    }

    /// Ground truth sits next to the dataset file when the generator wrote it.
    pub fn truth_file(&self) -> Result<Option<PathBuf>, CliError> {
        let data = self.data_file()?;
        let p = data.parent().unwrap_or(Path::new(".")).join(TRUTH_FILE);
        Ok(p.exists().then_some(p))
    }
}

/// Accepts a checkpoint path with or without its `.aplc` extension.
pub fn checkpoint_file(p: &Path) -> PathBuf {
    if p.exists() {
        return p.to_path_buf();
    }
    let with_ext = p.with_extension("aplc");
    if with_ext.exists() {
        with_ext
    } else {
        p.to_path_buf()
    }
}
