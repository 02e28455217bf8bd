use std::path::{Path, PathBuf};

use anyhow::Context as _;
use serde::{Deserialize, Serialize};

use imlw_core::deploy::{LatencyModel, DEFAULT_SLACK};
use imlw_core::evalr::EvalConfig;
use imlw_core::expert::ProficiencyProfile;
use imlw_core::netcore::{EncoderVariant, NoiseNetVariant};
use imlw_core::sim::TaskLibrary;
use imlw_core::TrainConfig;

pub const RUN_CONFIG_SCHEMA: &str = "imlw-runconfig-v1";
pub const RUN_CONFIG_FILE: &str = "run_config.json";

/// Everything a subcommand needs to be re-run. Flags override file values,
/// file values override defaults; the resolved file is written next to the
/// command's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub schema_version: String,
    pub command: String,
    pub seed: u64,
    pub task_library: Option<PathBuf>,
    pub task: Option<String>,
    pub profile: String,
    pub encoder: EncoderVariant,
    pub noise_net: NoiseNetVariant,
    pub resolution: usize,
    pub created_at: Option<u64>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub latency: LatencyModel,
    pub slack: f64,
    pub out: Option<PathBuf>,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        Self {
            schema_version: RUN_CONFIG_SCHEMA.into(),
            command: String::new(),
            seed: 0,
            task_library: None,
            task: None,
            profile: "expertA".into(),
            encoder: EncoderVariant::Small,
            noise_net: NoiseNetVariant::TemporalConv,
            resolution: 16,
            created_at: None,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            latency: LatencyModel::zero(),
            slack: DEFAULT_SLACK,
            out: None,
        }
    }
}

impl RunConfigFile {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| crate::UsageError(format!("{}: {e}", path.display())))?;
        if cfg.schema_version != RUN_CONFIG_SCHEMA {
            return Err(crate::UsageError(format!("{}: schema {:?}, expected {RUN_CONFIG_SCHEMA:?}", path.display(), cfg.schema_version)).into());
        }
        Ok(cfg)
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RUN_CONFIG_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn library(&self) -> anyhow::Result<TaskLibrary> {
        Ok(match &self.task_library {
            Some(p) => TaskLibrary::load(p)?,
            None => TaskLibrary::builtin(),
        })
    }

    pub fn profile(&self, lib: &TaskLibrary) -> anyhow::Result<ProficiencyProfile> {
        lib.profile(&self.profile)
            .cloned()
            .ok_or_else(|| crate::UsageError(format!("unknown profile {}", self.profile)).into())
    }
}
