use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dyad_core::datagen::{DatasetOptions, DyadOptions, SourceMix};
use dyad_core::diffusion::SamplerConfig;
use dyad_core::dualnet::UNetConfig;
use dyad_core::layout::LlmClientConfig;
use dyad_core::training::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub dataset_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset_dir: "runs/data".into(),
            checkpoint_dir: "runs/checkpoints".into(),
            report_dir: "runs/report".into(),
        }
    }
}

impl Paths {
    /// All three directories under one root.
    pub fn under(root: &Path) -> Self {
        Self {
            dataset_dir: root.join("data"),
            checkpoint_dir: root.join("checkpoints"),
            report_dir: root.join("report"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_samples: usize,
    /// Every `test_every`-th sample goes to the test split.
    pub test_every: usize,
    pub dyad: DyadOptions,
    pub mix: SourceMix,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_samples: 24,
            test_every: 4,
            dyad: DyadOptions {
                duration_s: 0.64,
                ..Default::default()
            },
            mix: SourceMix::default(),
        }
    }
}

impl DataConfig {
    pub fn dataset_options(&self) -> DatasetOptions {
        DatasetOptions {
            dyad: self.dyad.clone(),
            mix: self.mix,
            test_every: self.test_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaceConfig {
    pub vertex_count: usize,
    pub basis_seed: u64,
}

impl Default for FaceConfig {
    fn default() -> Self {
        Self {
            vertex_count: 30,
            basis_seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainStages {
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
}

impl Default for TrainStages {
    fn default() -> Self {
        let base = TrainConfig {
            learning_rate: 3e-3,
            warmup_steps: 20,
            batch_size: 4,
            ..Default::default()
        };
        Self {
            stage1: TrainConfig {
                stage: 1,
                total_steps: 200,
                ..base.clone()
            },
            stage2: TrainConfig {
                stage: 2,
                total_steps: 100,
                ..base
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// Width of the projection features behind FD and P-FD.
    pub feature_dim: usize,
    pub sid_k: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            sid_k: dyad_core::metrics::DEFAULT_SID_K,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutConfig {
    pub client: LlmClientConfig,
    /// JSONL example bank; the built-in bank when absent.
    pub bank: Option<PathBuf>,
    /// Query issued by the pipeline's layout stage.
    pub pipeline_prompt: String,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            client: LlmClientConfig::default(),
            bank: None,
            pipeline_prompt: "Two friends chatting face to face".into(),
        }
    }
}

/// Everything a command needs. Quality thresholds for source clips live in
/// `data.dyad.quality` and loss weights in `train.stage*.weights`. The
/// `seed` fields inside `train.*` and `sampler` are overwritten with values
/// derived from the top-level seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlobalConfig {
    pub seed: u64,
    pub paths: Paths,
    pub data: DataConfig,
    pub face: FaceConfig,
    pub unet: UNetConfig,
    pub train: TrainStages,
    pub sampler: SamplerConfig,
    pub metrics: MetricsConfig,
    pub layout: LayoutConfig,
}

impl GlobalConfig {
    /// Desk-scale defaults with the tiny network.
    pub fn desk() -> Self {
        Self {
            unet: UNetConfig::tiny(),
            metrics: MetricsConfig {
                sid_k: 4,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Stage config with derived seeds.
    pub fn stage(&self, stage: u8) -> TrainConfig {
        let mut c = if stage == 1 {
            self.train.stage1.clone()
        } else {
            self.train.stage2.clone()
        };
        c.stage = stage;
        c.seed = self.seed.wrapping_add(stage as u64);
        c.init_seed = self.seed;
        c
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let stage = |e: dyad_core::training::TrainError| CliError::config(e.to_string());
        self.unet.validate().map_err(|e| CliError::config(e.to_string()))?;
        self.stage(1).validate().map_err(stage)?;
        self.stage(2).validate().map_err(stage)?;
        self.sampler.validate().map_err(|e| CliError::config(e.to_string()))?;
        self.layout
            .client
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        if self.metrics.feature_dim == 0 || self.metrics.sid_k == 0 {
            return Err(CliError::config("feature_dim and sid_k must be positive".into()));
        }
        if self.face.vertex_count == 0 {
            return Err(CliError::config("vertex_count must be positive".into()));
        }
        Ok(())
    }
}
