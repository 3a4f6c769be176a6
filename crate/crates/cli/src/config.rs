//! Run configuration, read from TOML or JSON. Every field has a default, so a
//! config file only lists what it changes.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use inpaintkit_core::judge::JudgeConfig;
use inpaintkit_core::scenegen::DEFAULT_BENCH_ITEMS;
use inpaintkit_models::denoiser::{DenoiserConfig, Stage};
use inpaintkit_models::embedder::{ContrastiveConfig, EmbedderConfig};
use inpaintkit_models::sampler::GuidanceSchedule;
use inpaintkit_models::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Overridden by the environment variable and the command-line flag.
    pub checkpoint_dir: Option<PathBuf>,
    pub bench: BenchSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub evaluate: EvaluateSection,
    pub agree: AgreeSection,
    pub serve: ServeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub items: usize,
    pub seed: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            items: DEFAULT_BENCH_ITEMS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub denoiser: DenoiserConfig,
    /// Steps of text-only pretraining before inpainting finetuning.
    pub pretrain_steps: usize,
    /// Finetuning settings of the base stage; pretraining reuses them.
    pub base: TrainConfig,
    pub sr: TrainConfig,
    pub embedder: EmbedderConfig,
    pub contrastive: ContrastiveConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            pretrain_steps: 2000,
            base: TrainConfig::default(),
            sr: TrainConfig {
                stage: Stage::Sr,
                batch_size: 4,
                steps: 1000,
                ..TrainConfig::default()
            },
            embedder: EmbedderConfig::default(),
            contrastive: ContrastiveConfig::default(),
        }
    }
}

impl TrainSection {
    pub fn stage(&self, stage: Stage) -> TrainConfig {
        let c = match stage {
            Stage::Base => &self.base,
            Stage::Sr => &self.sr,
        };
        TrainConfig { stage, ..c.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub steps: usize,
    pub sr_steps: Option<usize>,
    /// `constant:W` or `oscillate:LO,HI`.
    pub guidance: String,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            steps: 20,
            sr_steps: Some(8),
            guidance: GuidanceSchedule::default().to_string(),
        }
    }
}

impl SampleSection {
    pub fn schedule(&self) -> anyhow::Result<GuidanceSchedule> {
        Ok(self.guidance.parse()?)
    }
}

/// Model ids that are not checkpoints: the benchmark's own image, and the
/// input with the edit region blanked.
pub const REFERENCE_MODEL: &str = "reference";
pub const BLANK_MODEL: &str = "blank";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// The first model is the side-by-side anchor.
    pub models: Vec<String>,
    pub samples_per_prompt: usize,
    pub annotators: usize,
    pub seed: u64,
    /// Evaluate only the first `n` benchmark items.
    pub limit: Option<usize>,
    pub judge: JudgeConfig,
    pub save_samples: bool,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            models: ["object_union", "random", REFERENCE_MODEL, BLANK_MODEL]
                .map(String::from)
                .to_vec(),
            samples_per_prompt: 4,
            annotators: 3,
            seed: 0,
            limit: None,
            judge: JudgeConfig::default(),
            save_samples: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgreeSection {
    pub pairs: usize,
    pub rounds: usize,
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for AgreeSection {
    fn default() -> Self {
        use inpaintkit_core::agreement::{DEFAULT_BOOT, DEFAULT_PAIRS, DEFAULT_ROUNDS};
        Self {
            pairs: DEFAULT_PAIRS,
            rounds: DEFAULT_ROUNDS,
            bootstrap: DEFAULT_BOOT,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub addr: String,
    pub data_dir: PathBuf,
    pub workers: usize,
    pub max_body_bytes: usize,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            data_dir: "serve-data".into(),
            workers: 1,
            max_body_bytes: inpaintkit_service::DEFAULT_MAX_BODY,
        }
    }
}

impl Config {
    /// Parses TOML, or JSON when the file name ends in `.json`.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.train.denoiser.validate()?;
        self.train.stage(Stage::Base).validate()?;
        self.train.stage(Stage::Sr).validate()?;
        self.train.contrastive.validate()?;
        self.sample.schedule()?;
        self.evaluate.judge.validate()?;
        if self.bench.items == 0 {
            bail!("bench.items must be positive");
        }
        let e = &self.evaluate;
        if e.models.is_empty() || e.samples_per_prompt == 0 || e.annotators == 0 {
            bail!("evaluate needs models, samples_per_prompt and annotators");
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(m) = e.models.iter().find(|m| !seen.insert(m.as_str())) {
            bail!("model {m} listed twice");
        }
        Ok(())
    }
}
