use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::batch::PromptSpec;
use crate::model::ToyModelConfig;
use crate::perf::CostModel;
use crate::pipeline::{Mode, PipelineConfig};
use crate::source::{BeamConfig, SyntheticDraftConfig, CALIBRATED_RANK_DECAY};
use crate::tree::TokenId;

/// Mixed into the master seed to get the default draft seed.
const DRAFT_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub vocab: u32,
    pub hidden: usize,
    pub layers: usize,
    /// Defaults to the master seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            vocab: 64,
            hidden: 32,
            layers: 8,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub stages: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer_split: Option<Vec<usize>>,
    pub overlap: bool,
    pub workers: bool,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            stages: 4,
            layer_split: None,
            overlap: false,
            workers: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DraftSection {
    pub top1_hit: f64,
    pub rank_decay: f64,
    pub miss_prob: f64,
    pub stall_prob: f64,
    /// Defaults to a value derived from the master seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for DraftSection {
    fn default() -> Self {
        Self {
            top1_hit: 0.62,
            rank_decay: CALIBRATED_RANK_DECAY,
            miss_prob: 0.0,
            stall_prob: 0.0,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub widths: Vec<usize>,
    pub ks: Vec<usize>,
    /// Tokens decoded per grid point.
    pub tokens: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            widths: vec![1, 2, 4, 8, 16, 32, 48, 64, 80, 112, 128],
            ks: vec![2, 4, 8, 16, 32],
            tokens: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeSection {
    pub batch_sizes: Vec<usize>,
    /// Nodes drafted per step across all requests; defaults to `beam.w`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_total: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_nodes: Option<usize>,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            batch_sizes: vec![1, 2, 4, 8],
            w_total: None,
            max_nodes: None,
        }
    }
}

/// Everything a command needs. Read from a JSON file, then overridden by
/// flags; the resolved form (all seeds filled in) is embedded in outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub beam: BeamConfig,
    #[serde(default)]
    pub draft: DraftSection,
    #[serde(default)]
    pub cost: CostModel,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_prompt")]
    pub prompt: PromptSpec,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub serve: ServeSection,
}

fn default_prompt() -> PromptSpec {
    PromptSpec::Length(8)
}

fn default_max_tokens() -> usize {
    64
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            model: ModelSection::default(),
            pipeline: PipelineSection::default(),
            beam: BeamConfig::default(),
            draft: DraftSection::default(),
            cost: CostModel::default(),
            mode: Mode::default(),
            prompt: default_prompt(),
            max_tokens: default_max_tokens(),
            output: OutputSection::default(),
            sweep: SweepSection::default(),
            serve: ServeSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Fills derived seeds and checks every section. Fails without a seed.
    pub fn resolve(mut self) -> Result<Self> {
        let Some(seed) = self.seed else {
            bail!("a seed is required (config \"seed\" or --seed)");
        };
        self.model.seed.get_or_insert(seed);
        self.draft.seed.get_or_insert(seed ^ DRAFT_SEED_SALT);
        self.model_config().validate()?;
        self.pipeline_config()
            .validate(self.model.layers)
            .context("pipeline")?;
        self.draft_config().validate().map_err(anyhow::Error::msg)?;
        if self.beam.k as u64 >= self.model.vocab as u64 {
            bail!(
                "k = {} needs a vocabulary larger than {}",
                self.beam.k,
                self.model.vocab
            );
        }
        self.prompt_tokens()?;
        Ok(self)
    }

    pub fn model_config(&self) -> ToyModelConfig {
        ToyModelConfig {
            vocab: self.model.vocab,
            hidden: self.model.hidden,
            layers: self.model.layers,
            seed: self.model.seed.or(self.seed).unwrap_or(0),
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            stages: self.pipeline.stages,
            layer_split: self.pipeline.layer_split.clone(),
            overlap: self.pipeline.overlap,
            workers: self.pipeline.workers,
            mode: self.mode,
            cost: self.cost,
            beam: self.beam,
        }
    }

    pub fn draft_config(&self) -> SyntheticDraftConfig {
        SyntheticDraftConfig {
            top1_hit: self.draft.top1_hit,
            rank_decay: self.draft.rank_decay,
            miss_prob: self.draft.miss_prob,
            stall_prob: self.draft.stall_prob,
            seed: self.draft.seed.unwrap_or(0),
        }
    }

    pub fn prompt_tokens(&self) -> Result<Vec<TokenId>> {
        let entry = crate::batch::WorkloadEntry {
            arrival_step: 0,
            prompt_tokens: self.prompt.clone(),
            max_new_tokens: 0,
        };
        Ok(entry
            .resolve(0, self.model.vocab, self.seed.unwrap_or(0))?
            .prompt)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        assert!(RunConfig::default().resolve().is_err());
        let cfg = RunConfig {
            seed: Some(3),
            ..RunConfig::default()
        }
        .resolve()
        .unwrap();
        assert_eq!(cfg.model.seed, Some(3));
        assert_eq!(cfg.draft.seed, Some(3 ^ DRAFT_SEED_SALT));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seed": 1, "bogus": 2}"#).is_err());
        let cfg: RunConfig =
            serde_json::from_str(r#"{"seed": 1, "beam": {"w": 4, "k": 2}, "prompt": [1, 2]}"#)
                .unwrap();
        assert_eq!(cfg.beam, BeamConfig { w: 4, k: 2 });
        assert_eq!(cfg.prompt, PromptSpec::Tokens(vec![1, 2]));
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig {
            seed: Some(9),
            ..RunConfig::default()
        }
        .resolve()
        .unwrap();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }
}
