//! The run configuration file: one TOML document with `model`, `data`,
//! `counts`, `pretrain`, and `finetune` sections plus a top-level `seed`.
//! Unknown keys anywhere in the document are errors, so typos fail loudly
//! instead of silently running the defaults.

use std::path::Path;

use anyhow::{Context, Result};
use modellab_core::model::ModelConfig;
use modellab_core::synth::GridSpec;
use modellab_core::train::{AblationPlan, StageSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    pub train: usize,
    /// Caption-alignment slice of the train split.
    pub pretrain: usize,
    pub eval: usize,
}

/// Everything one run needs. The same file drives `train`, `ablate`,
/// `eval`, `probe`, and `gen-data`; commands read the sections they use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Generated answers may use up to this many tokens.
    pub max_new: usize,
    pub model: ModelConfig,
    pub data: GridSpec,
    pub counts: Counts,
    pub pretrain: StageSpec,
    pub finetune: StageSpec,
}

impl RunConfig {
    /// The desk-scale defaults: identical to the plan the ablation matrix
    /// runs out of the box.
    pub fn toy() -> Self {
        RunConfig::from_plan(&AblationPlan::toy(), 11)
    }

    pub fn from_plan(plan: &AblationPlan, seed: u64) -> Self {
        RunConfig {
            seed,
            max_new: plan.max_new,
            model: plan.base.clone(),
            data: plan.data.clone(),
            counts: Counts {
                train: plan.train_count,
                pretrain: plan.pretrain_count,
                eval: plan.eval_count,
            },
            pretrain: plan.pretrain.clone(),
            finetune: plan.finetune.clone(),
        }
    }

    pub fn to_plan(&self) -> AblationPlan {
        AblationPlan {
            base: self.model.clone(),
            data: self.data.clone(),
            train_count: self.counts.train,
            pretrain_count: self.counts.pretrain,
            eval_count: self.counts.eval,
            pretrain: self.pretrain.clone(),
            finetune: self.finetune.clone(),
            max_new: self.max_new,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.to_plan().validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Loads the config file when given, falls back to the toy defaults
/// otherwise, and applies the seed override last.
pub fn resolve(config: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::toy(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}
