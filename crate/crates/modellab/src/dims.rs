//! Named dimension presets for the cost commands. External model shapes
//! live in `data/dims.toml` (compiled in, versioned with the repo); the
//! `toy` preset derives from the laboratory's own default config so it can
//! never drift from the code.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use modellab_core::cost::{EncoderDims, LlmDims, ProjectorDims};
use modellab_core::model::ModelConfig;
use serde::Deserialize;

const DATA: &str = include_str!("../data/dims.toml");

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DimsFile {
    version: u32,
    encoders: BTreeMap<String, EncoderDims>,
    presets: BTreeMap<String, PresetEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PresetEntry {
    encoder: String,
    llm: LlmDims,
}

/// A fully resolved model shape ready for the cost counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Preset {
    pub llm: LlmDims,
    pub encoder: EncoderDims,
}

impl Preset {
    /// Connector dims for `taps` concatenated feature maps.
    pub fn projector(&self, taps: u64) -> ProjectorDims {
        ProjectorDims {
            in_width: taps * self.encoder.d_model,
            d_model: self.llm.d_model,
        }
    }
}

fn data_file() -> Result<DimsFile> {
    let file: DimsFile = toml::from_str(DATA).context("parsing built-in dims data")?;
    if file.version != 1 {
        bail!("dims data version {} not understood", file.version);
    }
    Ok(file)
}

/// Resolves a preset by name. Names are the data-file keys plus `toy`.
pub fn resolve(name: &str) -> Result<Preset> {
    if name == "toy" {
        let cfg = ModelConfig::toy();
        return Ok(Preset {
            llm: LlmDims::from_config(&cfg),
            encoder: EncoderDims::from_config(&cfg.vision),
        });
    }
    let file = data_file()?;
    let entry = match file.presets.get(name) {
        Some(entry) => entry,
        None => bail!("unknown dims preset '{name}'; available: {}", names().join(", ")),
    };
    let encoder = file
        .encoders
        .get(&entry.encoder)
        .with_context(|| format!("preset '{name}' references missing encoder '{}'", entry.encoder))?;
    Ok(Preset { llm: entry.llm, encoder: *encoder })
}

pub fn names() -> Vec<String> {
    let mut names = vec!["toy".to_string()];
    if let Ok(file) = data_file() {
        names.extend(file.presets.keys().cloned());
    }
    names
}

#[cfg(test)]
mod tests {
    use super::*;
    use modellab_core::cost::count_params;

    #[test]
    fn every_preset_resolves() {
        for name in names() {
            resolve(&name).unwrap();
        }
        assert!(resolve("qwen3.5-900b").is_err());
    }

    #[test]
    fn the_3b_preset_reproduces_the_published_totals() {
        let preset = resolve("qwen2.5-3b").unwrap();
        let params = count_params(&preset.llm, &preset.encoder, &preset.projector(1), false);
        let rel = (params.total as f64 - 3.40e9).abs() / 3.40e9;
        assert!(rel < 0.02, "total {} off by {rel:.4}", params.total);
    }

    #[test]
    fn toy_preset_matches_the_live_default_config() {
        let preset = resolve("toy").unwrap();
        let cfg = ModelConfig::toy();
        assert_eq!(preset.llm, LlmDims::from_config(&cfg));
        assert_eq!(preset.encoder, EncoderDims::from_config(&cfg.vision));
    }
}
