//! Analytic parameter and compute accounting for the assembled model.
//!
//! Parameter counts walk the declared tensor shapes, so they agree with the
//! live model exactly. Compute counts price the forward pass from the
//! attention mask: every matmul at `m * k * n` multiply-adds, every scored
//! attention entry at `d` multiply-adds in each of the score and mix
//! kernels (bypassed rows are skipped, exactly as the kernels skip them).
//!
//! Reported compute depends on bookkeeping choices that differ between
//! published tables and instrumented tapes; [`Conventions`] names those
//! choices instead of hiding them. [`Conventions::standard`] reproduces the
//! common reporting style (gate matmul folded away, K/V priced at full model
//! width); [`Conventions::kernel_exact`] prices exactly what the tensor
//! kernels execute and matches the tape's multiply-add counter to the unit.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::masking::{build_mask, MaskPolicy, TokenLayout};
use crate::model::ModelConfig;
use crate::vision::VisionConfig;

// ── Shape descriptions ───────────────────────────────────────────────────

/// Language-stack shape. `q_width`/`kv_width` allow grouped-query layouts
/// where K/V are narrower than Q; the toy stack uses full width everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmDims {
    pub vocab: u64,
    pub d_model: u64,
    pub layers: u64,
    pub q_width: u64,
    pub kv_width: u64,
    /// Q/K/V projections carry bias vectors (output projection never does).
    pub qkv_bias: bool,
    pub mlp_hidden: u64,
    /// Input embedding and LM head share one matrix; counted once.
    pub tied_lm_head: bool,
}

impl LlmDims {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        LlmDims {
            vocab: cfg.vocab_size as u64,
            d_model: cfg.d_l as u64,
            layers: cfg.layers as u64,
            q_width: cfg.d_l as u64,
            kv_width: cfg.d_l as u64,
            qkv_bias: true,
            mlp_hidden: cfg.mlp_hidden as u64,
            tied_lm_head: false,
        }
    }

    /// Parameters of one Q/K/V projection triple (weights plus biases when
    /// configured). This is also the per-layer cost of duplicating the
    /// triple for a second token family.
    pub fn qkv_params(&self) -> u64 {
        let bias = if self.qkv_bias {
            self.q_width + 2 * self.kv_width
        } else {
            0
        };
        self.d_model * (self.q_width + 2 * self.kv_width) + bias
    }
}

/// Vision-tower shape: patch embedding with bias, learned position table,
/// then pre-norm blocks (biased attention and two-matmul MLP, single-gain
/// norms).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderDims {
    pub patch_dim: u64,
    pub tokens: u64,
    pub d_model: u64,
    pub layers: u64,
    pub mlp_hidden: u64,
}

impl EncoderDims {
    pub fn from_config(cfg: &VisionConfig) -> Self {
        EncoderDims {
            patch_dim: cfg.patch_dim() as u64,
            tokens: cfg.n_patches() as u64,
            d_model: cfg.d_v as u64,
            layers: cfg.layers as u64,
            mlp_hidden: cfg.mlp_hidden as u64,
        }
    }

    pub fn params(&self) -> u64 {
        let d = self.d_model;
        let patch = self.patch_dim * d + d;
        let pos = self.tokens * d;
        let per_layer = 2 * d                      // two norm gains
            + 4 * d * d + 4 * d                    // q/k/v/o weights and biases
            + 2 * d * self.mlp_hidden              // up and down weights
            + self.mlp_hidden + d; // their biases
        patch + pos + self.layers * per_layer
    }
}

/// Connector shape: concatenated tap maps (`in_width` columns) through a
/// biased two-layer MLP into the language width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorDims {
    pub in_width: u64,
    pub d_model: u64,
}

impl ProjectorDims {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        ProjectorDims {
            in_width: (cfg.vision.k() * cfg.vision.d_v) as u64,
            d_model: cfg.d_l as u64,
        }
    }

    pub fn params(&self) -> u64 {
        let d = self.d_model;
        self.in_width * d + d + d * d + d
    }

    /// Multiply-adds to project `rows` feature rows into the language width.
    pub fn macs(&self, rows: u64) -> u64 {
        rows * (self.in_width * self.d_model + self.d_model * self.d_model)
    }
}

// ── Parameters ───────────────────────────────────────────────────────────

/// Parameter totals bucketed exactly like the model's parameter walk, so
/// every field can be checked against the live tensors group by group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamsReport {
    pub separate_visual_qkv: bool,
    pub embed: u64,
    pub text_qkv: u64,
    /// Zero unless the visual triple is routed separately.
    pub visual_qkv: u64,
    pub attn_out: u64,
    pub mlp: u64,
    pub lm_head: u64,
    pub projector: u64,
    pub encoder: u64,
    pub total: u64,
}

impl ParamsReport {
    /// Total with the visual triple excluded: the reference against which
    /// the routing surcharge is quoted.
    pub fn fused_total(&self) -> u64 {
        self.total - self.visual_qkv
    }

    /// Relative parameter increase of separate visual routing over the
    /// fused model.
    pub fn visual_qkv_fraction(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.visual_qkv as f64 / self.fused_total() as f64
    }
}

/// Count every parameter of a model with the given shapes. With
/// `separate_visual_qkv`, each layer carries a second Q/K/V triple for
/// visual rows; nothing else changes.
pub fn count_params(
    llm: &LlmDims,
    encoder: &EncoderDims,
    projector: &ProjectorDims,
    separate_visual_qkv: bool,
) -> ParamsReport {
    let d = llm.d_model;
    let embed = llm.vocab * d;
    let text_qkv = llm.layers * llm.qkv_params();
    let visual_qkv = if separate_visual_qkv { text_qkv } else { 0 };
    // The pre-attention norm gain travels with the output projection.
    let attn_out = llm.layers * (d + llm.q_width * d);
    let mlp = llm.layers * (d + 3 * d * llm.mlp_hidden);
    let lm_head = d + if llm.tied_lm_head { 0 } else { d * llm.vocab };
    let projector_params = projector.params();
    let encoder_params = encoder.params();
    let total = embed
        + text_qkv
        + visual_qkv
        + attn_out
        + mlp
        + lm_head
        + projector_params
        + encoder_params;
    ParamsReport {
        separate_visual_qkv,
        embed,
        text_qkv,
        visual_qkv,
        attn_out,
        mlp,
        lm_head,
        projector: projector_params,
        encoder: encoder_params,
        total,
    }
}

// ── Compute ──────────────────────────────────────────────────────────────

/// Bookkeeping choices behind a compute figure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conventions {
    /// FLOPs per multiply-add (2 everywhere in this crate).
    pub mac_flops: u64,
    /// MLP matmuls priced per layer: 2 folds the gate away, 3 prices the
    /// gated stack the kernels actually run.
    pub mlp_matmuls: u64,
    /// Price K/V projections at full model width even when `kv_width` is
    /// narrower (the usual reporting shorthand).
    pub kv_full_width: bool,
}

impl Conventions {
    /// The common reporting style for published compute tables.
    pub fn standard() -> Self {
        Conventions {
            mac_flops: 2,
            mlp_matmuls: 2,
            kv_full_width: true,
        }
    }

    /// Price exactly the matmuls the tensor kernels execute; the total
    /// matches the tape's multiply-add counter to the unit.
    pub fn kernel_exact() -> Self {
        Conventions {
            mac_flops: 2,
            mlp_matmuls: 3,
            kv_full_width: false,
        }
    }
}

/// Forward-pass compute for one assembled sequence, in FLOPs under the
/// stated conventions. Attention terms are priced from the actual mask, so
/// the figure responds to the policy: bidirectional visual attention scores
/// more entries than causal, and bypassed visual rows score none.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub layout: TokenLayout,
    pub policy: MaskPolicy,
    pub conventions: Conventions,
    /// Q/K/V/O projections, one layer.
    pub attn_projections_per_layer: u64,
    /// Score and mix kernels over the allowed entries, one layer.
    pub attn_scores_per_layer: u64,
    /// Sum of the two attention terms, one layer.
    pub attention_per_layer: u64,
    pub mlp_per_layer: u64,
    pub lm_head: u64,
    /// Connector applied to the visual rows; not part of `llm_total`.
    pub projector: u64,
    /// All decoder layers plus the LM head.
    pub llm_total: u64,
    /// `llm_total` plus the connector.
    pub total: u64,
}

/// Price the forward pass of `llm` over `layout` under `policy`.
pub fn count_flops(
    llm: &LlmDims,
    projector: &ProjectorDims,
    layout: TokenLayout,
    policy: MaskPolicy,
    conventions: Conventions,
) -> Result<FlopsReport> {
    TokenLayout::new(layout.system, layout.visual, layout.user)?;
    let mask = build_mask(layout, policy);
    let scored = mask.scored_count();
    let rows = layout.total() as u64;
    let d = llm.d_model;
    let kv = if conventions.kv_full_width {
        d
    } else {
        llm.kv_width
    };
    let f = conventions.mac_flops;
    let attn_projections_per_layer =
        f * rows * d * (llm.q_width + 2 * kv) + f * rows * llm.q_width * d;
    let attn_scores_per_layer = f * 2 * scored * d;
    let attention_per_layer = attn_projections_per_layer + attn_scores_per_layer;
    let mlp_per_layer = f * conventions.mlp_matmuls * rows * d * llm.mlp_hidden;
    let lm_head = f * rows * d * llm.vocab;
    let projector_flops = f * projector.macs(layout.visual as u64);
    let llm_total = llm.layers * (attention_per_layer + mlp_per_layer) + lm_head;
    Ok(FlopsReport {
        layout,
        policy,
        conventions,
        attn_projections_per_layer,
        attn_scores_per_layer,
        attention_per_layer,
        mlp_per_layer,
        lm_head,
        projector: projector_flops,
        llm_total,
        total: llm_total + projector_flops,
    })
}

/// Reports for one layout under every attention policy, for side-by-side
/// tables.
pub fn flops_by_policy(
    llm: &LlmDims,
    projector: &ProjectorDims,
    layout: TokenLayout,
    conventions: Conventions,
) -> Result<Vec<FlopsReport>> {
    let mut out = Vec::new();
    for policy in [
        MaskPolicy::Causal,
        MaskPolicy::VisualBidirectional,
        MaskPolicy::NoVisualAttention,
    ] {
        out.push(count_flops(llm, projector, layout, policy, conventions)?);
    }
    Ok(out)
}

pub fn to_gflops(flops: u64) -> f64 {
    flops as f64 / 1e9
}
