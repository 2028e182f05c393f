//! Two-stage training recipe, AdamW with cosine warmup decay, and the
//! ablation matrix over mechanism variants.
//!
//! Stage one (pretrain) supervises full captions and trains only the
//! connector, plus the visual projections when the model has them. Stage two
//! (finetune) supervises answers and trains the language stack and the
//! connector. The encoder is never trainable. Visual features are encoded
//! once per sample per variant and reused across both stages and all epochs.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use alloc::{vec, string::ToString};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::MaskPolicy;
use crate::model::{MllmModel, ModelConfig, ParamGroup, SampleView};
use crate::synth::{gen_split, GridSpec, SynthSample};
use crate::tensor::Tensor;

// ── Optimizer ────────────────────────────────────────────────────────────

/// AdamW hyperparameters. Weight decay defaults to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// AdamW over the model's trainable parameters. Moment buffers are created
/// lazily on first update, so frozen parameters never acquire state; a fresh
/// optimizer is built per stage.
pub struct AdamW {
    cfg: AdamWConfig,
    moments: BTreeMap<String, Moments>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, moments: BTreeMap::new(), t: 0 }
    }

    /// Number of parameters with live moment buffers.
    pub fn tracked_params(&self) -> usize {
        self.moments.len()
    }

    /// One update over every trainable parameter that accumulated a gradient
    /// this step. Consumes (clears) the gradients it applies.
    pub fn step(&mut self, model: &mut MllmModel, lr_by_group: &BTreeMap<ParamGroup, f32>) -> Result<()> {
        self.t += 1;
        let t = self.t;
        let cfg = self.cfg;
        let moments = &mut self.moments;
        let mut failure: Option<Error> = None;
        model.for_each_param_mut(|group, name, tensor| {
            if failure.is_some() || !tensor.requires_grad {
                return;
            }
            let Some(&lr) = lr_by_group.get(&group) else {
                failure = Some(Error::Config(format!(
                    "no learning rate provided for trainable group {group}"
                )));
                return;
            };
            let Some(grad) = tensor.grad.take() else { return };
            let entry = moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            if let Err(e) = apply_adamw(&cfg, t, lr, &grad, entry, tensor) {
                failure = Some(e);
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// The update rule itself, shared with the scalar oracle test.
fn apply_adamw(
    cfg: &AdamWConfig,
    t: u64,
    lr: f32,
    grad: &[f32],
    state: &mut Moments,
    tensor: &mut Tensor,
) -> Result<()> {
    if grad.len() != tensor.numel() {
        return Err(Error::Shape(format!(
            "gradient length {} does not match parameter {}",
            grad.len(),
            tensor.numel()
        )));
    }
    let bc1 = 1.0 - libm::powf(cfg.beta1, t as f32);
    let bc2 = 1.0 - libm::powf(cfg.beta2, t as f32);
    let data = tensor.data_mut();
    for i in 0..grad.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        data[i] -= lr * (m_hat / (libm::sqrtf(v_hat) + cfg.eps) + cfg.weight_decay * data[i]);
    }
    Ok(())
}

// ── Schedule ─────────────────────────────────────────────────────────────

/// Cosine decay with linear warmup. Warmup covers `ceil(frac * total)`
/// steps ramping `1/w .. 1`; the first post-warmup step is exactly 1.0 and
/// the final step is exactly 0.0. A single-step run uses factor 1.0.
pub fn cosine_warmup_factor(step: usize, total_steps: usize, warmup_frac: f32) -> f32 {
    if total_steps == 0 {
        return 0.0;
    }
    if total_steps == 1 {
        return 1.0;
    }
    if step >= total_steps - 1 {
        return 0.0;
    }
    let frac = warmup_frac.clamp(0.0, 1.0);
    let warmup = libm::ceilf(frac * total_steps as f32) as usize;
    if warmup > 0 && step < warmup {
        return (step + 1) as f32 / warmup as f32;
    }
    let denom = (total_steps - 1 - warmup) as f32;
    let progress = (step - warmup) as f32 / denom;
    0.5 * (1.0 + libm::cosf(core::f32::consts::PI * progress))
}

// ── Stages ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageName {
    Pretrain,
    Finetune,
}

impl StageName {
    pub fn as_str(&self) -> &'static str {
        match self {
            StageName::Pretrain => "pretrain",
            StageName::Finetune => "finetune",
        }
    }
}

impl core::fmt::Display for StageName {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One stage's recipe: which groups train, at which rates, for how long.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: StageName,
    pub trainable: BTreeSet<ParamGroup>,
    pub base_lr: f32,
    pub lr_overrides: BTreeMap<ParamGroup, f32>,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_frac: f32,
    pub optimizer: AdamWConfig,
}

impl StageSpec {
    /// Connector alignment stage: only the projector and, where present, the
    /// visual projections learn. The visual projections get a gentler rate.
    pub fn pretrain() -> Self {
        StageSpec {
            name: StageName::Pretrain,
            trainable: [ParamGroup::Projector, ParamGroup::VisualQkv].into_iter().collect(),
            base_lr: 1e-3,
            lr_overrides: [(ParamGroup::VisualQkv, 2e-4)].into_iter().collect(),
            epochs: 1,
            batch_size: 32,
            warmup_frac: 0.03,
            optimizer: AdamWConfig::default(),
        }
    }

    /// Instruction stage: the whole language stack plus the connector. The
    /// visual projections keep the same 2e-4 rate they had in pretraining.
    pub fn finetune() -> Self {
        StageSpec {
            name: StageName::Finetune,
            trainable: [
                ParamGroup::Embed,
                ParamGroup::TextQkv,
                ParamGroup::VisualQkv,
                ParamGroup::AttnOut,
                ParamGroup::Mlp,
                ParamGroup::LmHead,
                ParamGroup::Projector,
            ]
            .into_iter()
            .collect(),
            base_lr: 2e-4,
            lr_overrides: [(ParamGroup::VisualQkv, 2e-4)].into_iter().collect(),
            epochs: 1,
            batch_size: 32,
            warmup_frac: 0.03,
            optimizer: AdamWConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!("base lr must be positive, got {}", self.base_lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!(
                "warmup fraction must lie in [0, 1), got {}",
                self.warmup_frac
            )));
        }
        if self.trainable.contains(&ParamGroup::Encoder) {
            return Err(Error::Config("the encoder cannot be scheduled for training".into()));
        }
        for (group, &lr) in &self.lr_overrides {
            if !self.trainable.contains(group) {
                return Err(Error::Config(format!(
                    "learning-rate override for {group}, which this stage does not train"
                )));
            }
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("override lr for {group} must be positive")));
            }
        }
        Ok(())
    }

    /// Scheduled-rate base for a group (override or stage base).
    pub fn lr_for(&self, group: ParamGroup) -> f32 {
        self.lr_overrides.get(&group).copied().unwrap_or(self.base_lr)
    }

    /// Which sample segments this stage supervises.
    fn view<'a>(&self, sample: &'a SynthSample) -> SampleView<'a> {
        match self.name {
            StageName::Pretrain => sample.caption_view(),
            StageName::Finetune => sample.qa_view(),
        }
    }
}

// ── Reports ──────────────────────────────────────────────────────────────

/// One optimizer step's log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: StageName,
    pub loss: f32,
    pub lr_by_group: BTreeMap<ParamGroup, f32>,
}

/// Everything a finished stage reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: StageName,
    pub steps: Vec<StepRecord>,
    pub effective_groups: BTreeSet<ParamGroup>,
    /// Parameters that acquired optimizer state; equals the trainable tensor
    /// count once every group has taken a gradient.
    pub tracked_params: usize,
}

// ── Stage loop ───────────────────────────────────────────────────────────

/// Runs one stage over the dataset. `cached_features` (parallel to `data`)
/// supplies pre-encoded tap maps so the frozen encoder runs at most once per
/// sample per variant; pass `None` to encode here.
pub fn run_stage(
    model: &mut MllmModel,
    stage: &StageSpec,
    data: &[SynthSample],
    cached_features: Option<&[Vec<Tensor>]>,
    seed: u64,
) -> Result<StageReport> {
    stage.validate()?;
    if data.is_empty() {
        return Err(Error::Config(format!("stage {} has no data", stage.name)));
    }
    if let Some(cached) = cached_features {
        if cached.len() != data.len() {
            return Err(Error::Shape(format!(
                "{} cached feature sets for {} samples",
                cached.len(),
                data.len()
            )));
        }
    }
    let effective = model.set_trainable_groups(&stage.trainable)?;
    model.zero_all_grads();

    // Assemble every sample once; features and masks are reused each epoch.
    let mut inputs = Vec::with_capacity(data.len());
    for (i, sample) in data.iter().enumerate() {
        let view = stage.view(sample);
        let input = match cached_features {
            Some(cached) => model.assemble_with_features(&view, cached[i].clone())?,
            None => model.assemble(&view)?,
        };
        inputs.push(input);
    }

    let batches_per_epoch = data.len().div_ceil(stage.batch_size);
    let total_steps = stage.epochs * batches_per_epoch;
    let mut optimizer = AdamW::new(stage.optimizer);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut steps = Vec::with_capacity(total_steps);
    let mut step = 0usize;

    for epoch in 0..stage.epochs {
        // Deterministic per-epoch shuffle, independent of data content.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for batch in order.chunks(stage.batch_size) {
            let scale = 1.0 / batch.len() as f32;
            let mut batch_loss = 0.0f32;
            for &idx in batch {
                let mut pass = model.forward(&inputs[idx]).map_err(|e| {
                    Error::Domain(format!("stage {} step {step}: {e}", stage.name))
                })?;
                let loss = pass.loss_and_backward().map_err(|e| {
                    Error::Domain(format!("stage {} step {step}: {e}", stage.name))
                })?;
                batch_loss += loss * scale;
                model.accumulate_grads_scaled(&pass, scale)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Domain(format!(
                    "stage {} aborted at step {step}: non-finite loss {batch_loss}",
                    stage.name
                )));
            }
            let factor = cosine_warmup_factor(step, total_steps, stage.warmup_frac);
            let lr_by_group: BTreeMap<ParamGroup, f32> =
                effective.iter().map(|&g| (g, stage.lr_for(g) * factor)).collect();
            optimizer.step(model, &lr_by_group)?;
            steps.push(StepRecord { step, stage: stage.name, loss: batch_loss, lr_by_group });
            step += 1;
        }
    }
    Ok(StageReport {
        stage: stage.name,
        steps,
        effective_groups: effective,
        tracked_params: optimizer.tracked_params(),
    })
}

// ── Evaluation ───────────────────────────────────────────────────────────

/// Per-sample exact-match results of greedy decoding against the reference
/// answer (including its end token).
pub fn eval_details(model: &MllmModel, data: &[SynthSample], max_new: usize) -> Result<Vec<bool>> {
    eval_details_with(model, data, max_new, None)
}

/// Exact-match greedy eval; `features` supplies precomputed encoder tap maps
/// aligned with `data` (the encoder is frozen, so they are model-invariant
/// given the seed).
pub fn eval_details_with(
    model: &MllmModel,
    data: &[SynthSample],
    max_new: usize,
    features: Option<&[Vec<Tensor>]>,
) -> Result<Vec<bool>> {
    if let Some(features) = features {
        if features.len() != data.len() {
            return Err(Error::Config(format!(
                "{} feature sets for {} eval samples",
                features.len(),
                data.len()
            )));
        }
    }
    data.iter()
        .enumerate()
        .map(|(i, sample)| {
            let view = sample.prompt_view();
            let prompt = match features {
                Some(features) => model.assemble_with_features(&view, features[i].clone())?,
                None => model.assemble(&view)?,
            };
            let generated = model.generate_greedy(&prompt, max_new)?;
            Ok(generated == sample.answer)
        })
        .collect()
}

pub fn eval_accuracy(model: &MllmModel, data: &[SynthSample], max_new: usize) -> Result<f32> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty split".into()));
    }
    let details = eval_details(model, data, max_new)?;
    let correct = details.iter().filter(|&&c| c).count();
    Ok(correct as f32 / details.len() as f32)
}

// ── Variants ─────────────────────────────────────────────────────────────

/// The mechanism combinations under study. The first five are the comparison
/// table rows; the no-visual-attention reference quantifies how much visual
/// attention matters at all and is reported separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    SepQkv,
    SepQkvBidir,
    SepQkvMultiDepth,
    Combined,
    NoVisualAttention,
}

impl Variant {
    /// Comparison-table rows, in presentation order.
    pub const TABLE: [Variant; 5] = [
        Variant::Baseline,
        Variant::SepQkv,
        Variant::SepQkvBidir,
        Variant::SepQkvMultiDepth,
        Variant::Combined,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::SepQkv => "sep-qkv",
            Variant::SepQkvBidir => "sep-qkv-bidir",
            Variant::SepQkvMultiDepth => "sep-qkv-multi-depth",
            Variant::Combined => "combined",
            Variant::NoVisualAttention => "no-visual-attention",
        }
    }

    /// Applies this variant's mechanism flags to a base configuration.
    /// The base's vision depth decides the tap positions; everything else is
    /// inherited unchanged.
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        let single = single_taps(cfg.vision.layers);
        let multi = multi_taps(cfg.vision.layers);
        let (policy, separate, taps) = match self {
            Variant::Baseline => (MaskPolicy::Causal, false, single),
            Variant::SepQkv => (MaskPolicy::Causal, true, single),
            Variant::SepQkvBidir => (MaskPolicy::VisualBidirectional, true, single),
            Variant::SepQkvMultiDepth => (MaskPolicy::Causal, true, multi),
            Variant::Combined => (MaskPolicy::VisualBidirectional, true, multi),
            Variant::NoVisualAttention => (MaskPolicy::NoVisualAttention, false, single),
        };
        cfg.policy = policy;
        cfg.separate_visual_qkv = separate;
        cfg.vision.tap_layers = taps;
        cfg
    }
}

impl core::fmt::Display for Variant {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl core::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let all = [
            Variant::Baseline,
            Variant::SepQkv,
            Variant::SepQkvBidir,
            Variant::SepQkvMultiDepth,
            Variant::Combined,
            Variant::NoVisualAttention,
        ];
        all.into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

/// Penultimate block, 1-based.
fn single_taps(layers: usize) -> Vec<usize> {
    vec![if layers >= 2 { layers - 1 } else { 1 }]
}

/// Shallow / middle / penultimate blocks, 1-based, deduplicated.
fn multi_taps(layers: usize) -> Vec<usize> {
    let mut taps = vec![
        (layers).div_ceil(3).max(1),
        (2 * layers).div_ceil(3).max(1),
        if layers >= 2 { layers - 1 } else { 1 },
    ];
    taps.sort_unstable();
    taps.dedup();
    taps
}

// ── Ablation matrix ──────────────────────────────────────────────────────

/// Everything one ablation run needs: base model, task geometry, dataset
/// sizes, and both stage recipes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPlan {
    pub base: ModelConfig,
    pub data: GridSpec,
    pub train_count: usize,
    /// Caption alignment uses only the first slice of the train split,
    /// mirroring the smaller first-stage corpus of the two-dataset recipe.
    pub pretrain_count: usize,
    pub eval_count: usize,
    pub pretrain: StageSpec,
    pub finetune: StageSpec,
    pub max_new: usize,
}

impl AblationPlan {
    /// Desk-scale defaults sized so a full matrix (five table variants plus
    /// the reference, three seeds) completes in minutes on one core. The
    /// finetune recipe is recalibrated for this scale: the stage-default
    /// 2e-4 underfits badly in the step budget (eval accuracy 0.45 vs 0.70
    /// at 2e-3 in the same wall clock), and the visual projections follow
    /// the tuned base rate rather than the pretrain-style override. The
    /// data uses a jittered grid scored on collision-free eval images so
    /// accuracy reflects content-based addressing, the capability that
    /// separates the attention regimes, rather than fixed-position lookup.
    pub fn toy() -> Self {
        let mut finetune = StageSpec::finetune();
        finetune.base_lr = 2e-3;
        finetune.lr_overrides.clear();
        finetune.batch_size = 8;
        finetune.epochs = 4;
        AblationPlan {
            base: ModelConfig::toy(),
            data: GridSpec {
                grid: 2,
                palette: 4,
                noise_std: 0.2,
                jitter: true,
                distinct_colors: false,
                distinct_eval: true,
            },
            train_count: 512,
            pretrain_count: 128,
            eval_count: 96,
            pretrain: StageSpec::pretrain(),
            finetune,
            max_new: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        self.data.validate(&self.base.vision)?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.pretrain.name != StageName::Pretrain || self.finetune.name != StageName::Finetune {
            return Err(Error::Config("stage specs are wired to the wrong slots".into()));
        }
        if self.train_count == 0 || self.eval_count == 0 {
            return Err(Error::Config("train and eval splits must be non-empty".into()));
        }
        if self.pretrain_count == 0 || self.pretrain_count > self.train_count {
            return Err(Error::Config(format!(
                "pretrain slice {} must lie in 1..={}",
                self.pretrain_count, self.train_count
            )));
        }
        if self.max_new == 0 {
            return Err(Error::Config("max_new must be positive".into()));
        }
        Ok(())
    }

    /// Stable fingerprint of the plan so reports can be tied to the exact
    /// configuration that produced them.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(format!("{self:?}").as_bytes())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// One trained variant's results at one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantOutcome {
    pub variant: Variant,
    pub seed: u64,
    pub accuracy: f32,
    pub pretrain: StageReport,
    pub finetune: StageReport,
}

/// Per-seed encoder work shared across variants: tap maps for every train
/// and eval image, computed once from the widest tap set. The encoder is
/// frozen and its weights are drawn before any variant-dependent parameter,
/// so for a fixed seed every variant sees the same maps and a narrower tap
/// set is a subset of these.
pub struct SharedFeatures {
    taps: Vec<usize>,
    train: Vec<Vec<Tensor>>,
    eval: Vec<Vec<Tensor>>,
}

impl SharedFeatures {
    pub fn compute(
        plan: &AblationPlan,
        train: &[SynthSample],
        eval: &[SynthSample],
        seed: u64,
    ) -> Result<Self> {
        let cfg = Variant::Combined.apply(&plan.base);
        let taps = cfg.vision.tap_layers.clone();
        let model = MllmModel::new(cfg, seed)?;
        let encode = |split: &[SynthSample]| -> Result<Vec<Vec<Tensor>>> {
            split.iter().map(|s| model.encode_features(&s.image)).collect()
        };
        Ok(SharedFeatures { taps, train: encode(train)?, eval: encode(eval)? })
    }

    /// Projects the widest tap maps down to `taps`, cloning per sample.
    fn select(&self, taps: &[usize], split: &[Vec<Tensor>]) -> Result<Vec<Vec<Tensor>>> {
        let index: Vec<usize> = taps
            .iter()
            .map(|t| {
                self.taps.iter().position(|s| s == t).ok_or_else(|| {
                    Error::Config(format!("tap {t} not covered by shared taps {:?}", self.taps))
                })
            })
            .collect::<Result<_>>()?;
        Ok(split
            .iter()
            .map(|maps| index.iter().map(|&i| maps[i].clone()).collect())
            .collect())
    }
}

/// Trains one variant from scratch on pre-generated splits and evaluates it.
/// Identical `(plan, seed, data)` always reproduces the same outcome, with
/// or without shared features.
pub fn run_variant(
    variant: Variant,
    plan: &AblationPlan,
    train: &[SynthSample],
    eval: &[SynthSample],
    seed: u64,
    shared: Option<&SharedFeatures>,
) -> Result<VariantOutcome> {
    plan.validate()?;
    let cfg = variant.apply(&plan.base);
    let mut model = MllmModel::new(cfg, seed)?;

    // The encoder is frozen, so tap maps per image are stage-invariant.
    let (features, eval_features) = match shared {
        Some(shared) => (
            shared.select(&model.config().vision.tap_layers, &shared.train)?,
            Some(shared.select(&model.config().vision.tap_layers, &shared.eval)?),
        ),
        None => (
            train.iter().map(|s| model.encode_features(&s.image)).collect::<Result<_>>()?,
            None,
        ),
    };
    let cut = plan.pretrain_count.min(train.len());
    let pretrain =
        run_stage(&mut model, &plan.pretrain, &train[..cut], Some(&features[..cut]), seed)?;
    let finetune = run_stage(&mut model, &plan.finetune, train, Some(&features), seed)?;
    if eval.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty split".into()));
    }
    let details = eval_details_with(&model, eval, plan.max_new, eval_features.as_deref())?;
    let accuracy = details.iter().filter(|&&c| c).count() as f32 / details.len() as f32;
    Ok(VariantOutcome { variant, seed, accuracy, pretrain, finetune })
}

/// Summary row: one variant across all seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub accuracies: Vec<f32>,
    pub mean: f32,
    pub min: f32,
    pub max: f32,
}

impl AblationRow {
    fn from_accuracies(variant: Variant, accuracies: Vec<f32>) -> Self {
        let mean = accuracies.iter().sum::<f32>() / accuracies.len() as f32;
        let min = accuracies.iter().cloned().fold(f32::INFINITY, f32::min);
        let max = accuracies.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        AblationRow { variant, accuracies, mean, min, max }
    }
}

/// Full matrix results: the five comparison rows in presentation order plus
/// the no-visual-attention reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub fingerprint: u64,
    pub rows: Vec<AblationRow>,
    pub reference: AblationRow,
    pub outcomes: Vec<VariantOutcome>,
}

/// Runs the whole matrix serially: for each seed, one shared dataset feeds
/// every variant. Callers that parallelize spawn [`run_variant`] jobs
/// themselves and aggregate with [`summarize_outcomes`].
pub fn run_ablation(plan: &AblationPlan, seeds: &[u64]) -> Result<AblationReport> {
    plan.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut outcomes = Vec::new();
    for &seed in seeds {
        let (train, eval) =
            gen_split(seed, plan.train_count, plan.eval_count, &plan.data, &plan.base.vision)?;
        let shared = SharedFeatures::compute(plan, &train, &eval, seed)?;
        for variant in Variant::TABLE.into_iter().chain([Variant::NoVisualAttention]) {
            outcomes.push(run_variant(variant, plan, &train, &eval, seed, Some(&shared))?);
        }
    }
    summarize_outcomes(plan, seeds, outcomes)
}

/// Aggregates per-variant outcomes into the report. Every table variant and
/// the reference must be present for every seed.
pub fn summarize_outcomes(
    plan: &AblationPlan,
    seeds: &[u64],
    outcomes: Vec<VariantOutcome>,
) -> Result<AblationReport> {
    let collect = |variant: Variant| -> Result<AblationRow> {
        let mut accs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let hit = outcomes
                .iter()
                .find(|o| o.variant == variant && o.seed == seed)
                .ok_or_else(|| {
                    Error::Config(format!("missing outcome for {variant} at seed {seed}"))
                })?;
            if !(0.0..=1.0).contains(&hit.accuracy) {
                return Err(Error::Domain(format!(
                    "accuracy {} out of range for {variant}",
                    hit.accuracy
                )));
            }
            accs.push(hit.accuracy);
        }
        Ok(AblationRow::from_accuracies(variant, accs))
    };
    let rows: Vec<AblationRow> =
        Variant::TABLE.iter().map(|&v| collect(v)).collect::<Result<_>>()?;
    let reference = collect(Variant::NoVisualAttention)?;
    Ok(AblationReport { seeds: seeds.to_vec(), fingerprint: plan.fingerprint(), rows, reference, outcomes })
}
