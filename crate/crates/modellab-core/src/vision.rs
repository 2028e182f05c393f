//! Frozen toy vision encoder with multi-depth feature taps, plus the
//! trainable projector that maps concatenated tap features into the language
//! model's width.
//!
//! The encoder is a small pre-norm transformer over image patches with full
//! bidirectional attention and learned position embeddings. It is randomly
//! initialized and never trained; its job is to give the rest of the stack a
//! fixed, information-preserving featurizer. Taps record hidden states after
//! selected blocks (post-residual, before the next block's norm) during a
//! single forward pass, so requesting more taps never re-runs the encoder.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::ProjSet;
use crate::error::{Error, Result};
use crate::masking::{build_mask, MaskPolicy, TokenLayout};
use crate::tensor::{Tape, Tensor, ValueId};

/// Input images are dense RGB.
pub const IMAGE_CHANNELS: usize = 3;

/// Shape and depth of the toy encoder, and which block outputs feed the
/// projector. `tap_layers` are 1-based block indices, recorded after that
/// block runs, and must be strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_v: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub tap_layers: Vec<usize>,
}

impl VisionConfig {
    /// Default laboratory encoder: 36 patch tokens, taps at shallow, middle,
    /// and penultimate depth.
    pub fn toy() -> Self {
        VisionConfig {
            image_size: 24,
            patch_size: 4,
            d_v: 64,
            layers: 6,
            heads: 4,
            mlp_hidden: 256,
            tap_layers: vec![2, 4, 5],
        }
    }

    /// Same encoder with a single penultimate tap: the one-feature baseline.
    pub fn toy_single_tap() -> Self {
        let mut cfg = Self::toy();
        cfg.tap_layers = vec![cfg.layers - 1];
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.d_v == 0 || self.layers == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("encoder widths and depth must be positive".into()));
        }
        if self.heads == 0 || self.d_v % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder width {} not divisible into {} heads",
                self.d_v, self.heads
            )));
        }
        if self.tap_layers.is_empty() {
            return Err(Error::Config("at least one tap layer is required".into()));
        }
        for window in self.tap_layers.windows(2) {
            if window[1] <= window[0] {
                return Err(Error::Config(format!(
                    "tap layers must be strictly increasing, got {:?}",
                    self.tap_layers
                )));
            }
        }
        let last = *self.tap_layers.last().expect("non-empty");
        let first = self.tap_layers[0];
        if first == 0 || last > self.layers {
            return Err(Error::Config(format!(
                "tap layers are 1-based and at most {}, got {:?}",
                self.layers, self.tap_layers
            )));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * IMAGE_CHANNELS
    }

    /// Number of tapped feature maps.
    pub fn k(&self) -> usize {
        self.tap_layers.len()
    }
}

/// Flattens `[S, S, 3]` pixels into `[n, patch_size^2 * 3]` patch vectors,
/// patches in row-major reading order, pixels within a patch in
/// (row, column, channel) order.
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<Tensor> {
    let sh = image.shape();
    if sh.len() != 3 || sh[2] != IMAGE_CHANNELS || sh[0] != sh[1] {
        return Err(Error::Shape(format!(
            "patchify expects a square [S, S, {IMAGE_CHANNELS}] image, got {sh:?}"
        )));
    }
    let size = sh[0];
    if patch_size == 0 || size % patch_size != 0 {
        return Err(Error::Shape(format!(
            "image side {size} is not a multiple of patch size {patch_size}"
        )));
    }
    let per_side = size / patch_size;
    let pd = patch_size * patch_size * IMAGE_CHANNELS;
    let src = image.data();
    let mut out = Vec::with_capacity(per_side * per_side * pd);
    for pr in 0..per_side {
        for pc in 0..per_side {
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    let y = pr * patch_size + dy;
                    let x = pc * patch_size + dx;
                    let base = (y * size + x) * IMAGE_CHANNELS;
                    out.extend_from_slice(&src[base..base + IMAGE_CHANNELS]);
                }
            }
        }
    }
    Tensor::from_vec(vec![per_side * per_side, pd], out)
}

struct EncoderBlock {
    attn_norm: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    bq: Tensor,
    bk: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    mlp_norm: Tensor,
    w_up: Tensor,
    b_up: Tensor,
    w_down: Tensor,
    b_down: Tensor,
}

/// The frozen featurizer. All parameters keep `requires_grad = false`, so no
/// backward pass can ever deposit gradients here.
pub struct VisionEncoder {
    cfg: VisionConfig,
    patch_weight: Tensor,
    patch_bias: Tensor,
    pos_embed: Tensor,
    blocks: Vec<EncoderBlock>,
    rms_eps: f32,
}

fn randn_frozen<R: Rng>(shape: Vec<usize>, std: f32, rng: &mut R) -> Result<Tensor> {
    Ok(Tensor::randn(shape, std, rng)?.with_requires_grad(false))
}

fn fan_in_std(fan_in: usize) -> f32 {
    1.0 / libm::sqrtf(fan_in as f32)
}

impl VisionEncoder {
    /// Draws all weights in a fixed documented order: patch embedding,
    /// position embedding, then each block front to back (attention norm,
    /// q/k/v/o weights and biases, MLP norm, up, down).
    pub fn init<R: Rng>(cfg: VisionConfig, rms_eps: f32, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, n, pd) = (cfg.d_v, cfg.n_patches(), cfg.patch_dim());
        let patch_weight = randn_frozen(vec![pd, d], fan_in_std(pd), rng)?;
        let patch_bias = Tensor::zeros(vec![d]);
        let pos_embed = randn_frozen(vec![n, d], 0.02, rng)?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            blocks.push(EncoderBlock {
                attn_norm: Tensor::full(vec![d], 1.0)?,
                wq: randn_frozen(vec![d, d], fan_in_std(d), rng)?,
                wk: randn_frozen(vec![d, d], fan_in_std(d), rng)?,
                wv: randn_frozen(vec![d, d], fan_in_std(d), rng)?,
                bq: Tensor::zeros(vec![d]),
                bk: Tensor::zeros(vec![d]),
                bv: Tensor::zeros(vec![d]),
                wo: randn_frozen(vec![d, d], fan_in_std(d), rng)?,
                bo: Tensor::zeros(vec![d]),
                mlp_norm: Tensor::full(vec![d], 1.0)?,
                w_up: randn_frozen(vec![d, cfg.mlp_hidden], fan_in_std(d), rng)?,
                b_up: Tensor::zeros(vec![cfg.mlp_hidden]),
                w_down: randn_frozen(vec![cfg.mlp_hidden, d], fan_in_std(cfg.mlp_hidden), rng)?,
                b_down: Tensor::zeros(vec![d]),
            });
        }
        Ok(VisionEncoder { cfg, patch_weight, patch_bias, pos_embed, blocks, rms_eps })
    }

    pub fn config(&self) -> &VisionConfig {
        &self.cfg
    }

    /// Test access to the patch embedding and position embedding.
    pub fn patch_embedding_mut(&mut self) -> (&mut Tensor, &mut Tensor, &mut Tensor) {
        (&mut self.patch_weight, &mut self.patch_bias, &mut self.pos_embed)
    }

    /// Visits every weight with a stable name, in construction order.
    pub fn for_each_param(&self, mut f: impl FnMut(&str, &Tensor)) {
        f("patch.weight", &self.patch_weight);
        f("patch.bias", &self.patch_bias);
        f("pos_embed", &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("blocks.{i}.attn_norm.gain"), &b.attn_norm);
            f(&format!("blocks.{i}.attn.wq"), &b.wq);
            f(&format!("blocks.{i}.attn.wk"), &b.wk);
            f(&format!("blocks.{i}.attn.wv"), &b.wv);
            f(&format!("blocks.{i}.attn.bq"), &b.bq);
            f(&format!("blocks.{i}.attn.bk"), &b.bk);
            f(&format!("blocks.{i}.attn.bv"), &b.bv);
            f(&format!("blocks.{i}.attn.wo"), &b.wo);
            f(&format!("blocks.{i}.attn.bo"), &b.bo);
            f(&format!("blocks.{i}.mlp_norm.gain"), &b.mlp_norm);
            f(&format!("blocks.{i}.mlp.w_up"), &b.w_up);
            f(&format!("blocks.{i}.mlp.b_up"), &b.b_up);
            f(&format!("blocks.{i}.mlp.w_down"), &b.w_down);
            f(&format!("blocks.{i}.mlp.b_down"), &b.b_down);
        }
    }

    /// Mutable counterpart of [`Self::for_each_param`]; same order and names.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("patch.weight", &mut self.patch_weight);
        f("patch.bias", &mut self.patch_bias);
        f("pos_embed", &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("blocks.{i}.attn_norm.gain"), &mut b.attn_norm);
            f(&format!("blocks.{i}.attn.wq"), &mut b.wq);
            f(&format!("blocks.{i}.attn.wk"), &mut b.wk);
            f(&format!("blocks.{i}.attn.wv"), &mut b.wv);
            f(&format!("blocks.{i}.attn.bq"), &mut b.bq);
            f(&format!("blocks.{i}.attn.bk"), &mut b.bk);
            f(&format!("blocks.{i}.attn.bv"), &mut b.bv);
            f(&format!("blocks.{i}.attn.wo"), &mut b.wo);
            f(&format!("blocks.{i}.attn.bo"), &mut b.bo);
            f(&format!("blocks.{i}.mlp_norm.gain"), &mut b.mlp_norm);
            f(&format!("blocks.{i}.mlp.w_up"), &mut b.w_up);
            f(&format!("blocks.{i}.mlp.b_up"), &mut b.b_up);
            f(&format!("blocks.{i}.mlp.w_down"), &mut b.w_down);
            f(&format!("blocks.{i}.mlp.b_down"), &mut b.b_down);
        }
    }

    /// Runs the encoder once and returns the tapped hidden states in tap
    /// order, each `[n, d_v]`. Exactly `cfg.layers` blocks execute no matter
    /// how many taps are requested.
    pub fn encode(&self, tape: &mut Tape, image: &Tensor) -> Result<Vec<ValueId>> {
        let sh = image.shape();
        if sh != [self.cfg.image_size, self.cfg.image_size, IMAGE_CHANNELS] {
            return Err(Error::Shape(format!(
                "encoder expects a [{s}, {s}, {IMAGE_CHANNELS}] image, got {sh:?}",
                s = self.cfg.image_size
            )));
        }
        let patches = patchify(image, self.cfg.patch_size)?;
        let patches = tape.leaf(&patches)?;
        let pw = tape.leaf(&self.patch_weight)?;
        let pb = tape.leaf(&self.patch_bias)?;
        let pos = tape.leaf(&self.pos_embed)?;
        let mut x = tape.matmul(patches, pw)?;
        x = tape.add(x, pb)?;
        x = tape.add(x, pos)?;

        let n = self.cfg.n_patches();
        let mask = build_mask(
            TokenLayout::new(0, n, 0)?,
            MaskPolicy::VisualBidirectional,
        )
        .into_shared();
        let head_dim = self.cfg.d_v / self.cfg.heads;
        let inv_sqrt = 1.0 / libm::sqrtf(head_dim as f32);

        let mut taps = Vec::with_capacity(self.cfg.k());
        for (index, block) in self.blocks.iter().enumerate() {
            let attn_gain = tape.leaf(&block.attn_norm)?;
            let normed = tape.rms_norm(x, attn_gain, self.rms_eps)?;
            let set = ProjSet {
                wq: tape.leaf(&block.wq)?,
                wk: tape.leaf(&block.wk)?,
                wv: tape.leaf(&block.wv)?,
                bq: tape.leaf(&block.bq)?,
                bk: tape.leaf(&block.bk)?,
                bv: tape.leaf(&block.bv)?,
            };
            let (q, k, v) = set.project(tape, normed)?;
            let scores = tape.attn_scores(q, k, &mask, self.cfg.heads)?;
            let scaled = tape.scale(scores, inv_sqrt)?;
            let probs = tape.masked_softmax(scaled, &mask)?;
            let mixed = tape.attn_mix(probs, v, &mask, self.cfg.heads)?;
            let wo = tape.leaf(&block.wo)?;
            let bo = tape.leaf(&block.bo)?;
            let attn_out = tape.matmul(mixed, wo)?;
            let attn_out = tape.add(attn_out, bo)?;
            x = tape.add(x, attn_out)?;

            let mlp_gain = tape.leaf(&block.mlp_norm)?;
            let normed = tape.rms_norm(x, mlp_gain, self.rms_eps)?;
            let w_up = tape.leaf(&block.w_up)?;
            let b_up = tape.leaf(&block.b_up)?;
            let hidden = tape.matmul(normed, w_up)?;
            let hidden = tape.add(hidden, b_up)?;
            let hidden = tape.silu(hidden)?;
            let w_down = tape.leaf(&block.w_down)?;
            let b_down = tape.leaf(&block.b_down)?;
            let mlp_out = tape.matmul(hidden, w_down)?;
            let mlp_out = tape.add(mlp_out, b_down)?;
            x = tape.add(x, mlp_out)?;

            // Taps are 1-based: record after block `index + 1` has run.
            if self.cfg.tap_layers.contains(&(index + 1)) {
                taps.push(x);
            }
        }
        debug_assert_eq!(taps.len(), self.cfg.k());
        Ok(taps)
    }
}

/// Trainable two-layer MLP mapping `[n, K*d_v]` concatenated tap features to
/// `[n, d_l]` language-model inputs.
#[derive(Debug, Clone)]
pub struct Projector {
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

/// Tape handles for a [`Projector`]'s weights during one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ProjectorIds {
    pub w_in: ValueId,
    pub b_in: ValueId,
    pub w_out: ValueId,
    pub b_out: ValueId,
}

impl Projector {
    /// `in_width` must equal `K * d_v` of the vision config feeding it.
    pub fn init<R: Rng>(in_width: usize, d_l: usize, rng: &mut R) -> Result<Self> {
        if in_width == 0 || d_l == 0 {
            return Err(Error::Config("projector widths must be positive".into()));
        }
        Ok(Projector {
            w_in: Tensor::randn(vec![in_width, d_l], fan_in_std(in_width), rng)?
                .with_requires_grad(true),
            b_in: Tensor::zeros(vec![d_l]).with_requires_grad(true),
            w_out: Tensor::randn(vec![d_l, d_l], fan_in_std(d_l), rng)?.with_requires_grad(true),
            b_out: Tensor::zeros(vec![d_l]).with_requires_grad(true),
        })
    }

    pub fn in_width(&self) -> usize {
        self.w_in.shape()[0]
    }

    pub fn leaf(&self, tape: &mut Tape) -> Result<ProjectorIds> {
        Ok(ProjectorIds {
            w_in: tape.leaf(&self.w_in)?,
            b_in: tape.leaf(&self.b_in)?,
            w_out: tape.leaf(&self.w_out)?,
            b_out: tape.leaf(&self.b_out)?,
        })
    }
}

/// Concatenates the K tap maps along the feature axis and applies the
/// projector MLP. Token count is preserved: `[n, K*d_v] -> [n, d_l]`.
pub fn connect(tape: &mut Tape, features: &[ValueId], proj: &ProjectorIds) -> Result<ValueId> {
    if features.is_empty() {
        return Err(Error::Shape("connect needs at least one feature map".into()));
    }
    let n = tape.shape(features[0])[0];
    for &f in features {
        let sh = tape.shape(f);
        if sh.len() != 2 || sh[0] != n {
            return Err(Error::Shape(format!(
                "connect expects every map to have {n} rows, got {sh:?}"
            )));
        }
    }
    let cat = tape.concat_last_dim(features)?;
    let cat_width = tape.shape(cat)[1];
    let in_width = tape.shape(proj.w_in)[0];
    if cat_width != in_width {
        return Err(Error::Shape(format!(
            "projector expects input width {in_width}, concatenated maps have {cat_width}"
        )));
    }
    let hidden = tape.matmul(cat, proj.w_in)?;
    let hidden = tape.add(hidden, proj.b_in)?;
    let hidden = tape.silu(hidden)?;
    let out = tape.matmul(hidden, proj.w_out)?;
    tape.add(out, proj.b_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_against_fd;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(taps: Vec<usize>) -> VisionConfig {
        VisionConfig {
            image_size: 8,
            patch_size: 4,
            d_v: 8,
            layers: 3,
            heads: 2,
            mlp_hidden: 16,
            tap_layers: taps,
        }
    }

    #[test]
    fn config_validation_rejects_bad_setups() {
        assert!(small_cfg(vec![1]).validate().is_ok());
        assert!(small_cfg(vec![2, 2]).validate().is_err());
        assert!(small_cfg(vec![3, 2]).validate().is_err());
        assert!(small_cfg(vec![0]).validate().is_err());
        assert!(small_cfg(vec![4]).validate().is_err());
        assert!(small_cfg(vec![]).validate().is_err());
        let mut odd = small_cfg(vec![1]);
        odd.image_size = 9;
        assert!(odd.validate().is_err());
        let mut heads = small_cfg(vec![1]);
        heads.heads = 3;
        assert!(heads.validate().is_err());
        assert!(VisionConfig::toy().validate().is_ok());
        assert_eq!(VisionConfig::toy().n_patches(), 36);
        assert_eq!(VisionConfig::toy().k(), 3);
        assert_eq!(VisionConfig::toy_single_tap().tap_layers, vec![5]);
    }

    #[test]
    fn patchify_reads_patches_in_reading_order() {
        // Encode each pixel's (y, x, c) into a unique value.
        let mut data = vec![0.0f32; 8 * 8 * 3];
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    data[(y * 8 + x) * 3 + c] = (y * 100 + x * 10 + c) as f32;
                }
            }
        }
        let image = Tensor::from_vec(vec![8, 8, 3], data).unwrap();
        let patches = patchify(&image, 4).unwrap();
        assert_eq!(patches.shape(), &[4, 48]);
        // Patch 1 is the top-right block; its first pixel is (0, 4).
        assert_eq!(patches.get2(1, 0), 40.0);
        assert_eq!(patches.get2(1, 1), 41.0);
        // Patch 2 is bottom-left; its first pixel is (4, 0).
        assert_eq!(patches.get2(2, 0), 400.0);
        // Second row of patch 0 starts at pixel (1, 0).
        assert_eq!(patches.get2(0, 4 * 3), 100.0);
    }

    #[test]
    fn patchify_rejects_bad_shapes() {
        let img = Tensor::zeros(vec![8, 8, 3]);
        assert!(patchify(&img, 3).is_err());
        assert!(patchify(&Tensor::zeros(vec![8, 4, 3]), 4).is_err());
        assert!(patchify(&Tensor::zeros(vec![8, 8, 1]), 4).is_err());
    }

    #[test]
    fn uniform_image_yields_identical_tokens_without_position_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut enc = VisionEncoder::init(small_cfg(vec![1, 3]), 1e-6, &mut rng).unwrap();
        {
            let (pw, pb, pos) = enc.patch_embedding_mut();
            // Zero patch weights, a nonzero shared bias, and no position
            // signal: every patch token starts identical and must stay so.
            for v in pw.data_mut() {
                *v = 0.0;
            }
            for (i, v) in pb.data_mut().iter_mut().enumerate() {
                *v = 0.1 * (i as f32 + 1.0);
            }
            for v in pos.data_mut() {
                *v = 0.0;
            }
        }
        let image = Tensor::zeros(vec![8, 8, 3]);
        let mut tape = Tape::new();
        let taps = enc.encode(&mut tape, &image).unwrap();
        assert_eq!(taps.len(), 2);
        for &tap in &taps {
            let v = tape.value(tap);
            let d = tape.shape(tap)[1];
            let first = &v[..d];
            for row in 1..tape.shape(tap)[0] {
                assert_eq!(&v[row * d..(row + 1) * d], first, "rows must be identical");
            }
            assert!(first.iter().any(|&x| x != 0.0), "bias must propagate");
        }
    }

    #[test]
    fn taps_arrive_in_depth_order_with_right_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = VisionEncoder::init(small_cfg(vec![1, 3]), 1e-6, &mut rng).unwrap();
        let image = Tensor::randn(vec![8, 8, 3], 1.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let taps = enc.encode(&mut tape, &image).unwrap();
        assert_eq!(taps.len(), 2);
        for &tap in &taps {
            assert_eq!(tape.shape(tap), &[4, 8]);
        }
        assert_ne!(tape.value(taps[0]), tape.value(taps[1]));
    }

    #[test]
    fn tap_count_does_not_change_encoder_work() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc_one = VisionEncoder::init(small_cfg(vec![3]), 1e-6, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc_three = VisionEncoder::init(small_cfg(vec![1, 2, 3]), 1e-6, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let image = Tensor::randn(vec![8, 8, 3], 1.0, &mut rng).unwrap();

        let mut tape = Tape::new();
        enc_one.encode(&mut tape, &image).unwrap();
        let macs_one = tape.mac_count();

        let mut tape = Tape::new();
        let taps = enc_three.encode(&mut tape, &image).unwrap();
        assert_eq!(taps.len(), 3);
        assert_eq!(
            tape.mac_count(),
            macs_one,
            "taps are copies; more taps must not add encoder work"
        );
    }

    #[test]
    fn encoder_never_accumulates_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let enc = VisionEncoder::init(small_cfg(vec![3]), 1e-6, &mut rng).unwrap();
        let image = Tensor::randn(vec![8, 8, 3], 1.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let taps = enc.encode(&mut tape, &image).unwrap();
        let sq = tape.mul(taps[0], taps[0]).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.leaf_grad_count(), 0, "frozen weights must stay grad-free");
    }

    #[test]
    fn encode_rejects_wrong_image_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = VisionEncoder::init(small_cfg(vec![1]), 1e-6, &mut rng).unwrap();
        let mut tape = Tape::new();
        assert!(enc.encode(&mut tape, &Tensor::zeros(vec![12, 12, 3])).is_err());
    }

    #[test]
    fn connect_preserves_token_count_for_each_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (n, d_v, d_l) = (4, 8, 16);
        for k in 1..=3usize {
            let proj = Projector::init(k * d_v, d_l, &mut rng).unwrap();
            let mut tape = Tape::new();
            let ids = proj.leaf(&mut tape).unwrap();
            let maps: Vec<_> = (0..k)
                .map(|_| {
                    let t = Tensor::randn(vec![n, d_v], 1.0, &mut rng).unwrap();
                    tape.leaf(&t).unwrap()
                })
                .collect();
            let out = connect(&mut tape, &maps, &ids).unwrap();
            assert_eq!(tape.shape(out), &[n, d_l]);
        }
    }

    #[test]
    fn connect_with_one_map_is_a_plain_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let proj = Projector::init(8, 16, &mut rng).unwrap();
        let feat = Tensor::randn(vec![4, 8], 1.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let ids = proj.leaf(&mut tape).unwrap();
        let f = tape.leaf(&feat).unwrap();
        let via_connect = connect(&mut tape, &[f], &ids).unwrap();
        let h = tape.matmul(f, ids.w_in).unwrap();
        let h = tape.add(h, ids.b_in).unwrap();
        let h = tape.silu(h).unwrap();
        let o = tape.matmul(h, ids.w_out).unwrap();
        let direct = tape.add(o, ids.b_out).unwrap();
        assert_eq!(tape.value(via_connect), tape.value(direct));
    }

    #[test]
    fn connect_rejects_mismatched_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let proj = Projector::init(16, 8, &mut rng).unwrap();
        let mut tape = Tape::new();
        let ids = proj.leaf(&mut tape).unwrap();
        let a = tape.constant(vec![4, 8], vec![0.0; 32]).unwrap();
        let b = tape.constant(vec![3, 8], vec![0.0; 24]).unwrap();
        assert!(connect(&mut tape, &[a, b], &ids).is_err());
        // Width mismatch: K=1 map feeding a K=2 projector.
        assert!(connect(&mut tape, &[a], &ids).is_err());
        assert!(connect(&mut tape, &[], &ids).is_err());
    }

    #[test]
    fn every_tap_map_receives_gradient_through_connect() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (n, d_v, d_l, k) = (3, 4, 8, 3);
        let proj = Projector::init(k * d_v, d_l, &mut rng).unwrap();
        let mut tape = Tape::new();
        let ids = proj.leaf(&mut tape).unwrap();
        let maps: Vec<_> = (0..k)
            .map(|_| {
                let t = Tensor::randn(vec![n, d_v], 1.0, &mut rng)
                    .unwrap()
                    .with_requires_grad(true);
                tape.leaf(&t).unwrap()
            })
            .collect();
        let out = connect(&mut tape, &maps, &ids).unwrap();
        let sq = tape.mul(out, out).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        for &m in &maps {
            let g = tape.grad(m).expect("map must get a gradient");
            assert!(g.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn connect_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (n, d_v, d_l, k) = (2, 3, 4, 2);
        let proj = Projector::init(k * d_v, d_l, &mut rng).unwrap();
        let maps: Vec<Tensor> = (0..k)
            .map(|_| Tensor::randn(vec![n, d_v], 0.8, &mut rng).unwrap())
            .collect();
        let mut inputs = vec![
            proj.w_in.clone(),
            proj.b_in.clone(),
            proj.w_out.clone(),
            proj.b_out.clone(),
        ];
        inputs.extend(maps);
        check_against_fd(&inputs, |tape, ids| {
            let pids = ProjectorIds { w_in: ids[0], b_in: ids[1], w_out: ids[2], b_out: ids[3] };
            let out = connect(tape, &ids[4..], &pids)?;
            let sq = tape.mul(out, out)?;
            tape.sum(sq)
        })
        .unwrap();
    }
}
