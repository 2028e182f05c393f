//! Multi-head self-attention with per-modality projection routing.
//!
//! The sequence is laid out as `[system | visual | user]` rows. When a layer
//! carries a second projection set, visual rows are projected with it and
//! text rows with the primary set; the attention pattern itself is whatever
//! the [`AttentionMask`] says. Routing is implemented by slicing the row
//! segments, projecting each, and stitching them back together, so it costs
//! exactly the same multiply-accumulates as a single fused projection and is
//! bit-identical to it while both projection sets hold equal weights.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::masking::{AttentionMask, TokenLayout};
use crate::tensor::{Tape, ValueId};

/// Tape handles for one q/k/v projection set (weights plus biases).
///
/// Weight matrices are stored input-major, `[d_model, width]`, so projection
/// is `x @ w + b` without a transpose.
#[derive(Debug, Clone, Copy)]
pub struct ProjSet {
    pub wq: ValueId,
    pub wk: ValueId,
    pub wv: ValueId,
    pub bq: ValueId,
    pub bk: ValueId,
    pub bv: ValueId,
}

impl ProjSet {
    /// `x [rows, d] -> (q, k, v)`, each `[rows, width]`.
    pub fn project(&self, tape: &mut Tape, x: ValueId) -> Result<(ValueId, ValueId, ValueId)> {
        let q = tape.matmul(x, self.wq)?;
        let q = tape.add(q, self.bq)?;
        let k = tape.matmul(x, self.wk)?;
        let k = tape.add(k, self.bk)?;
        let v = tape.matmul(x, self.wv)?;
        let v = tape.add(v, self.bv)?;
        Ok((q, k, v))
    }
}

/// Projection sets for one layer: `text` always exists, `visual` only when
/// the layer routes visual rows through their own weights.
#[derive(Debug, Clone, Copy)]
pub struct QkvRouting {
    pub text: ProjSet,
    pub visual: Option<ProjSet>,
}

/// Projects every row of `x` to q/k/v, routing visual rows through the
/// visual projection set when one is present.
pub fn project_qkv(
    tape: &mut Tape,
    x: ValueId,
    routing: &QkvRouting,
    layout: &TokenLayout,
) -> Result<(ValueId, ValueId, ValueId)> {
    let rows = tape.shape(x)[0];
    if rows != layout.total() {
        return Err(Error::Shape(format!(
            "projection input has {rows} rows, layout describes {}",
            layout.total()
        )));
    }
    let Some(visual) = routing.visual else {
        return routing.text.project(tape, x);
    };
    if layout.visual == 0 {
        return routing.text.project(tape, x);
    }

    // (start, len, projection) for each non-empty contiguous segment.
    let segments: Vec<(usize, usize, ProjSet)> = [
        (0, layout.system, routing.text),
        (layout.system, layout.visual, visual),
        (layout.system + layout.visual, layout.user, routing.text),
    ]
    .into_iter()
    .filter(|&(_, len, _)| len > 0)
    .collect();

    let mut qs = Vec::new();
    let mut ks = Vec::new();
    let mut vs = Vec::new();
    for (start, len, proj) in segments {
        let seg = tape.slice_rows(x, start, len)?;
        let (q, k, v) = proj.project(tape, seg)?;
        qs.push(q);
        ks.push(k);
        vs.push(v);
    }
    Ok((
        tape.concat_rows(&qs)?,
        tape.concat_rows(&ks)?,
        tape.concat_rows(&vs)?,
    ))
}

/// Full attention body for one layer: routed q/k/v projection, rotary
/// position encoding at absolute positions `0..N`, scaled masked softmax,
/// and value mixing. Returns the mixed heads `[N, width]`, before the output
/// projection. Rows the mask bypasses come back as exact zeros.
pub fn attend(
    tape: &mut Tape,
    x: ValueId,
    routing: &QkvRouting,
    layout: &TokenLayout,
    mask: &Rc<AttentionMask>,
    heads: usize,
    rope_base: f32,
) -> Result<ValueId> {
    let (q, k, v) = project_qkv(tape, x, routing, layout)?;
    let width = tape.shape(q)[1];
    if heads == 0 || width % heads != 0 {
        return Err(Error::Shape(format!(
            "attend: width {width} not divisible into {heads} heads"
        )));
    }
    let head_dim = width / heads;
    let positions: Vec<usize> = (0..layout.total()).collect();
    let q = tape.rope(q, heads, rope_base, &positions)?;
    let k = tape.rope(k, heads, rope_base, &positions)?;
    let scores = tape.attn_scores(q, k, mask, heads)?;
    let scaled = tape.scale(scores, 1.0 / libm::sqrtf(head_dim as f32))?;
    let probs = tape.masked_softmax(scaled, mask)?;
    tape.attn_mix(probs, v, mask, heads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_against_fd;
    use crate::masking::{build_mask, MaskPolicy};
    use crate::tensor::Tensor;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_proj(d: usize, width: usize, rng: &mut ChaCha8Rng) -> [Tensor; 6] {
        let std = 0.2;
        [
            Tensor::randn(vec![d, width], std, rng).unwrap().with_requires_grad(true),
            Tensor::randn(vec![d, width], std, rng).unwrap().with_requires_grad(true),
            Tensor::randn(vec![d, width], std, rng).unwrap().with_requires_grad(true),
            Tensor::randn(vec![width], std, rng).unwrap().with_requires_grad(true),
            Tensor::randn(vec![width], std, rng).unwrap().with_requires_grad(true),
            Tensor::randn(vec![width], std, rng).unwrap().with_requires_grad(true),
        ]
    }

    fn leaf_set(tape: &mut Tape, t: &[Tensor; 6]) -> ProjSet {
        ProjSet {
            wq: tape.leaf(&t[0]).unwrap(),
            wk: tape.leaf(&t[1]).unwrap(),
            wv: tape.leaf(&t[2]).unwrap(),
            bq: tape.leaf(&t[3]).unwrap(),
            bk: tape.leaf(&t[4]).unwrap(),
            bv: tape.leaf(&t[5]).unwrap(),
        }
    }

    #[test]
    fn routed_projection_with_equal_weights_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 8;
        let layout = TokenLayout::new(2, 3, 2).unwrap();
        let text = rand_proj(d, d, &mut rng);
        let x = Tensor::randn(vec![layout.total(), d], 1.0, &mut rng).unwrap();

        let mut tape_a = Tape::new();
        let xa = tape_a.leaf(&x).unwrap();
        let text_a = leaf_set(&mut tape_a, &text);
        let routing_plain = QkvRouting { text: text_a, visual: None };
        let (q0, k0, v0) = project_qkv(&mut tape_a, xa, &routing_plain, &layout).unwrap();

        let mut tape_b = Tape::new();
        let xb = tape_b.leaf(&x).unwrap();
        let text_b = leaf_set(&mut tape_b, &text);
        let visual_b = leaf_set(&mut tape_b, &text.clone());
        let routing_split = QkvRouting { text: text_b, visual: Some(visual_b) };
        let (q1, k1, v1) = project_qkv(&mut tape_b, xb, &routing_split, &layout).unwrap();

        assert_eq!(tape_a.value(q0), tape_b.value(q1));
        assert_eq!(tape_a.value(k0), tape_b.value(k1));
        assert_eq!(tape_a.value(v0), tape_b.value(v1));
    }

    #[test]
    fn routing_costs_the_same_macs_as_a_fused_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = 8;
        let layout = TokenLayout::new(2, 3, 2).unwrap();
        let text = rand_proj(d, d, &mut rng);
        let x = Tensor::randn(vec![layout.total(), d], 1.0, &mut rng).unwrap();

        let mut tape_a = Tape::new();
        let xa = tape_a.leaf(&x).unwrap();
        let ta = leaf_set(&mut tape_a, &text);
        tape_a.reset_mac_count();
        project_qkv(&mut tape_a, xa, &QkvRouting { text: ta, visual: None }, &layout).unwrap();
        let fused = tape_a.mac_count();

        let mut tape_b = Tape::new();
        let xb = tape_b.leaf(&x).unwrap();
        let tb = leaf_set(&mut tape_b, &text);
        let vb = leaf_set(&mut tape_b, &text.clone());
        tape_b.reset_mac_count();
        project_qkv(&mut tape_b, xb, &QkvRouting { text: tb, visual: Some(vb) }, &layout).unwrap();
        assert_eq!(tape_b.mac_count(), fused);
    }

    #[test]
    fn visual_loss_leaves_text_query_weights_untouched() {
        // q vectors only enter their own row's scores, so a loss restricted
        // to visual rows cannot reach the text q projection. Text k/v still
        // matter because visual rows attend over system keys.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = 8;
        let layout = TokenLayout::new(2, 3, 2).unwrap();
        let mask = build_mask(layout, MaskPolicy::VisualBidirectional).into_shared();
        let text = rand_proj(d, d, &mut rng);
        let visual = rand_proj(d, d, &mut rng);
        let x = Tensor::randn(vec![layout.total(), d], 1.0, &mut rng).unwrap();

        let mut tape = Tape::new();
        let xv = tape.leaf(&x).unwrap();
        let ts = leaf_set(&mut tape, &text);
        let vs = leaf_set(&mut tape, &visual);
        let routing = QkvRouting { text: ts, visual: Some(vs) };
        let mixed = attend(&mut tape, xv, &routing, &layout, &mask, 2, 10_000.0).unwrap();
        let visual_rows = tape.slice_rows(mixed, layout.system, layout.visual).unwrap();
        let sq = tape.mul(visual_rows, visual_rows).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();

        let text_wq_grad = tape.grad(ts.wq).unwrap();
        assert!(text_wq_grad.iter().all(|&g| g == 0.0));
        let visual_wq_grad = tape.grad(vs.wq).unwrap();
        assert!(visual_wq_grad.iter().any(|&g| g != 0.0));
        let text_wk_grad = tape.grad(ts.wk).unwrap();
        assert!(text_wk_grad.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn single_token_attention_returns_its_own_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let d = 4;
        let layout = TokenLayout::new(0, 0, 1).unwrap();
        let mask = build_mask(layout, MaskPolicy::Causal).into_shared();
        let text = rand_proj(d, d, &mut rng);
        let x = Tensor::randn(vec![1, d], 1.0, &mut rng).unwrap();

        let mut tape = Tape::new();
        let xv = tape.leaf(&x).unwrap();
        let ts = leaf_set(&mut tape, &text);
        let routing = QkvRouting { text: ts, visual: None };
        let mixed = attend(&mut tape, xv, &routing, &layout, &mask, 2, 10_000.0).unwrap();
        // One allowed key means softmax weight 1, so the output is exactly v.
        let (_, _, v) = project_qkv(&mut tape, xv, &routing, &layout).unwrap();
        for (m, vv) in tape.value(mixed).iter().zip(tape.value(v)) {
            assert!((m - vv).abs() < 1e-6);
        }
    }

    #[test]
    fn attend_gradients_match_fd_with_routing() {
        let d = 4;
        let layout = TokenLayout::new(1, 2, 1).unwrap();
        let mask = build_mask(layout, MaskPolicy::VisualBidirectional).into_shared();
        let mut rng = ChaCha8Rng::seed_from_u64(15);

        let mut inputs = vec![Tensor::randn(vec![layout.total(), d], 0.8, &mut rng).unwrap()];
        inputs.extend(rand_proj(d, d, &mut rng));
        inputs.extend(rand_proj(d, d, &mut rng));

        check_against_fd(&inputs, move |tape, ids| {
            let set = |o: usize| ProjSet {
                wq: ids[o],
                wk: ids[o + 1],
                wv: ids[o + 2],
                bq: ids[o + 3],
                bk: ids[o + 4],
                bv: ids[o + 5],
            };
            let routing = QkvRouting { text: set(1), visual: Some(set(7)) };
            let mixed = attend(tape, ids[0], &routing, &layout, &mask, 2, 10_000.0)?;
            let sq = tape.mul(mixed, mixed)?;
            tape.sum(sq)
        })
        .unwrap();
    }

    #[test]
    fn empty_visual_segment_falls_back_to_text_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let d = 4;
        let layout = TokenLayout::new(1, 0, 2).unwrap();
        let text = rand_proj(d, d, &mut rng);
        let visual = rand_proj(d, d, &mut rng);
        let x = Tensor::randn(vec![3, d], 1.0, &mut rng).unwrap();

        let mut tape = Tape::new();
        let xv = tape.leaf(&x).unwrap();
        let ts = leaf_set(&mut tape, &text);
        let vs = leaf_set(&mut tape, &visual);
        let (q_routed, _, _) =
            project_qkv(&mut tape, xv, &QkvRouting { text: ts, visual: Some(vs) }, &layout)
                .unwrap();
        let (q_plain, _, _) =
            project_qkv(&mut tape, xv, &QkvRouting { text: ts, visual: None }, &layout).unwrap();
        assert_eq!(tape.value(q_routed), tape.value(q_plain));
    }

    #[test]
    fn row_count_must_match_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let layout = TokenLayout::new(1, 1, 1).unwrap();
        let text = rand_proj(4, 4, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 4], vec![0.0; 8]).unwrap();
        let ts = leaf_set(&mut tape, &text);
        let routing = QkvRouting { text: ts, visual: None };
        assert!(project_qkv(&mut tape, x, &routing, &layout).is_err());
    }
}
