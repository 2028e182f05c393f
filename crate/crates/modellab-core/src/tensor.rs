//! Dense f32 tensors and reverse-mode autodiff on an explicit tape.
//!
//! A [`Tape`] owns every buffer produced during one forward pass as an
//! append-only list of nodes; [`Tape::backward`] replays the list in reverse
//! exactly once, so diamond-shaped reuse accumulates correctly. Gradients of
//! leaf nodes accumulate (`+=`) across backward calls until
//! [`Tape::zero_grads`]; gradients of interior nodes are transient.
//!
//! Every operation validates shapes up front and rejects non-finite outputs,
//! so NaN/Inf never propagate silently. Attention-structured operations
//! ([`Tape::attn_scores`], [`Tape::attn_mix`]) evaluate only the entries an
//! [`AttentionMask`] allows; masked entries are exactly zero and receive
//! exactly zero gradient. The tape also counts multiply-accumulate operations
//! executed by its dot-product kernels ([`Tape::mac_count`]), which is the
//! measurement side of the analytic FLOP accounting.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::masking::AttentionMask;

/// Sentinel target id marking a position that contributes no loss.
pub const IGNORE_INDEX: usize = usize::MAX;

// ── Value type ───────────────────────────────────────────────────────────

/// A dense row-major f32 tensor. Parameters keep their accumulated gradient
/// in `grad` between optimizer steps; activations never populate it.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        ensure_finite("tensor literal", &data)?;
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel])
    }

    /// Gaussian init with mean 0 and the given standard deviation.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f32, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0f32, std)
            .map_err(|_| Error::Config(format!("invalid init std {std}")))?;
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = (0..numel).map(|_| normal.sample(rng)).collect();
        Tensor::from_vec(shape, data)
    }

    pub fn scalar(value: f32) -> Result<Self> {
        Tensor::from_vec(vec![], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Direct mutable access. Callers that write through this must keep the
    /// finiteness invariant; the optimizer re-validates after each step.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    /// Accumulates `scale * g` into the stored gradient, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32], scale: f32) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient has {} elements, tensor has {}",
                g.len(),
                self.data.len()
            )));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (dst, &src) in grad.iter_mut().zip(g) {
            *dst += scale * src;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Value at a 2-D index; panics on rank/extent misuse (test convenience).
    pub fn get2(&self, row: usize, col: usize) -> f32 {
        assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }
}

fn ensure_finite(op: &str, data: &[f32]) -> Result<()> {
    if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!(
            "{op} produced non-finite value {} at flat index {idx}",
            data[idx]
        )));
    }
    Ok(())
}

// ── Kernels ──────────────────────────────────────────────────────────────
// Fixed-order accumulation keeps every kernel bit-deterministic.

#[inline]
fn axpy(alpha: f32, x: &[f32], out: &mut [f32]) {
    for (o, &xv) in out.iter_mut().zip(x) {
        *o += alpha * xv;
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let ao = &a[c * 8..c * 8 + 8];
        let bo = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += ao[l] * bo[l];
        }
    }
    let mut sum = 0.0f32;
    for l in 0..8 {
        sum += acc[l];
    }
    for i in chunks * 8..a.len() {
        sum += a[i] * b[i];
    }
    sum
}

/// out[m,n] += a[m,k] * b[k,n]
fn matmul_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            axpy(aik, &b[kk * n..(kk + 1) * n], orow);
        }
    }
}

// ── Tape ─────────────────────────────────────────────────────────────────

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: ValueId, b: ValueId },
    Add { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    Scale { x: ValueId, factor: f32 },
    Silu { x: ValueId },
    Sum { x: ValueId },
    Transpose { x: ValueId },
    ConcatRows { parts: Vec<ValueId> },
    ConcatLastDim { parts: Vec<ValueId> },
    SliceRows { x: ValueId, start: usize },
    EmbeddingLookup { table: ValueId, ids: Vec<usize> },
    RmsNorm { x: ValueId, gain: ValueId, inv_rms: Vec<f32> },
    MaskedSoftmax { scores: ValueId, mask: Rc<AttentionMask> },
    AttnScores { q: ValueId, k: ValueId, mask: Rc<AttentionMask>, heads: usize },
    AttnMix { probs: ValueId, v: ValueId, mask: Rc<AttentionMask>, heads: usize },
    Rope { x: ValueId, heads: usize, positions: Vec<usize>, inv_freq: Vec<f32> },
    CrossEntropy { logits: ValueId, targets: Vec<usize>, probs: Vec<f32>, count: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    needs_grad: bool,
    op: Op,
}

/// Wengert list: an append-only record of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f32>>>,
    mac_count: u64,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations executed by the dot-product kernels
    /// (matmul, attention scores, attention value mixing) in either pass.
    /// Elementwise work, normalization, rotations, and exponentials are not
    /// multiply-accumulates and are not counted.
    pub fn mac_count(&self) -> u64 {
        self.mac_count
    }

    pub fn reset_mac_count(&mut self) {
        self.mac_count = 0;
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: ValueId) -> &[f32] {
        &self.nodes[id.0].data
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn to_tensor(&self, id: ValueId) -> Tensor {
        Tensor {
            shape: self.nodes[id.0].shape.clone(),
            data: self.nodes[id.0].data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, id: ValueId) -> Option<&[f32]> {
        self.leaf_grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    /// How many leaves currently hold an accumulated gradient. Frozen-path
    /// tests assert this stays zero after a backward pass.
    pub fn leaf_grad_count(&self) -> usize {
        self.leaf_grads.iter().filter(|g| g.is_some()).count()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, needs_grad: bool, op: Op) -> Result<ValueId> {
        ensure_finite(op_name(&op), &data)?;
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, needs_grad, op });
        self.leaf_grads.push(None);
        Ok(ValueId(self.nodes.len() - 1))
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── Recording operations ─────────────────────────────────────────────

    /// Registers a tensor as a leaf; `requires_grad` is taken from the tensor.
    pub fn leaf(&mut self, tensor: &Tensor) -> Result<ValueId> {
        ensure_finite("leaf", tensor.data())?;
        self.push(tensor.shape.clone(), tensor.data.clone(), tensor.requires_grad, Op::Leaf)
    }

    /// Leaf from raw parts, `requires_grad = false`.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<ValueId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        self.push(shape, data, false, Op::Leaf)
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::Shape(format!("matmul expects [m,k]x[k,n], got {ash:?} x {bsh:?}")));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut out = vec![0.0f32; m * n];
        matmul_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, m, k, n);
        self.mac_count += (m * k * n) as u64;
        let needs = self.needs(a) || self.needs(b);
        self.push(vec![m, n], out, needs, Op::Matmul { a, b })
    }

    /// Elementwise addition; `b`'s shape may be a suffix of `a`'s shape, in
    /// which case it broadcasts over the leading dimensions (bias add).
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !ash.ends_with(&bsh) {
            return Err(Error::Shape(format!(
                "add expects rhs shape to be a suffix of lhs shape, got {ash:?} + {bsh:?}"
            )));
        }
        let bn = self.nodes[b.0].data.len().max(1);
        let mut out = self.nodes[a.0].data.clone();
        let bdata = &self.nodes[b.0].data;
        for chunk in out.chunks_mut(bn) {
            for (o, &bv) in chunk.iter_mut().zip(bdata) {
                *o += bv;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(ash, out, needs, Op::Add { a, b })
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "mul expects equal shapes, got {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(self.shape(a).to_vec(), out, needs, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: ValueId, factor: f32) -> Result<ValueId> {
        if !factor.is_finite() {
            return Err(Error::Domain(format!("scale factor {factor} is not finite")));
        }
        let out: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| v * factor).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), out, needs, Op::Scale { x, factor })
    }

    /// `x * sigmoid(x)` elementwise.
    pub fn silu(&mut self, x: ValueId) -> Result<ValueId> {
        let out: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| v * sigmoid(v)).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), out, needs, Op::Silu { x })
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        let mut total = 0.0f32;
        for &v in &self.nodes[x.0].data {
            total += v;
        }
        let needs = self.needs(x);
        self.push(vec![], vec![total], needs, Op::Sum { x })
    }

    /// `[r,c] -> [c,r]`
    pub fn transpose(&mut self, x: ValueId) -> Result<ValueId> {
        let sh = self.shape(x);
        if sh.len() != 2 {
            return Err(Error::Shape(format!("transpose expects rank 2, got {sh:?}")));
        }
        let (r, c) = (sh[0], sh[1]);
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(x);
        self.push(vec![c, r], out, needs, Op::Transpose { x })
    }

    /// Stacks rank-2 tensors of equal width along rows.
    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows needs at least one part".into()));
        }
        let width = self.expect_rank2(parts[0], "concat_rows")?.1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.expect_rank2(p, "concat_rows")?;
            if c != width {
                return Err(Error::Shape(format!(
                    "concat_rows width mismatch: {c} vs {width}"
                )));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * width);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].data);
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(vec![rows, width], out, needs, Op::ConcatRows { parts: parts.to_vec() })
    }

    /// Concatenates rank-2 tensors of equal row count along the last axis.
    pub fn concat_last_dim(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_last_dim needs at least one part".into()));
        }
        let rows = self.expect_rank2(parts[0], "concat_last_dim")?.0;
        let mut width = 0;
        for &p in parts {
            let (r, c) = self.expect_rank2(p, "concat_last_dim")?;
            if r != rows {
                return Err(Error::Shape(format!(
                    "concat_last_dim row mismatch: {r} vs {rows}"
                )));
            }
            width += c;
        }
        let mut out = vec![0.0f32; rows * width];
        let mut offset = 0;
        for &p in parts {
            let c = self.shape(p)[1];
            let src = &self.nodes[p.0].data;
            for row in 0..rows {
                out[row * width + offset..row * width + offset + c]
                    .copy_from_slice(&src[row * c..(row + 1) * c]);
            }
            offset += c;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(vec![rows, width], out, needs, Op::ConcatLastDim { parts: parts.to_vec() })
    }

    /// Contiguous row slice `x[start..start+len, :]`.
    pub fn slice_rows(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let (rows, cols) = self.expect_rank2(x, "slice_rows")?;
        if start + len > rows {
            return Err(Error::Shape(format!(
                "slice_rows {start}..{} out of range for {rows} rows",
                start + len
            )));
        }
        let out = self.nodes[x.0].data[start * cols..(start + len) * cols].to_vec();
        let needs = self.needs(x);
        self.push(vec![len, cols], out, needs, Op::SliceRows { x, start })
    }

    /// Gathers rows of `table` by id: `[len(ids), width]`.
    pub fn embedding_lookup(&mut self, table: ValueId, ids: &[usize]) -> Result<ValueId> {
        let (vocab, width) = self.expect_rank2(table, "embedding_lookup")?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Domain(format!(
                "embedding_lookup id {bad} out of range for vocab {vocab}"
            )));
        }
        let src = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            out.extend_from_slice(&src[id * width..(id + 1) * width]);
        }
        let needs = self.needs(table);
        self.push(
            vec![ids.len(), width],
            out,
            needs,
            Op::EmbeddingLookup { table, ids: ids.to_vec() },
        )
    }

    /// Root-mean-square normalization over the last axis with a learned gain:
    /// `y = x / sqrt(mean(x^2) + eps) * gain`.
    pub fn rms_norm(&mut self, x: ValueId, gain: ValueId, eps: f32) -> Result<ValueId> {
        let (rows, cols) = self.expect_rank2(x, "rms_norm")?;
        let gsh = self.shape(gain);
        if gsh != [cols] {
            return Err(Error::Shape(format!(
                "rms_norm gain shape {gsh:?} does not match width {cols}"
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::Domain(format!("rms_norm eps must be positive, got {eps}")));
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let mut out = vec![0.0f32; rows * cols];
        let mut inv_rms = vec![0.0f32; rows];
        for r in 0..rows {
            let xr = &src[r * cols..(r + 1) * cols];
            let mut ms = 0.0f32;
            for &v in xr {
                ms += v * v;
            }
            ms = ms / cols as f32 + eps;
            let s = 1.0 / libm::sqrtf(ms);
            inv_rms[r] = s;
            let orow = &mut out[r * cols..(r + 1) * cols];
            for j in 0..cols {
                orow[j] = xr[j] * s * g[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain);
        self.push(vec![rows, cols], out, needs, Op::RmsNorm { x, gain, inv_rms })
    }

    /// Row-wise softmax over the entries the mask allows. Masked entries are
    /// exactly zero in the output and receive exactly zero gradient; rows the
    /// mask bypasses are emitted as all-zero rows without error. A non-bypass
    /// row with no allowed entry is an error. Accepts `[N,N]` or `[batch,N,N]`.
    pub fn masked_softmax(&mut self, scores: ValueId, mask: &Rc<AttentionMask>) -> Result<ValueId> {
        let sh = self.shape(scores).to_vec();
        let n = mask.len();
        if sh.len() < 2 || sh[sh.len() - 1] != n || sh[sh.len() - 2] != n {
            return Err(Error::Shape(format!(
                "masked_softmax expects trailing [{n},{n}] to match the mask, got {sh:?}"
            )));
        }
        let batch: usize = sh[..sh.len() - 2].iter().product();
        let src = &self.nodes[scores.0].data;
        let mut out = vec![0.0f32; src.len()];
        for b in 0..batch {
            for i in 0..n {
                if mask.is_bypass_row(i) {
                    continue;
                }
                let base = b * n * n + i * n;
                let row_mask = mask.row(i);
                let mut max = f32::NEG_INFINITY;
                for j in 0..n {
                    if row_mask[j] && src[base + j] > max {
                        max = src[base + j];
                    }
                }
                if max == f32::NEG_INFINITY {
                    return Err(Error::Domain(format!(
                        "masked_softmax row {i} has no allowed entries"
                    )));
                }
                let mut denom = 0.0f32;
                for j in 0..n {
                    if row_mask[j] {
                        let e = libm::expf(src[base + j] - max);
                        out[base + j] = e;
                        denom += e;
                    }
                }
                for j in 0..n {
                    if row_mask[j] {
                        out[base + j] /= denom;
                    }
                }
            }
        }
        let needs = self.needs(scores);
        self.push(sh, out, needs, Op::MaskedSoftmax { scores, mask: Rc::clone(mask) })
    }

    /// Per-head dot-product scores `q_i . k_j`, evaluated only where the mask
    /// allows and the row is not bypassed: `[heads, N, N]`. No scaling.
    pub fn attn_scores(
        &mut self,
        q: ValueId,
        k: ValueId,
        mask: &Rc<AttentionMask>,
        heads: usize,
    ) -> Result<ValueId> {
        let (n, width) = self.expect_rank2(q, "attn_scores")?;
        if self.shape(k) != [n, width] {
            return Err(Error::Shape(format!(
                "attn_scores expects q and k of equal shape, got {:?} vs {:?}",
                self.shape(q),
                self.shape(k)
            )));
        }
        let hd = self.head_dim(width, heads, "attn_scores")?;
        if mask.len() != n {
            return Err(Error::Shape(format!(
                "attn_scores mask covers {} positions, sequence has {n}",
                mask.len()
            )));
        }
        let qd = &self.nodes[q.0].data;
        let kd = &self.nodes[k.0].data;
        let mut out = vec![0.0f32; heads * n * n];
        let mut macs = 0u64;
        for h in 0..heads {
            let ho = h * hd;
            for i in 0..n {
                if mask.is_bypass_row(i) {
                    continue;
                }
                let qrow = &qd[i * width + ho..i * width + ho + hd];
                let obase = h * n * n + i * n;
                let row_mask = mask.row(i);
                for j in 0..n {
                    if row_mask[j] {
                        out[obase + j] = dot(qrow, &kd[j * width + ho..j * width + ho + hd]);
                        macs += hd as u64;
                    }
                }
            }
        }
        self.mac_count += macs;
        let needs = self.needs(q) || self.needs(k);
        self.push(
            vec![heads, n, n],
            out,
            needs,
            Op::AttnScores { q, k, mask: Rc::clone(mask), heads },
        )
    }

    /// Mixes values with attention weights over allowed entries:
    /// `probs [heads,N,N] x v [N,width] -> [N,width]`, heads re-interleaved.
    /// Bypassed rows come out as exact zero rows.
    pub fn attn_mix(
        &mut self,
        probs: ValueId,
        v: ValueId,
        mask: &Rc<AttentionMask>,
        heads: usize,
    ) -> Result<ValueId> {
        let (n, width) = self.expect_rank2(v, "attn_mix")?;
        let psh = self.shape(probs);
        if psh != [heads, n, n] {
            return Err(Error::Shape(format!(
                "attn_mix expects probs [heads={heads},{n},{n}], got {psh:?}"
            )));
        }
        let hd = self.head_dim(width, heads, "attn_mix")?;
        if mask.len() != n {
            return Err(Error::Shape(format!(
                "attn_mix mask covers {} positions, sequence has {n}",
                mask.len()
            )));
        }
        let pd = &self.nodes[probs.0].data;
        let vd = &self.nodes[v.0].data;
        let mut out = vec![0.0f32; n * width];
        let mut macs = 0u64;
        for h in 0..heads {
            let ho = h * hd;
            for i in 0..n {
                if mask.is_bypass_row(i) {
                    continue;
                }
                let pbase = h * n * n + i * n;
                let row_mask = mask.row(i);
                for j in 0..n {
                    if row_mask[j] {
                        let p = pd[pbase + j];
                        let vrow = &vd[j * width + ho..j * width + ho + hd];
                        let orow = &mut out[i * width + ho..i * width + ho + hd];
                        axpy(p, vrow, orow);
                        macs += hd as u64;
                    }
                }
            }
        }
        self.mac_count += macs;
        let needs = self.needs(probs) || self.needs(v);
        self.push(
            vec![n, width],
            out,
            needs,
            Op::AttnMix { probs, v, mask: Rc::clone(mask), heads },
        )
    }

    /// Rotary position encoding: rotates adjacent channel pairs within each
    /// head by `position * base^(-2t/head_dim)`. Position 0 is the identity.
    pub fn rope(
        &mut self,
        x: ValueId,
        heads: usize,
        base: f32,
        positions: &[usize],
    ) -> Result<ValueId> {
        let (n, width) = self.expect_rank2(x, "rope")?;
        let hd = self.head_dim(width, heads, "rope")?;
        if hd % 2 != 0 {
            return Err(Error::Shape(format!("rope needs an even head dim, got {hd}")));
        }
        if positions.len() != n {
            return Err(Error::Shape(format!(
                "rope got {} positions for {n} rows",
                positions.len()
            )));
        }
        if !(base > 0.0) || !base.is_finite() {
            return Err(Error::Domain(format!("rope base must be positive, got {base}")));
        }
        let inv_freq: Vec<f32> = (0..hd / 2)
            .map(|t| libm::powf(base, -((2 * t) as f32) / hd as f32))
            .collect();
        let out = rope_apply(&self.nodes[x.0].data, n, width, heads, hd, positions, &inv_freq, false);
        let needs = self.needs(x);
        self.push(
            vec![n, width],
            out,
            needs,
            Op::Rope { x, heads, positions: positions.to_vec(), inv_freq },
        )
    }

    /// Mean next-token cross-entropy over positions whose target is not
    /// [`IGNORE_INDEX`]. `logits` is `[N, vocab]`; `targets` has length `N`.
    pub fn cross_entropy_with_ignore_index(
        &mut self,
        logits: ValueId,
        targets: &[usize],
    ) -> Result<ValueId> {
        let (n, vocab) = self.expect_rank2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "cross_entropy got {} targets for {n} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != IGNORE_INDEX && t >= vocab) {
            return Err(Error::Domain(format!(
                "cross_entropy target {bad} out of range for vocab {vocab}"
            )));
        }
        let count = targets.iter().filter(|&&t| t != IGNORE_INDEX).count();
        if count == 0 {
            return Err(Error::Domain("cross_entropy has no supervised positions".into()));
        }
        let src = &self.nodes[logits.0].data;
        let mut probs = vec![0.0f32; n * vocab];
        let mut loss = 0.0f64;
        for (row, &target) in targets.iter().enumerate() {
            if target == IGNORE_INDEX {
                continue;
            }
            let xr = &src[row * vocab..(row + 1) * vocab];
            let mut max = f32::NEG_INFINITY;
            for &v in xr {
                if v > max {
                    max = v;
                }
            }
            let mut denom = 0.0f32;
            let prow = &mut probs[row * vocab..(row + 1) * vocab];
            for j in 0..vocab {
                let e = libm::expf(xr[j] - max);
                prow[j] = e;
                denom += e;
            }
            for p in prow.iter_mut() {
                *p /= denom;
            }
            loss += (libm::logf(denom) as f64) - ((xr[target] - max) as f64);
        }
        let mean = (loss / count as f64) as f32;
        let needs = self.needs(logits);
        self.push(
            vec![],
            vec![mean],
            needs,
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
        )
    }

    // ── Backward pass ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Visits each node at most once,
    /// in reverse recording order; leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.propagate(idx, &gy, &mut grads)?;
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let slot = self.leaf_grads[idx]
                    .get_or_insert_with(|| vec![0.0; self.nodes[idx].data.len()]);
                for (dst, src) in slot.iter_mut().zip(&gy) {
                    *dst += src;
                }
            }
        }
        Ok(())
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f32>>],
        id: ValueId,
        update: impl FnOnce(&mut [f32]),
    ) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].data.len()]);
        update(slot);
    }

    fn propagate(&mut self, idx: usize, gy: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        // Split borrow: the node is read-only while gradient buffers mutate.
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let ash = self.nodes[a.0].shape.clone();
                let bsh = self.nodes[b.0].shape.clone();
                let (m, k, n) = (ash[0], ash[1], bsh[1]);
                let mut macs = 0u64;
                if self.nodes[a.0].needs_grad {
                    let bd = &self.nodes[b.0].data;
                    self.accumulate(grads, a, |ga| {
                        for i in 0..m {
                            let gyrow = &gy[i * n..(i + 1) * n];
                            let garow = &mut ga[i * k..(i + 1) * k];
                            for kk in 0..k {
                                garow[kk] += dot(gyrow, &bd[kk * n..(kk + 1) * n]);
                            }
                        }
                    });
                    macs += (m * k * n) as u64;
                }
                if self.nodes[b.0].needs_grad {
                    let ad = &self.nodes[a.0].data;
                    self.accumulate(grads, b, |gb| {
                        for i in 0..m {
                            let gyrow = &gy[i * n..(i + 1) * n];
                            for kk in 0..k {
                                axpy(ad[i * k + kk], gyrow, &mut gb[kk * n..(kk + 1) * n]);
                            }
                        }
                    });
                    macs += (m * k * n) as u64;
                }
                self.mac_count += macs;
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(grads, a, |ga| {
                    for (g, &u) in ga.iter_mut().zip(gy) {
                        *g += u;
                    }
                });
                let bn = self.nodes[b.0].data.len().max(1);
                self.accumulate(grads, b, |gb| {
                    for chunk in gy.chunks(bn) {
                        for (g, &u) in gb.iter_mut().zip(chunk) {
                            *g += u;
                        }
                    }
                });
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].needs_grad {
                    let bd = &self.nodes[b.0].data;
                    self.accumulate(grads, a, |ga| {
                        for i in 0..ga.len() {
                            ga[i] += gy[i] * bd[i];
                        }
                    });
                }
                if self.nodes[b.0].needs_grad {
                    let ad = &self.nodes[a.0].data;
                    self.accumulate(grads, b, |gb| {
                        for i in 0..gb.len() {
                            gb[i] += gy[i] * ad[i];
                        }
                    });
                }
            }
            Op::Scale { x, factor } => {
                let (x, factor) = (*x, *factor);
                self.accumulate(grads, x, |gx| {
                    for (g, &u) in gx.iter_mut().zip(gy) {
                        *g += factor * u;
                    }
                });
            }
            Op::Silu { x } => {
                let x = *x;
                let xd = &self.nodes[x.0].data;
                self.accumulate(grads, x, |gx| {
                    for i in 0..gx.len() {
                        let s = sigmoid(xd[i]);
                        gx[i] += gy[i] * s * (1.0 + xd[i] * (1.0 - s));
                    }
                });
            }
            Op::Sum { x } => {
                let x = *x;
                let u = gy[0];
                self.accumulate(grads, x, |gx| {
                    for g in gx.iter_mut() {
                        *g += u;
                    }
                });
            }
            Op::Transpose { x } => {
                let x = *x;
                let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                self.accumulate(grads, x, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += gy[j * r + i];
                        }
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].data.len();
                    self.accumulate(grads, p, |gp| {
                        for (g, &u) in gp.iter_mut().zip(&gy[offset..offset + len]) {
                            *g += u;
                        }
                    });
                    offset += len;
                }
            }
            Op::ConcatLastDim { parts } => {
                let parts = parts.clone();
                let total_width = node.shape[1];
                let rows = node.shape[0];
                let mut offset = 0;
                for p in parts {
                    let c = self.nodes[p.0].shape[1];
                    self.accumulate(grads, p, |gp| {
                        for row in 0..rows {
                            let src = &gy[row * total_width + offset..row * total_width + offset + c];
                            for (g, &u) in gp[row * c..(row + 1) * c].iter_mut().zip(src) {
                                *g += u;
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceRows { x, start } => {
                let (x, start) = (*x, *start);
                let cols = self.nodes[x.0].shape[1];
                let begin = start * cols;
                self.accumulate(grads, x, |gx| {
                    for (g, &u) in gx[begin..begin + gy.len()].iter_mut().zip(gy) {
                        *g += u;
                    }
                });
            }
            Op::EmbeddingLookup { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let width = self.nodes[table.0].shape[1];
                self.accumulate(grads, table, |gt| {
                    for (row, &id) in ids.iter().enumerate() {
                        for (g, &u) in gt[id * width..(id + 1) * width]
                            .iter_mut()
                            .zip(&gy[row * width..(row + 1) * width])
                        {
                            *g += u;
                        }
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let inv_rms = inv_rms.clone();
                let (rows, cols) = (node.shape[0], node.shape[1]);
                if self.nodes[x.0].needs_grad {
                    let xd = &self.nodes[x.0].data;
                    let gd = &self.nodes[gain.0].data;
                    self.accumulate(grads, x, |gx| {
                        for r in 0..rows {
                            let s = inv_rms[r];
                            let xr = &xd[r * cols..(r + 1) * cols];
                            let gyr = &gy[r * cols..(r + 1) * cols];
                            let mut inner = 0.0f32;
                            for j in 0..cols {
                                inner += gyr[j] * gd[j] * xr[j];
                            }
                            let coef = s * s * s * inner / cols as f32;
                            let gxr = &mut gx[r * cols..(r + 1) * cols];
                            for j in 0..cols {
                                gxr[j] += s * gd[j] * gyr[j] - coef * xr[j];
                            }
                        }
                    });
                }
                if self.nodes[gain.0].needs_grad {
                    let xd = &self.nodes[x.0].data;
                    self.accumulate(grads, gain, |gg| {
                        for r in 0..rows {
                            let s = inv_rms[r];
                            let xr = &xd[r * cols..(r + 1) * cols];
                            let gyr = &gy[r * cols..(r + 1) * cols];
                            for j in 0..cols {
                                gg[j] += gyr[j] * xr[j] * s;
                            }
                        }
                    });
                }
            }
            Op::MaskedSoftmax { scores, mask } => {
                let scores = *scores;
                let mask = Rc::clone(mask);
                let n = mask.len();
                let batch = node.data.len() / (n * n);
                let probs = &node.data;
                self.accumulate(grads, scores, |gs| {
                    for b in 0..batch {
                        for i in 0..n {
                            if mask.is_bypass_row(i) {
                                continue;
                            }
                            let base = b * n * n + i * n;
                            let mut inner = 0.0f32;
                            for j in 0..n {
                                inner += gy[base + j] * probs[base + j];
                            }
                            for j in 0..n {
                                // Masked entries have p = 0, so their gradient
                                // stays exactly zero.
                                gs[base + j] += probs[base + j] * (gy[base + j] - inner);
                            }
                        }
                    }
                });
            }
            Op::AttnScores { q, k, mask, heads } => {
                let (q, k, heads) = (*q, *k, *heads);
                let mask = Rc::clone(mask);
                let n = mask.len();
                let width = self.nodes[q.0].shape[1];
                let hd = width / heads;
                let mut macs = 0u64;
                if self.nodes[q.0].needs_grad {
                    let kd = &self.nodes[k.0].data;
                    self.accumulate(grads, q, |gq| {
                        for h in 0..heads {
                            let ho = h * hd;
                            for i in 0..n {
                                if mask.is_bypass_row(i) {
                                    continue;
                                }
                                let base = h * n * n + i * n;
                                let row_mask = mask.row(i);
                                let gqrow = &mut gq[i * width + ho..i * width + ho + hd];
                                for j in 0..n {
                                    if row_mask[j] {
                                        axpy(gy[base + j], &kd[j * width + ho..j * width + ho + hd], gqrow);
                                        macs += hd as u64;
                                    }
                                }
                            }
                        }
                    });
                }
                if self.nodes[k.0].needs_grad {
                    let qd = &self.nodes[q.0].data;
                    self.accumulate(grads, k, |gk| {
                        for h in 0..heads {
                            let ho = h * hd;
                            for i in 0..n {
                                if mask.is_bypass_row(i) {
                                    continue;
                                }
                                let base = h * n * n + i * n;
                                let row_mask = mask.row(i);
                                let qrow = &qd[i * width + ho..i * width + ho + hd];
                                for j in 0..n {
                                    if row_mask[j] {
                                        axpy(gy[base + j], qrow, &mut gk[j * width + ho..j * width + ho + hd]);
                                        macs += hd as u64;
                                    }
                                }
                            }
                        }
                    });
                }
                self.mac_count += macs;
            }
            Op::AttnMix { probs, v, mask, heads } => {
                let (probs, v, heads) = (*probs, *v, *heads);
                let mask = Rc::clone(mask);
                let n = mask.len();
                let width = self.nodes[v.0].shape[1];
                let hd = width / heads;
                let mut macs = 0u64;
                if self.nodes[probs.0].needs_grad {
                    let vd = &self.nodes[v.0].data;
                    self.accumulate(grads, probs, |gp| {
                        for h in 0..heads {
                            let ho = h * hd;
                            for i in 0..n {
                                if mask.is_bypass_row(i) {
                                    continue;
                                }
                                let base = h * n * n + i * n;
                                let row_mask = mask.row(i);
                                let gyrow = &gy[i * width + ho..i * width + ho + hd];
                                for j in 0..n {
                                    if row_mask[j] {
                                        gp[base + j] += dot(gyrow, &vd[j * width + ho..j * width + ho + hd]);
                                        macs += hd as u64;
                                    }
                                }
                            }
                        }
                    });
                }
                if self.nodes[v.0].needs_grad {
                    let pd = &self.nodes[probs.0].data;
                    self.accumulate(grads, v, |gv| {
                        for h in 0..heads {
                            let ho = h * hd;
                            for i in 0..n {
                                if mask.is_bypass_row(i) {
                                    continue;
                                }
                                let base = h * n * n + i * n;
                                let row_mask = mask.row(i);
                                let gyrow = &gy[i * width + ho..i * width + ho + hd];
                                for j in 0..n {
                                    if row_mask[j] {
                                        axpy(pd[base + j], gyrow, &mut gv[j * width + ho..j * width + ho + hd]);
                                        macs += hd as u64;
                                    }
                                }
                            }
                        }
                    });
                }
                self.mac_count += macs;
            }
            Op::Rope { x, heads, positions, inv_freq } => {
                let (x, heads) = (*x, *heads);
                let positions = positions.clone();
                let inv_freq = inv_freq.clone();
                let (n, width) = (node.shape[0], node.shape[1]);
                let hd = width / heads;
                self.accumulate(grads, x, |gx| {
                    let back = rope_apply(gy, n, width, heads, hd, &positions, &inv_freq, true);
                    for (g, u) in gx.iter_mut().zip(back) {
                        *g += u;
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let logits = *logits;
                let targets = targets.clone();
                let count = *count;
                let probs = probs.clone();
                let vocab = self.nodes[logits.0].shape[1];
                let u = gy[0] / count as f32;
                self.accumulate(grads, logits, |gl| {
                    for (row, &target) in targets.iter().enumerate() {
                        if target == IGNORE_INDEX {
                            continue;
                        }
                        let prow = &probs[row * vocab..(row + 1) * vocab];
                        let grow = &mut gl[row * vocab..(row + 1) * vocab];
                        for j in 0..vocab {
                            grow[j] += u * (prow[j] - if j == target { 1.0 } else { 0.0 });
                        }
                    }
                });
            }
        }
        Ok(())
    }

    // ── Shape helpers ────────────────────────────────────────────────────

    fn expect_rank2(&self, id: ValueId, op: &str) -> Result<(usize, usize)> {
        let sh = self.shape(id);
        if sh.len() != 2 {
            return Err(Error::Shape(format!("{op} expects rank 2, got {sh:?}")));
        }
        Ok((sh[0], sh[1]))
    }

    fn head_dim(&self, width: usize, heads: usize, op: &str) -> Result<usize> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Shape(format!(
                "{op}: width {width} not divisible into {heads} heads"
            )));
        }
        Ok(width / heads)
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + libm::expf(-x))
}

/// Shared forward/adjoint rotation; the adjoint rotates by the negated angle.
#[allow(clippy::too_many_arguments)]
fn rope_apply(
    src: &[f32],
    n: usize,
    width: usize,
    heads: usize,
    hd: usize,
    positions: &[usize],
    inv_freq: &[f32],
    invert: bool,
) -> Vec<f32> {
    let mut out = vec![0.0f32; src.len()];
    for (row, &pos) in positions.iter().enumerate().take(n) {
        for h in 0..heads {
            let base = row * width + h * hd;
            for (t, &freq) in inv_freq.iter().enumerate() {
                let angle = pos as f32 * freq;
                let (mut sin, cos) = (libm::sinf(angle), libm::cosf(angle));
                if invert {
                    sin = -sin;
                }
                let x0 = src[base + 2 * t];
                let x1 = src[base + 2 * t + 1];
                out[base + 2 * t] = x0 * cos - x1 * sin;
                out[base + 2 * t + 1] = x0 * sin + x1 * cos;
            }
        }
    }
    out
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Silu { .. } => "silu",
        Op::Sum { .. } => "sum",
        Op::Transpose { .. } => "transpose",
        Op::ConcatRows { .. } => "concat_rows",
        Op::ConcatLastDim { .. } => "concat_last_dim",
        Op::SliceRows { .. } => "slice_rows",
        Op::EmbeddingLookup { .. } => "embedding_lookup",
        Op::RmsNorm { .. } => "rms_norm",
        Op::MaskedSoftmax { .. } => "masked_softmax",
        Op::AttnScores { .. } => "attn_scores",
        Op::AttnMix { .. } => "attn_mix",
        Op::Rope { .. } => "rope",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}
