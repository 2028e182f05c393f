//! Vocabulary-space probes for visual tokens: at the input, cosine
//! similarity between each projected visual embedding and every word
//! embedding; at the output, LM-head probabilities at each visual position.
//! Reading patches "through" the vocabulary shows how far the connector
//! translates image content into word space, and what the decoder makes of
//! it by the final layer.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AssembledInput, MllmModel};

/// Which end of the model a lens reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LensKind {
    /// Cosine similarity of the projected visual embedding against the
    /// word embedding table. Scores lie in [-1, 1].
    Input,
    /// Softmax of the LM-head logits at the visual position. Scores lie in
    /// [0, 1].
    Output,
}

/// One visual token's reading: its index in the visual span, the source
/// patch in the image's patch grid, and the top-k (word id, score) pairs,
/// best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensEntry {
    pub token_index: usize,
    pub row: usize,
    pub col: usize,
    pub top: Vec<(usize, f32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensReport {
    pub kind: LensKind,
    pub k: usize,
    pub entries: Vec<LensEntry>,
}

/// Indices of the `k` largest scores with their values, best first. Equal
/// scores order by lower id so reports are reproducible.
pub fn top_k_descending(scores: &[f32], k: usize) -> Vec<(usize, f32)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.into_iter().map(|i| (i, scores[i])).collect()
}

fn check_probe(model: &MllmModel, input: &AssembledInput, k: usize) -> Result<()> {
    if input.layout.visual == 0 {
        return Err(Error::Config("lens probes need at least one visual token".into()));
    }
    let vocab = model.config().vocab_size;
    if k > vocab {
        return Err(Error::Config(format!("top-k {k} exceeds vocabulary size {vocab}")));
    }
    Ok(())
}

/// Patch-grid coordinates of visual token `t`, row-major.
fn grid_coords(model: &MllmModel, t: usize) -> (usize, usize) {
    let g = model.config().vision.image_size / model.config().vision.patch_size;
    (t / g, t % g)
}

fn wrap_entries(model: &MllmModel, kind: LensKind, k: usize, tops: Vec<Vec<(usize, f32)>>) -> LensReport {
    let entries = tops
        .into_iter()
        .enumerate()
        .map(|(t, top)| {
            let (row, col) = grid_coords(model, t);
            LensEntry { token_index: t, row, col, top }
        })
        .collect();
    LensReport { kind, k, entries }
}

/// Cosine similarity between two equal-length vectors; zero-norm vectors
/// score 0 against everything (they carry no direction to compare).
fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let mut dot = 0.0f32;
    let mut na = 0.0f32;
    let mut nb = 0.0f32;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (libm::sqrtf(na) * libm::sqrtf(nb))
}

impl MllmModel {
    /// Reads each visual position through the LM head: one forward pass,
    /// softmax over the logits row, top-k by probability with ties to the
    /// lower word id.
    pub fn logit_lens_output(
        &self,
        input: &AssembledInput,
        k: usize,
    ) -> Result<Vec<Vec<(usize, f32)>>> {
        check_probe(self, input, k)?;
        let pass = self.forward(input)?;
        let logits = pass.tape.value(pass.logits);
        let vocab = self.config().vocab_size;
        let mut out = Vec::with_capacity(input.layout.visual);
        for pos in input.layout.visual_range() {
            let row = &logits[pos * vocab..(pos + 1) * vocab];
            let mut probs = Vec::with_capacity(vocab);
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for &l in row {
                let e = libm::expf(l - max);
                sum += e;
                probs.push(e);
            }
            for p in probs.iter_mut() {
                *p /= sum;
            }
            out.push(top_k_descending(&probs, k));
        }
        Ok(out)
    }
}

/// Input-space lens: cosine similarity of every projected visual embedding
/// (the row handed to the first decoder layer) against every word
/// embedding, top-k per token.
pub fn input_lens(model: &MllmModel, input: &AssembledInput, k: usize) -> Result<LensReport> {
    check_probe(model, input, k)?;
    let pass = model.forward(input)?;
    let emb = pass.tape.value(pass.embeddings);
    let d = model.config().d_l;
    let table = model.embed_table();
    let vocab = model.config().vocab_size;
    let words = table.data();

    let mut tops = Vec::with_capacity(input.layout.visual);
    for pos in input.layout.visual_range() {
        let v = &emb[pos * d..(pos + 1) * d];
        let scores: Vec<f32> =
            (0..vocab).map(|w| cosine(v, &words[w * d..(w + 1) * d])).collect();
        tops.push(top_k_descending(&scores, k));
    }
    Ok(wrap_entries(model, LensKind::Input, k, tops))
}

/// Output-space lens: LM-head probabilities at each visual position,
/// wrapped with the source patch coordinates.
pub fn output_lens(model: &MllmModel, input: &AssembledInput, k: usize) -> Result<LensReport> {
    let tops = model.logit_lens_output(input, k)?;
    Ok(wrap_entries(model, LensKind::Output, k, tops))
}
