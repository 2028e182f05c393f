//! Token layout and attention masking regimes.
//!
//! A sequence is laid out as `[system | visual | user/answer]`. A mask is a
//! dense boolean matrix `allowed[i][j]` ("query row i may attend to key
//! column j") plus a set of bypassed query rows whose attention output is
//! discarded entirely (their keys and values stay visible to other rows).

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;
use alloc::{vec, string::ToString};
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest mask rendered as ascii art; larger masks only render as PGM.
pub const MAX_ASCII_RENDER: usize = 4096;

/// Sequence segmentation: `system` prompt tokens, then `visual` tokens, then
/// `user` prompt/answer tokens.
///
/// Positions are 0-based throughout: visual positions are
/// `system .. system + visual`. (Descriptions of the index set elsewhere are
/// often 1-based; this range is the single point of translation.)
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub system: usize,
    pub visual: usize,
    pub user: usize,
}

impl TokenLayout {
    pub fn new(system: usize, visual: usize, user: usize) -> Result<Self> {
        let layout = TokenLayout { system, visual, user };
        if layout.total() == 0 {
            return Err(Error::Config("token layout must contain at least one token".into()));
        }
        Ok(layout)
    }

    pub fn total(&self) -> usize {
        self.system + self.visual + self.user
    }

    /// 0-based positions of the visual tokens.
    pub fn visual_range(&self) -> core::ops::Range<usize> {
        self.system..self.system + self.visual
    }

    pub fn is_visual(&self, position: usize) -> bool {
        self.visual_range().contains(&position)
    }
}

/// Attention regime over one assembled sequence.
///
/// * `Causal`: strictly autoregressive, row i sees columns `j <= i`.
/// * `VisualBidirectional`: causal, plus every visual row sees every visual
///   column (the visual block of the matrix is full).
/// * `NoVisualAttention`: causal allowance, but visual rows are bypassed:
///   their attention output is discarded (hidden state passes through
///   unchanged), while their keys/values remain visible to later rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    Causal,
    VisualBidirectional,
    NoVisualAttention,
}

impl MaskPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskPolicy::Causal => "causal",
            MaskPolicy::VisualBidirectional => "bidir",
            MaskPolicy::NoVisualAttention => "novis",
        }
    }
}

impl fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(MaskPolicy::Causal),
            "bidir" | "visual-bidirectional" => Ok(MaskPolicy::VisualBidirectional),
            "novis" | "no-visual-attention" => Ok(MaskPolicy::NoVisualAttention),
            other => Err(Error::Config(format!(
                "unknown mask policy {other:?} (expected causal | bidir | novis)"
            ))),
        }
    }
}

/// Dense attention mask over a sequence of `len` positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    allowed: Vec<bool>,
    bypass_rows: BTreeSet<usize>,
}

impl AttentionMask {
    /// Builds a mask from raw parts. Only extents are validated here; use
    /// [`build_mask`] for masks that carry the policy invariants.
    pub fn from_parts(len: usize, allowed: Vec<bool>, bypass_rows: BTreeSet<usize>) -> Result<Self> {
        if allowed.len() != len * len {
            return Err(Error::Shape(format!(
                "mask matrix has {} entries, expected {}x{}",
                allowed.len(),
                len,
                len
            )));
        }
        if let Some(&row) = bypass_rows.iter().next_back() {
            if row >= len {
                return Err(Error::Shape(format!("bypass row {row} out of range for len {len}")));
            }
        }
        Ok(AttentionMask { len, allowed, bypass_rows })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn is_allowed(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.len + col]
    }

    #[inline]
    pub fn is_bypass_row(&self, row: usize) -> bool {
        self.bypass_rows.contains(&row)
    }

    pub fn bypass_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.bypass_rows.iter().copied()
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[bool] {
        &self.allowed[row * self.len..(row + 1) * self.len]
    }

    /// Number of allowed entries over the whole matrix, bypassed rows included.
    pub fn allowed_count(&self) -> u64 {
        self.allowed.iter().filter(|&&a| a).count() as u64
    }

    /// Number of (row, col) pairs attention actually scores: allowed entries
    /// of non-bypassed rows.
    pub fn scored_count(&self) -> u64 {
        (0..self.len)
            .filter(|i| !self.is_bypass_row(*i))
            .map(|i| self.row(i).iter().filter(|&&a| a).count() as u64)
            .sum()
    }

    /// Shares the mask for cheap reuse across tape operations.
    pub fn into_shared(self) -> Rc<AttentionMask> {
        Rc::new(self)
    }
}

/// Materializes the mask for a layout under a policy.
///
/// Invariants of the produced mask: `allowed[i][j]` for every `j <= i`; the
/// diagonal is allowed in every row; under `VisualBidirectional` the visual
/// block is symmetric; `bypass_rows` is exactly the visual range under
/// `NoVisualAttention` and empty otherwise.
pub fn build_mask(layout: TokenLayout, policy: MaskPolicy) -> AttentionMask {
    let len = layout.total();
    let mut allowed = vec![false; len * len];
    for i in 0..len {
        let row = &mut allowed[i * len..(i + 1) * len];
        for (j, slot) in row.iter_mut().enumerate().take(i + 1) {
            let _ = j;
            *slot = true;
        }
        if policy == MaskPolicy::VisualBidirectional && layout.is_visual(i) {
            for j in layout.visual_range() {
                row[j] = true;
            }
        }
    }
    let bypass_rows: BTreeSet<usize> = match policy {
        MaskPolicy::NoVisualAttention => layout.visual_range().collect(),
        _ => BTreeSet::new(),
    };
    AttentionMask { len, allowed, bypass_rows }
}

/// Output encodings for [`render_mask`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderFormat {
    Ascii,
    Pgm,
}

impl FromStr for RenderFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ascii" => Ok(RenderFormat::Ascii),
            "pgm" => Ok(RenderFormat::Pgm),
            other => Err(Error::Config(format!(
                "unknown render format {other:?} (expected ascii | pgm)"
            ))),
        }
    }
}

/// Renders a mask as a byte stream.
///
/// Ascii: one line per row, `#` allowed / `.` masked, bypassed rows carry a
/// trailing ` B` marker; rows are joined by `\n` with no trailing newline.
/// Ascii rendering of masks larger than [`MAX_ASCII_RENDER`] is an error.
///
/// PGM: binary `P5` with maxval 255, one pixel per matrix entry, 255 allowed /
/// 0 masked (bypass rows are not distinguishable in this encoding).
pub fn render_mask(mask: &AttentionMask, format: RenderFormat) -> Result<Vec<u8>> {
    let len = mask.len();
    match format {
        RenderFormat::Ascii => {
            if len > MAX_ASCII_RENDER {
                return Err(Error::Config(format!(
                    "ascii render limited to {MAX_ASCII_RENDER} positions, got {len}"
                )));
            }
            let mut out = String::with_capacity(len * (len + 3));
            for i in 0..len {
                if i > 0 {
                    out.push('\n');
                }
                for j in 0..len {
                    out.push(if mask.is_allowed(i, j) { '#' } else { '.' });
                }
                if mask.is_bypass_row(i) {
                    out.push_str(" B");
                }
            }
            Ok(out.into_bytes())
        }
        RenderFormat::Pgm => {
            let header = format!("P5\n{len} {len}\n255\n");
            let mut out = header.into_bytes();
            out.reserve(len * len);
            for i in 0..len {
                for j in 0..len {
                    out.push(if mask.is_allowed(i, j) { 255 } else { 0 });
                }
            }
            Ok(out)
        }
    }
}

impl fmt::Display for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match render_mask(self, RenderFormat::Ascii) {
            Ok(bytes) => f.write_str(&String::from_utf8(bytes).unwrap_or_else(|_| "<mask>".to_string())),
            Err(_) => write!(f, "<mask {0}x{0}>", self.len),
        }
    }
}
