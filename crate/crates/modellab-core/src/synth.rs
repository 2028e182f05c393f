//! Synthetic multimodal task: images of colored shapes on a grid, captions
//! that enumerate every cell, and single-answer color questions.
//!
//! The answer to "what color is at (r, c)?" is only present in the pixels,
//! never in the question text, so eval accuracy measures whether visual
//! information actually flows through the connector and attention. Pixel
//! noise is injected without clamping; one patch alone is a noisy estimator
//! of its cell's color, which is what makes cross-patch attention (and the
//! attention regimes under study) matter.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SampleView, BOS_ID, EOS_ID, FIRST_FREE_ID};
use crate::tensor::Tensor;
use crate::vision::{VisionConfig, IMAGE_CHANNELS};

/// Palette: saturated corners of the RGB cube, in token order.
pub const COLOR_NAMES: [&str; 6] = ["red", "green", "blue", "yellow", "magenta", "cyan"];
const COLOR_RGB: [[f32; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
];
pub const SHAPE_NAMES: [&str; 3] = ["square", "diamond", "cross"];
pub const MAX_PALETTE: usize = COLOR_NAMES.len();
pub const SHAPE_COUNT: usize = SHAPE_NAMES.len();
/// Largest grid side the coordinate tokens cover.
pub const MAX_GRID: usize = 6;

const COLOR_BASE: usize = FIRST_FREE_ID;
const SHAPE_BASE: usize = COLOR_BASE + MAX_PALETTE;
const ROW_BASE: usize = SHAPE_BASE + SHAPE_COUNT;
const COL_BASE: usize = ROW_BASE + MAX_GRID;
/// Smallest vocabulary that fits the task tokens.
pub const MIN_VOCAB: usize = COL_BASE + MAX_GRID;

pub fn color_token(color: usize) -> usize {
    debug_assert!(color < MAX_PALETTE);
    COLOR_BASE + color
}

pub fn shape_token(shape: usize) -> usize {
    debug_assert!(shape < SHAPE_COUNT);
    SHAPE_BASE + shape
}

pub fn row_token(row: usize) -> usize {
    debug_assert!(row < MAX_GRID);
    ROW_BASE + row
}

pub fn col_token(col: usize) -> usize {
    debug_assert!(col < MAX_GRID);
    COL_BASE + col
}

/// Human-readable label for a task token, for report rendering.
pub fn token_label(id: usize) -> String {
    match id {
        0 => "<pad>".into(),
        1 => "<bos>".into(),
        2 => "<eos>".into(),
        _ if (COLOR_BASE..SHAPE_BASE).contains(&id) => COLOR_NAMES[id - COLOR_BASE].into(),
        _ if (SHAPE_BASE..ROW_BASE).contains(&id) => SHAPE_NAMES[id - SHAPE_BASE].into(),
        _ if (ROW_BASE..COL_BASE).contains(&id) => format!("r{}", id - ROW_BASE),
        _ if (COL_BASE..MIN_VOCAB).contains(&id) => format!("c{}", id - COL_BASE),
        _ => format!("t{id}"),
    }
}

/// Task geometry: grid side, how many palette colors to use, pixel noise,
/// and whether the grid floats at a random patch-aligned origin.
///
/// With `jitter` off, the grid fills the image and cell (r, c) always maps
/// to the same pixels, so a fixed positional lookup suffices to answer
/// questions. With `jitter` on, cells are two patches on a side and the
/// whole grid is placed at a random origin: coordinates in questions are
/// grid-relative, so the model must first localize the grid from content
/// before it can address a cell.
///
/// With `distinct_colors`, every cell in an image gets a different color
/// (drawn without replacement). Blurry readouts that average a cell with
/// its neighbors then always pull in wrong colors, and the per-cell color
/// marginal is exactly uniform, so nothing short of localized reading
/// scores above chance.
///
/// `distinct_eval` applies the same all-distinct condition to the eval
/// split only: training stays iid (repeated colors give the optimizer its
/// first foothold), while eval keeps just the grids where reading the
/// wrong cell is never accidentally right, so accuracy measures addressing
/// rather than collision luck.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub grid: usize,
    pub palette: usize,
    pub noise_std: f32,
    #[serde(default)]
    pub jitter: bool,
    #[serde(default)]
    pub distinct_colors: bool,
    #[serde(default)]
    pub distinct_eval: bool,
}

impl GridSpec {
    pub fn toy() -> Self {
        GridSpec { grid: 3, palette: 4, noise_std: 0.6, jitter: false, distinct_colors: false, distinct_eval: false }
    }

    /// Cell side in pixels for this geometry.
    pub fn cell_px(&self, vision: &VisionConfig) -> usize {
        if self.jitter {
            2 * vision.patch_size
        } else {
            vision.image_size / self.grid
        }
    }

    pub fn validate(&self, vision: &VisionConfig) -> Result<()> {
        vision.validate()?;
        if self.grid == 0 || self.grid > MAX_GRID {
            return Err(Error::Config(format!(
                "grid side must be in 1..={MAX_GRID}, got {}",
                self.grid
            )));
        }
        if self.palette == 0 || self.palette > MAX_PALETTE {
            return Err(Error::Config(format!(
                "palette must be in 1..={MAX_PALETTE}, got {}",
                self.palette
            )));
        }
        if self.jitter {
            let content = self.grid * self.cell_px(vision);
            if content + vision.patch_size > vision.image_size {
                return Err(Error::Config(format!(
                    "jittered {0} x {0} grid of {1}px cells needs at least one patch of \
                     slack in a {2}px image",
                    self.grid,
                    self.cell_px(vision),
                    vision.image_size
                )));
            }
        } else if vision.image_size % self.grid != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible into a {} x {} grid",
                vision.image_size, self.grid, self.grid
            )));
        }
        if self.grid * self.grid > vision.n_patches() {
            return Err(Error::Config(format!(
                "{} cells exceed the {} visual tokens",
                self.grid * self.grid,
                vision.n_patches()
            )));
        }
        if (self.distinct_colors || self.distinct_eval) && self.palette < self.grid * self.grid {
            return Err(Error::Config(format!(
                "distinct colors need palette >= {} for a {1} x {1} grid, got {2}",
                self.grid * self.grid,
                self.grid,
                self.palette
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config(format!("noise std must be finite and >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }
}

/// One cell's content.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub color: usize,
    pub shape: usize,
}

/// A fully materialized sample: the noisy image, the clean cell contents it
/// was rendered from, the enumerating caption, and one question/answer pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: Tensor,
    pub cells: Vec<Cell>,
    pub caption: Vec<usize>,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    /// Content hash of the noise-free grid; split disjointness keys on this.
    pub key: u64,
}

const SYSTEM_PROMPT: [usize; 1] = [BOS_ID];

impl SynthSample {
    /// Caption pretraining view: the full caption is supervised.
    pub fn caption_view(&self) -> SampleView<'_> {
        SampleView { system: &SYSTEM_PROMPT, image: Some(&self.image), user: &[], answer: &self.caption }
    }

    /// Question answering view: only the answer tokens are supervised.
    pub fn qa_view(&self) -> SampleView<'_> {
        SampleView {
            system: &SYSTEM_PROMPT,
            image: Some(&self.image),
            user: &self.question,
            answer: &self.answer,
        }
    }

    /// Generation prompt: question present, nothing supervised.
    pub fn prompt_view(&self) -> SampleView<'_> {
        SampleView {
            system: &SYSTEM_PROMPT,
            image: Some(&self.image),
            user: &self.question,
            answer: &[],
        }
    }
}

/// FNV-1a over the cell contents; stable across runs and platforms.
fn content_key(cells: &[Cell]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for cell in cells {
        for byte in [cell.color as u8, cell.shape as u8] {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

/// Renders the clean grid at the given pixel origin then adds unclamped
/// gaussian noise to every pixel channel. Shapes are pixel masks per cell:
/// full square, a diamond (manhattan ball), or a plus-shaped cross.
fn render(
    cells: &[Cell],
    grid: usize,
    cs: usize,
    origin: (usize, usize),
    image_size: usize,
    noise_std: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let mut pixels = vec![0.0f32; image_size * image_size * IMAGE_CHANNELS];
    for (idx, cell) in cells.iter().enumerate() {
        let (r, c) = (idx / grid, idx % grid);
        let rgb = COLOR_RGB[cell.color];
        for dy in 0..cs {
            for dx in 0..cs {
                // Doubled coordinates keep the half-pixel center exact.
                let dy2 = (2 * dy).abs_diff(cs - 1);
                let dx2 = (2 * dx).abs_diff(cs - 1);
                let inside = match cell.shape {
                    0 => true,
                    1 => dx2 + dy2 <= cs,
                    _ => dx2 <= cs / 3 || dy2 <= cs / 3,
                };
                if inside {
                    let y = origin.1 + r * cs + dy;
                    let x = origin.0 + c * cs + dx;
                    let base = (y * image_size + x) * IMAGE_CHANNELS;
                    pixels[base..base + IMAGE_CHANNELS].copy_from_slice(&rgb);
                }
            }
        }
    }
    if noise_std > 0.0 {
        let normal = Normal::new(0.0f32, noise_std)
            .map_err(|_| Error::Config(format!("invalid noise std {noise_std}")))?;
        for p in pixels.iter_mut() {
            *p += normal.sample(rng);
        }
    }
    Tensor::from_vec(vec![image_size, image_size, IMAGE_CHANNELS], pixels)
}

fn draw_sample(spec: &GridSpec, vision: &VisionConfig, rng: &mut ChaCha8Rng) -> Result<SynthSample> {
    let g = spec.grid;
    let cells: Vec<Cell> = if spec.distinct_colors {
        // Partial Fisher-Yates: the first g*g entries are a uniform draw
        // from the palette without replacement.
        let mut colors: Vec<usize> = (0..spec.palette).collect();
        for i in 0..g * g {
            let j = rng.gen_range(i..colors.len());
            colors.swap(i, j);
        }
        colors[..g * g]
            .iter()
            .map(|&color| Cell { color, shape: rng.gen_range(0..SHAPE_COUNT) })
            .collect()
    } else {
        (0..g * g)
            .map(|_| Cell { color: rng.gen_range(0..spec.palette), shape: rng.gen_range(0..SHAPE_COUNT) })
            .collect()
    };
    let key = content_key(&cells);

    // Caption: row-major enumeration (row, col, color, shape) then EOS.
    let mut caption = Vec::with_capacity(g * g * 4 + 1);
    for (idx, cell) in cells.iter().enumerate() {
        caption.push(row_token(idx / g));
        caption.push(col_token(idx % g));
        caption.push(color_token(cell.color));
        caption.push(shape_token(cell.shape));
    }
    caption.push(EOS_ID);

    let ask = rng.gen_range(0..g * g);
    let question = vec![row_token(ask / g), col_token(ask % g)];
    let answer = vec![color_token(cells[ask].color), EOS_ID];

    let cs = spec.cell_px(vision);
    let origin = if spec.jitter {
        let slack = (vision.image_size - g * cs) / vision.patch_size;
        (
            rng.gen_range(0..=slack) * vision.patch_size,
            rng.gen_range(0..=slack) * vision.patch_size,
        )
    } else {
        (0, 0)
    };
    let image = render(&cells, g, cs, origin, vision.image_size, spec.noise_std, rng)?;
    Ok(SynthSample { image, cells, caption, question, answer, key })
}

/// Deterministically generates `count` samples. Identical arguments produce
/// bit-identical datasets.
pub fn gen_dataset(
    seed: u64,
    count: usize,
    spec: &GridSpec,
    vision: &VisionConfig,
) -> Result<Vec<SynthSample>> {
    spec.validate(vision)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| draw_sample(spec, vision, &mut rng)).collect()
}

/// Generates a train split and an eval split whose grid contents are
/// disjoint: no eval content key ever appears in train. Eval keys are also
/// unique among themselves so accuracy counts distinct grids.
pub fn gen_split(
    seed: u64,
    train_count: usize,
    eval_count: usize,
    spec: &GridSpec,
    vision: &VisionConfig,
) -> Result<(Vec<SynthSample>, Vec<SynthSample>)> {
    spec.validate(vision)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = 100 * (train_count + eval_count) + 1000;
    let mut attempts = 0usize;

    let mut eval_keys = alloc::collections::BTreeSet::new();
    let mut eval = Vec::with_capacity(eval_count);
    while eval.len() < eval_count {
        attempts += 1;
        if attempts > budget {
            return Err(Error::Config(format!(
                "cannot draw {eval_count} distinct eval grids from a {} x {} grid with \
                 {} colors and {} shapes",
                spec.grid, spec.grid, spec.palette, SHAPE_COUNT
            )));
        }
        let sample = draw_sample(spec, vision, &mut rng)?;
        if spec.distinct_eval {
            let mut used = [false; MAX_PALETTE];
            if sample.cells.iter().any(|c| core::mem::replace(&mut used[c.color], true)) {
                continue;
            }
        }
        if eval_keys.insert(sample.key) {
            eval.push(sample);
        }
    }

    let mut train = Vec::with_capacity(train_count);
    while train.len() < train_count {
        attempts += 1;
        if attempts > budget {
            return Err(Error::Config(
                "cannot draw enough train grids distinct from the eval split".into(),
            ));
        }
        let sample = draw_sample(spec, vision, &mut rng)?;
        if !eval_keys.contains(&sample.key) {
            train.push(sample);
        }
    }
    Ok((train, eval))
}
