//! Human-facing renderings: the ablation comparison table, PPM images for
//! synthetic samples, and the lens patch-grid overlay. Machine-readable
//! JSON always accompanies these; the renderings are for eyes.

use anyhow::{bail, Result};
use modellab_core::lens::{LensKind, LensReport};
use modellab_core::tensor::Tensor;
use modellab_core::train::{AblationReport, AblationRow};

/// Fixed-width text table: the five comparison rows in presentation order,
/// then the no-visual-attention reference, with per-seed accuracies and the
/// mean/min/max summary.
pub fn ablation_table(report: &AblationReport) -> String {
    let mut out = String::new();
    let seeds: Vec<String> = report.seeds.iter().map(|s| format!("seed {s}")).collect();
    out.push_str(&format!("{:<22}", "variant"));
    for s in &seeds {
        out.push_str(&format!("{s:>10}"));
    }
    out.push_str(&format!("{:>8}{:>8}{:>8}\n", "mean", "min", "max"));
    let mut row_line = |row: &AblationRow| {
        out.push_str(&format!("{:<22}", row.variant.as_str()));
        for a in &row.accuracies {
            out.push_str(&format!("{a:>10.4}"));
        }
        out.push_str(&format!("{:>8.4}{:>8.4}{:>8.4}\n", row.mean, row.min, row.max));
    };
    for row in &report.rows {
        row_line(row);
    }
    row_line(&report.reference);
    out
}

fn to_byte(intensity: f32) -> u8 {
    (intensity.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary P6 image of a `[S, S, 3]` tensor; values clamped to [0, 1].
pub fn image_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        bail!("expected an [S, S, 3] image, got {shape:?}");
    }
    let (h, w) = (shape[0], shape[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// Patch-grid overlay: one `cell`-pixel square per visual token, gray level
/// = the token's top-1 score. Input-lens scores are cosines in [-1, 1] and
/// map linearly onto [0, 1]; output-lens scores are probabilities already.
pub fn lens_overlay_ppm(report: &LensReport, cell: usize) -> Result<Vec<u8>> {
    if cell == 0 {
        bail!("overlay cell size must be positive");
    }
    if report.entries.is_empty() {
        bail!("lens report has no entries to render");
    }
    let rows = 1 + report.entries.iter().map(|e| e.row).max().unwrap();
    let cols = 1 + report.entries.iter().map(|e| e.col).max().unwrap();
    let mut grid = vec![0.0f32; rows * cols];
    for entry in &report.entries {
        let score = entry.top.first().map(|&(_, s)| s).unwrap_or(0.0);
        grid[entry.row * cols + entry.col] = match report.kind {
            LensKind::Input => (score + 1.0) / 2.0,
            LensKind::Output => score,
        };
    }
    let (h, w) = (rows * cell, cols * cell);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for py in 0..h {
        for px in 0..w {
            let byte = to_byte(grid[(py / cell) * cols + px / cell]);
            out.extend_from_slice(&[byte, byte, byte]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use modellab_core::lens::LensEntry;
    use modellab_core::train::Variant;

    fn row(variant: Variant, accs: &[f32]) -> AblationRow {
        AblationRow {
            variant,
            accuracies: accs.to_vec(),
            mean: accs.iter().sum::<f32>() / accs.len() as f32,
            min: accs.iter().cloned().fold(f32::INFINITY, f32::min),
            max: accs.iter().cloned().fold(f32::NEG_INFINITY, f32::max),
        }
    }

    #[test]
    fn table_has_one_line_per_variant_plus_header_and_reference() {
        let report = AblationReport {
            seeds: vec![1, 2],
            fingerprint: 7,
            rows: [
                Variant::Baseline,
                Variant::SepQkv,
                Variant::SepQkvBidir,
                Variant::SepQkvMultiDepth,
                Variant::Combined,
            ]
            .iter()
            .map(|&v| row(v, &[0.5, 0.75]))
            .collect(),
            reference: row(Variant::NoVisualAttention, &[0.25, 0.25]),
            outcomes: vec![],
        };
        let table = ablation_table(&report);
        assert_eq!(table.lines().count(), 1 + 5 + 1);
        assert!(table.contains("baseline"));
        assert!(table.lines().last().unwrap().starts_with("no-visual-attention"));
        assert!(table.contains("0.6250"));
    }

    #[test]
    fn image_ppm_has_correct_header_and_length() {
        let image = Tensor::from_vec(vec![2, 3, 3], vec![0.5; 18]).unwrap();
        let ppm = image_ppm(&image).unwrap();
        assert!(ppm.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(ppm.len(), b"P6\n3 2\n255\n".len() + 18);
        assert_eq!(*ppm.last().unwrap(), 128);
    }

    #[test]
    fn lens_overlay_maps_scores_to_gray_cells() {
        let report = LensReport {
            kind: LensKind::Output,
            k: 1,
            entries: vec![
                LensEntry { token_index: 0, row: 0, col: 0, top: vec![(4, 1.0)] },
                LensEntry { token_index: 1, row: 0, col: 1, top: vec![(2, 0.0)] },
                LensEntry { token_index: 2, row: 1, col: 0, top: vec![(0, 0.5)] },
                LensEntry { token_index: 3, row: 1, col: 1, top: vec![] },
            ],
        };
        let ppm = lens_overlay_ppm(&report, 2).unwrap();
        let header = b"P6\n4 4\n255\n";
        assert!(ppm.starts_with(header));
        let body = &ppm[header.len()..];
        assert_eq!(body.len(), 4 * 4 * 3);
        assert_eq!(body[0], 255); // (0,0) top-left pixel
        assert_eq!(body[2 * 3], 0); // (0,1) region starts at pixel column 2
        assert_eq!(body[2 * 4 * 3], 128); // (1,0) region starts at row 2
    }

    #[test]
    fn input_lens_scores_are_shifted_from_cosine_range() {
        let report = LensReport {
            kind: LensKind::Input,
            k: 1,
            entries: vec![LensEntry { token_index: 0, row: 0, col: 0, top: vec![(1, -1.0)] }],
        };
        let ppm = lens_overlay_ppm(&report, 1).unwrap();
        assert_eq!(*ppm.last().unwrap(), 0);
    }
}
