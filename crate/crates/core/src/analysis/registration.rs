use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{AnalysisError, Grid2D};

/// Registrations below this confidence are treated as unreliable.
pub const LOW_CONFIDENCE: f64 = 0.3;
const SPECTRUM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Offset2D {
    pub dx: f64,
    pub dy: f64,
    pub confidence: f64,
}

impl Offset2D {
    pub fn is_low_confidence(&self) -> bool {
        self.confidence < LOW_CONFIDENCE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RegistrationOptions {
    /// Three-point parabolic refinement of the correlation peak.
    pub subpixel: bool,
    /// Mean removal and Hann apodization, for non-periodic image pairs.
    pub window: bool,
    /// Sample units per pixel along x (columns) and y (rows); 1 when zero.
    pub pixel_size: (f64, f64),
    /// Cross-power bins weaker than this fraction of the strongest one are
    /// damped instead of whitened. Zero whitens every bin, which is exact for
    /// clean data but lets quantization noise dominate smooth images.
    #[serde(default)]
    pub spectral_floor: f64,
}

impl RegistrationOptions {
    pub fn for_scans(step: f64) -> Self {
        RegistrationOptions {
            subpixel: true,
            window: true,
            pixel_size: (step, step),
            spectral_floor: 0.0,
        }
    }

    /// For images read back from 8-bit plots.
    pub fn for_plots(pixel: f64) -> Self {
        RegistrationOptions {
            spectral_floor: 1e-3,
            ..Self::for_scans(pixel)
        }
    }
}

fn fft2(data: &mut [Complex64], rows: usize, cols: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(cols), planner.plan_fft_inverse(rows))
    } else {
        (planner.plan_fft_forward(cols), planner.plan_fft_forward(rows))
    };
    for row in data.chunks_exact_mut(cols) {
        row_fft.process(row);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = data[r * cols + c];
        }
        col_fft.process(&mut column);
        for r in 0..rows {
            data[r * cols + c] = column[r];
        }
    }
}

fn prepare(image: &Grid2D, window: bool) -> Vec<Complex64> {
    let (rows, cols) = (image.rows, image.cols);
    let mean = if window { image.data.iter().sum::<f64>() / image.data.len() as f64 } else { 0.0 };
    let hann = |i: usize, n: usize| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos();
    image
        .data
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let w = if window { hann(k / cols, rows) * hann(k % cols, cols) } else { 1.0 };
            Complex64::new((v - mean) * w, 0.0)
        })
        .collect()
}

fn signed(index: usize, n: usize) -> f64 {
    if index > n / 2 {
        index as f64 - n as f64
    } else {
        index as f64
    }
}

/// Vertex offset of the parabola through three samples around a maximum.
fn parabolic(left: f64, centre: f64, right: f64) -> f64 {
    let denom = left - 2.0 * centre + right;
    if denom.abs() < 1e-15 {
        0.0
    } else {
        (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
    }
}

/// Translation of `b` relative to `a`: if `b(p) = a(p − v)` the result is `v`.
///
/// Columns map to x and rows to y. Confidence is `1 − second/peak` where the
/// second peak is the largest correlation value outside the 3×3
/// neighbourhood of the main peak.
pub fn phase_correlate(a: &Grid2D, b: &Grid2D, options: &RegistrationOptions) -> Result<Offset2D, AnalysisError> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(AnalysisError::SizeMismatch {
            a: (a.rows, a.cols),
            b: (b.rows, b.cols),
        });
    }
    let (rows, cols) = (a.rows, a.cols);
    if rows < 16 || cols < 16 {
        return Err(AnalysisError::TooSmall(rows, cols));
    }
    if a.data.iter().all(|v| *v == 0.0) || b.data.iter().all(|v| *v == 0.0) {
        return Err(AnalysisError::DegenerateSpectrum);
    }
    let mut fa = prepare(a, options.window);
    let mut fb = prepare(b, options.window);
    fft2(&mut fa, rows, cols, false);
    fft2(&mut fb, rows, cols, false);
    let mut cross: Vec<Complex64> = fa.iter().zip(&fb).map(|(x, y)| x.conj() * y).collect();
    let strongest = cross.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let floor = (strongest * options.spectral_floor).max(SPECTRUM_FLOOR);
    for c in &mut cross {
        *c /= c.norm().max(floor);
    }
    if cross.iter().all(|c| c.norm() < SPECTRUM_FLOOR) {
        return Err(AnalysisError::DegenerateSpectrum);
    }
    fft2(&mut cross, rows, cols, true);
    let surface: Vec<f64> = cross.iter().map(|c| c.re).collect();

    let (peak_index, peak) = surface
        .iter()
        .copied()
        .enumerate()
        .max_by(|x, y| x.1.total_cmp(&y.1))
        .expect("nonempty");
    let (pr, pc) = (peak_index / cols, peak_index % cols);
    let near = |r: usize, c: usize| {
        let dr = r.abs_diff(pr).min(rows - r.abs_diff(pr));
        let dc = c.abs_diff(pc).min(cols - c.abs_diff(pc));
        dr <= 1 && dc <= 1
    };
    let second = surface
        .iter()
        .enumerate()
        .filter(|(k, _)| !near(k / cols, k % cols))
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0);
    let confidence = if peak > 0.0 { (1.0 - second / peak).clamp(0.0, 1.0) } else { 0.0 };

    let mut dy = signed(pr, rows);
    let mut dx = signed(pc, cols);
    if options.subpixel {
        let at = |r: usize, c: usize| surface[(r % rows) * cols + (c % cols)];
        dx += parabolic(at(pr, pc + cols - 1), peak, at(pr, pc + 1));
        dy += parabolic(at(pr + rows - 1, pc), peak, at(pr + 1, pc));
    }
    let (sx, sy) = options.pixel_size;
    let sx = if sx > 0.0 { sx } else { 1.0 };
    let sy = if sy > 0.0 { sy } else { 1.0 };
    Ok(Offset2D {
        dx: dx * sx,
        dy: dy * sy,
        confidence,
    })
}
