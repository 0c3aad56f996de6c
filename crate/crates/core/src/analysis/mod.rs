//! Scan analysis: Gaussian peak fitting, phase-correlation registration and
//! plot rendering.

mod gaussian;
mod registration;
pub mod render;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gaussian::{fwhm_from_sigma, gaussian_fit, GaussianFit, Profile1D, FWHM_PER_SIGMA};
pub use registration::{phase_correlate, Offset2D, RegistrationOptions, LOW_CONFIDENCE};
pub use render::{
    is_red, nice_step, nice_ticks, read_image_plot, read_png, render_image_plot, render_profile_plot, Canvas, PlotArea,
    RenderedPlot,
};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no discernible peak")]
    NoPeak,
    #[error("non-finite values in input or fit")]
    NonFinite,
    #[error("profile needs at least 8 points, got {0}")]
    TooFewPoints(usize),
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("image sizes differ: {a:?} vs {b:?}")]
    SizeMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("images must be at least 16x16, got {0}x{1}")]
    TooSmall(usize, usize),
    #[error("degenerate spectrum (all-zero image)")]
    DegenerateSpectrum,
    #[error("render failure: {0}")]
    Render(String),
}

/// Row-major 2D array; row index is y, column index is x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Grid2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Grid2D {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Grid2D { rows, cols, data }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    /// `out(r, c) = self(r − dy, c − dx)` with wrap-around.
    pub fn circular_shift(&self, dx: i64, dy: i64) -> Self {
        let (rows, cols) = (self.rows as i64, self.cols as i64);
        Grid2D::from_fn(self.rows, self.cols, |r, c| {
            let sr = (r as i64 - dy).rem_euclid(rows) as usize;
            let sc = (c as i64 - dx).rem_euclid(cols) as usize;
            self.get(sr, sc)
        })
    }
}

/// Axis-aligned region in sample coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Extent {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Self {
        Extent { x_min, x_max, y_min, y_max }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }
}
