//! Deterministic simulated scanning microscope.
//!
//! Observed intensity at sample position `p` is the pattern blurred by a
//! Gaussian probe and displaced by the accumulated optics drift:
//! `image(p) = blurred(p − drift)`. Moving the zone plate by `Δz` adds
//! `drift_coeff·Δz` to the drift.

mod pattern;
mod scenario;

use std::collections::VecDeque;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{gaussian_fit, AnalysisError, Extent, GaussianFit, Grid2D, Profile1D};

pub use pattern::{SamplePattern, Shape};
pub use scenario::{FeatureSearchSetup, FocusingSetup, Limits, NoiseConfig, NoiseKind, OpticsConfig, Scenario};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeamlineError {
    #[error("guardrail: {axis} = {value} is outside the allowed range [{min}, {max}]")]
    LimitViolation { axis: String, value: f64, min: f64, max: f64 },
    #[error("scan would collect {points} points along {axis}, more than the {cap}-point cap")]
    TooManyPoints { axis: String, points: usize, cap: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

fn check(axis: &str, value: f64, (min, max): (f64, f64)) -> Result<(), BeamlineError> {
    if value.is_finite() && value >= min && value <= max {
        Ok(())
    } else {
        Err(BeamlineError::LimitViolation {
            axis: axis.into(),
            value,
            min,
            max,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamlineState {
    pub stage_x: f64,
    pub stage_y: f64,
    pub zone_plate_z: f64,
    pub z_focus: f64,
    pub limits: Limits,
    pub drift_coeff: (f64, f64),
    pub accumulated_drift: (f64, f64),
    pub sigma0: f64,
    pub blur_coeff: f64,
    pub noise: Option<NoiseConfig>,
    pub max_points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanKind {
    #[serde(rename = "2d")]
    Image2d,
    #[serde(rename = "1d")]
    Line1d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScanData {
    Image(Grid2D),
    Profile(Profile1D),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub kind: ScanKind,
    pub extent: Extent,
    pub step: f64,
    pub data: ScanData,
    pub rendered_path: Option<PathBuf>,
    pub fit: Option<GaussianFit>,
    pub seq: u64,
    pub zone_plate_z: f64,
}

impl ScanRecord {
    pub fn image(&self) -> Option<&Grid2D> {
        match &self.data {
            ScanData::Image(g) => Some(g),
            ScanData::Profile(_) => None,
        }
    }

    pub fn profile(&self) -> Option<&Profile1D> {
        match &self.data {
            ScanData::Profile(p) => Some(p),
            ScanData::Image(_) => None,
        }
    }
}

/// Everything that determines future behaviour; equal snapshots imply equal
/// subsequent scans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamlineSnapshot {
    pub state: BeamlineState,
    pub seed: u64,
    pub rng_word_pos: u128,
    pub scans: u64,
}

pub struct VirtualBeamline {
    scenario: Scenario,
    state: BeamlineState,
    rng: ChaCha8Rng,
    images: VecDeque<ScanRecord>,
    scans: u64,
}

impl VirtualBeamline {
    pub fn new(scenario: Scenario) -> Result<Self, BeamlineError> {
        scenario.validate()?;
        let o = &scenario.optics;
        let state = BeamlineState {
            stage_x: o.stage_start.0,
            stage_y: o.stage_start.1,
            zone_plate_z: o.z_start,
            z_focus: o.z_focus,
            limits: o.limits,
            drift_coeff: o.drift_coeff,
            accumulated_drift: (0.0, 0.0),
            sigma0: o.sigma0,
            blur_coeff: o.blur_coeff,
            noise: o.noise,
            max_points: o.max_points,
        };
        Ok(VirtualBeamline {
            rng: ChaCha8Rng::seed_from_u64(scenario.seed),
            scenario,
            state,
            images: VecDeque::with_capacity(2),
            scans: 0,
        })
    }

    pub fn desk() -> Self {
        Self::new(Scenario::desk()).expect("built-in scenario is valid")
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn state(&self) -> &BeamlineState {
        &self.state
    }

    pub fn pattern(&self) -> &SamplePattern {
        &self.scenario.pattern
    }

    pub fn snapshot(&self) -> BeamlineSnapshot {
        BeamlineSnapshot {
            state: self.state.clone(),
            seed: self.scenario.seed,
            rng_word_pos: self.rng.get_word_pos(),
            scans: self.scans,
        }
    }

    /// Restores state and noise stream from a snapshot; stored images are dropped.
    pub fn restore(&mut self, snapshot: &BeamlineSnapshot) {
        self.state = snapshot.state.clone();
        self.rng = ChaCha8Rng::seed_from_u64(snapshot.seed);
        self.rng.set_word_pos(snapshot.rng_word_pos);
        self.scans = snapshot.scans;
        self.images.clear();
    }

    /// Probe width at the current zone-plate position.
    pub fn sigma_psf(&self) -> f64 {
        let defocus = self.state.blur_coeff * (self.state.zone_plate_z - self.state.z_focus);
        (self.state.sigma0.powi(2) + defocus.powi(2)).sqrt()
    }

    fn observe(&self, x: f64, y: f64, sigma: f64) -> f64 {
        let (dx, dy) = self.state.accumulated_drift;
        self.scenario.pattern.blurred(x - dx, y - dy, sigma)
    }

    fn add_noise(&mut self, values: &mut [f64]) {
        if let Some(noise) = self.state.noise {
            let contrast = (self.scenario.pattern.feature - self.scenario.pattern.background).abs().max(1e-12);
            let normal = Normal::new(0.0, contrast / noise.snr).expect("positive sigma");
            for v in values {
                *v += normal.sample(&mut self.rng);
            }
        }
    }

    fn points(&self, axis: &str, length: f64, step: f64) -> Result<usize, BeamlineError> {
        let n = (length / step).round();
        if !(n >= 1.0) {
            return Err(BeamlineError::InvalidArgument(format!("{axis} extent must span at least one step")));
        }
        let n = n as usize;
        if n > self.state.max_points {
            return Err(BeamlineError::TooManyPoints {
                axis: axis.into(),
                points: n,
                cap: self.state.max_points,
            });
        }
        Ok(n)
    }

    /// Raster scan centred at `(x, y)`. Pixel `(r, c)` samples
    /// `(x0 + (c + ½)·step, y0 + (r + ½)·step)`; row 0 is the smallest y.
    pub fn acquire_2d(&mut self, x: f64, y: f64, width: f64, height: f64, step: f64) -> Result<ScanRecord, BeamlineError> {
        if !(step > 0.0) || !(width > 0.0) || !(height > 0.0) {
            return Err(BeamlineError::InvalidArgument("width, height and step must be positive".into()));
        }
        let cols = self.points("x", width, step)?;
        let rows = self.points("y", height, step)?;
        let (x0, y0) = (x - cols as f64 * step / 2.0, y - rows as f64 * step / 2.0);
        let extent = Extent::new(x0, x0 + cols as f64 * step, y0, y0 + rows as f64 * step);
        let limits = self.state.limits;
        check("x", extent.x_min, limits.x)?;
        check("x", extent.x_max, limits.x)?;
        check("y", extent.y_min, limits.y)?;
        check("y", extent.y_max, limits.y)?;

        // each pixel integrates over its own footprint
        let sigma = (self.sigma_psf().powi(2) + step * step / 12.0).sqrt();
        let mut grid = Grid2D::from_fn(rows, cols, |r, c| {
            self.observe(x0 + (c as f64 + 0.5) * step, y0 + (r as f64 + 0.5) * step, sigma)
        });
        self.add_noise(&mut grid.data);
        self.state.stage_x = x;
        self.state.stage_y = y;
        self.scans += 1;
        let record = ScanRecord {
            kind: ScanKind::Image2d,
            extent,
            step,
            data: ScanData::Image(grid),
            rendered_path: None,
            fit: None,
            seq: self.scans,
            zone_plate_z: self.state.zone_plate_z,
        };
        if self.images.len() == 2 {
            self.images.pop_front();
        }
        self.images.push_back(record.clone());
        Ok(record)
    }

    /// Point scan along a segment with a Gaussian fit of the profile. A profile
    /// without a discernible peak yields `fit = None`.
    pub fn scan_line(&mut self, start: (f64, f64), end: (f64, f64), n_points: usize) -> Result<ScanRecord, BeamlineError> {
        if n_points < 8 {
            return Err(BeamlineError::InvalidArgument("a line scan needs at least 8 points".into()));
        }
        if n_points > self.state.max_points {
            return Err(BeamlineError::TooManyPoints {
                axis: "the line".into(),
                points: n_points,
                cap: self.state.max_points,
            });
        }
        let limits = self.state.limits;
        for (x, y) in [start, end] {
            check("x", x, limits.x)?;
            check("y", y, limits.y)?;
        }
        let (dx, dy) = (end.0 - start.0, end.1 - start.1);
        let length = (dx * dx + dy * dy).sqrt();
        if !(length > 0.0) {
            return Err(BeamlineError::InvalidArgument("line scan start and end coincide".into()));
        }
        let sigma = self.sigma_psf();
        let along_x = dx.abs() >= dy.abs();
        let mut positions = Vec::with_capacity(n_points);
        let mut values = Vec::with_capacity(n_points);
        for i in 0..n_points {
            let t = i as f64 / (n_points - 1) as f64;
            let (x, y) = (start.0 + t * dx, start.1 + t * dy);
            positions.push(if along_x { x } else { y });
            values.push(self.observe(x, y, sigma));
        }
        self.add_noise(&mut values);
        let profile = Profile1D::new(positions, values);
        let fit = match gaussian_fit(&profile) {
            Ok(f) => Some(f),
            Err(AnalysisError::NoPeak) => None,
            Err(e) => return Err(BeamlineError::InvalidArgument(e.to_string())),
        };
        self.state.stage_x = end.0;
        self.state.stage_y = end.1;
        self.scans += 1;
        Ok(ScanRecord {
            kind: ScanKind::Line1d,
            extent: Extent::new(start.0.min(end.0), start.0.max(end.0), start.1.min(end.1), start.1.max(end.1)),
            step: length / (n_points - 1) as f64,
            data: ScanData::Profile(profile),
            rendered_path: None,
            fit,
            seq: self.scans,
            zone_plate_z: self.state.zone_plate_z,
        })
    }

    /// Moves the zone plate; returns the previous position.
    pub fn set_zone_plate_z(&mut self, z: f64) -> Result<f64, BeamlineError> {
        check("zone_plate_z", z, self.state.limits.z)?;
        let previous = self.state.zone_plate_z;
        let dz = z - previous;
        self.state.accumulated_drift.0 += self.state.drift_coeff.0 * dz;
        self.state.accumulated_drift.1 += self.state.drift_coeff.1 * dz;
        self.state.zone_plate_z = z;
        Ok(previous)
    }

    pub fn move_stage(&mut self, x: f64, y: f64) -> Result<(), BeamlineError> {
        check("x", x, self.state.limits.x)?;
        check("y", y, self.state.limits.y)?;
        self.state.stage_x = x;
        self.state.stage_y = y;
        Ok(())
    }

    /// The two most recent 2D acquisitions, oldest first.
    pub fn last_two_images(&self) -> Option<(&ScanRecord, &ScanRecord)> {
        (self.images.len() == 2).then(|| (&self.images[0], &self.images[1]))
    }

    pub fn last_image(&self) -> Option<&ScanRecord> {
        self.images.back()
    }

    pub fn set_rendered_path(&mut self, seq: u64, path: PathBuf) {
        for record in self.images.iter_mut().filter(|r| r.seq == seq) {
            record.rendered_path = Some(path.clone());
        }
    }
}
