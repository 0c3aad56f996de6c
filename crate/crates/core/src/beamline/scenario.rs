use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pattern::{SamplePattern, Shape};
use super::BeamlineError;
use crate::analysis::Extent;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
}

/// Additive noise with standard deviation `(feature − background) / snr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    #[serde(default = "default_noise_kind")]
    pub kind: NoiseKind,
    pub snr: f64,
}

fn default_noise_kind() -> NoiseKind {
    NoiseKind::Gaussian
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub z: (f64, f64),
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            x: (-5000.0, 5000.0),
            y: (-5000.0, 5000.0),
            z: (-210.0, -180.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpticsConfig {
    /// Zone-plate position of best focus (mm). Hidden from the agent.
    pub z_focus: f64,
    pub z_start: f64,
    pub stage_start: (f64, f64),
    /// Probe width at focus (µm).
    pub sigma0: f64,
    /// Defocus blur growth (µm per mm).
    pub blur_coeff: f64,
    /// Image drift per mm of zone-plate travel (µm/mm).
    pub drift_coeff: (f64, f64),
    pub limits: Limits,
    pub max_points: usize,
    pub noise: Option<NoiseConfig>,
}

impl Default for OpticsConfig {
    fn default() -> Self {
        OpticsConfig {
            z_focus: -193.5,
            z_start: -200.0,
            stage_start: (0.0, 0.0),
            sigma0: 0.15,
            blur_coeff: 0.6,
            drift_coeff: (1.2, -0.8),
            limits: Limits::default(),
            max_points: 200,
            noise: None,
        }
    }
}

/// Hints for the focusing workflow: which thin feature to scan and where.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocusingSetup {
    pub feature: String,
    /// Nominal position of the vertical reference line (µm).
    pub line_x: f64,
    /// Height at which the horizontal line scan crosses it (µm).
    pub line_y: f64,
    pub scan_half_length: f64,
    pub scan_points: usize,
    pub roi: Extent,
    pub roi_step: f64,
    pub z_bounds: (f64, f64),
}

impl Default for FocusingSetup {
    fn default() -> Self {
        FocusingSetup {
            feature: "the vertical grid line at x = 30".into(),
            line_x: 30.0,
            line_y: 40.0,
            scan_half_length: 9.0,
            scan_points: 181,
            roi: Extent::new(10.0, 50.0, 20.0, 60.0),
            roi_step: 0.5,
            z_bounds: (-210.0, -180.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSearchSetup {
    pub feature: String,
    pub bounds: Extent,
    pub fov: f64,
    pub step: f64,
    pub coarse_step: f64,
}

impl Default for FeatureSearchSetup {
    fn default() -> Self {
        FeatureSearchSetup {
            feature: "the center of a Siemens star, which is a disk formed by a lot of radial spokes (the spokes must be radial. A disk formed by concentric circles is not a Siemens star)".into(),
            bounds: Extent::new(0.0, 200.0, 0.0, 200.0),
            fov: 40.0,
            step: 0.5,
            coarse_step: 40.0,
        }
    }
}

/// Everything needed to build a [`super::VirtualBeamline`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optics: OpticsConfig,
    pub pattern: SamplePattern,
    #[serde(default)]
    pub focusing: FocusingSetup,
    #[serde(default)]
    pub feature_search: FeatureSearchSetup,
}

impl Scenario {
    /// Star at the origin inside a 20 µm grid of 0.3 µm lines.
    pub fn desk() -> Self {
        Scenario {
            name: "desk".into(),
            seed: 7,
            optics: OpticsConfig::default(),
            pattern: SamplePattern {
                background: 0.05,
                feature: 1.0,
                shapes: vec![
                    Shape::SiemensStar {
                        center: (0.0, 0.0),
                        radius: 8.0,
                        n_spokes: 16,
                    },
                    Shape::LineGrid {
                        pitch: 20.0,
                        line_width: 0.3,
                        origin: (10.0, 10.0),
                    },
                ],
            },
            focusing: FocusingSetup::default(),
            feature_search: FeatureSearchSetup::default(),
        }
    }

    /// A lone star somewhere inside the default search bounds.
    pub fn star_search() -> Self {
        Scenario {
            name: "star-search".into(),
            seed: 11,
            optics: OpticsConfig {
                z_start: -193.5,
                ..OpticsConfig::default()
            },
            pattern: SamplePattern {
                background: 0.05,
                feature: 1.0,
                shapes: vec![Shape::SiemensStar {
                    center: (132.0, 87.0),
                    radius: 8.0,
                    n_spokes: 16,
                }],
            },
            focusing: FocusingSetup::default(),
            feature_search: FeatureSearchSetup::default(),
        }
    }

    /// Same as [`Scenario::star_search`] with the star removed.
    pub fn empty_search() -> Self {
        let mut s = Self::star_search();
        s.name = "empty-search".into();
        s.pattern.shapes.clear();
        s
    }

    pub fn validate(&self) -> Result<(), BeamlineError> {
        let o = &self.optics;
        let bad = |m: &str| Err(BeamlineError::InvalidScenario(m.into()));
        if !(o.sigma0 > 0.0) || !(o.blur_coeff >= 0.0) {
            return bad("sigma0 must be > 0 and blur_coeff >= 0");
        }
        for (lo, hi) in [o.limits.x, o.limits.y, o.limits.z] {
            if !(lo <= hi) {
                return bad("limits must satisfy min <= max");
            }
        }
        if !(o.limits.z.0..=o.limits.z.1).contains(&o.z_start) {
            return bad("z_start outside z limits");
        }
        if !(o.limits.x.0..=o.limits.x.1).contains(&o.stage_start.0)
            || !(o.limits.y.0..=o.limits.y.1).contains(&o.stage_start.1)
        {
            return bad("stage_start outside limits");
        }
        if o.max_points < 8 {
            return bad("max_points must be at least 8");
        }
        if let Some(n) = o.noise {
            if !(n.snr > 0.0) {
                return bad("noise snr must be > 0");
            }
        }
        self.pattern.validate()
    }

    /// Reads TOML or JSON depending on the extension (JSON for `.json`).
    pub fn from_file(path: &Path) -> Result<Self, BeamlineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BeamlineError::InvalidScenario(format!("cannot read {}: {e}", path.display())))?;
        let scenario: Scenario = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| BeamlineError::InvalidScenario(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| BeamlineError::InvalidScenario(e.to_string()))?
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }
}
