//! Sample patterns: exact indicator functions and their Gaussian-blurred
//! coverage.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};

use super::BeamlineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    SiemensStar {
        center: (f64, f64),
        radius: f64,
        n_spokes: u32,
    },
    LineGrid {
        pitch: f64,
        line_width: f64,
        #[serde(default)]
        origin: (f64, f64),
    },
    Composite {
        parts: Vec<Shape>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePattern {
    #[serde(default = "default_background")]
    pub background: f64,
    #[serde(default = "default_feature")]
    pub feature: f64,
    pub shapes: Vec<Shape>,
}

fn default_background() -> f64 {
    0.05
}

fn default_feature() -> f64 {
    1.0
}

/// Midpoint nodes per axis for the star blur quadrature.
const STAR_NODES: usize = 15;
const STAR_REACH: f64 = 3.5;

impl Shape {
    pub fn validate(&self) -> Result<(), BeamlineError> {
        let bad = |m: &str| Err(BeamlineError::InvalidScenario(m.into()));
        match self {
            Shape::SiemensStar { radius, n_spokes, .. } => {
                if !(*radius > 0.0) || *n_spokes == 0 {
                    return bad("siemens_star needs radius > 0 and n_spokes >= 1");
                }
            }
            Shape::LineGrid { pitch, line_width, .. } => {
                if !(*pitch > 0.0) || !(*line_width > 0.0) || line_width >= pitch {
                    return bad("line_grid needs 0 < line_width < pitch");
                }
            }
            Shape::Composite { parts } => {
                for p in parts {
                    p.validate()?;
                }
            }
        }
        Ok(())
    }

    /// 1 inside the feature, 0 outside.
    pub fn indicator(&self, x: f64, y: f64) -> f64 {
        match self {
            Shape::SiemensStar { center, radius, n_spokes } => star_indicator(*center, *radius, *n_spokes, x, y),
            Shape::LineGrid { pitch, line_width, origin } => {
                let near = |v: f64, o: f64| {
                    let d = (v - o).rem_euclid(*pitch);
                    d.min(pitch - d) < line_width / 2.0
                };
                f64::from(near(x, origin.0) || near(y, origin.1))
            }
            Shape::Composite { parts } => parts.iter().map(|p| p.indicator(x, y)).sum::<f64>().min(1.0),
        }
    }

    /// Fraction of a Gaussian spot of width `sigma` centred at `(x, y)` that
    /// falls on the feature.
    pub fn coverage(&self, x: f64, y: f64, sigma: f64) -> f64 {
        if sigma <= 0.0 {
            return self.indicator(x, y);
        }
        match self {
            Shape::SiemensStar { center, radius, n_spokes } => {
                let r = ((x - center.0).powi(2) + (y - center.1).powi(2)).sqrt();
                if r > radius + STAR_REACH * sigma * SQRT_2 {
                    return 0.0;
                }
                star_coverage(*center, *radius, *n_spokes, x, y, sigma)
            }
            Shape::LineGrid { pitch, line_width, origin } => {
                // union of two separable line families: 1 − (1 − V)(1 − H)
                let v = line_family(x, origin.0, *pitch, *line_width, sigma);
                let h = line_family(y, origin.1, *pitch, *line_width, sigma);
                v + h - v * h
            }
            Shape::Composite { parts } => parts.iter().map(|p| p.coverage(x, y, sigma)).sum::<f64>().min(1.0),
        }
    }
}

fn star_indicator(center: (f64, f64), radius: f64, n_spokes: u32, x: f64, y: f64) -> f64 {
    let (dx, dy) = (x - center.0, y - center.1);
    if dx * dx + dy * dy > radius * radius {
        return 0.0;
    }
    let theta = dy.atan2(dx).rem_euclid(2.0 * PI);
    let sector = (f64::from(n_spokes) * theta / PI).floor() as i64;
    f64::from(sector % 2 == 0)
}

fn star_coverage(center: (f64, f64), radius: f64, n_spokes: u32, x: f64, y: f64, sigma: f64) -> f64 {
    let h = 2.0 * STAR_REACH / STAR_NODES as f64;
    let mut total = 0.0;
    let mut weight = 0.0;
    for i in 0..STAR_NODES {
        let u = -STAR_REACH + (i as f64 + 0.5) * h;
        let wu = (-0.5 * u * u).exp();
        for j in 0..STAR_NODES {
            let v = -STAR_REACH + (j as f64 + 0.5) * h;
            let w = wu * (-0.5 * v * v).exp();
            total += w * star_indicator(center, radius, n_spokes, x + sigma * u, y + sigma * v);
            weight += w;
        }
    }
    total / weight
}

/// Box of width `w` convolved with a unit Gaussian, summed over the lines of
/// one family that are close enough to matter.
fn line_family(v: f64, origin: f64, pitch: f64, w: f64, sigma: f64) -> f64 {
    let nearest = ((v - origin) / pitch).round();
    let reach = ((6.0 * sigma + w) / pitch).ceil() as i64 + 1;
    let s = sigma * SQRT_2;
    let mut sum = 0.0;
    for k in -reach..=reach {
        let c = origin + (nearest + k as f64) * pitch;
        sum += 0.5 * (libm::erf((v - c + w / 2.0) / s) - libm::erf((v - c - w / 2.0) / s));
    }
    sum.min(1.0)
}

impl SamplePattern {
    pub fn validate(&self) -> Result<(), BeamlineError> {
        for v in [self.background, self.feature] {
            if !(0.0..=1.0).contains(&v) {
                return Err(BeamlineError::InvalidScenario("intensities must lie in [0, 1]".into()));
            }
        }
        self.shapes.iter().try_for_each(Shape::validate)
    }

    fn union_coverage(&self, x: f64, y: f64, sigma: f64) -> f64 {
        self.shapes.iter().map(|s| s.coverage(x, y, sigma)).sum::<f64>().min(1.0)
    }

    /// Exact (unblurred) intensity.
    pub fn ground_truth(&self, x: f64, y: f64) -> f64 {
        let c = self.shapes.iter().map(|s| s.indicator(x, y)).sum::<f64>().min(1.0);
        self.background + (self.feature - self.background) * c
    }

    /// Intensity seen through a Gaussian probe of width `sigma`.
    pub fn blurred(&self, x: f64, y: f64, sigma: f64) -> f64 {
        self.background + (self.feature - self.background) * self.union_coverage(x, y, sigma)
    }

    pub fn contains_star(&self) -> bool {
        fn has(s: &Shape) -> bool {
            match s {
                Shape::SiemensStar { .. } => true,
                Shape::Composite { parts } => parts.iter().any(has),
                Shape::LineGrid { .. } => false,
            }
        }
        self.shapes.iter().any(has)
    }

    /// Center of the first Siemens star, if any.
    pub fn star_center(&self) -> Option<(f64, f64)> {
        fn find(s: &Shape) -> Option<(f64, f64)> {
            match s {
                Shape::SiemensStar { center, .. } => Some(*center),
                Shape::Composite { parts } => parts.iter().find_map(find),
                Shape::LineGrid { .. } => None,
            }
        }
        self.shapes.iter().find_map(find)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn star() -> Shape {
        Shape::SiemensStar {
            center: (0.0, 0.0),
            radius: 8.0,
            n_spokes: 16,
        }
    }

    fn pattern() -> SamplePattern {
        SamplePattern {
            background: 0.05,
            feature: 1.0,
            shapes: vec![
                star(),
                Shape::LineGrid {
                    pitch: 20.0,
                    line_width: 0.3,
                    origin: (10.0, 10.0),
                },
            ],
        }
    }

    #[test]
    fn reference_points() {
        let p = pattern();
        assert_eq!(p.ground_truth(0.0, 0.0), 1.0);
        assert_eq!(p.ground_truth(15.0, 15.0), 0.05);
        assert_eq!(p.ground_truth(10.1, 15.0), 1.0);
        assert_eq!(p.ground_truth(15.0, -9.9), 1.0);
    }

    #[test]
    fn grid_line_profile_matches_analytic_convolution() {
        let grid = Shape::LineGrid {
            pitch: 20.0,
            line_width: 0.3,
            origin: (0.0, 10.0),
        };
        // oracle: midpoint integration of the box against the Gaussian density
        let sigma = 0.4;
        for x in [-0.6, -0.2, 0.0, 0.1, 0.35, 1.0] {
            let n = 20_000;
            let h = 0.3 / n as f64;
            let integral: f64 = (0..n)
                .map(|i| {
                    let t = -0.15 + (i as f64 + 0.5) * h;
                    (-(x - t) * (x - t) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * PI).sqrt()) * h
                })
                .sum();
            assert!((grid.coverage(x, 0.0, sigma) - integral).abs() < 1e-9, "{x}");
        }
    }

    #[test]
    fn star_coverage_limits() {
        let s = star();
        // deep inside a sector and far outside the disk
        let inside = s.coverage(4.0 * (PI / 32.0).cos(), 4.0 * (PI / 32.0).sin(), 0.05);
        assert!(inside > 0.999);
        assert_eq!(s.coverage(20.0, 20.0, 0.5), 0.0);
        // heavy blur averages the spokes to about half
        let mid = s.coverage(3.0, 1.0, 20.0);
        assert!(mid < 0.5);
    }

    #[test]
    fn validation() {
        assert!(pattern().validate().is_ok());
        let bad = Shape::LineGrid {
            pitch: 1.0,
            line_width: 2.0,
            origin: (0.0, 0.0),
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn star_rotational_symmetry(r in 0.1f64..7.9, theta in 0.0f64..(2.0 * PI)) {
            let s = star();
            let period = 2.0 * PI / 16.0;
            // stay away from sector boundaries where rounding decides
            let frac = (16.0 * theta / PI).fract();
            prop_assume!(frac > 1e-6 && frac < 1.0 - 1e-6);
            let a = s.indicator(r * theta.cos(), r * theta.sin());
            let b = s.indicator(r * (theta + period).cos(), r * (theta + period).sin());
            prop_assert_eq!(a, b);
        }
    }
}
