use serde::{Deserialize, Serialize};

use super::AnalysisError;

/// `2·sqrt(2·ln 2)`, the ratio between FWHM and σ of a Gaussian.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

const MAX_ITERATIONS: usize = 200;
const RELATIVE_TOLERANCE: f64 = 1e-8;
/// Minimum amplitude-to-residual ratio for a fit to count as a peak.
const MIN_PEAK_RATIO: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile1D {
    pub positions: Vec<f64>,
    pub intensities: Vec<f64>,
}

impl Profile1D {
    pub fn new(positions: Vec<f64>, intensities: Vec<f64>) -> Self {
        Profile1D { positions, intensities }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn span(&self) -> f64 {
        match (self.positions.first(), self.positions.last()) {
            (Some(a), Some(b)) => (b - a).abs(),
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub amplitude: f64,
    pub center: f64,
    pub sigma: f64,
    pub baseline: f64,
    pub fwhm: f64,
    pub residual_rms: f64,
}

impl GaussianFit {
    pub fn eval(&self, x: f64) -> f64 {
        gaussian(&[self.amplitude, self.center, self.sigma, self.baseline], x)
    }
}

pub fn fwhm_from_sigma(sigma: f64) -> Result<f64, AnalysisError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(AnalysisError::NonPositiveSigma(sigma));
    }
    Ok(FWHM_PER_SIGMA * sigma)
}

fn gaussian(p: &[f64; 4], x: f64) -> f64 {
    let d = x - p[1];
    p[0] * (-d * d / (2.0 * p[2] * p[2])).exp() + p[3]
}

fn cost(p: &[f64; 4], xs: &[f64], ys: &[f64]) -> f64 {
    xs.iter().zip(ys).map(|(x, y)| (gaussian(p, *x) - y).powi(2)).sum()
}

/// Solves the 4×4 system `a·x = b` by Gaussian elimination with partial pivoting.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            let pivot_row = a[col];
            for (v, p) in a[row].iter_mut().zip(pivot_row).skip(col) {
                *v -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let s: f64 = (row + 1..4).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn levenberg_marquardt(mut p: [f64; 4], xs: &[f64], ys: &[f64], (lo, hi): (f64, f64), span: f64) -> ([f64; 4], f64) {
    let mut lambda = 1e-3;
    let mut current = cost(&p, xs, ys);
    for _ in 0..MAX_ITERATIONS {
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for (x, y) in xs.iter().zip(ys) {
            let d = x - p[1];
            let s2 = p[2] * p[2];
            let e = (-d * d / (2.0 * s2)).exp();
            let j = [e, p[0] * e * d / s2, p[0] * e * d * d / (s2 * p[2]), 1.0];
            let r = p[0] * e + p[3] - y;
            for a in 0..4 {
                jtr[a] += j[a] * r;
                for b in 0..4 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        let converged = loop {
            let mut damped = jtj;
            for (i, row) in damped.iter_mut().enumerate() {
                row[i] += lambda * jtj[i][i].max(1e-300);
            }
            let Some(delta) = solve4(damped, jtr.map(|v| -v)) else {
                lambda *= 10.0;
                if lambda > 1e16 {
                    break true;
                }
                continue;
            };
            let trial = [p[0] + delta[0], p[1] + delta[1], p[2] + delta[2], p[3] + delta[3]];
            // steps leaving the scanned window are rejected like uphill steps
            let feasible = (lo..=hi).contains(&trial[1]) && trial[2].abs() <= 2.0 * span;
            let trial_cost = if feasible { cost(&trial, xs, ys) } else { f64::INFINITY };
            if trial_cost.is_finite() && trial_cost <= current {
                let step = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
                let size = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                p = trial;
                current = trial_cost;
                lambda = (lambda / 10.0).max(1e-12);
                break step <= RELATIVE_TOLERANCE * (size + RELATIVE_TOLERANCE);
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                break true;
            }
        };
        if converged {
            break;
        }
    }
    (p, current)
}

/// Least-squares fit of `A·exp(−(x−μ)²/(2σ²)) + b` by damped Gauss–Newton
/// (Levenberg–Marquardt) iteration.
///
/// Positions are centered before fitting so the result is translation
/// equivariant to rounding precision.
pub fn gaussian_fit(profile: &Profile1D) -> Result<GaussianFit, AnalysisError> {
    let n = profile.len();
    if n < 8 || profile.intensities.len() != n {
        return Err(AnalysisError::TooFewPoints(n.min(profile.intensities.len())));
    }
    if profile
        .positions
        .iter()
        .chain(&profile.intensities)
        .any(|v| !v.is_finite())
    {
        return Err(AnalysisError::NonFinite);
    }
    let offset = profile.positions.iter().sum::<f64>() / n as f64;
    let xs: Vec<f64> = profile.positions.iter().map(|x| x - offset).collect();
    let ys = &profile.intensities;
    let span = profile.span();
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let (imax, &ymax) = ys
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty");
    let ymin = ys.iter().copied().fold(f64::INFINITY, f64::min);
    if ymax - ymin <= f64::EPSILON * ymax.abs().max(1.0) {
        return Err(AnalysisError::NoPeak);
    }

    // The quarter-span start can slide into a flat wide solution when the
    // peak is narrow, so a second start uses the half-maximum width.
    let above = ys.iter().filter(|y| **y >= 0.5 * (ymax + ymin)).count().max(1);
    let spacing = span / (n - 1) as f64;
    let half_width_sigma = (above as f64 * spacing / FWHM_PER_SIGMA).max(spacing);
    let starts = [
        [ymax - ymin, xs[imax], span / 4.0, ymin],
        [ymax - ymin, xs[imax], half_width_sigma, ymin],
    ];
    let (p, current) = starts
        .iter()
        .map(|s| levenberg_marquardt(*s, &xs, ys, (lo, hi), span))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("two starts");

    let sigma = p[2].abs();
    let residual_rms = (current / n as f64).sqrt();
    if !p.iter().all(|v| v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let peak_outside = p[1] < lo || p[1] > hi;
    let weak = p[0] <= 0.0 || p[0] < MIN_PEAK_RATIO * residual_rms;
    // a peak narrower than the sample spacing is a single-sample spike
    if weak || peak_outside || sigma > span || sigma < spacing {
        return Err(AnalysisError::NoPeak);
    }
    Ok(GaussianFit {
        amplitude: p[0],
        center: p[1] + offset,
        sigma,
        baseline: p[3],
        fwhm: fwhm_from_sigma(sigma)?,
        residual_rms,
    })
}
