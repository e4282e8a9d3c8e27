//! Probability paths, conditional flow fields and training targets.
//!
//! Two paths are supported:
//!
//! * [`PathKind::JointFm`]: `x_t ~ N(y + t (x1 - y), (1 - t)^2 sigma_y^2)`. The prior
//!   sample `x0 = y + sigma_y * eps` is coupled to `x1` through `y`, the noise
//!   vanishes at `t = 1` and the conditional field `(x1 - x_t) / (1 - t)` is
//!   contractive.
//! * [`PathKind::ConstantSigma`]: `x_t = t x1 + (1 - t) y + sigma * eps` with a target
//!   `x1 - y` that ignores the noise, so `sigma` remains at the endpoint.
//!
//! Complex feature grids enter as stacked real/imaginary vectors (see
//! [`StateLayout`]); the noise scale applies to both channels alike.

use std::f64::consts::PI;

use crate::calibration::{SigmaProfile, StateLayout};
use crate::error::{Error, Result};

/// Times at or beyond `1 - SINGULAR_GUARD` are rejected by [`conditional_field`].
pub const SINGULAR_GUARD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    JointFm,
    ConstantSigma,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSpec {
    pub kind: PathKind,
    pub sigma: SigmaProfile,
}

impl PathSpec {
    pub fn joint(sigma: SigmaProfile) -> Self {
        Self {
            kind: PathKind::JointFm,
            sigma,
        }
    }

    pub fn constant(sigma: SigmaProfile) -> Self {
        Self {
            kind: PathKind::ConstantSigma,
            sigma,
        }
    }

    /// Multiplier on `sigma` for the path's standard deviation at time `t`.
    pub fn noise_factor(&self, t: f64) -> f64 {
        match self.kind {
            PathKind::JointFm => 1.0 - t,
            PathKind::ConstantSigma => 1.0,
        }
    }
}

/// One draw of the training process.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub x_t: Vec<f64>,
    pub t: f64,
    pub target_u: Vec<f64>,
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub y: Vec<f64>,
    pub epsilon: Vec<f64>,
}

fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::shape(context, expected, got));
    }
    Ok(())
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeOutOfRange(t));
    }
    Ok(())
}

/// `x0 = y + sigma * eps`, with per-frequency scales applied row-wise.
pub fn sample_x0(y: &[f64], sigma: &SigmaProfile, layout: &StateLayout, epsilon: &[f64]) -> Result<Vec<f64>> {
    check_len("layout vs y", layout.len(), y.len())?;
    check_len("epsilon vs y", y.len(), epsilon.len())?;
    let scales = sigma.expand(layout)?;
    Ok(y.iter()
        .zip(epsilon)
        .zip(&scales)
        .map(|((y, e), s)| y + s * e)
        .collect())
}

/// `x_t = t x1 + (1 - t) x0`.
pub fn sample_xt(x1: &[f64], x0: &[f64], t: f64) -> Result<Vec<f64>> {
    check_time(t)?;
    check_len("x0 vs x1", x1.len(), x0.len())?;
    Ok(x1.iter().zip(x0).map(|(a, b)| t * a + (1.0 - t) * b).collect())
}

/// `(x1 - x_t) / (1 - t)`; singular as `t -> 1`.
pub fn conditional_field(x_t: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    check_time(t)?;
    if t >= 1.0 - SINGULAR_GUARD {
        return Err(Error::SingularTime(t));
    }
    check_len("x_t vs x1", x1.len(), x_t.len())?;
    let inv = 1.0 / (1.0 - t);
    Ok(x1.iter().zip(x_t).map(|(a, b)| (a - b) * inv).collect())
}

/// Training draw for the joint path; the target `x1 - x0` stays finite at `t = 1`.
pub fn jfm_training_pair(
    x1: &[f64],
    y: &[f64],
    sigma: &SigmaProfile,
    layout: &StateLayout,
    epsilon: &[f64],
    t: f64,
) -> Result<FlowSample> {
    check_len("y vs x1", x1.len(), y.len())?;
    let x0 = sample_x0(y, sigma, layout, epsilon)?;
    let x_t = sample_xt(x1, &x0, t)?;
    let target_u = x1.iter().zip(&x0).map(|(a, b)| a - b).collect();
    Ok(FlowSample {
        x_t,
        t,
        target_u,
        x0,
        x1: x1.to_vec(),
        y: y.to_vec(),
        epsilon: epsilon.to_vec(),
    })
}

/// Training draw for the constant-sigma baseline: `x_t = t x1 + (1 - t) y + sigma eps`,
/// target `x1 - y`.
pub fn constant_sigma_training_pair(
    x1: &[f64],
    y: &[f64],
    sigma: &SigmaProfile,
    layout: &StateLayout,
    epsilon: &[f64],
    t: f64,
) -> Result<FlowSample> {
    check_time(t)?;
    check_len("y vs x1", x1.len(), y.len())?;
    let noise = sample_x0(&vec![0.0; y.len()], sigma, layout, epsilon)?;
    let x0: Vec<f64> = y.iter().zip(&noise).map(|(a, n)| a + n).collect();
    let x_t = x1
        .iter()
        .zip(y)
        .zip(&noise)
        .map(|((a, b), n)| t * a + (1.0 - t) * b + n)
        .collect();
    let target_u = x1.iter().zip(y).map(|(a, b)| a - b).collect();
    Ok(FlowSample {
        x_t,
        t,
        target_u,
        x0,
        x1: x1.to_vec(),
        y: y.to_vec(),
        epsilon: epsilon.to_vec(),
    })
}

/// Draw a training sample for whichever path `path` names.
pub fn training_pair(
    path: &PathSpec,
    x1: &[f64],
    y: &[f64],
    layout: &StateLayout,
    epsilon: &[f64],
    t: f64,
) -> Result<FlowSample> {
    match path.kind {
        PathKind::JointFm => jfm_training_pair(x1, y, &path.sigma, layout, epsilon, t),
        PathKind::ConstantSigma => constant_sigma_training_pair(x1, y, &path.sigma, layout, epsilon, t),
    }
}

/// Mean squared error over all entries.
pub fn jfm_loss(output: &[f64], target: &[f64]) -> Result<f64> {
    check_len("loss output vs target", target.len(), output.len())?;
    if output.is_empty() {
        return Err(Error::EmptyInput("loss over zero entries"));
    }
    let sum: f64 = output.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(sum / output.len() as f64)
}

/// Marginal field and mixture density at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalField {
    pub u: Vec<f64>,
    pub density: f64,
    pub log_density: f64,
    /// Posterior weight of each target.
    pub weights: Vec<f64>,
}

/// One `(x1, y)` pair of a mixture of conditional paths.
pub type Target = (Vec<f64>, Vec<f64>);

/// Exact marginal field for an equally weighted mixture of conditional paths.
///
/// `u(x, t) = sum_k w_k(x, t) u_t(x | x1_k, y_k)` with
/// `w_k ∝ N(x; mu_{t,k}, sigma_{t,k}^2 I)`. Weights are computed in the log
/// domain; an error is returned only when every component density underflows.
pub fn marginal_field_oracle(
    x: &[f64],
    t: f64,
    targets: &[Target],
    path: &PathSpec,
    layout: &StateLayout,
) -> Result<MarginalField> {
    check_time(t)?;
    if path.kind == PathKind::JointFm && t >= 1.0 - SINGULAR_GUARD {
        return Err(Error::SingularTime(t));
    }
    if targets.is_empty() {
        return Err(Error::EmptyInput("marginal field targets"));
    }
    check_len("layout vs x", layout.len(), x.len())?;
    let scales = path.sigma.expand(layout)?;
    let factor = path.noise_factor(t);
    let log_norm: f64 = scales
        .iter()
        .map(|s| -(s * factor).ln() - 0.5 * (2.0 * PI).ln())
        .sum();
    let log_prior = -(targets.len() as f64).ln();

    let mut log_w = Vec::with_capacity(targets.len());
    for (x1, y) in targets {
        check_len("target x1", x.len(), x1.len())?;
        check_len("target y", x.len(), y.len())?;
        let mut quad = 0.0;
        for i in 0..x.len() {
            let mu = match path.kind {
                PathKind::JointFm => y[i] + t * (x1[i] - y[i]),
                PathKind::ConstantSigma => t * x1[i] + (1.0 - t) * y[i],
            };
            let z = (x[i] - mu) / (scales[i] * factor);
            quad += z * z;
        }
        log_w.push(log_prior + log_norm - 0.5 * quad);
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > f64::MIN_POSITIVE.ln()) {
        return Err(Error::FarField {
            point: x.to_vec(),
            t,
        });
    }
    let sum: f64 = log_w.iter().map(|l| (l - max).exp()).sum();
    let log_density = max + sum.ln();
    let weights: Vec<f64> = log_w.iter().map(|l| (l - log_density).exp()).collect();

    let mut u = vec![0.0; x.len()];
    for ((x1, y), w) in targets.iter().zip(&weights) {
        for i in 0..x.len() {
            let uk = match path.kind {
                PathKind::JointFm => (x1[i] - x[i]) / (1.0 - t),
                PathKind::ConstantSigma => x1[i] - y[i],
            };
            u[i] += w * uk;
        }
    }
    Ok(MarginalField {
        u,
        density: log_density.exp(),
        log_density,
        weights,
    })
}

/// A time-dependent velocity field conditioned on an observation `y`.
pub trait VelocityField {
    fn velocity(&self, x: &[f64], t: f64, y: &[f64]) -> Result<Vec<f64>>;
}

/// [`marginal_field_oracle`] packaged as a [`VelocityField`]; `y` is carried by the targets.
#[derive(Debug, Clone)]
pub struct OracleField {
    pub targets: Vec<Target>,
    pub path: PathSpec,
    pub layout: StateLayout,
}

impl VelocityField for OracleField {
    fn velocity(&self, x: &[f64], t: f64, _y: &[f64]) -> Result<Vec<f64>> {
        Ok(marginal_field_oracle(x, t, &self.targets, &self.path, &self.layout)?.u)
    }
}
