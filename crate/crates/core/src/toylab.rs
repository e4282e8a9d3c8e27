//! Toy problems, synthetic signals and degradations, and small experiments on
//! flow-field geometry.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::calibration::{SigmaProfile, StateLayout};
use crate::error::{Error, Result};
use crate::features::{ComplexFeatureGrid, FeatureConfig, Waveform};
use crate::flowmath::{marginal_field_oracle, sample_x0, OracleField, PathKind, PathSpec, Target, VelocityField};
use crate::odesolve::{solve, SolverConfig};

/// Several clean targets sharing one observation `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyProblem {
    pub targets: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub sigma_y: f64,
}

impl ToyProblem {
    pub fn new(targets: Vec<Vec<f64>>, y: Vec<f64>, sigma_y: f64) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::EmptyInput("toy problem targets"));
        }
        if !(sigma_y > 0.0 && sigma_y.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma_y must be positive, got {sigma_y}")));
        }
        for t in &targets {
            if t.len() != y.len() {
                return Err(Error::shape("toy target", y.len(), t.len()));
            }
        }
        Ok(Self { targets, y, sigma_y })
    }

    /// One target at `(1, 0.5)` with `y` at the origin.
    pub fn single_target(sigma_y: f64) -> Result<Self> {
        Self::new(vec![vec![1.0, 0.5]], vec![0.0, 0.0], sigma_y)
    }

    /// Two targets mirrored about the horizontal axis.
    pub fn two_targets(sigma_y: f64) -> Result<Self> {
        Self::new(vec![vec![1.0, 0.8], vec![1.0, -0.8]], vec![0.0, 0.0], sigma_y)
    }

    /// Three targets at unequal distances from `y`.
    pub fn three_targets(sigma_y: f64) -> Result<Self> {
        Self::new(
            vec![vec![1.2, -0.9], vec![2.2, 1.1], vec![0.4, 2.4]],
            vec![0.0, 0.0],
            sigma_y,
        )
    }

    pub fn dim(&self) -> usize {
        self.y.len()
    }

    pub fn with_sigma(&self, sigma_y: f64) -> Result<Self> {
        Self::new(self.targets.clone(), self.y.clone(), sigma_y)
    }

    pub fn oracle_targets(&self) -> Vec<Target> {
        self.targets.iter().map(|x1| (x1.clone(), self.y.clone())).collect()
    }

    pub fn path(&self, kind: PathKind) -> PathSpec {
        PathSpec {
            kind,
            sigma: SigmaProfile::Scalar(self.sigma_y),
        }
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout::flat(self.dim())
    }

    pub fn oracle(&self, kind: PathKind) -> OracleField {
        OracleField {
            targets: self.oracle_targets(),
            path: self.path(kind),
            layout: self.layout(),
        }
    }

    pub fn target_mean(&self) -> Vec<f64> {
        let n = self.targets.len() as f64;
        (0..self.dim())
            .map(|i| self.targets.iter().map(|t| t[i]).sum::<f64>() / n)
            .collect()
    }

    pub fn nearest_distance(&self, x: &[f64]) -> f64 {
        self.targets
            .iter()
            .map(|t| t.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Where field values come from.
pub enum FieldSource<'a> {
    /// Exact marginal field of a toy problem for the given path.
    Oracle(&'a ToyProblem, PathKind),
    /// Any field, e.g. a trained model; conditioned on the problem's `y`.
    Model(&'a dyn VelocityField),
}

impl FieldSource<'_> {
    fn velocity(&self, problem: &ToyProblem, x: &[f64], t: f64) -> Result<Vec<f64>> {
        match self {
            FieldSource::Oracle(p, kind) => p.oracle(*kind).velocity(x, t, &p.y),
            FieldSource::Model(f) => f.velocity(x, t, &problem.y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridBounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl GridBounds {
    pub fn square(half: f64) -> Self {
        Self {
            x_min: -half,
            x_max: half,
            y_min: -half,
            y_max: half,
        }
    }

    /// Grid node coordinates, `resolution` per axis, endpoints included.
    pub fn nodes(&self, resolution: usize) -> Vec<(f64, f64)> {
        let step = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (resolution - 1) as f64;
        let mut out = Vec::with_capacity(resolution * resolution);
        for j in 0..resolution {
            for i in 0..resolution {
                out.push((step(self.x_min, self.x_max, i), step(self.y_min, self.y_max, j)));
            }
        }
        out
    }
}

/// One arrow of a field grid. `far_field` marks oracle points whose density underflowed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldRow {
    pub x: f64,
    pub y: f64,
    pub u: f64,
    pub v: f64,
    pub density: Option<f64>,
    pub far_field: bool,
}

/// Evaluate a 2-D field on a regular grid. Row order is x fastest.
pub fn field_grid(
    source: &FieldSource,
    problem: &ToyProblem,
    t: f64,
    bounds: GridBounds,
    resolution: usize,
) -> Result<Vec<FieldRow>> {
    if problem.dim() != 2 {
        return Err(Error::shape("field grid dimension", 2, problem.dim()));
    }
    if !(0.0..1.0).contains(&t) {
        return Err(Error::TimeOutOfRange(t));
    }
    if resolution < 2 {
        return Err(Error::InvalidConfig("grid resolution must be at least 2".into()));
    }
    let mut rows = Vec::with_capacity(resolution * resolution);
    for (x, y) in bounds.nodes(resolution) {
        let point = [x, y];
        let row = match source {
            FieldSource::Oracle(p, kind) => {
                match marginal_field_oracle(&point, t, &p.oracle_targets(), &p.path(*kind), &p.layout()) {
                    Ok(m) => FieldRow {
                        x,
                        y,
                        u: m.u[0],
                        v: m.u[1],
                        density: Some(m.density),
                        far_field: false,
                    },
                    Err(Error::FarField { .. }) => FieldRow {
                        x,
                        y,
                        u: 0.0,
                        v: 0.0,
                        density: Some(0.0),
                        far_field: true,
                    },
                    Err(e) => return Err(e),
                }
            }
            FieldSource::Model(f) => {
                let u = f.velocity(&point, t, &problem.y)?;
                FieldRow {
                    x,
                    y,
                    u: u[0],
                    v: u[1],
                    density: None,
                    far_field: false,
                }
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_field_csv(out: impl Write, rows: &[FieldRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "y", "u", "v", "density", "far_field"])?;
    for r in rows {
        w.write_record([
            r.x.to_string(),
            r.y.to_string(),
            r.u.to_string(),
            r.v.to_string(),
            r.density.map(|d| d.to_string()).unwrap_or_default(),
            (r.far_field as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_field_csv(path: impl AsRef<Path>, rows: &[FieldRow]) -> Result<()> {
    write_field_csv(std::fs::File::create(path)?, rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dispersion {
    /// Mean Euclidean distance from each endpoint to its nearest target.
    pub mean_distance: f64,
    /// Population standard deviation of the endpoints, averaged over dimensions.
    pub std: f64,
    pub endpoints: Vec<Vec<f64>>,
}

/// Draw `n` prior samples `y + sigma eps`, integrate each, and summarize the endpoints.
pub fn endpoint_dispersion(
    source: &FieldSource,
    problem: &ToyProblem,
    n_samples: usize,
    solver: &SolverConfig,
    seed: u64,
) -> Result<Dispersion> {
    if n_samples == 0 {
        return Err(Error::EmptyInput("dispersion samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = SigmaProfile::Scalar(problem.sigma_y);
    let layout = problem.layout();
    let mut endpoints = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let eps: Vec<f64> = (0..problem.dim()).map(|_| rng.sample(StandardNormal)).collect();
        let x0 = sample_x0(&problem.y, &sigma, &layout, &eps)?;
        let run = solve(|x, t| source.velocity(problem, x, t), &x0, solver)?;
        endpoints.push(run.endpoint);
    }
    let n = n_samples as f64;
    let mean_distance = endpoints.iter().map(|e| problem.nearest_distance(e)).sum::<f64>() / n;
    let d = problem.dim();
    let mut std = 0.0;
    for i in 0..d {
        let mu = endpoints.iter().map(|e| e[i]).sum::<f64>() / n;
        std += (endpoints.iter().map(|e| (e[i] - mu).powi(2)).sum::<f64>() / n).sqrt();
    }
    Ok(Dispersion {
        mean_distance,
        std: std / d as f64,
        endpoints,
    })
}

/// Angle threshold used to decide where the field points.
pub const POINTING_TOLERANCE_DEG: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimeReport {
    pub sigma: f64,
    /// Earliest probed time from which the field at `y` points within the
    /// tolerance of a single target (and not of the target mean) at every later probe.
    pub t_star: Option<f64>,
    /// Last probed time at which the field at `y` points within the tolerance of the target mean.
    pub mean_pointing_until: Option<f64>,
    /// Last time the oracle could be evaluated before its density underflowed.
    pub last_probe: f64,
}

fn angle_between(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return f64::NAN;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Probe times `0, 1/1000, ..., 999/1000`.
pub fn regime_probe_times() -> Vec<f64> {
    (0..1000).map(|i| i as f64 / 1000.0).collect()
}

/// For each sigma, sweep the joint oracle field at `y` over time and locate
/// the hand-over from pointing at the target mean to pointing at one target.
pub fn sigma_regimes_experiment(problem: &ToyProblem, sigmas: &[f64]) -> Result<Vec<RegimeReport>> {
    let mean_dir: Vec<f64> = problem.target_mean().iter().zip(&problem.y).map(|(m, y)| m - y).collect();
    let target_dirs: Vec<Vec<f64>> = problem
        .targets
        .iter()
        .map(|x1| x1.iter().zip(&problem.y).map(|(a, y)| a - y).collect())
        .collect();
    let single = problem.targets.len() == 1;
    let mut reports = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let p = problem.with_sigma(sigma)?;
        let oracle = p.oracle(PathKind::JointFm);
        let mut on_target = Vec::new();
        let mut mean_pointing_until = None;
        let mut last_probe = 0.0;
        for t in regime_probe_times() {
            let u = match oracle.velocity(&p.y, t, &p.y) {
                Ok(u) => u,
                Err(Error::FarField { .. }) => break,
                Err(e) => return Err(e),
            };
            last_probe = t;
            let to_mean = angle_between(&u, &mean_dir) < POINTING_TOLERANCE_DEG;
            let to_target = target_dirs.iter().any(|d| angle_between(&u, d) < POINTING_TOLERANCE_DEG);
            if to_mean {
                mean_pointing_until = Some(t);
            }
            on_target.push((t, to_target && (single || !to_mean)));
        }
        let mut t_star = None;
        for &(t, ok) in on_target.iter().rev() {
            if !ok {
                break;
            }
            t_star = Some(t);
        }
        reports.push(RegimeReport {
            sigma,
            t_star,
            mean_pointing_until,
            last_probe,
        });
    }
    Ok(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalKind {
    Tone { freq: f64 },
    HarmonicStack { f0: f64, partials: usize },
    Chirp { f_start: f64, f_end: f64 },
    NoiseBurst,
}

const SYNTH_PEAK: f64 = 0.9;

fn normalize_peak(samples: &mut [f64]) {
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = SYNTH_PEAK / peak;
        samples.iter_mut().for_each(|v| *v *= g);
    }
}

/// Deterministic synthetic test signal with peak amplitude 0.9.
pub fn synth_signal(
    kind: SignalKind,
    duration: f64,
    sample_rate: u32,
    cfg: &FeatureConfig,
    seed: u64,
) -> Result<Waveform> {
    let n = (duration * sample_rate as f64).round();
    if !(n.is_finite() && n >= cfg.window_len as f64) {
        return Err(Error::InvalidConfig(format!(
            "duration {duration} s at {sample_rate} Hz is shorter than one window"
        )));
    }
    let n = n as usize;
    let sr = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nyquist = sr / 2.0;
    let mut check_freq = |f: f64| -> Result<f64> {
        if !(f > 0.0 && f < nyquist) {
            return Err(Error::InvalidConfig(format!("frequency {f} Hz outside (0, {nyquist})")));
        }
        Ok(rng.random::<f64>() * 2.0 * PI)
    };
    let mut samples: Vec<f64> = match kind {
        SignalKind::Tone { freq } => {
            let phase = check_freq(freq)?;
            (0..n).map(|i| (2.0 * PI * freq * i as f64 / sr + phase).sin()).collect()
        }
        SignalKind::HarmonicStack { f0, partials } => {
            if partials == 0 {
                return Err(Error::InvalidConfig("harmonic stack needs at least one partial".into()));
            }
            let phases = (1..=partials)
                .map(|k| check_freq(k as f64 * f0))
                .collect::<Result<Vec<_>>>()?;
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    phases
                        .iter()
                        .enumerate()
                        .map(|(k, ph)| {
                            let k = (k + 1) as f64;
                            (2.0 * PI * k * f0 * t + ph).sin() / k
                        })
                        .sum()
                })
                .collect()
        }
        SignalKind::Chirp { f_start, f_end } => {
            check_freq(f_end)?;
            let phase = check_freq(f_start)?;
            let dur = n as f64 / sr;
            let rate = (f_end - f_start) / dur;
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    (2.0 * PI * (f_start * t + 0.5 * rate * t * t) + phase).sin()
                })
                .collect()
        }
        SignalKind::NoiseBurst => {
            let on = rng.random_range(0..n / 2);
            let len = (n / 4).max(1) + rng.random_range(0..=n / 4);
            (0..n)
                .map(|i| {
                    let z: f64 = rng.sample(StandardNormal);
                    if i >= on && i < on + len {
                        let p = (i - on) as f64 / len as f64;
                        z * (PI * p).sin().powi(2)
                    } else {
                        0.0
                    }
                })
                .collect()
        }
    };
    normalize_peak(&mut samples);
    Waveform::new(samples, sample_rate)
}

/// Sequence of short decaying harmonic notes separated by short gaps, peak 0.9.
pub fn note_sequence(duration: f64, sample_rate: u32, cfg: &FeatureConfig, seed: u64) -> Result<Waveform> {
    let n = (duration * sample_rate as f64).round();
    if !(n.is_finite() && n >= cfg.window_len as f64) {
        return Err(Error::InvalidConfig(format!(
            "duration {duration} s at {sample_rate} Hz is shorter than one window"
        )));
    }
    let n = n as usize;
    let sr = sample_rate as f64;
    let top = (sr / 8.0).min(1000.0);
    let low = (top / 6.0).min(150.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = vec![0.0; n];
    let mut pos = (rng.random::<f64>() * 0.02 * sr) as usize;
    while pos < n {
        let len = ((0.04 + 0.08 * rng.random::<f64>()) * sr) as usize;
        let f0 = low * (top / low).powf(rng.random::<f64>());
        let decay = 10.0 + 30.0 * rng.random::<f64>();
        let attack = 0.002 * sr;
        for i in 0..len.min(n - pos) {
            let t = i as f64 / sr;
            let env = (i as f64 / attack).min(1.0) * (-decay * t).exp();
            let v: f64 = (1..=3).map(|k| (2.0 * PI * k as f64 * f0 * t).sin() / k as f64).sum();
            samples[pos + i] += env * v;
        }
        pos += len + (rng.random::<f64>() * 0.04 * sr) as usize;
    }
    normalize_peak(&mut samples);
    Waveform::new(samples, sample_rate)
}

/// White noise with standard deviation `0.9 * 10^(-level_db / 20)`.
pub fn background_noise(len: usize, sample_rate: u32, level_db: f64, seed: u64) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = SYNTH_PEAK * 10f64.powf(-level_db.abs() / 20.0);
    Waveform::new((0..len).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(), sample_rate)
}

fn mix(a: &Waveform, b: &Waveform) -> Result<Waveform> {
    Waveform::new(
        a.samples.iter().zip(&b.samples).map(|(x, y)| (x + y).clamp(-1.0, 1.0)).collect(),
        a.sample_rate,
    )
}

/// A clean signal with its degraded counterpart, in both domains.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPair {
    pub clean_wave: Waveform,
    pub degraded_wave: Waveform,
    pub clean: ComplexFeatureGrid,
    pub degraded: ComplexFeatureGrid,
}

/// Settings of the synthetic enhancement task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralTask {
    pub sample_rate: u32,
    pub duration: f64,
    pub degrade: DegradeSpec,
    /// Level of the background noise below full scale, in dB.
    pub background_db: f64,
}

impl SpectralTask {
    /// Note sequences over a background. The degradation acts on the notes;
    /// the background passes through unchanged, so `clean` and `degraded`
    /// share it sample for sample.
    pub fn pairs(&self, cfg: &FeatureConfig, count: usize, seed: u64) -> Result<Vec<TaskPair>> {
        (0..count as u64)
            .map(|i| {
                let s = seed.wrapping_mul(1_000_003).wrapping_add(i);
                let notes = note_sequence(self.duration, self.sample_rate, cfg, s)?;
                let background = background_noise(notes.len(), self.sample_rate, self.background_db, s ^ 0x9e37_79b9)?;
                let smoothed = crate::features::invert(&degrade(&crate::features::extract(&notes, cfg)?, &self.degrade, s)?)?;
                let clean_wave = mix(&notes, &background)?;
                let degraded_wave = mix(&smoothed, &background)?;
                Ok(TaskPair {
                    clean: crate::features::extract(&clean_wave, cfg)?,
                    degraded: crate::features::extract(&degraded_wave, cfg)?,
                    clean_wave,
                    degraded_wave,
                })
            })
            .collect()
    }
}

/// Synthetic stand-ins for a lossy decoder, applied to compressed feature grids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DegradeSpec {
    /// Moving average of magnitudes over `2 frames + 1` frames; phase kept.
    SpectralSmooth { frames: usize },
    /// Magnitudes rounded to `levels` uniform steps between 0 and each row's maximum; phase kept.
    Quantize { levels: usize },
    /// Complex Gaussian noise of standard deviation `level` on rows `lo..=hi`.
    BandNoise { level: f64, lo: usize, hi: usize },
    /// Rows above `cutoff` set to zero.
    Lowpass { cutoff: usize },
}

impl DegradeSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DegradeSpec::Quantize { levels: 1 } => Err(Error::InvalidConfig("quantization needs 0 (off) or >= 2 levels".into())),
            DegradeSpec::BandNoise { level, lo, hi } if !(level >= 0.0 && level.is_finite()) || lo > hi => Err(
                Error::InvalidConfig(format!("invalid band noise level {level} rows {lo}..={hi}")),
            ),
            _ => Ok(()),
        }
    }
}

fn with_magnitude(z: Complex64, m: f64) -> Complex64 {
    let r = z.norm();
    if r > 0.0 {
        z * (m / r)
    } else {
        Complex64::new(m, 0.0)
    }
}

/// Apply a degradation; the grid shape never changes.
pub fn degrade(features: &ComplexFeatureGrid, spec: &DegradeSpec, seed: u64) -> Result<ComplexFeatureGrid> {
    spec.validate()?;
    let src = &features.values;
    let mut out = src.clone();
    let (rows, cols) = (src.rows, src.cols);
    match *spec {
        DegradeSpec::SpectralSmooth { frames } => {
            for r in 0..rows {
                let row = src.row(r);
                let mags: Vec<f64> = row.iter().map(|z| z.norm()).collect();
                for c in 0..cols {
                    let lo = c.saturating_sub(frames);
                    let hi = (c + frames).min(cols - 1);
                    let m = mags[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
                    out.set(r, c, with_magnitude(row[c], m));
                }
            }
        }
        DegradeSpec::Quantize { levels } if levels >= 2 => {
            let steps = (levels - 1) as f64;
            for r in 0..rows {
                let row = src.row(r);
                let max = row.iter().map(|z| z.norm()).fold(0.0, f64::max);
                if max == 0.0 {
                    continue;
                }
                for (c, z) in row.iter().enumerate() {
                    let q = (z.norm() / max * steps).round() / steps * max;
                    out.set(r, c, with_magnitude(*z, q));
                }
            }
        }
        DegradeSpec::Quantize { .. } => {}
        DegradeSpec::BandNoise { level, lo, hi } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scale = level / 2f64.sqrt();
            for r in lo..=hi.min(rows.saturating_sub(1)) {
                for c in 0..cols {
                    let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                    out.set(r, c, src.get(r, c) + Complex64::new(scale * a, scale * b));
                }
            }
        }
        DegradeSpec::Lowpass { cutoff } => {
            for r in (cutoff + 1)..rows {
                for c in 0..cols {
                    out.set(r, c, Complex64::new(0.0, 0.0));
                }
            }
        }
    }
    Ok(ComplexFeatureGrid {
        values: out,
        ..features.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{extract, stft};
    use crate::odesolve::Method;

    fn small_cfg() -> FeatureConfig {
        FeatureConfig {
            window_len: 256,
            hop_len: 64,
            ..FeatureConfig::default()
        }
    }

    fn peak_bin(w: &Waveform, cfg: &FeatureConfig) -> Vec<f64> {
        let g = stft(w, cfg).unwrap();
        (0..g.rows)
            .map(|r| g.row(r).iter().map(|z| z.norm()).sum::<f64>())
            .collect()
    }

    #[test]
    fn tone_peaks_at_its_bin() {
        let cfg = small_cfg();
        let w = synth_signal(SignalKind::Tone { freq: 440.0 }, 0.5, 8000, &cfg, 1).unwrap();
        assert!(w.peak() <= 1.0);
        let e = peak_bin(&w, &cfg);
        let best = (0..e.len()).max_by(|&a, &b| e[a].total_cmp(&e[b])).unwrap();
        let expect = 440.0 * cfg.window_len as f64 / 8000.0;
        assert!((best as f64 - expect).abs() <= 1.0, "{best} vs {expect}");
    }

    #[test]
    fn harmonic_stack_has_five_peaks() {
        let cfg = small_cfg();
        let f0 = 250.0;
        let w = synth_signal(SignalKind::HarmonicStack { f0, partials: 5 }, 0.5, 8000, &cfg, 2).unwrap();
        let e = peak_bin(&w, &cfg);
        let max = e.iter().cloned().fold(0.0, f64::max);
        let peaks: Vec<usize> = (1..e.len() - 1)
            .filter(|&k| e[k] > e[k - 1] && e[k] >= e[k + 1] && e[k] > 0.05 * max)
            .collect();
        assert_eq!(peaks.len(), 5, "{peaks:?}");
        for (i, &p) in peaks.iter().enumerate() {
            let expect = (i + 1) as f64 * f0 * cfg.window_len as f64 / 8000.0;
            assert!((p as f64 - expect).abs() <= 1.0);
        }
    }

    #[test]
    fn synth_is_seeded_and_bounded() {
        let cfg = small_cfg();
        for kind in [
            SignalKind::Chirp { f_start: 100.0, f_end: 3000.0 },
            SignalKind::NoiseBurst,
        ] {
            let a = synth_signal(kind, 0.3, 8000, &cfg, 5).unwrap();
            let b = synth_signal(kind, 0.3, 8000, &cfg, 5).unwrap();
            assert_eq!(a, b);
            assert!(a.peak() <= 1.0);
        }
        assert!(synth_signal(SignalKind::NoiseBurst, 0.01, 8000, &cfg, 0).is_err());
        assert!(synth_signal(SignalKind::Tone { freq: 5000.0 }, 0.3, 8000, &cfg, 0).is_err());
    }

    fn noise_features(seed: u64) -> ComplexFeatureGrid {
        let cfg = small_cfg();
        let w = synth_signal(SignalKind::NoiseBurst, 0.5, 8000, &cfg, seed).unwrap();
        extract(&w, &cfg).unwrap()
    }

    #[test]
    fn zero_strength_is_identity() {
        let f = noise_features(1);
        for spec in [
            DegradeSpec::SpectralSmooth { frames: 0 },
            DegradeSpec::Quantize { levels: 0 },
            DegradeSpec::BandNoise { level: 0.0, lo: 0, hi: 10 },
            DegradeSpec::Lowpass { cutoff: f.values.rows - 1 },
        ] {
            assert_eq!(degrade(&f, &spec, 3).unwrap(), f, "{spec:?}");
        }
    }

    #[test]
    fn lowpass_zeroes_upper_rows() {
        let f = noise_features(2);
        let d = degrade(&f, &DegradeSpec::Lowpass { cutoff: 20 }, 0).unwrap();
        for r in 21..f.values.rows {
            assert!(d.values.row(r).iter().all(|z| z.norm() == 0.0));
        }
        assert_eq!(d.values.row(20), f.values.row(20));
    }

    #[test]
    fn quantize_limits_distinct_magnitudes() {
        let f = noise_features(3);
        let d = degrade(&f, &DegradeSpec::Quantize { levels: 4 }, 0).unwrap();
        for r in 0..d.values.rows {
            let mut mags: Vec<f64> = d.values.row(r).iter().map(|z| z.norm()).collect();
            mags.sort_by(f64::total_cmp);
            mags.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1e-300));
            assert!(mags.len() <= 4, "row {r}: {mags:?}");
        }
    }

    #[test]
    fn smoothing_keeps_phase_and_shape() {
        let f = noise_features(4);
        let d = degrade(&f, &DegradeSpec::SpectralSmooth { frames: 2 }, 0).unwrap();
        assert_eq!((d.values.rows, d.values.cols), (f.values.rows, f.values.cols));
        assert!(d.values.all_finite());
        let (r, c) = (10, 20);
        let (a, b) = (f.values.get(r, c), d.values.get(r, c));
        if a.norm() > 1e-9 {
            assert!((a.arg() - b.arg()).abs() < 1e-9);
        }
        let row = f.values.row(r);
        let expect = (18..=22).map(|k| row[k].norm()).sum::<f64>() / 5.0;
        assert!((b.norm() - expect).abs() < 1e-12);
    }

    #[test]
    fn band_noise_is_seeded_and_confined() {
        let f = noise_features(5);
        let spec = DegradeSpec::BandNoise { level: 0.1, lo: 5, hi: 9 };
        let a = degrade(&f, &spec, 11).unwrap();
        assert_eq!(a, degrade(&f, &spec, 11).unwrap());
        assert_ne!(a, degrade(&f, &spec, 12).unwrap());
        for r in (0..5).chain(10..f.values.rows) {
            assert_eq!(a.values.row(r), f.values.row(r));
        }
    }

    #[test]
    fn single_target_arrows_aim_at_target() {
        let p = ToyProblem::single_target(0.4).unwrap();
        let t = 0.3;
        let rows = field_grid(&FieldSource::Oracle(&p, PathKind::JointFm), &p, t, GridBounds::square(2.0), 9).unwrap();
        for r in rows {
            let expect = [(1.0 - r.x) / (1.0 - t), (0.5 - r.y) / (1.0 - t)];
            if !r.far_field {
                assert!((r.u - expect[0]).abs() < 1e-12 && (r.v - expect[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_axis_arrows_stay_on_axis() {
        let p = ToyProblem::two_targets(0.4).unwrap();
        let rows = field_grid(&FieldSource::Oracle(&p, PathKind::JointFm), &p, 0.5, GridBounds::square(2.0), 11).unwrap();
        for r in rows.iter().filter(|r| r.y == 0.0 && !r.far_field) {
            assert!(r.v.abs() < 1e-12, "{r:?}");
        }
    }

    #[test]
    fn density_integrates_to_window_mass() {
        // Both components sit well inside the window, so the mixture mass there is ~1.
        let p = ToyProblem::two_targets(0.4).unwrap();
        let res = 201;
        let b = GridBounds::square(3.0);
        let rows = field_grid(&FieldSource::Oracle(&p, PathKind::JointFm), &p, 0.5, b, res).unwrap();
        let h = 6.0 / (res - 1) as f64;
        let mass: f64 = rows
            .iter()
            .map(|r| {
                let edge = |v: f64| if (v.abs() - 3.0).abs() < 1e-9 { 0.5 } else { 1.0 };
                r.density.unwrap() * edge(r.x) * edge(r.y)
            })
            .sum::<f64>()
            * h
            * h;
        assert!((mass - 1.0).abs() < 1e-4, "{mass}");
    }

    #[test]
    fn far_field_points_are_flagged() {
        let p = ToyProblem::single_target(0.01).unwrap();
        let rows = field_grid(&FieldSource::Oracle(&p, PathKind::JointFm), &p, 0.9, GridBounds::square(50.0), 3).unwrap();
        assert!(rows.iter().any(|r| r.far_field && r.u == 0.0 && r.density == Some(0.0)));
        let mut buf = Vec::new();
        write_field_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,y,u,v,density,far_field\n"));
        assert_eq!(text.lines().count(), 10);
    }

    #[test]
    fn joint_oracle_contracts_and_constant_sigma_does_not() {
        let p = ToyProblem::single_target(0.4).unwrap();
        let solver = SolverConfig::new(Method::Midpoint, 50);
        let joint = endpoint_dispersion(&FieldSource::Oracle(&p, PathKind::JointFm), &p, 200, &solver, 1).unwrap();
        assert!(joint.mean_distance < 1e-3 * 0.4, "{}", joint.mean_distance);
        let constant = endpoint_dispersion(&FieldSource::Oracle(&p, PathKind::ConstantSigma), &p, 200, &solver, 1).unwrap();
        assert!(constant.std >= 0.5 * 0.4, "{}", constant.std);
        let one = endpoint_dispersion(&FieldSource::Oracle(&p, PathKind::ConstantSigma), &p, 1, &solver, 1).unwrap();
        assert_eq!(one.std, 0.0);
        let again = endpoint_dispersion(&FieldSource::Oracle(&p, PathKind::ConstantSigma), &p, 200, &solver, 1).unwrap();
        assert_eq!(again, constant);
    }

    #[test]
    fn dispersion_shrinks_with_steps() {
        let p = ToyProblem::three_targets(0.4).unwrap();
        let mut last = f64::INFINITY;
        for steps in [2, 5, 10, 25, 50] {
            let d = endpoint_dispersion(
                &FieldSource::Oracle(&p, PathKind::JointFm),
                &p,
                100,
                &SolverConfig::new(Method::Midpoint, steps),
                4,
            )
            .unwrap();
            assert!(d.mean_distance <= last * 1.1, "{steps}: {} after {last}", d.mean_distance);
            last = d.mean_distance;
        }
    }

    #[test]
    fn larger_sigma_hands_over_later() {
        let p = ToyProblem::three_targets(0.4).unwrap();
        let r = sigma_regimes_experiment(&p, &[0.1, 0.4, 1.6]).unwrap();
        let ts: Vec<f64> = r.iter().map(|r| r.t_star.unwrap()).collect();
        assert!(ts[0] < ts[1] && ts[1] < ts[2], "{ts:?}");
        for rep in &r {
            assert!(rep.mean_pointing_until.unwrap() < rep.t_star.unwrap());
        }
    }

    #[test]
    fn single_target_points_at_target_from_start() {
        let p = ToyProblem::single_target(0.4).unwrap();
        let r = sigma_regimes_experiment(&p, &[0.4]).unwrap();
        assert_eq!(r[0].t_star, Some(0.0));
    }

    #[test]
    fn huge_sigma_points_at_mean_early() {
        // Weights at y depend on t / ((1 - t) sigma); for large sigma they stay near uniform.
        let p = ToyProblem::three_targets(1e4).unwrap();
        let u = p.oracle(PathKind::JointFm).velocity(&p.y, 0.2, &p.y).unwrap();
        let mean = p.target_mean();
        assert!(angle_between(&u, &mean) < 1e-6);
    }
}
