//! Amplitude-compressed complex STFT features and their inverse.
//!
//! The forward transform is a centered, Hann-windowed one-sided STFT with
//! reflection padding of half a window on each side. Each bin `z` is then
//! mapped to `beta * |z|^alpha * exp(i arg z)`. The inverse undoes the
//! compression and runs weighted overlap-add, dividing by the summed squared
//! window so that window/hop pairs without the constant-overlap-add property
//! still invert exactly.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::quantile_linear;

/// Mono audio with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                context: "waveform sample",
                step: i,
            });
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub window_len: usize,
    pub hop_len: usize,
    /// Magnitude compression exponent.
    pub alpha: f64,
    /// Scale applied after compression.
    pub beta: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            window_len: 1534,
            hop_len: 384,
            alpha: 0.3,
            beta: 0.66,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len < 2 {
            return Err(Error::InvalidConfig("window_len must be at least 2".into()));
        }
        if self.hop_len == 0 || self.hop_len > self.window_len {
            return Err(Error::InvalidConfig(format!(
                "hop_len {} must satisfy 0 < hop_len <= window_len ({})",
                self.hop_len, self.window_len
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("beta {} must be positive", self.beta)));
        }
        Ok(())
    }

    /// Number of one-sided frequency bins, `floor(window_len / 2) + 1`.
    pub fn num_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    /// Number of centered frames for a signal of `num_samples`.
    pub fn num_frames(&self, num_samples: usize) -> usize {
        1 + num_samples / self.hop_len
    }

    fn pad(&self) -> usize {
        self.window_len / 2
    }
}

/// Row-major `rows x cols` complex grid (rows are frequency bins, columns frames).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl ComplexGrid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("complex grid", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: Complex64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[Complex64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Real channel followed by imaginary channel, each row-major.
    pub fn to_stacked(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.data.len());
        out.extend(self.data.iter().map(|z| z.re));
        out.extend(self.data.iter().map(|z| z.im));
        out
    }

    pub fn from_stacked(rows: usize, cols: usize, stacked: &[f64]) -> Result<Self> {
        let n = rows * cols;
        if stacked.len() != 2 * n {
            return Err(Error::shape("stacked grid", 2 * n, stacked.len()));
        }
        let data = (0..n)
            .map(|i| Complex64::new(stacked[i], stacked[n + i]))
            .collect();
        Ok(Self { rows, cols, data })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// Compressed features together with what is needed to invert them.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexFeatureGrid {
    pub values: ComplexGrid,
    pub config: FeatureConfig,
    pub num_samples: usize,
    pub sample_rate: u32,
}

impl ComplexFeatureGrid {
    /// Fraction of real and imaginary parts inside `[-bound, bound]`.
    pub fn fraction_within(&self, bound: f64) -> f64 {
        let n = self.values.len();
        if n == 0 {
            return 1.0;
        }
        let inside = self
            .values
            .data
            .iter()
            .map(|z| (z.re.abs() <= bound) as usize + (z.im.abs() <= bound) as usize)
            .sum::<usize>();
        inside as f64 / (2 * n) as f64
    }
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

fn reflect_pad(samples: &[f64], pad: usize) -> Vec<f64> {
    let n = samples.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((0..pad).map(|i| samples[pad - i]));
    out.extend_from_slice(samples);
    out.extend((0..pad).map(|i| samples[n - 2 - i]));
    out
}

/// Centered one-sided STFT of `w`.
pub fn stft(w: &Waveform, cfg: &FeatureConfig) -> Result<ComplexGrid> {
    cfg.validate()?;
    if w.len() < cfg.window_len {
        return Err(Error::InputTooShort {
            len: w.len(),
            min: cfg.window_len,
        });
    }
    let n_fft = cfg.window_len;
    let bins = cfg.num_bins();
    let frames = cfg.num_frames(w.len());
    let window = hann_window(n_fft);
    let padded = reflect_pad(&w.samples, cfg.pad());

    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex64::default(); n_fft];
    let mut grid = ComplexGrid::zeros(bins, frames);
    for t in 0..frames {
        let start = t * cfg.hop_len;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(padded[start + i] * window[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for f in 0..bins {
            grid.set(f, t, buf[f]);
        }
    }
    Ok(grid)
}

/// Weighted overlap-add inverse of [`stft`], trimmed or zero-padded to `num_samples`.
pub fn istft(
    grid: &ComplexGrid,
    cfg: &FeatureConfig,
    num_samples: usize,
    sample_rate: u32,
) -> Result<Waveform> {
    cfg.validate()?;
    if grid.rows != cfg.num_bins() {
        return Err(Error::shape("istft frequency bins", cfg.num_bins(), grid.rows));
    }
    let n_fft = cfg.window_len;
    let pad = cfg.pad();
    let frames = grid.cols;
    let window = hann_window(n_fft);
    let total = n_fft + frames.saturating_sub(1) * cfg.hop_len;
    let mut acc = vec![0.0; total];
    let mut norm = vec![0.0; total];

    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n_fft);
    let mut scratch = vec![Complex64::default(); ifft.get_inplace_scratch_len()];
    let mut buf = vec![Complex64::default(); n_fft];
    let scale = 1.0 / n_fft as f64;
    for t in 0..frames {
        for f in 0..grid.rows {
            buf[f] = grid.get(f, t);
        }
        // Hermitian completion; DC and Nyquist imaginary parts drop out via `.re`.
        for f in grid.rows..n_fft {
            buf[f] = buf[n_fft - f].conj();
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let start = t * cfg.hop_len;
        for i in 0..n_fft {
            acc[start + i] += buf[i].re * scale * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }

    let mut out = vec![0.0; num_samples];
    for (n, o) in out.iter_mut().enumerate() {
        let idx = n + pad;
        if idx >= total {
            return Err(Error::ZeroCoverage(n));
        }
        if norm[idx] < 1e-10 {
            return Err(Error::ZeroCoverage(n));
        }
        *o = acc[idx] / norm[idx];
    }
    Waveform::new(out, sample_rate)
}

/// Map every bin to `beta * |z|^alpha` with its phase kept.
pub fn compress(grid: &ComplexGrid, alpha: f64, beta: f64) -> ComplexGrid {
    map_magnitude(grid, |m| beta * m.powf(alpha))
}

/// Exact inverse of [`compress`].
pub fn decompress(grid: &ComplexGrid, alpha: f64, beta: f64) -> ComplexGrid {
    let inv_alpha = 1.0 / alpha;
    map_magnitude(grid, |m| (m / beta).powf(inv_alpha))
}

fn map_magnitude(grid: &ComplexGrid, f: impl Fn(f64) -> f64) -> ComplexGrid {
    let data = grid
        .data
        .iter()
        .map(|&z| {
            let m = z.norm();
            if m == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                z * (f(m) / m)
            }
        })
        .collect();
    ComplexGrid {
        rows: grid.rows,
        cols: grid.cols,
        data,
    }
}

/// Waveform to compressed features.
pub fn extract(w: &Waveform, cfg: &FeatureConfig) -> Result<ComplexFeatureGrid> {
    let spec = stft(w, cfg)?;
    Ok(ComplexFeatureGrid {
        values: compress(&spec, cfg.alpha, cfg.beta),
        config: *cfg,
        num_samples: w.len(),
        sample_rate: w.sample_rate,
    })
}

/// Compressed features back to a waveform.
pub fn invert(features: &ComplexFeatureGrid) -> Result<Waveform> {
    let cfg = &features.config;
    let spec = decompress(&features.values, cfg.alpha, cfg.beta);
    istft(&spec, cfg, features.num_samples, features.sample_rate)
}

/// Outcome of a compression-scale calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaEstimate {
    /// Quantile of `|STFT|^alpha` pooled over the corpus.
    pub quantile: f64,
    /// `target_bound / quantile`.
    pub beta: f64,
}

/// Pick `beta` so the given quantile of compressed, unscaled amplitudes maps
/// to `target_bound`.
pub fn estimate_beta(
    corpus: &[Waveform],
    cfg: &FeatureConfig,
    quantile: f64,
    target_bound: f64,
) -> Result<BetaEstimate> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("beta calibration corpus"));
    }
    if !(target_bound > 0.0) {
        return Err(Error::InvalidConfig("target bound must be positive".into()));
    }
    let mut pooled = Vec::new();
    for w in corpus {
        let spec = stft(w, cfg)?;
        pooled.extend(spec.data.iter().map(|z| z.norm().powf(cfg.alpha)));
    }
    let q = quantile_linear(&mut pooled, quantile)?;
    if q <= 0.0 {
        return Err(Error::InvalidConfig("calibration corpus is silent".into()));
    }
    Ok(BetaEstimate {
        quantile: q,
        beta: target_bound / q,
    })
}

/// Read a mono 16- or 24-bit PCM WAV file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedAudio(format!("{} channels (mono required)", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || !matches!(spec.bits_per_sample, 16 | 24) {
        return Err(Error::UnsupportedAudio(format!(
            "{:?} {}-bit (16- or 24-bit PCM required)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let full_scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
    let samples = reader
        .samples::<i32>()
        .map(|s| s.map(|v| v as f64 / full_scale))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

/// Read a WAV file and require a particular sample rate.
pub fn read_wav_at(path: impl AsRef<Path>, sample_rate: u32) -> Result<Waveform> {
    let w = read_wav(path)?;
    if w.sample_rate != sample_rate {
        return Err(Error::SampleRateMismatch {
            expected: sample_rate,
            found: w.sample_rate,
        });
    }
    Ok(w)
}

/// Write mono PCM; samples outside [-1, 1] are clipped.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform, bits: u16) -> Result<()> {
    if !matches!(bits, 16 | 24) {
        return Err(Error::UnsupportedAudio(format!("{bits}-bit output")));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: bits,
        sample_format: hound::SampleFormat::Int,
    };
    let max = ((1i64 << (bits - 1)) - 1) as f64;
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &w.samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * max).round() as i32)?;
    }
    writer.finalize()?;
    Ok(())
}
