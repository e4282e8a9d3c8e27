//! Objective metrics (SI-SDR, fwSSNR, logSpecMSE), a direct-kernel CQT, and
//! the auxiliary codec losses built on it.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::{hann_window, Waveform};
use crate::stats::mean_ci95;

/// SI-SDR reported for a vanishing residual; values are clamped to `[-CAP, CAP]`.
pub const SI_SDR_CAP: f64 = 100.0;

/// Magnitude floor inside `20 log10` of logSpecMSE.
pub const LOG_SPEC_FLOOR: f64 = 1e-8;

/// Amplitude floor inside the log term of the CQT loss.
pub const CQT_LOG_FLOOR: f64 = 1e-5;

/// Bins-per-octave settings of the multiscale CQT loss.
pub const CQT_SCALES: [usize; 5] = [16, 32, 48, 64, 80];

/// Default weight of the L1 waveform loss.
pub const L1_WAVEFORM_WEIGHT: f64 = 50.0;

pub const FWSSNR_BANDS: usize = 25;
pub const FWSSNR_GAMMA: f64 = 0.2;
pub const FWSSNR_MIN: f64 = -10.0;
pub const FWSSNR_MAX: f64 = 35.0;

fn check_pair(est: &Waveform, reference: &Waveform) -> Result<()> {
    if est.len() != reference.len() {
        return Err(Error::shape("estimate vs reference length", reference.len(), est.len()));
    }
    if est.sample_rate != reference.sample_rate {
        return Err(Error::SampleRateMismatch {
            expected: reference.sample_rate,
            found: est.sample_rate,
        });
    }
    if est.is_empty() {
        return Err(Error::EmptyInput("metric input"));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant SDR in dB.
pub fn si_sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    check_pair(est, reference)?;
    let s = &reference.samples;
    let energy = dot(s, s);
    if energy == 0.0 {
        return Err(Error::SilentReference);
    }
    let alpha = dot(&est.samples, s) / energy;
    let target = alpha * alpha * energy;
    let resid: f64 = est.samples.iter().zip(s).map(|(e, r)| (alpha * r - e).powi(2)).sum();
    if resid <= target * 1e-10 || resid == 0.0 {
        return Ok(SI_SDR_CAP);
    }
    Ok((10.0 * (target / resid).log10()).clamp(-SI_SDR_CAP, SI_SDR_CAP))
}

/// Framing shared by logSpecMSE and fwSSNR: 32 ms Hann frames, 75% overlap, no padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnalysisFrames {
    pub frame_len: usize,
    pub hop: usize,
}

impl AnalysisFrames {
    pub fn for_rate(sample_rate: u32) -> Self {
        let frame_len = ((0.032 * sample_rate as f64).round() as usize).max(4);
        Self {
            frame_len,
            hop: frame_len / 4,
        }
    }

    pub fn count(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            1 + (len - self.frame_len) / self.hop
        }
    }

    /// One-sided spectra of every frame.
    pub fn spectra(&self, samples: &[f64]) -> Vec<Vec<Complex64>> {
        let win = hann_window(self.frame_len);
        let fft = FftPlanner::new().plan_fft_forward(self.frame_len);
        let bins = self.frame_len / 2 + 1;
        (0..self.count(samples.len()))
            .map(|m| {
                let start = m * self.hop;
                let mut buf: Vec<Complex64> = samples[start..start + self.frame_len]
                    .iter()
                    .zip(&win)
                    .map(|(x, w)| Complex64::new(x * w, 0.0))
                    .collect();
                fft.process(&mut buf);
                buf.truncate(bins);
                buf
            })
            .collect()
    }
}

fn frames_for_pair(est: &Waveform, reference: &Waveform) -> Result<AnalysisFrames> {
    check_pair(est, reference)?;
    let frames = AnalysisFrames::for_rate(reference.sample_rate);
    if reference.len() < frames.frame_len {
        return Err(Error::InputTooShort {
            len: reference.len(),
            min: frames.frame_len,
        });
    }
    Ok(frames)
}

/// Mean squared difference of dB log-magnitude spectrograms, in dB².
pub fn log_spec_mse(est: &Waveform, reference: &Waveform) -> Result<f64> {
    let frames = frames_for_pair(est, reference)?;
    let a = frames.spectra(&est.samples);
    let b = frames.spectra(&reference.samples);
    let db = |z: &Complex64| 20.0 * (z.norm() + LOG_SPEC_FLOOR).log10();
    let (mut sum, mut n) = (0.0, 0usize);
    for (fa, fb) in a.iter().zip(&b) {
        for (za, zb) in fa.iter().zip(fb) {
            sum += (db(za) - db(zb)).powi(2);
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Gaussian band responses over the one-sided bins: centres evenly spaced on
/// the mel scale between 0 Hz and Nyquist, standard deviation a quarter of the
/// span between neighbouring centres.
pub fn fwssnr_bands(frame_len: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let bins = frame_len / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..=FWSSNR_BANDS + 1)
        .map(|i| mel_to_hz(top * i as f64 / (FWSSNR_BANDS + 1) as f64))
        .collect();
    (1..=FWSSNR_BANDS)
        .map(|j| {
            let centre = edges[j];
            let sd = (edges[j + 1] - edges[j - 1]) / 4.0;
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / frame_len as f64;
                    (-0.5 * ((f - centre) / sd).powi(2)).exp()
                })
                .collect()
        })
        .collect()
}

/// Per-frame band SNRs (clipped), weighted by reference band magnitude^0.2.
fn fwssnr_frames(est: &Waveform, reference: &Waveform) -> Result<Vec<f64>> {
    let frames = frames_for_pair(est, reference)?;
    let bands = fwssnr_bands(frames.frame_len, reference.sample_rate);
    let se = frames.spectra(&est.samples);
    let sr = frames.spectra(&reference.samples);
    let mut out = Vec::with_capacity(se.len());
    for (fe, fr) in se.iter().zip(&sr) {
        let (mut num, mut den) = (0.0, 0.0);
        let mut err_total = 0.0;
        for g in &bands {
            let (mut sig, mut err, mut mag) = (0.0, 0.0, 0.0);
            for ((w, e), r) in g.iter().zip(fe).zip(fr) {
                sig += w * r.norm_sqr();
                err += w * (r - e).norm_sqr();
                mag += w * r.norm();
            }
            err_total += err;
            let snr = if err == 0.0 {
                FWSSNR_MAX
            } else if sig == 0.0 {
                FWSSNR_MIN
            } else {
                (10.0 * (sig / err).log10()).clamp(FWSSNR_MIN, FWSSNR_MAX)
            };
            let weight = mag.powf(FWSSNR_GAMMA);
            num += weight * snr;
            den += weight;
        }
        let frame = if den > 0.0 {
            num / den
        } else if err_total == 0.0 {
            FWSSNR_MAX
        } else {
            FWSSNR_MIN
        };
        out.push(frame.clamp(FWSSNR_MIN, FWSSNR_MAX));
    }
    Ok(out)
}

/// Frequency-weighted segmental SNR in dB, within `[-10, 35]`.
pub fn fwssnr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    let frames = fwssnr_frames(est, reference)?;
    Ok(frames.iter().sum::<f64>() / frames.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CqtConfig {
    pub octaves: usize,
    pub hop: usize,
    pub f_min: f64,
    pub bins_per_octave: usize,
    pub sample_rate: u32,
}

impl CqtConfig {
    pub fn new(bins_per_octave: usize, sample_rate: u32) -> Self {
        Self {
            octaves: 9,
            hop: 256,
            f_min: 27.5,
            bins_per_octave,
            sample_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.octaves == 0 || self.hop == 0 || self.bins_per_octave == 0 || !(self.f_min > 0.0) || self.sample_rate == 0 {
            return Err(Error::InvalidConfig(format!("invalid CQT config {self:?}")));
        }
        if self.f_min >= self.sample_rate as f64 / 2.0 {
            return Err(Error::InvalidConfig("CQT minimum frequency at or above Nyquist".into()));
        }
        Ok(())
    }

    /// `1 / (2^(1/B) - 1)`.
    pub fn q(&self) -> f64 {
        1.0 / (2f64.powf(1.0 / self.bins_per_octave as f64) - 1.0)
    }

    /// All `octaves * B` centre frequencies `f_min 2^(k/B)`, including any above Nyquist.
    pub fn all_frequencies(&self) -> Vec<f64> {
        let b = self.bins_per_octave as f64;
        (0..self.octaves * self.bins_per_octave)
            .map(|k| self.f_min * 2f64.powf(k as f64 / b))
            .collect()
    }

    pub fn window_len(&self, freq: f64) -> usize {
        (self.q() * self.sample_rate as f64 / freq).ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cqt {
    /// `bins x frames` magnitudes.
    pub magnitudes: Vec<Vec<f64>>,
    pub frequencies: Vec<f64>,
    pub dropped_bins: usize,
    pub warnings: Vec<String>,
}

/// Direct-kernel CQT magnitudes. Frame `m` is centred on sample `m * hop`;
/// the signal is zero outside its support. Bins above Nyquist are dropped.
pub fn cqt_magnitude(w: &Waveform, cfg: &CqtConfig) -> Result<Cqt> {
    cfg.validate()?;
    if cfg.sample_rate != w.sample_rate {
        return Err(Error::SampleRateMismatch {
            expected: cfg.sample_rate,
            found: w.sample_rate,
        });
    }
    let nyquist = cfg.sample_rate as f64 / 2.0;
    let all = cfg.all_frequencies();
    let frequencies: Vec<f64> = all.iter().copied().filter(|&f| f <= nyquist).collect();
    let dropped_bins = all.len() - frequencies.len();
    let mut warnings = Vec::new();
    if dropped_bins > 0 {
        warnings.push(format!(
            "{dropped_bins} CQT bins above Nyquist ({nyquist} Hz) dropped for {} bins per octave",
            cfg.bins_per_octave
        ));
    }
    let n = w.len() as isize;
    let frames = 1 + w.len() / cfg.hop;
    let sr = cfg.sample_rate as f64;
    let mut magnitudes = Vec::with_capacity(frequencies.len());
    for &f in &frequencies {
        let len = cfg.window_len(f);
        let win = hann_window(len);
        let norm: f64 = win.iter().sum();
        let half = (len / 2) as isize;
        let kernel: Vec<Complex64> = win
            .iter()
            .enumerate()
            .map(|(j, &v)| Complex64::from_polar(v / norm, -2.0 * PI * f * (j as isize - half) as f64 / sr))
            .collect();
        let mut row = Vec::with_capacity(frames);
        for m in 0..frames {
            let start = (m * cfg.hop) as isize - half;
            let lo = (-start).max(0) as usize;
            let hi = ((n - start).min(len as isize)).max(0) as usize;
            let mut acc = Complex64::new(0.0, 0.0);
            for j in lo..hi {
                acc += kernel[j] * w.samples[(start + j as isize) as usize];
            }
            row.push(acc.norm());
        }
        magnitudes.push(row);
    }
    Ok(Cqt {
        magnitudes,
        frequencies,
        dropped_bins,
        warnings,
    })
}

/// Loss terms for one CQT resolution: mean |A - B| and mean |ln(A + eps) - ln(B + eps)|.
pub fn cqt_loss_terms(a: &Cqt, b: &Cqt) -> (f64, f64) {
    let (mut lin, mut log, mut n) = (0.0, 0.0, 0usize);
    for (ra, rb) in a.magnitudes.iter().zip(&b.magnitudes) {
        for (x, y) in ra.iter().zip(rb) {
            lin += (x - y).abs();
            log += ((x + CQT_LOG_FLOOR).ln() - (y + CQT_LOG_FLOOR).ln()).abs();
            n += 1;
        }
    }
    (lin / n as f64, log / n as f64)
}

/// Sum over the five resolutions of the amplitude and log-amplitude L1 terms.
pub fn multiscale_cqt_loss(est: &Waveform, reference: &Waveform) -> Result<f64> {
    check_pair(est, reference)?;
    let mut total = 0.0;
    for b in CQT_SCALES {
        let cfg = CqtConfig::new(b, reference.sample_rate);
        let (lin, log) = cqt_loss_terms(&cqt_magnitude(est, &cfg)?, &cqt_magnitude(reference, &cfg)?);
        total += lin + log;
    }
    Ok(total)
}

/// `weight * mean |est - reference|`.
pub fn l1_waveform_loss(est: &Waveform, reference: &Waveform, weight: f64) -> Result<f64> {
    check_pair(est, reference)?;
    let sum: f64 = est.samples.iter().zip(&reference.samples).map(|(a, b)| (a - b).abs()).sum();
    Ok(weight * sum / est.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileMetrics {
    pub name: String,
    pub si_sdr: f64,
    pub fwssnr: f64,
    pub log_spec_mse: f64,
}

impl FileMetrics {
    pub fn compute(name: impl Into<String>, est: &Waveform, reference: &Waveform) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            si_sdr: si_sdr(est, reference)?,
            fwssnr: fwssnr(est, reference)?,
            log_spec_mse: log_spec_mse(est, reference)?,
        })
    }
}

/// Mean and 95% half-width (normal approximation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub ci95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub files: Vec<FileMetrics>,
    pub si_sdr: Aggregate,
    pub fwssnr: Aggregate,
    pub log_spec_mse: Aggregate,
}

impl MetricsReport {
    pub fn new(files: Vec<FileMetrics>) -> Result<Self> {
        if files.is_empty() {
            return Err(Error::EmptyInput("metrics report"));
        }
        let agg = |f: fn(&FileMetrics) -> f64| {
            let v: Vec<f64> = files.iter().map(f).collect();
            let (mean, ci95) = mean_ci95(&v);
            Aggregate { mean, ci95 }
        };
        Ok(Self {
            si_sdr: agg(|m| m.si_sdr),
            fwssnr: agg(|m| m.fwssnr),
            log_spec_mse: agg(|m| m.log_spec_mse),
            files,
        })
    }

    /// One row per file, then an `aggregate` row carrying means and 95% half-widths.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "file",
            "si_sdr",
            "si_sdr_ci95",
            "fwssnr",
            "fwssnr_ci95",
            "log_spec_mse",
            "log_spec_mse_ci95",
        ])?;
        for f in &self.files {
            w.write_record([
                f.name.clone(),
                f.si_sdr.to_string(),
                String::new(),
                f.fwssnr.to_string(),
                String::new(),
                f.log_spec_mse.to_string(),
                String::new(),
            ])?;
        }
        w.write_record([
            "aggregate".to_string(),
            self.si_sdr.mean.to_string(),
            self.si_sdr.ci95.to_string(),
            self.fwssnr.mean.to_string(),
            self.fwssnr.ci95.to_string(),
            self.log_spec_mse.mean.to_string(),
            self.log_spec_mse.ci95.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}
