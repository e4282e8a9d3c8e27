//! Noise-scale calibration: the quantile heuristic for `sigma_y`, optional
//! per-frequency profiles, and Gaussian smoothing of those profiles.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ComplexGrid;
use crate::stats::quantile_linear;

/// Lower bound applied to calibrated scales so silent bands keep a
/// non-degenerate Gaussian.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Default quantile for the 3-sigma heuristic.
pub const DEFAULT_QUANTILE: f64 = 0.997;

/// Default global noise scale.
pub const DEFAULT_SIGMA: f64 = 0.66;

/// Default smoothing bandwidth, in frequency bins.
pub const DEFAULT_BANDWIDTH: f64 = 3.0;

/// Noise scale, either shared by all entries or one value per frequency row.
#[derive(Debug, Clone, PartialEq)]
pub enum SigmaProfile {
    Scalar(f64),
    PerFrequency(Vec<f64>),
}

/// Shape of a flat state vector: `channels` stacked row-major `rows x cols` blocks.
///
/// Complex feature grids are `channels = 2` (real then imaginary). A plain
/// point in `R^d` is `StateLayout::flat(d)`, where each coordinate is its own row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLayout {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
}

impl StateLayout {
    pub fn flat(d: usize) -> Self {
        Self {
            channels: 1,
            rows: d,
            cols: 1,
        }
    }

    pub fn complex_grid(rows: usize, cols: usize) -> Self {
        Self {
            channels: 2,
            rows,
            cols,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn row_of(&self, index: usize) -> usize {
        (index / self.cols) % self.rows
    }
}

impl SigmaProfile {
    pub fn scalar(value: f64) -> Result<Self> {
        let p = SigmaProfile::Scalar(value);
        p.validate()?;
        Ok(p)
    }

    pub fn per_frequency(values: Vec<f64>) -> Result<Self> {
        let p = SigmaProfile::PerFrequency(values);
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        match self {
            SigmaProfile::Scalar(v) if ok(*v) => Ok(()),
            SigmaProfile::PerFrequency(vs) if !vs.is_empty() && vs.iter().all(|&v| ok(v)) => Ok(()),
            _ => Err(Error::InvalidConfig("sigma values must be positive and finite".into())),
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            SigmaProfile::Scalar(v) => std::slice::from_ref(v),
            SigmaProfile::PerFrequency(vs) => vs,
        }
    }

    /// Largest scale in the profile.
    pub fn max(&self) -> f64 {
        self.values().iter().copied().fold(0.0, f64::max)
    }

    /// Scale for each entry of a state with the given layout.
    pub fn expand(&self, layout: &StateLayout) -> Result<Vec<f64>> {
        match self {
            SigmaProfile::Scalar(v) => Ok(vec![*v; layout.len()]),
            SigmaProfile::PerFrequency(vs) => {
                if vs.len() != layout.rows {
                    return Err(Error::shape("per-frequency sigma rows", layout.rows, vs.len()));
                }
                Ok((0..layout.len()).map(|i| vs[layout.row_of(i)]).collect())
            }
        }
    }

    /// Scales for rows `start..start + rows` of a per-frequency profile.
    pub fn window(&self, start: usize, rows: usize) -> Result<SigmaProfile> {
        match self {
            SigmaProfile::Scalar(v) => Ok(SigmaProfile::Scalar(*v)),
            SigmaProfile::PerFrequency(vs) => {
                if start + rows > vs.len() {
                    return Err(Error::shape("sigma profile window", vs.len(), start + rows));
                }
                Ok(SigmaProfile::PerFrequency(vs[start..start + rows].to_vec()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualMode {
    Global,
    PerFrequency,
}

/// The `q`-quantile of `|clean - degraded|^2`, pooled globally or per row.
///
/// `pairs` holds `(clean, degraded)` feature grids. Returns one value in
/// global mode and `rows` values in per-frequency mode.
pub fn squared_residual_quantile(
    pairs: &[(ComplexGrid, ComplexGrid)],
    q: f64,
    mode: ResidualMode,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("calibration pairs"));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidConfig(format!("quantile {q} outside (0, 1)")));
    }
    let rows = pairs[0].0.rows;
    for (clean, degraded) in pairs {
        if clean.rows != rows || degraded.rows != rows {
            return Err(Error::shape("calibration rows", rows, clean.rows.max(degraded.rows)));
        }
        if clean.cols != degraded.cols {
            return Err(Error::shape("calibration pair frames", clean.cols, degraded.cols));
        }
    }
    match mode {
        ResidualMode::Global => {
            let mut pooled: Vec<f64> = pairs
                .iter()
                .flat_map(|(c, d)| c.data.iter().zip(&d.data).map(|(a, b)| (a - b).norm_sqr()))
                .collect();
            Ok(vec![quantile_linear(&mut pooled, q)?])
        }
        ResidualMode::PerFrequency => (0..rows)
            .map(|f| {
                let mut pooled: Vec<f64> = pairs
                    .iter()
                    .flat_map(|(c, d)| c.row(f).iter().zip(d.row(f)).map(|(a, b)| (a - b).norm_sqr()))
                    .collect();
                quantile_linear(&mut pooled, q)
            })
            .collect(),
    }
}

/// `sigma = sqrt(Q(|X* - Y|^2, q)) / 3`, floored at [`SIGMA_FLOOR`].
pub fn sigma_from_heuristic(
    pairs: &[(ComplexGrid, ComplexGrid)],
    q: f64,
    mode: ResidualMode,
) -> Result<SigmaProfile> {
    let quantiles = squared_residual_quantile(pairs, q, mode)?;
    let sigma = |v: f64| (v.sqrt() / 3.0).max(SIGMA_FLOOR);
    match mode {
        ResidualMode::Global => SigmaProfile::scalar(sigma(quantiles[0])),
        ResidualMode::PerFrequency => {
            SigmaProfile::per_frequency(quantiles.into_iter().map(sigma).collect())
        }
    }
}

/// Normalized Gaussian kernel with standard deviation `bandwidth`, truncated at four deviations.
pub fn gaussian_kernel(bandwidth: f64) -> Vec<f64> {
    let radius = (4.0 * bandwidth).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|k| (-0.5 * (k as f64 / bandwidth).powi(2)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`), periodic in `2n`.
fn reflect_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// Convolve with a normalized Gaussian using symmetric reflection at the edges.
///
/// The reflection makes the smoothing operator symmetric and row-stochastic,
/// so the profile mean is preserved.
pub fn gaussian_smooth(profile: &[f64], bandwidth: f64) -> Result<Vec<f64>> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidConfig(format!("bandwidth {bandwidth} must be positive")));
    }
    if profile.is_empty() {
        return Ok(Vec::new());
    }
    let kernel = gaussian_kernel(bandwidth);
    let radius = (kernel.len() / 2) as isize;
    let n = profile.len();
    Ok((0..n as isize)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(j, w)| w * profile[reflect_index(i + j as isize - radius, n)])
                .sum()
        })
        .collect())
}

impl SigmaProfile {
    /// Smooth a per-frequency profile; scalars are returned unchanged.
    pub fn smoothed(&self, bandwidth: f64) -> Result<SigmaProfile> {
        match self {
            SigmaProfile::Scalar(_) => Ok(self.clone()),
            SigmaProfile::PerFrequency(vs) => SigmaProfile::per_frequency(gaussian_smooth(vs, bandwidth)?),
        }
    }
}

/// How a stored profile was produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileMeta {
    pub quantile: f64,
    /// `None` when the profile was not smoothed.
    pub bandwidth: Option<f64>,
}

/// Plain-text profile: one header line, then one value per line.
pub fn format_profile(profile: &SigmaProfile, meta: &ProfileMeta) -> String {
    let kind = match profile {
        SigmaProfile::Scalar(_) => "scalar",
        SigmaProfile::PerFrequency(_) => "per-frequency",
    };
    let bandwidth = meta.bandwidth.map_or("none".to_string(), |b| b.to_string());
    let mut out = format!(
        "# sigma-profile kind={kind} F={} q={} bandwidth={bandwidth}\n",
        profile.values().len(),
        meta.quantile
    );
    for v in profile.values() {
        let _ = writeln!(out, "{v}");
    }
    out
}

pub fn parse_profile(text: &str) -> Result<(SigmaProfile, ProfileMeta)> {
    let malformed = |detail: String| Error::Malformed {
        what: "sigma profile",
        detail,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| malformed("empty file".into()))?;
    let header = header
        .strip_prefix("# sigma-profile")
        .ok_or_else(|| malformed("missing header".into()))?;
    let (mut kind, mut count, mut quantile, mut bandwidth) = (None, None, None, None);
    for field in header.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| malformed(format!("bad header field {field:?}")))?;
        match key {
            "kind" => kind = Some(value.to_string()),
            "F" => count = value.parse::<usize>().ok(),
            "q" => quantile = value.parse::<f64>().ok(),
            "bandwidth" => bandwidth = Some(if value == "none" { None } else { value.parse::<f64>().ok() }),
            _ => {}
        }
    }
    let count = count.ok_or_else(|| malformed("header lacks F".into()))?;
    let quantile = quantile.ok_or_else(|| malformed("header lacks q".into()))?;
    let values = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse::<f64>().map_err(|e| malformed(format!("{l:?}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != count {
        return Err(malformed(format!("header says F={count} but found {} values", values.len())));
    }
    let profile = match kind.as_deref() {
        Some("scalar") if count == 1 => SigmaProfile::scalar(values[0])?,
        Some("per-frequency") => SigmaProfile::per_frequency(values)?,
        other => return Err(malformed(format!("unknown kind {other:?}"))),
    };
    Ok((
        profile,
        ProfileMeta {
            quantile,
            bandwidth: bandwidth.flatten(),
        },
    ))
}

pub fn write_profile(path: impl AsRef<Path>, profile: &SigmaProfile, meta: &ProfileMeta) -> Result<()> {
    std::fs::write(path, format_profile(profile, meta))?;
    Ok(())
}

pub fn read_profile(path: impl AsRef<Path>) -> Result<(SigmaProfile, ProfileMeta)> {
    parse_profile(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use proptest::prelude::*;

    fn grid(rows: usize, cols: usize, f: impl Fn(usize, usize) -> Complex64) -> ComplexGrid {
        let mut g = ComplexGrid::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                g.set(r, c, f(r, c));
            }
        }
        g
    }

    #[test]
    fn constant_residual_gives_exact_third() {
        let r = 0.3;
        let pairs = vec![(grid(4, 5, |_, _| Complex64::new(r, 0.0)), ComplexGrid::zeros(4, 5))];
        let q = squared_residual_quantile(&pairs, 0.997, ResidualMode::Global).unwrap();
        assert_eq!(q[0], r * r);
        let s = sigma_from_heuristic(&pairs, 0.997, ResidualMode::Global).unwrap();
        assert_eq!(s, SigmaProfile::Scalar(r / 3.0));
        assert!((s.values()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn quantile_median_of_four() {
        let vals = [1.0f64, 2.0, 3.0, 4.0];
        let pairs = vec![(grid(1, 4, |_, c| Complex64::new(vals[c], 0.0)), ComplexGrid::zeros(1, 4))];
        let q = squared_residual_quantile(&pairs, 0.5, ResidualMode::Global).unwrap();
        assert_eq!(q[0], 6.5);
    }

    #[test]
    fn per_frequency_floor_and_peak_row() {
        let pairs = vec![(
            grid(8, 10, |r, _| if r == 5 { Complex64::new(0.9, 0.0) } else { Complex64::new(0.0, 0.0) }),
            ComplexGrid::zeros(8, 10),
        )];
        let s = sigma_from_heuristic(&pairs, 0.997, ResidualMode::PerFrequency).unwrap();
        let v = s.values();
        assert_eq!(v.len(), 8);
        for (i, &x) in v.iter().enumerate() {
            if i == 5 {
                assert!((x - 0.3).abs() < 1e-15);
            } else {
                assert_eq!(x, SIGMA_FLOOR);
            }
        }
    }

    #[test]
    fn errors_on_bad_input() {
        assert!(squared_residual_quantile(&[], 0.5, ResidualMode::Global).is_err());
        let mismatched = vec![(ComplexGrid::zeros(2, 3), ComplexGrid::zeros(2, 4))];
        assert!(squared_residual_quantile(&mismatched, 0.5, ResidualMode::Global).is_err());
        let ok = vec![(ComplexGrid::zeros(2, 3), ComplexGrid::zeros(2, 3))];
        assert!(squared_residual_quantile(&ok, 1.0, ResidualMode::Global).is_err());
    }

    #[test]
    fn expand_per_frequency_over_complex_layout() {
        let p = SigmaProfile::per_frequency(vec![1.0, 2.0]).unwrap();
        let e = p.expand(&StateLayout::complex_grid(2, 3)).unwrap();
        assert_eq!(e, vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert!(p.expand(&StateLayout::complex_grid(3, 3)).is_err());
    }

    #[test]
    fn smoothing_constant_is_identity() {
        let out = gaussian_smooth(&[0.7; 20], 3.0).unwrap();
        for v in out {
            assert!((v - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn smoothing_impulse_gives_kernel() {
        let mut p = vec![0.0; 41];
        p[20] = 1.0;
        let out = gaussian_smooth(&p, 3.0).unwrap();
        let norm: f64 = (-12..=12).map(|k: i32| (-0.5 * (k as f64 / 3.0).powi(2)).exp()).sum();
        for k in -12i32..=12 {
            let expect = (-0.5 * (k as f64 / 3.0).powi(2)).exp() / norm;
            assert!((out[(20 + k) as usize] - expect).abs() < 1e-15);
        }
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn smoothing_rejects_bad_bandwidth() {
        assert!(gaussian_smooth(&[1.0], 0.0).is_err());
    }

    #[test]
    fn profile_file_round_trip() {
        let p = SigmaProfile::per_frequency(vec![0.1, 0.25, 1.0 / 3.0]).unwrap();
        let meta = ProfileMeta {
            quantile: 0.997,
            bandwidth: Some(3.0),
        };
        let text = format_profile(&p, &meta);
        assert!(text.starts_with("# sigma-profile kind=per-frequency F=3 q=0.997 bandwidth=3\n"));
        let (back, back_meta) = parse_profile(&text).unwrap();
        assert_eq!(back, p);
        assert_eq!(back_meta, meta);
        assert!(parse_profile("# sigma-profile kind=scalar F=2 q=0.5 bandwidth=none\n1\n").is_err());
    }

    proptest! {
        #[test]
        fn smoothing_preserves_mean_and_reduces_tv(
            profile in prop::collection::vec(0.0f64..5.0, 1..120),
            bandwidth in 0.3f64..6.0,
        ) {
            let out = gaussian_smooth(&profile, bandwidth).unwrap();
            let mean_in = profile.iter().sum::<f64>() / profile.len() as f64;
            let mean_out = out.iter().sum::<f64>() / out.len() as f64;
            prop_assert!((mean_in - mean_out).abs() < 1e-9);
            let tv = |v: &[f64]| v.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>();
            prop_assert!(tv(&out) <= tv(&profile) + 1e-9);
        }

        #[test]
        fn heuristic_is_scale_equivariant(
            mags in prop::collection::vec(0.01f64..3.0, 4..60),
            scale in 0.1f64..10.0,
        ) {
            let n = mags.len();
            let make = |c: f64| vec![(
                ComplexGrid::from_vec(1, n, mags.iter().map(|&m| Complex64::new(c * m, 0.0)).collect()).unwrap(),
                ComplexGrid::zeros(1, n),
            )];
            let base = sigma_from_heuristic(&make(1.0), 0.997, ResidualMode::Global).unwrap().values()[0];
            let scaled = sigma_from_heuristic(&make(scale), 0.997, ResidualMode::Global).unwrap().values()[0];
            prop_assert!((scaled - scale * base).abs() <= 1e-12 * scaled.max(1.0));
        }
    }
}
