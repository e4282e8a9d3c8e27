//! Paired-file discovery: `<name>.clean.wav` next to `<name>.degraded.wav`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use jointflow::features::{extract, read_wav_at, ComplexGrid, FeatureConfig, Waveform};

pub const CLEAN_SUFFIX: &str = ".clean.wav";
pub const DEGRADED_SUFFIX: &str = ".degraded.wav";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairPaths {
    pub name: String,
    pub clean: PathBuf,
    pub degraded: PathBuf,
}

/// All complete pairs in `dir`, sorted by name.
pub fn find_pairs(dir: &Path) -> Result<Vec<PairPaths>> {
    if !dir.is_dir() {
        bail!("pairs directory {} does not exist", dir.display());
    }
    let mut pairs = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let Some(file) = path.file_name().and_then(|f| f.to_str()) else { continue };
        let Some(name) = file.strip_suffix(CLEAN_SUFFIX) else { continue };
        let degraded = dir.join(format!("{name}{DEGRADED_SUFFIX}"));
        if !degraded.is_file() {
            bail!("{} has no matching {}", path.display(), degraded.display());
        }
        pairs.push(PairPaths {
            name: name.to_string(),
            clean: path.clone(),
            degraded,
        });
    }
    if pairs.is_empty() {
        bail!("no `<name>{CLEAN_SUFFIX}` / `<name>{DEGRADED_SUFFIX}` pairs found in {}", dir.display());
    }
    pairs.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(pairs)
}

pub struct LoadedPair {
    pub clean: Waveform,
    pub degraded: Waveform,
}

pub fn load_pairs(dir: &Path, sample_rate: u32) -> Result<Vec<LoadedPair>> {
    find_pairs(dir)?
        .into_iter()
        .map(|p| {
            let clean = read_wav_at(&p.clean, sample_rate).with_context(|| format!("reading {}", p.clean.display()))?;
            let degraded =
                read_wav_at(&p.degraded, sample_rate).with_context(|| format!("reading {}", p.degraded.display()))?;
            if clean.len() != degraded.len() {
                bail!("pair {} has {} clean vs {} degraded samples", p.name, clean.len(), degraded.len());
            }
            Ok(LoadedPair {
                clean,
                degraded,
            })
        })
        .collect()
}

/// `(clean, degraded)` feature grids; every pair must give the same number of frequency rows.
pub fn feature_pairs(pairs: &[LoadedPair], cfg: &FeatureConfig) -> Result<Vec<(ComplexGrid, ComplexGrid)>> {
    pairs
        .iter()
        .map(|p| Ok((extract(&p.clean, cfg)?.values, extract(&p.degraded, cfg)?.values)))
        .collect()
}
