use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use jointflow::calibration::{read_profile, sigma_from_heuristic, write_profile, ProfileMeta, ResidualMode, SigmaProfile};
use jointflow::features::{extract, invert, read_wav, read_wav_at, write_wav, ComplexFeatureGrid, Waveform};
use jointflow::flowmath::{PathKind, PathSpec};
use jointflow::metrics::{FileMetrics, MetricsReport};
use jointflow::neural::{enhance_grid, train, FlowModel, TilePairs, TrainConfig};
use jointflow::odesolve::SolverConfig;
use jointflow::toylab::{endpoint_dispersion, field_grid, save_field_csv, DegradeSpec, FieldSource, GridBounds, SpectralTask, ToyProblem};

use crate::config::RunConfig;
use crate::manifest::{manifest_path, RunManifest};
use crate::pairs::{feature_pairs, load_pairs, CLEAN_SUFFIX, DEGRADED_SUFFIX};
use crate::{
    CalibrateArgs, Cli, Command, DispersionArgs, EnhanceArgs, FieldvizArgs, MetricsArgs, PathArg, ProblemArg,
    SynthArgs, TrainArgs,
};

/// Bad flags or flag combinations detected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 1 for usage errors, 3 for numerical failures, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<jointflow::Error>())
        .any(jointflow::Error::is_numerical);
    if numerical {
        3
    } else {
        2
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Roundtrip { input } => roundtrip(&input, &cfg),
        Command::Calibrate(a) => calibrate(&a, &cfg),
        Command::Train(a) => train_cmd(&a, &cfg),
        Command::Enhance(a) => enhance(&a, &cfg),
        Command::Fieldviz(a) => fieldviz(&a, &cfg),
        Command::Dispersion(a) => dispersion(&a, &cfg),
        Command::Metrics(a) => metrics(&a, &cfg),
        Command::Synth(a) => synth(&a, &cfg),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            bail!("output directory {} does not exist", p.display())
        }
        _ => Ok(()),
    }
}

fn relative_error(reference: &[f64], estimate: &[f64]) -> f64 {
    let num: f64 = reference.iter().zip(estimate).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = reference.iter().map(|a| a * a).sum();
    if num == 0.0 {
        0.0
    } else {
        (num / den).sqrt()
    }
}

fn roundtrip(input: &Path, cfg: &RunConfig) -> Result<()> {
    let w = read_wav_at(input, cfg.features.sample_rate).with_context(|| format!("reading {}", input.display()))?;
    let features = extract(&w, &cfg.features.feature_config())?;
    let back = invert(&features)?;
    println!("samples: {}", w.len());
    println!("grid: {} bins x {} frames", features.values.rows, features.values.cols);
    println!("relative error: {:e}", relative_error(&w.samples, &back.samples));
    println!("fraction within [-1, 1]: {:.6}", features.fraction_within(1.0));
    Ok(())
}

fn calibrate(a: &CalibrateArgs, cfg: &RunConfig) -> Result<()> {
    if !(a.quantile > 0.0 && a.quantile < 1.0) {
        return Err(usage(format!("--quantile {} outside (0, 1)", a.quantile)));
    }
    if !(a.bandwidth >= 0.0 && a.bandwidth.is_finite()) {
        return Err(usage(format!("--bandwidth {} must be non-negative", a.bandwidth)));
    }
    ensure_parent(&a.out)?;
    let pairs = load_pairs(&a.pairs, cfg.features.sample_rate)?;
    let grids = feature_pairs(&pairs, &cfg.features.feature_config())?;
    let mode = if a.per_frequency { ResidualMode::PerFrequency } else { ResidualMode::Global };
    let mut profile = sigma_from_heuristic(&grids, a.quantile, mode)?;
    let mut bandwidth = None;
    if a.per_frequency && a.bandwidth > 0.0 {
        profile = profile.smoothed(a.bandwidth)?;
        bandwidth = Some(a.bandwidth);
    }
    let meta = ProfileMeta {
        quantile: a.quantile,
        bandwidth,
    };
    println!("{} pairs, sigma max {:.6}", pairs.len(), profile.max());
    RunManifest::new("calibrate", None, cfg)
        .input(&a.pairs)
        .output(&a.out)
        .arg("quantile", a.quantile)
        .arg("per_frequency", a.per_frequency)
        .arg("bandwidth", a.bandwidth)
        .around(&manifest_path(&a.out), || Ok(write_profile(&a.out, &profile, &meta)?))
}

/// Per-row divisors matching a profile.
fn row_scale(profile: &SigmaProfile, rows: usize) -> Result<Vec<f64>> {
    match profile {
        SigmaProfile::Scalar(v) => Ok(vec![*v; rows]),
        SigmaProfile::PerFrequency(v) if v.len() == rows => Ok(v.clone()),
        SigmaProfile::PerFrequency(v) => bail!("profile has {} rows but features have {rows}", v.len()),
    }
}

fn train_cmd(a: &TrainArgs, cfg: &RunConfig) -> Result<()> {
    ensure_parent(&a.out)?;
    let profile = match &a.profile {
        Some(p) => read_profile(p).with_context(|| format!("reading profile {}", p.display()))?.0,
        None => SigmaProfile::scalar(cfg.sigma.value)?,
    };
    let pairs = load_pairs(&a.pairs, cfg.features.sample_rate)?;
    let grids = feature_pairs(&pairs, &cfg.features.feature_config())?;
    let rows = grids[0].0.rows;
    let scale = row_scale(&profile, rows)?;
    let source = TilePairs::new(cfg.model.tile(), grids)?.with_row_scale(scale.clone())?;
    let m = &cfg.model;
    let mut model = FlowModel::new_tiled(m.tile(), &m.hidden, m.activation, m.ema_decay, a.seed)?
        .with_scaling(source.whitened_scaling()?)?
        .with_row_scale(scale)?;
    let t = &cfg.train;
    let train_cfg = TrainConfig {
        learning_rate: t.learning_rate,
        iterations: t.iterations,
        batch_size: t.batch_size,
        seed: a.seed.wrapping_add(1),
        path: PathSpec::joint(profile),
        holdout_size: t.holdout_size,
    };
    let report = train(&mut model, &source, &train_cfg)?;
    println!(
        "holdout loss {:.6} -> {:.6} (EMA {:.6})",
        report.initial_holdout_loss, report.final_holdout_loss, report.final_holdout_loss_ema
    );
    let mut manifest = RunManifest::new("train", Some(a.seed), cfg).input(&a.pairs).output(&a.out);
    if let Some(p) = &a.profile {
        manifest = manifest.input(p);
    }
    manifest
        .arg("initial_holdout_loss", report.initial_holdout_loss)
        .arg("final_holdout_loss_ema", report.final_holdout_loss_ema)
        .around(&manifest_path(&a.out), || Ok(model.save(&a.out)?))
}

fn enhance(a: &EnhanceArgs, cfg: &RunConfig) -> Result<()> {
    let solver = cfg.solver(a.solver.map(Into::into), a.nfe).map_err(|e| usage(e.to_string()))?;
    ensure_parent(&a.out)?;
    let model = FlowModel::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    if model.tile.is_none() {
        bail!("{} is not a tiled spectral model", a.checkpoint.display());
    }
    let (profile, _) = read_profile(&a.profile).with_context(|| format!("reading profile {}", a.profile.display()))?;
    let input = read_wav_at(&a.input, cfg.features.sample_rate).with_context(|| format!("reading {}", a.input.display()))?;
    let features = extract(&input, &cfg.features.feature_config())?;
    row_scale(&profile, features.values.rows)?;
    let (grid, run) = enhance_grid(&model, &features.values, &profile, &solver, a.seed)?;
    let out = invert(&ComplexFeatureGrid {
        values: grid,
        ..features
    })?;
    println!("{} with {} steps, {} field evaluations", solver.method, solver.steps, run.nfe);
    RunManifest::new("enhance", Some(a.seed), cfg)
        .input(&a.input)
        .input(&a.checkpoint)
        .input(&a.profile)
        .output(&a.out)
        .arg("solver", solver.method)
        .arg("nfe", run.nfe)
        .around(&manifest_path(&a.out), || Ok(write_wav(&a.out, &out, 24)?))
}

fn toy_problem(problem: ProblemArg, sigma: f64) -> Result<ToyProblem> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(usage(format!("--sigma {sigma} must be positive")));
    }
    Ok(match problem {
        ProblemArg::Single => ToyProblem::single_target(sigma)?,
        ProblemArg::Two => ToyProblem::two_targets(sigma)?,
        ProblemArg::Three => ToyProblem::three_targets(sigma)?,
    })
}

fn path_kind(p: PathArg) -> PathKind {
    match p {
        PathArg::Joint => PathKind::JointFm,
        PathArg::Constant => PathKind::ConstantSigma,
    }
}

fn fieldviz(a: &FieldvizArgs, cfg: &RunConfig) -> Result<()> {
    let problem = toy_problem(a.problem, a.sigma)?;
    if !(0.0..1.0).contains(&a.t) {
        return Err(usage(format!("-t {} outside [0, 1)", a.t)));
    }
    if a.resolution < 2 {
        return Err(usage("--resolution must be at least 2"));
    }
    if !(a.extent > 0.0) {
        return Err(usage("--extent must be positive"));
    }
    ensure_parent(&a.out)?;
    let model = match &a.checkpoint {
        Some(p) => {
            let m = FlowModel::load(p).with_context(|| format!("loading {}", p.display()))?;
            if m.tile.is_some() || m.state_dim() != 2 {
                bail!("{} is not a 2-D point model", p.display());
            }
            Some(m)
        }
        None => None,
    };
    let source = match &model {
        Some(m) => FieldSource::Model(m),
        None => FieldSource::Oracle(&problem, path_kind(a.path)),
    };
    let rows = field_grid(&source, &problem, a.t, GridBounds::square(a.extent), a.resolution)?;
    let mut manifest = RunManifest::new("fieldviz", None, cfg)
        .output(&a.out)
        .arg("problem", format!("{:?}", a.problem).to_lowercase())
        .arg("sigma", a.sigma)
        .arg("t", a.t)
        .arg("path", format!("{:?}", a.path).to_lowercase())
        .arg("resolution", a.resolution)
        .arg("extent", a.extent);
    if let Some(p) = &a.checkpoint {
        manifest = manifest.input(p);
    }
    manifest.around(&manifest_path(&a.out), || Ok(save_field_csv(&a.out, &rows)?))
}

fn dispersion(a: &DispersionArgs, cfg: &RunConfig) -> Result<()> {
    let problem = toy_problem(a.problem, a.sigma)?;
    if a.samples == 0 || a.steps.is_empty() || a.steps.contains(&0) {
        return Err(usage("--samples and every --steps entry must be positive"));
    }
    ensure_parent(&a.out)?;
    let mut rows = Vec::new();
    for kind in [PathKind::JointFm, PathKind::ConstantSigma] {
        for &steps in &a.steps {
            let solver = SolverConfig::new(a.solver.into(), steps);
            let d = endpoint_dispersion(&FieldSource::Oracle(&problem, kind), &problem, a.samples, &solver, a.seed)?;
            let name = if kind == PathKind::JointFm { "joint" } else { "constant" };
            rows.push([
                name.to_string(),
                steps.to_string(),
                solver.nfe().to_string(),
                d.mean_distance.to_string(),
                d.std.to_string(),
            ]);
        }
    }
    RunManifest::new("dispersion", Some(a.seed), cfg)
        .output(&a.out)
        .arg("problem", format!("{:?}", a.problem).to_lowercase())
        .arg("sigma", a.sigma)
        .arg("samples", a.samples)
        .arg("solver", Into::<jointflow::odesolve::Method>::into(a.solver))
        .around(&manifest_path(&a.out), || {
            let mut w = csv::Writer::from_path(&a.out)?;
            w.write_record(["path", "steps", "nfe", "mean_distance", "std"])?;
            for r in &rows {
                w.write_record(r)?;
            }
            w.flush()?;
            Ok(())
        })
}

/// Name before the first dot of a file name.
fn stem_key(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    Some(name.split('.').next()?.to_string())
}

fn wav_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "wav") {
            if let Some(key) = stem_key(&path) {
                if let Some(prev) = out.insert(key.clone(), path.clone()) {
                    bail!("{} and {} share the name {key:?}", prev.display(), path.display());
                }
            }
        }
    }
    Ok(out)
}

fn metrics(a: &MetricsArgs, cfg: &RunConfig) -> Result<()> {
    ensure_parent(&a.out)?;
    let jobs: Vec<(String, PathBuf, PathBuf)> = match (a.estimate.is_dir(), a.reference.is_dir()) {
        (false, false) => {
            let name = stem_key(&a.estimate).unwrap_or_else(|| "file".into());
            vec![(name, a.estimate.clone(), a.reference.clone())]
        }
        (true, true) => {
            let refs = wav_files(&a.reference)?;
            let jobs: Vec<_> = wav_files(&a.estimate)?
                .into_iter()
                .filter_map(|(k, est)| refs.get(&k).map(|r| (k, est, r.clone())))
                .collect();
            if jobs.is_empty() {
                bail!("no estimate in {} matches a reference in {}", a.estimate.display(), a.reference.display());
            }
            jobs
        }
        _ => return Err(usage("--estimate and --reference must both be files or both be directories")),
    };
    let mut files = Vec::with_capacity(jobs.len());
    for (name, est, reference) in &jobs {
        let e = read_wav(est).with_context(|| format!("reading {}", est.display()))?;
        let r = read_wav(reference).with_context(|| format!("reading {}", reference.display()))?;
        files.push(FileMetrics::compute(name.clone(), &e, &r).with_context(|| format!("scoring {name}"))?);
    }
    let report = MetricsReport::new(files)?;
    println!(
        "{} files: SI-SDR {:.3} dB, fwSSNR {:.3} dB, logSpecMSE {:.3} dB^2",
        report.files.len(),
        report.si_sdr.mean,
        report.fwssnr.mean,
        report.log_spec_mse.mean
    );
    RunManifest::new("metrics", None, cfg)
        .input(&a.estimate)
        .input(&a.reference)
        .output(&a.out)
        .around(&manifest_path(&a.out), || Ok(report.save_csv(&a.out)?))
}

pub fn parse_degrade(text: &str) -> Result<DegradeSpec> {
    let parts: Vec<&str> = text.split(':').collect();
    let num = |i: usize| -> Result<f64> {
        parts
            .get(i)
            .ok_or_else(|| usage(format!("degradation {text:?} is missing a parameter")))?
            .parse::<f64>()
            .map_err(|e| usage(format!("degradation {text:?}: {e}")))
    };
    let count = |i: usize| -> Result<usize> {
        let v = num(i)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(usage(format!("degradation {text:?} needs a whole number")));
        }
        Ok(v as usize)
    };
    let spec = match parts[0] {
        "smooth" => DegradeSpec::SpectralSmooth { frames: count(1)? },
        "quantize" => DegradeSpec::Quantize { levels: count(1)? },
        "lowpass" => DegradeSpec::Lowpass { cutoff: count(1)? },
        "noise" => DegradeSpec::BandNoise {
            level: num(1)?,
            lo: count(2)?,
            hi: count(3)?,
        },
        other => return Err(usage(format!("unknown degradation {other:?}"))),
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    Ok(spec)
}

fn synth(a: &SynthArgs, cfg: &RunConfig) -> Result<()> {
    let degrade = parse_degrade(&a.degrade)?;
    if a.count == 0 || !(a.duration > 0.0) {
        return Err(usage("--count and --duration must be positive"));
    }
    let task = SpectralTask {
        sample_rate: cfg.features.sample_rate,
        duration: a.duration,
        degrade,
        background_db: a.background_db,
    };
    let pairs = task.pairs(&cfg.features.feature_config(), a.count, a.seed)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let width = a.count.to_string().len().max(3);
    let mut manifest = RunManifest::new("synth", Some(a.seed), cfg)
        .arg("count", a.count)
        .arg("duration", a.duration)
        .arg("degrade", &a.degrade)
        .arg("background_db", a.background_db);
    let mut outputs: Vec<(PathBuf, &Waveform)> = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let name = format!("pair{i:0width$}");
        outputs.push((a.out_dir.join(format!("{name}{CLEAN_SUFFIX}")), &p.clean_wave));
        outputs.push((a.out_dir.join(format!("{name}{DEGRADED_SUFFIX}")), &p.degraded_wave));
    }
    for (path, _) in &outputs {
        manifest = manifest.output(path);
    }
    println!("{} pairs in {}", pairs.len(), a.out_dir.display());
    manifest.around(&manifest_path(&a.out_dir), || {
        for (path, w) in &outputs {
            write_wav(path, w, 24)?;
        }
        Ok(())
    })
}
