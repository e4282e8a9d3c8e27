use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jointflow::features::{write_wav, Waveform};
use tempfile::TempDir;

const SMALL_CONFIG: &str = r#"
[features]
sample_rate = 8000
window_len = 62
hop_len = 16

[model]
hidden = [16, 16]

[train]
iterations = 30
batch_size = 16
holdout_size = 32
"#;

fn jointflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jointflow")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn check(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn noise(len: usize, sr: u32, seed: u64) -> Waveform {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let samples = (0..len)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 0.8
        })
        .collect();
    Waveform::new(samples, sr).unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(ws.path("small.toml"), SMALL_CONFIG).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> String {
        self.path("small.toml").to_str().unwrap().to_string()
    }

    fn synth(&self, degrade: &str) -> PathBuf {
        let out = self.path("pairs");
        let cfg = self.config();
        check(&jointflow(&["synth", p(&out), "--config", &cfg, "--count", "4", "--duration", "0.3", "--degrade", degrade]));
        out
    }
}

fn read_profile_values(path: &Path) -> Vec<f64> {
    std::fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.parse().unwrap()).collect()
}

#[test]
fn roundtrip_reports_tiny_error() {
    let ws = Workspace::new();
    let wav = ws.path("noise.wav");
    write_wav(&wav, &noise(8000, 8000, 1), 16).unwrap();
    let out = jointflow(&["roundtrip", p(&wav), "--config", &ws.config()]);
    check(&out);
    let text = stdout(&out);
    let err: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("relative error: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(err < 1e-6, "{text}");
    assert!(text.contains("fraction within [-1, 1]"));
}

#[test]
fn roundtrip_of_silence_is_exact() {
    let ws = Workspace::new();
    let wav = ws.path("silence.wav");
    write_wav(&wav, &Waveform::silence(4000, 8000), 16).unwrap();
    let out = jointflow(&["roundtrip", p(&wav), "--config", &ws.config()]);
    check(&out);
    assert!(stdout(&out).contains("relative error: 0e0"));
}

#[test]
fn wrong_sample_rate_is_a_data_error() {
    let ws = Workspace::new();
    let wav = ws.path("fast.wav");
    write_wav(&wav, &noise(4000, 16000, 2), 16).unwrap();
    let out = jointflow(&["roundtrip", p(&wav), "--config", &ws.config()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sample rate mismatch"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(jointflow(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(jointflow(&["fieldviz"]).status.code(), Some(1));
    assert_eq!(jointflow(&["--help"]).status.code(), Some(0));
}

#[test]
fn calibrate_writes_profile_and_manifest_with_defaults() {
    let ws = Workspace::new();
    let pairs = ws.synth("smooth:3");
    let profile = ws.path("sigma.txt");
    check(&jointflow(&["calibrate", p(&pairs), "--config", &ws.config(), "--out", p(&profile)]));
    let values = read_profile_values(&profile);
    assert_eq!(values.len(), 1);
    assert!(values[0] > 0.0);
    let manifest = std::fs::read_to_string(ws.path("sigma.txt.manifest.toml")).unwrap();
    assert!(manifest.contains("quantile = \"0.997\""), "{manifest}");
    assert!(manifest.contains("command = \"calibrate\""));
    assert!(manifest.contains("finished_unix"));
}

#[test]
fn per_frequency_profile_rises_only_where_the_damage_is() {
    let ws = Workspace::new();
    let pairs = ws.synth("lowpass:20");
    let profile = ws.path("sigma.txt");
    let cfg = ws.config();
    check(&jointflow(&[
        "calibrate",
        p(&pairs),
        "--config",
        &cfg,
        "--out",
        p(&profile),
        "--per-frequency",
        "--bandwidth",
        "0",
    ]));
    let values = read_profile_values(&profile);
    assert_eq!(values.len(), 32);
    let low = values[..16].iter().copied().fold(0.0, f64::max);
    let high = values[22..].iter().copied().fold(f64::INFINITY, f64::min);
    assert!(high > 5.0 * low, "low rows {low}, high rows {high}");
}

#[test]
fn calibrate_without_pairs_fails_and_writes_nothing() {
    let ws = Workspace::new();
    let empty = ws.path("empty");
    std::fs::create_dir(&empty).unwrap();
    let profile = ws.path("sigma.txt");
    let out = jointflow(&["calibrate", p(&empty), "--config", &ws.config(), "--out", p(&profile)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!profile.exists());
    assert!(!ws.path("sigma.txt.manifest.toml").exists());
}

#[test]
fn train_then_enhance_is_deterministic() {
    let ws = Workspace::new();
    let cfg = ws.config();
    let pairs = ws.synth("smooth:3");
    let profile = ws.path("sigma.txt");
    check(&jointflow(&["calibrate", p(&pairs), "--config", &cfg, "--out", p(&profile), "--per-frequency"]));
    let ckpt = ws.path("model.ckpt");
    check(&jointflow(&["train", p(&pairs), "--config", &cfg, "--profile", p(&profile), "--out", p(&ckpt), "--seed", "3"]));
    assert!(ws.path("model.ckpt.manifest.toml").exists());

    let input = pairs.join("pair000.degraded.wav");
    let run = |name: &str, seed: &str, extra: &[&str]| {
        let out = ws.path(name);
        let mut args = vec![
            "enhance",
            p(&input),
            "--config",
            &cfg,
            "--checkpoint",
            p(&ckpt),
            "--profile",
            p(&profile),
            "--out",
            p(&out),
            "--seed",
            seed,
        ];
        args.extend_from_slice(extra);
        let o = jointflow(&args);
        check(&o);
        (std::fs::read(&out).unwrap(), stdout(&o))
    };
    let (a, report) = run("a.wav", "7", &[]);
    let (b, _) = run("b.wav", "7", &[]);
    let (c, _) = run("c.wav", "8", &[]);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(report.contains("midpoint with 3 steps, 6 field evaluations"), "{report}");
    let (_, euler) = run("d.wav", "7", &["--solver", "euler", "--nfe", "4"]);
    assert!(euler.contains("euler with 4 steps, 4 field evaluations"), "{euler}");

    let odd = jointflow(&[
        "enhance",
        p(&input),
        "--config",
        &cfg,
        "--checkpoint",
        p(&ckpt),
        "--profile",
        p(&profile),
        "--out",
        p(&ws.path("odd.wav")),
        "--nfe",
        "5",
    ]);
    assert_eq!(odd.status.code(), Some(1));
    assert!(!ws.path("odd.wav").exists());
}

#[test]
fn enhance_with_missing_checkpoint_writes_nothing() {
    let ws = Workspace::new();
    let pairs = ws.synth("smooth:3");
    let out = ws.path("out.wav");
    let o = jointflow(&[
        "enhance",
        p(&pairs.join("pair000.degraded.wav")),
        "--config",
        &ws.config(),
        "--checkpoint",
        p(&ws.path("missing.ckpt")),
        "--profile",
        p(&ws.path("missing.txt")),
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
    assert!(!ws.path("out.wav.manifest.toml").exists());
}

#[test]
fn single_target_arrows_aim_at_the_target() {
    let ws = Workspace::new();
    let csv_path = ws.path("field.csv");
    check(&jointflow(&["fieldviz", "--out", p(&csv_path), "--problem", "single", "-t", "0.3", "--resolution", "9"]));
    let mut reader = csv::Reader::from_path(&csv_path).unwrap();
    let mut aimed = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        let f = |i: usize| rec[i].parse::<f64>().unwrap();
        if &rec[5] == "true" {
            continue;
        }
        let (x, y, u, v) = (f(0), f(1), f(2), f(3));
        let (dx, dy) = (1.0 - x, 0.5 - y);
        let cross = u * dy - v * dx;
        let dot = u * dx + v * dy;
        assert!(cross.abs() <= 1e-9 * (u.hypot(v) * dx.hypot(dy)).max(1e-12), "({x}, {y})");
        assert!(dot >= 0.0);
        aimed += 1;
    }
    assert!(aimed > 0);
}

#[test]
fn dispersion_csv_lists_both_paths() {
    let ws = Workspace::new();
    let out = ws.path("dispersion.csv");
    check(&jointflow(&["dispersion", "--out", p(&out), "--samples", "20", "--steps", "5,50"]));
    let mut reader = csv::Reader::from_path(&out).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    let joint50 = rows.iter().find(|r| &r[0] == "joint" && &r[1] == "50").unwrap();
    assert_eq!(&joint50[2], "100");
    assert!(joint50[3].parse::<f64>().unwrap() < 4e-4);
    let constant50 = rows.iter().find(|r| &r[0] == "constant" && &r[1] == "50").unwrap();
    assert!(constant50[4].parse::<f64>().unwrap() > 0.2);
}

#[test]
fn metrics_of_identical_files_hit_the_caps() {
    let ws = Workspace::new();
    let wav = ws.path("x.wav");
    write_wav(&wav, &noise(8000, 8000, 5), 16).unwrap();
    let out = ws.path("metrics.csv");
    check(&jointflow(&["metrics", "--estimate", p(&wav), "--reference", p(&wav), "--out", p(&out)]));
    let mut reader = csv::Reader::from_path(&out).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(&rows[0][0], "x");
    assert_eq!(rows[0][1].parse::<f64>().unwrap(), 100.0);
    assert_eq!(rows[0][5].parse::<f64>().unwrap(), 0.0);
    assert_eq!(&rows[1][0], "aggregate");
}

#[test]
fn metrics_match_directories_by_name() {
    let ws = Workspace::new();
    let pairs = ws.synth("smooth:3");
    let est = ws.path("est");
    std::fs::create_dir(&est).unwrap();
    for i in 0..2 {
        std::fs::copy(pairs.join(format!("pair00{i}.degraded.wav")), est.join(format!("pair00{i}.enhanced.wav"))).unwrap();
    }
    let refs = ws.path("refs");
    std::fs::create_dir(&refs).unwrap();
    for i in 0..4 {
        std::fs::copy(pairs.join(format!("pair00{i}.clean.wav")), refs.join(format!("pair00{i}.clean.wav"))).unwrap();
    }
    let out = ws.path("m.csv");
    check(&jointflow(&["metrics", "--estimate", p(&est), "--reference", p(&refs), "--out", p(&out)]));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 4, "{text}");
    assert!(text.contains("\npair001,"));
}

#[test]
fn synth_is_reproducible() {
    let ws = Workspace::new();
    let cfg = ws.config();
    let a = ws.path("a");
    let b = ws.path("b");
    for dir in [&a, &b] {
        check(&jointflow(&["synth", p(dir), "--config", &cfg, "--count", "2", "--duration", "0.2", "--seed", "4"]));
    }
    for name in ["pair000.clean.wav", "pair001.degraded.wav"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
    }
    assert!(a.join("manifest.toml").exists());
}
