use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_fiberloop");

const CONFIG: &str = r#"
seed = 5

[rod]
stiffness = 1.0
damping = 0.2

[env]
horizon_steps = 40
hold_steps = 10

[ppo]
n_envs = 2
rollout_length = 64
batch = 64
epochs_per_rollout = 2
total_steps = 256
checkpoint_every = 1

[dataset]
left_x = [-5.0, -4.0, 1.0]
left_y = [-1.0, 1.0, 1.0]
right_x = [4.0, 6.0, 1.0]
right_y = [0.0, 0.0, 1.0]
holdout_fraction = 0.0

[deploy]
max_duration = 1.0
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("run.toml");
    std::fs::write(&config, CONFIG).unwrap();
    Workspace { _dir: dir, root, config }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn help_and_usage_errors() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));

    let out = run(&["train"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.contains("--config"), "{err}");

    assert_eq!(run(&["fly"]).status.code(), Some(2));
}

#[test]
fn bad_config_lists_every_violation() {
    let ws = workspace();
    let bad = ws.root.join("bad.toml");
    std::fs::write(&bad, "[rod]\nstiffness = 1\n[pp]\ngama = 0.9\n[ppo]\ngamma = 1.5\n").unwrap();
    let out = run(&["dataset", "gen", "--config", s(&bad), "--out", s(&ws.root.join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim().lines().count(), 1);
    for needle in ["rod.damping", "ppo.gamma", "pp.gama", "did you mean `ppo.gamma`"] {
        assert!(err.contains(needle), "{needle} missing from {err}");
    }
}

#[test]
fn runtime_failures_exit_one() {
    let ws = workspace();
    let out = run(&[
        "train",
        "--config",
        s(&ws.config),
        "--dataset",
        s(&ws.root.join("missing")),
        "--out",
        s(&ws.root.join("t")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: runtime:"));
}

/// Every CSV (and the dataset) written by one pipeline pass.
fn pipeline(ws: &Workspace, tag: &str) -> Vec<(String, Vec<u8>)> {
    let base = ws.root.join(tag);
    let data = base.join("data");
    let train = base.join("train");
    ok(&["dataset", "gen", "--config", s(&ws.config), "--out", s(&data)]);
    ok(&["train", "--config", s(&ws.config), "--dataset", s(&data), "--out", s(&train)]);
    let ckpt = train.join("final.ckpt");
    let mut files = vec![
        data.join("dataset.txt"),
        train.join("metrics.csv"),
        train.join("final.ckpt"),
    ];
    for (name, args) in [
        ("closed", vec!["eval", "closed", "--pairs", "3"]),
        ("open", vec!["eval", "open", "--pairs", "3"]),
        ("ablation", vec!["experiment", "ablation", "--pairs", "3"]),
        ("bending", vec!["experiment", "bending", "--pairs", "4"]),
        ("repeat", vec!["experiment", "repeatability"]),
    ] {
        let out = base.join(name);
        let mut a = args.clone();
        a.extend([
            "--ckpt",
            s(&ckpt),
            "--config",
            s(&ws.config),
            "--dataset",
            s(&data),
            "--out",
            s(&out),
        ]);
        ok(&a);
        for f in ["trials.csv", "summary.csv", "series.csv", "shapes.csv", "trials.svg"] {
            files.push(out.join(f));
        }
    }
    for f in ["bending_scatter.csv", "bending_distribution.csv", "spearman.csv"] {
        files.push(base.join("bending").join(f));
    }
    let svg = base.join("render.svg");
    ok(&["render", "--input", s(&base.join("closed")), "--out", s(&svg)]);
    files.push(svg);
    files
        .into_iter()
        .map(|p| (p.strip_prefix(&base).unwrap().display().to_string(), read(&p)))
        .collect()
}

#[test]
fn pipeline_runs_end_to_end_and_is_reproducible() {
    let ws = workspace();
    let a = pipeline(&ws, "a");
    let b = pipeline(&ws, "b");
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        assert!(x == y, "{name} differs between identical runs");
    }

    let trials = String::from_utf8(a.iter().find(|f| f.0 == "repeat/trials.csv").unwrap().1.clone()).unwrap();
    assert_eq!(trials.lines().count(), 1 + 24);

    let meta = std::fs::read_to_string(ws.root.join("a/train/meta.txt")).unwrap();
    let stamped: Vec<&str> = meta.lines().filter(|l| l.starts_with("created_unix=")).collect();
    assert_eq!(stamped.len(), 1);
    let strip = |p: &str| {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("created_unix="))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(
        strip(s(&ws.root.join("a/train/meta.txt"))),
        strip(s(&ws.root.join("b/train/meta.txt")))
    );
}

#[test]
fn seed_flag_overrides_config() {
    let ws = workspace();
    let data = ws.root.join("d");
    ok(&["dataset", "gen", "--config", s(&ws.config), "--out", s(&data)]);
    let train = |out: &str, seed: &str| {
        let dir = ws.root.join(out);
        ok(&[
            "train",
            "--config",
            s(&ws.config),
            "--dataset",
            s(&data),
            "--out",
            s(&dir),
            "--seed",
            seed,
        ]);
        (
            read(&dir.join("metrics.csv")),
            std::fs::read_to_string(dir.join("meta.txt")).unwrap(),
        )
    };
    let (m5, meta5) = train("t5", "5");
    let (m6, meta6) = train("t6", "6");
    assert!(meta5.contains("seed=5") && meta6.contains("seed=6"));
    assert_ne!(m5, m6);
}

#[test]
fn train_resumes_from_checkpoint() {
    let ws = workspace();
    let data = ws.root.join("d");
    ok(&["dataset", "gen", "--config", s(&ws.config), "--out", s(&data)]);
    let full = ws.root.join("full");
    ok(&["train", "--config", s(&ws.config), "--dataset", s(&data), "--out", s(&full)]);
    let resumed = ws.root.join("resumed");
    ok(&[
        "train",
        "--config",
        s(&ws.config),
        "--dataset",
        s(&data),
        "--out",
        s(&resumed),
        "--resume",
        s(&full.join("update_000001.ckpt")),
    ]);
    // in-flight episodes restart on resume, so only the progress counters match
    let header = |p: &Path| {
        let h = fiberloop::policy_trainer::checkpoint::read_header(p).unwrap();
        h.split_whitespace()
            .filter(|f| f.starts_with("update=") || f.starts_with("steps="))
            .map(str::to_string)
            .collect::<Vec<_>>()
    };
    assert_eq!(header(&full.join("final.ckpt")), header(&resumed.join("final.ckpt")));
    let rows = std::fs::read_to_string(resumed.join("metrics.csv")).unwrap();
    assert_eq!(rows.lines().skip(1).count(), 1);
}
