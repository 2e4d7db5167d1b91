//! Command-line entry point: config parsing and subcommand dispatch.

pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dataset::{ConfigRecord, Dataset};
use crate::eval_harness::experiments::{
    default_generalization_grid, sample_pairs, select_repeatability, summarize, TrialRow,
};
use crate::eval_harness::report::{
    bending_distribution_csv, bending_scatter_csv, read_panels, render_svg, spearman_line, write_report,
};
use crate::eval_harness::{
    bending_energy_analysis, generalization_experiment, paired_ablation, repeatability_experiment,
    run_closed_loop, run_open_loop, Deployment, ExperimentReport, TrialResult,
};
use crate::policy_trainer::{train, Checkpoint, TrainConfig};
use crate::seeds::{seed_for, Stream};

pub use config::{parse_config, parse_config_str, ConfigError, RunConfig, Violation};

/// Environment variable holding the log filter (`error`, `info`, `debug`, ...).
pub const LOG_ENV: &str = "FIBERLOOP_LOG";
pub const DATASET_FILE: &str = "dataset.txt";
pub const META_FILE: &str = "meta.txt";

#[derive(Debug, Parser)]
#[command(name = "fiberloop", version, about = "Shape control of an elastic fiber with two grippers")]
struct Cli {
    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Dataset operations.
    Dataset {
        #[command(subcommand)]
        op: DatasetOp,
    },
    /// Train a policy with PPO and curriculum.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset file or directory written by `dataset gen`.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Deploy a checkpoint on held-out pairs.
    Eval {
        #[arg(value_enum)]
        mode: EvalMode,
        #[command(flatten)]
        common: DeployArgs,
        #[arg(long, default_value_t = 20)]
        pairs: usize,
    },
    /// Run one of the evaluation protocols.
    Experiment {
        #[arg(value_enum)]
        kind: ExperimentKind,
        #[command(flatten)]
        common: DeployArgs,
        /// Pair count for `bending` and `ablation`.
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Draw the trials of a report directory as SVG.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum DatasetOp {
    /// Sweep the gripper grid and settle every admissible configuration.
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct DeployArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Run config; its `[deploy]` section sets the deployment conditions.
    #[arg(long, alias = "deploy")]
    config: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EvalMode {
    Closed,
    Open,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExperimentKind {
    Repeatability,
    Generalization,
    Bending,
    Ablation,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Usage(e.to_string()),
            e => CliError::Usage(format!("config: {e}")),
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit status: 0 success, 1 runtime failure, 2 usage error.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn"))
        .format_timestamp_secs()
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                eprint!("{e}");
                return 2;
            }
            let msg = e.render().to_string();
            let msg = msg.split("\n\nUsage").next().unwrap_or(&msg);
            eprintln!("error: usage: {}", one_line(msg.trim_start_matches("error:")));
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("error: usage: {}", one_line(&m));
            2
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: runtime: {}", one_line(&m));
            1
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = parse_config(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    let file = if path.is_dir() { path.join(DATASET_FILE) } else { path.to_path_buf() };
    Dataset::load(&file).map_err(|e| CliError::Runtime(format!("{}: {e}", file.display())))
}

/// The only file that may differ between identical runs is the one line
/// carrying the timestamp.
fn write_meta(dir: &Path, command: &str, cfg: &RunConfig) -> Result<(), CliError> {
    let created = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let text = format!(
        "command={command}\nseed={}\nversion={}\ncreated_unix={created}\n",
        cfg.seed,
        env!("CARGO_PKG_VERSION")
    );
    std::fs::create_dir_all(dir).map_err(CliError::runtime)?;
    std::fs::write(dir.join(META_FILE), text).map_err(CliError::runtime)
}

fn copy_config(src: &Path, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(CliError::runtime)?;
    std::fs::copy(src, dir.join("config.toml"))
        .map(|_| ())
        .map_err(CliError::runtime)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Dataset {
            op: DatasetOp::Gen { config, out },
        } => {
            let cfg = load_config(&config, cli.seed)?;
            log::info!("generating dataset into {}", out.display());
            let ds = Dataset::generate(&cfg.grid, &cfg.rod, cfg.env.state_points, cfg.seed)
                .map_err(CliError::runtime)?;
            std::fs::create_dir_all(&out).map_err(CliError::runtime)?;
            ds.save(&out.join(DATASET_FILE)).map_err(CliError::runtime)?;
            copy_config(&config, &out)?;
            write_meta(&out, "dataset gen", &cfg)?;
            println!("records={}", ds.len());
            Ok(())
        }
        Command::Train {
            config,
            dataset,
            out,
            resume,
        } => {
            let cfg = load_config(&config, cli.seed)?;
            let ds = load_dataset(&dataset)?;
            check_rod(&cfg, &ds)?;
            let (train_set, _) = ds.split(cfg.holdout_fraction, cfg.seed);
            let resume = match resume {
                Some(p) => Some(Checkpoint::load(&p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?),
                None => None,
            };
            let tc = TrainConfig {
                ppo: cfg.ppo.clone(),
                env: cfg.env.clone(),
                ..TrainConfig::new(cfg.rod.clone(), cfg.seed)
            };
            copy_config(&config, &out)?;
            write_meta(&out, "train", &cfg)?;
            let outcome = train(tc, &train_set, Some(&out), resume).map_err(CliError::runtime)?;
            let p = outcome.checkpoint.progress;
            println!("updates={} steps={} level={}", p.update, p.steps, p.level);
            Ok(())
        }
        Command::Eval { mode, common, pairs } => {
            let ctx = Context::load(&common, cli.seed)?;
            let ps = ctx.pairs(pairs)?;
            let dep = ctx.deployment();
            let results: Vec<TrialResult> = ps
                .iter()
                .enumerate()
                .map(|(i, (a, b))| {
                    let s = seed_for(ctx.cfg.seed, Stream::Eval, i as u64);
                    match mode {
                        EvalMode::Closed => run_closed_loop(&dep, &ctx.cfg.deploy, a, b, s),
                        EvalMode::Open => run_open_loop(&dep, &ctx.cfg.deploy, a, b, s),
                    }
                })
                .collect::<Result<_, _>>()
                .map_err(CliError::runtime)?;
            let name = match mode {
                EvalMode::Closed => "closed",
                EvalMode::Open => "open",
            };
            let report = report_from(name, results.into_iter().map(|r| (name.to_string(), r)).collect());
            ctx.finish(&common, &format!("eval {name}"), &report)
        }
        Command::Experiment { kind, common, pairs } => {
            let ctx = Context::load(&common, cli.seed)?;
            let dep = ctx.deployment();
            let seed = ctx.cfg.seed;
            let deploy = &ctx.cfg.deploy;
            match kind {
                ExperimentKind::Repeatability => {
                    let sets = select_repeatability(&ctx.holdout, seed).map_err(CliError::runtime)?;
                    let r = repeatability_experiment(&dep, deploy, &sets, seed).map_err(CliError::runtime)?;
                    ctx.finish(&common, "experiment repeatability", &r)
                }
                ExperimentKind::Generalization => {
                    let grid = default_generalization_grid();
                    let r = generalization_experiment(&dep, deploy, &grid, seed).map_err(CliError::runtime)?;
                    ctx.finish(&common, "experiment generalization", &r)
                }
                ExperimentKind::Bending => {
                    let ps = ctx.pairs(pairs.unwrap_or(100))?;
                    let results: Vec<TrialResult> = ps
                        .iter()
                        .enumerate()
                        .map(|(i, (a, b))| run_closed_loop(&dep, deploy, a, b, seed_for(seed, Stream::Eval, i as u64)))
                        .collect::<Result<_, _>>()
                        .map_err(CliError::runtime)?;
                    let energies: Vec<f64> = ctx.dataset.records.iter().map(|r| r.bend_energy).collect();
                    let a = bending_energy_analysis(&results, &energies);
                    let report = report_from("bending", results.into_iter().map(|r| ("closed".to_string(), r)).collect());
                    ctx.finish(&common, "experiment bending", &report)?;
                    let out = &common.out;
                    let w = |f: &str, s: String| std::fs::write(out.join(f), s).map_err(CliError::runtime);
                    w("bending_scatter.csv", bending_scatter_csv(&a))?;
                    w("bending_distribution.csv", bending_distribution_csv(&a))?;
                    w("spearman.csv", spearman_line(&a))?;
                    print!("{}", spearman_line(&a));
                    Ok(())
                }
                ExperimentKind::Ablation => {
                    let ps = ctx.pairs(pairs.unwrap_or(20))?;
                    let res = paired_ablation(&dep, deploy, &ps, seed).map_err(CliError::runtime)?;
                    let mut rows = Vec::with_capacity(2 * res.len());
                    for (c, o) in res {
                        rows.push(("closed".to_string(), c));
                        rows.push(("open".to_string(), o));
                    }
                    ctx.finish(&common, "experiment ablation", &report_from("ablation", rows))
                }
            }
        }
        Command::Render { input, out } => {
            let panels = read_panels(&input).map_err(CliError::runtime)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(CliError::runtime)?;
            }
            std::fs::write(&out, render_svg(&panels)).map_err(CliError::runtime)
        }
    }
}

fn check_rod(cfg: &RunConfig, ds: &Dataset) -> Result<(), CliError> {
    if ds.rod_params != cfg.rod {
        return Err(CliError::Usage(
            "dataset was generated with different [rod] parameters than the config".into(),
        ));
    }
    if ds.state_points != cfg.env.state_points {
        return Err(CliError::Usage("dataset state_points differs from env.state_points".into()));
    }
    Ok(())
}

/// Groups trials by condition label, keeping first-seen order.
fn report_from(name: &str, rows: Vec<(String, TrialResult)>) -> ExperimentReport {
    let mut conditions: Vec<String> = Vec::new();
    for (c, _) in &rows {
        if !conditions.contains(c) {
            conditions.push(c.clone());
        }
    }
    let rows: Vec<TrialRow> = rows
        .into_iter()
        .enumerate()
        .map(|(trial, (condition, result))| TrialRow {
            trial,
            condition,
            result,
        })
        .collect();
    let summary = conditions
        .iter()
        .map(|c| {
            let rs: Vec<&TrialResult> = rows.iter().filter(|r| &r.condition == c).map(|r| &r.result).collect();
            summarize(c, &rs)
        })
        .collect();
    ExperimentReport {
        name: name.to_string(),
        rows,
        summary,
    }
}

struct Context {
    cfg: RunConfig,
    checkpoint: Checkpoint,
    dataset: Dataset,
    holdout: Dataset,
}

impl Context {
    fn load(args: &DeployArgs, seed: Option<u64>) -> Result<Self, CliError> {
        let cfg = load_config(&args.config, seed)?;
        let checkpoint = Checkpoint::load(&args.ckpt)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", args.ckpt.display())))?;
        let dataset = load_dataset(&args.dataset)?;
        check_rod(&cfg, &dataset)?;
        let (_, holdout) = dataset.split(cfg.holdout_fraction, cfg.seed);
        let holdout = if holdout.is_empty() { dataset.clone() } else { holdout };
        Ok(Self {
            cfg,
            checkpoint,
            dataset,
            holdout,
        })
    }

    fn deployment(&self) -> Deployment<'_> {
        Deployment {
            checkpoint: &self.checkpoint,
            rod: &self.cfg.rod,
            env: &self.cfg.env,
        }
    }

    fn pairs(&self, count: usize) -> Result<Vec<(ConfigRecord, ConfigRecord)>, CliError> {
        sample_pairs(&self.holdout, count, self.cfg.seed).map_err(CliError::runtime)
    }

    fn finish(&self, args: &DeployArgs, command: &str, report: &ExperimentReport) -> Result<(), CliError> {
        write_report(&args.out, report).map_err(CliError::runtime)?;
        copy_config(&args.config, &args.out)?;
        write_meta(&args.out, command, &self.cfg)?;
        for s in &report.summary {
            println!(
                "{} trials={} failures={} median_e_mean={:.4} median_e_max={:.4}",
                s.condition, s.trials, s.failures, s.median_e_mean, s.median_e_max
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_exits_zero() {
        assert_eq!(dispatch(["fiberloop", "--help"]), 0);
    }

    #[test]
    fn missing_flag_is_a_usage_error() {
        assert_eq!(dispatch(["fiberloop", "train"]), 2);
        assert_eq!(dispatch(["fiberloop", "frobnicate"]), 2);
    }

    #[test]
    fn missing_config_file_is_a_usage_error() {
        let code = dispatch([
            "fiberloop",
            "dataset",
            "gen",
            "--config",
            "/nonexistent/c.toml",
            "--out",
            "/tmp/unused",
        ]);
        assert_eq!(code, 2);
    }
}
