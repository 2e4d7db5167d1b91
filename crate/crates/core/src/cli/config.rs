//! Sectioned TOML run configuration with strict, exhaustive validation.

use std::fmt;
use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::dataset::{AxisRange, GridSpec};
use crate::env::EnvConfig;
use crate::eval_harness::DeployConfig;
use crate::policy_trainer::PpoConfig;
use crate::rod::{RodParams, SurfaceMode, SurfaceModel};

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub key: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Validation(Vec<Violation>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub rod: RodParams,
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub grid: GridSpec,
    pub holdout_fraction: f64,
    pub deploy: DeployConfig,
}

const ROD_KEYS: &[&str] = &[
    "stiffness",
    "damping",
    "n_segments",
    "length",
    "segment_mass",
    "physics_dt",
    "end_clamp",
    "max_joint_rate",
];
const ENV_KEYS: &[&str] = &[
    "control_dt",
    "horizon_steps",
    "hold_steps",
    "v_max",
    "rho",
    "w_er",
    "w_te",
    "w_sm",
    "bonus_base",
    "state_points",
    "min_separation_frac",
    "reach_margin",
];
const PPO_KEYS: &[&str] = &[
    "gamma",
    "gae_lambda",
    "clip",
    "batch",
    "epochs_per_rollout",
    "entropy_coef",
    "value_coef",
    "max_grad_norm",
    "n_envs",
    "total_steps",
    "lr_init",
    "lr_final",
    "init_log_std",
    "rollout_length",
    "adam_eps",
    "obs_clip",
    "normalize_reward",
    "checkpoint_every",
];
const DATASET_KEYS: &[&str] = &["left_x", "left_y", "right_x", "right_y", "holdout_fraction"];
const DEPLOY_KEYS: &[&str] = &[
    "surface",
    "mu",
    "normal_load",
    "stiction_velocity",
    "obs_noise_std",
    "stiffness_scale",
    "length",
    "control_rate",
    "max_duration",
];
const TOP_KEYS: &[&str] = &["seed", "out_dir"];
const SECTIONS: &[(&str, &[&str])] = &[
    ("rod", ROD_KEYS),
    ("env", ENV_KEYS),
    ("ppo", PPO_KEYS),
    ("dataset", DATASET_KEYS),
    ("deploy", DEPLOY_KEYS),
];

fn known_keys() -> Vec<String> {
    let mut v: Vec<String> = TOP_KEYS.iter().map(|k| k.to_string()).collect();
    for (s, keys) in SECTIONS {
        v.extend(keys.iter().map(|k| format!("{s}.{k}")));
    }
    v
}

fn suggest(unknown: &str) -> Option<String> {
    known_keys()
        .into_iter()
        .map(|k| (strsim::levenshtein(unknown, &k), k))
        .filter(|(d, k)| *d <= (k.len() / 2).max(3))
        .min()
        .map(|(_, k)| k)
}

struct Reader<'a> {
    section: &'static str,
    table: Option<&'a Table>,
    errors: &'a mut Vec<Violation>,
}

impl Reader<'_> {
    fn path(&self, key: &str) -> String {
        if self.section.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.section)
        }
    }

    fn bad(&mut self, key: &str, message: impl Into<String>) {
        let key = self.path(key);
        self.errors.push(Violation {
            key,
            message: message.into(),
        });
    }

    fn get(&self, key: &str) -> Option<&Value> {
        self.table.and_then(|t| t.get(key))
    }

    fn float(&mut self, key: &str, default: f64) -> f64 {
        self.opt_float(key).unwrap_or(default)
    }

    fn opt_float(&mut self, key: &str) -> Option<f64> {
        match self.get(key) {
            None => None,
            Some(Value::Float(f)) => Some(*f),
            Some(Value::Integer(i)) => Some(*i as f64),
            Some(v) => {
                let t = v.type_str();
                self.bad(key, format!("expected a number, found {t}"));
                None
            }
        }
    }

    fn required_float(&mut self, key: &str) -> f64 {
        if self.get(key).is_none() {
            self.bad(key, "required (no default for this physical constant)");
            return f64::NAN;
        }
        self.opt_float(key).unwrap_or(f64::NAN)
    }

    fn uint(&mut self, key: &str, default: u64) -> u64 {
        match self.get(key) {
            None => default,
            Some(Value::Integer(i)) if *i >= 0 => *i as u64,
            Some(Value::Integer(i)) => {
                let i = *i;
                self.bad(key, format!("{i} must be >= 0"));
                default
            }
            Some(v) => {
                let t = v.type_str();
                self.bad(key, format!("expected an integer, found {t}"));
                default
            }
        }
    }

    fn boolean(&mut self, key: &str, default: bool) -> bool {
        match self.get(key) {
            None => default,
            Some(Value::Boolean(b)) => *b,
            Some(v) => {
                let t = v.type_str();
                self.bad(key, format!("expected true or false, found {t}"));
                default
            }
        }
    }

    fn string(&mut self, key: &str) -> Option<String> {
        match self.get(key) {
            None => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(v) => {
                let t = v.type_str();
                self.bad(key, format!("expected a string, found {t}"));
                None
            }
        }
    }

    fn axis(&mut self, key: &str, default: AxisRange) -> AxisRange {
        match self.get(key) {
            None => default,
            Some(Value::Array(a)) => {
                let nums: Vec<f64> = a
                    .iter()
                    .filter_map(|v| match v {
                        Value::Float(f) => Some(*f),
                        Value::Integer(i) => Some(*i as f64),
                        _ => None,
                    })
                    .collect();
                if nums.len() != 3 || a.len() != 3 {
                    self.bad(key, "expected [min, max, step]");
                    return default;
                }
                let r = AxisRange::new(nums[0], nums[1], nums[2]);
                if !(r.step > 0.0) || r.max < r.min || !r.min.is_finite() || !r.max.is_finite() {
                    self.bad(key, "needs min <= max and step > 0");
                }
                r
            }
            Some(v) => {
                let t = v.type_str();
                self.bad(key, format!("expected [min, max, step], found {t}"));
                default
            }
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    let root: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse {
        line: e.span().map_or(1, |s| line_of(text, s.start)),
        message: e.message().to_string(),
    })?;
    let mut errors = Vec::new();

    // unknown keys and sections
    for (k, v) in &root {
        if let Some((_, keys)) = SECTIONS.iter().find(|(s, _)| s == k) {
            match v {
                Value::Table(t) => {
                    for key in t.keys() {
                        if !keys.contains(&key.as_str()) {
                            unknown(&mut errors, &format!("{k}.{key}"));
                        }
                    }
                }
                _ => errors.push(Violation {
                    key: k.clone(),
                    message: "expected a section".into(),
                }),
            }
        } else if !TOP_KEYS.contains(&k.as_str()) {
            match v {
                Value::Table(t) if !t.is_empty() => {
                    for key in t.keys() {
                        unknown(&mut errors, &format!("{k}.{key}"));
                    }
                }
                _ => unknown(&mut errors, k),
            }
        }
    }
    let section = |name: &str| root.get(name).and_then(Value::as_table);

    let mut r = Reader {
        section: "",
        table: Some(&root),
        errors: &mut errors,
    };
    let seed = r.uint("seed", 0);
    let out_dir = r.string("out_dir").map(PathBuf::from);

    let mut r = Reader {
        section: "rod",
        table: section("rod"),
        errors: &mut errors,
    };
    let mut rod = RodParams::new(r.required_float("stiffness"), r.required_float("damping"));
    rod.n_segments = r.uint("n_segments", rod.n_segments as u64) as usize;
    rod.total_length = r.float("length", rod.total_length);
    rod.segment_mass = r.float("segment_mass", rod.segment_mass);
    rod.physics_dt = r.float("physics_dt", rod.physics_dt);
    rod.end_clamp = r.boolean("end_clamp", rod.end_clamp);
    rod.max_joint_rate = r.float("max_joint_rate", rod.max_joint_rate);
    if rod.n_segments < 3 {
        r.bad("n_segments", format!("{} must be >= 3", rod.n_segments));
    }
    for (key, v) in [
        ("stiffness", rod.joint_stiffness),
        ("damping", rod.joint_damping),
        ("length", rod.total_length),
        ("segment_mass", rod.segment_mass),
        ("physics_dt", rod.physics_dt),
        ("max_joint_rate", rod.max_joint_rate),
    ] {
        if v.is_finite() && v <= 0.0 {
            r.bad(key, format!("{v} must be > 0"));
        }
    }

    let d = EnvConfig::default();
    let mut r = Reader {
        section: "env",
        table: section("env"),
        errors: &mut errors,
    };
    let env = EnvConfig {
        control_dt: r.float("control_dt", d.control_dt),
        horizon_steps: r.uint("horizon_steps", d.horizon_steps as u64) as usize,
        hold_steps: r.uint("hold_steps", d.hold_steps as u64) as usize,
        v_max: r.float("v_max", d.v_max),
        rho: r.float("rho", d.rho),
        w_er: r.float("w_er", d.w_er),
        w_te: r.float("w_te", d.w_te),
        w_sm: r.float("w_sm", d.w_sm),
        bonus_base: r.float("bonus_base", d.bonus_base),
        state_points: r.uint("state_points", d.state_points as u64) as usize,
        min_separation_frac: r.float("min_separation_frac", d.min_separation_frac),
        reach_margin: r.float("reach_margin", d.reach_margin),
    };
    for (k, m) in env.violations() {
        r.bad(&k, m);
    }

    let d = PpoConfig::default();
    let mut r = Reader {
        section: "ppo",
        table: section("ppo"),
        errors: &mut errors,
    };
    let ppo = PpoConfig {
        gamma: r.float("gamma", d.gamma),
        gae_lambda: r.float("gae_lambda", d.gae_lambda),
        clip: r.float("clip", d.clip),
        batch: r.uint("batch", d.batch as u64) as usize,
        epochs_per_rollout: r.uint("epochs_per_rollout", d.epochs_per_rollout as u64) as usize,
        entropy_coef: r.float("entropy_coef", d.entropy_coef),
        value_coef: r.float("value_coef", d.value_coef),
        max_grad_norm: r.float("max_grad_norm", d.max_grad_norm),
        n_envs: r.uint("n_envs", d.n_envs as u64) as usize,
        total_steps: r.uint("total_steps", d.total_steps),
        lr_init: r.float("lr_init", d.lr_init),
        lr_final: r.float("lr_final", d.lr_final),
        init_log_std: r.float("init_log_std", d.init_log_std),
        rollout_length: r.uint("rollout_length", d.rollout_length as u64) as usize,
        adam_eps: r.float("adam_eps", d.adam_eps),
        obs_clip: r.float("obs_clip", d.obs_clip),
        normalize_reward: r.boolean("normalize_reward", d.normalize_reward),
        checkpoint_every: r.uint("checkpoint_every", d.checkpoint_every as u64) as usize,
    };
    for (k, m) in ppo.violations() {
        r.bad(&k, m);
    }

    let length = if rod.total_length.is_finite() && rod.total_length > 0.0 {
        rod.total_length
    } else {
        15.0
    };
    let g = GridSpec::default_for_length(length);
    let mut r = Reader {
        section: "dataset",
        table: section("dataset"),
        errors: &mut errors,
    };
    let grid = GridSpec {
        left_x: r.axis("left_x", g.left_x),
        left_y: r.axis("left_y", g.left_y),
        right_x: r.axis("right_x", g.right_x),
        right_y: r.axis("right_y", g.right_y),
    };
    let holdout_fraction = r.float("holdout_fraction", 0.1);
    if !(0.0..1.0).contains(&holdout_fraction) {
        r.bad("holdout_fraction", format!("{holdout_fraction} must be in [0, 1)"));
    }

    let d = DeployConfig {
        length,
        ..DeployConfig::default()
    };
    let mut r = Reader {
        section: "deploy",
        table: section("deploy"),
        errors: &mut errors,
    };
    let mode = match r.string("surface").as_deref() {
        None | Some("coulomb") => SurfaceMode::Coulomb,
        Some("frictionless") => SurfaceMode::Frictionless,
        Some(other) => {
            r.bad("surface", format!("{other:?} is not \"coulomb\" or \"frictionless\""));
            SurfaceMode::Coulomb
        }
    };
    let surface = SurfaceModel {
        mode,
        mu: r.float("mu", d.surface.mu),
        normal_load_per_segment: r.float("normal_load", d.surface.normal_load_per_segment),
        stiction_velocity: r.float("stiction_velocity", d.surface.stiction_velocity),
    };
    let deploy = DeployConfig {
        surface: if mode == SurfaceMode::Frictionless {
            SurfaceModel::FRICTIONLESS
        } else {
            surface
        },
        obs_noise_std: r.float("obs_noise_std", d.obs_noise_std),
        stiffness_scale: r.float("stiffness_scale", d.stiffness_scale),
        length: r.float("length", d.length),
        control_rate: r.float("control_rate", d.control_rate),
        max_duration: r.float("max_duration", d.max_duration),
    };
    if let Err(m) = surface.validate() {
        r.bad("mu", m);
    }
    for (k, m) in deploy.violations(&env) {
        if k != "surface" {
            r.bad(&k, m);
        }
    }

    if errors.is_empty() {
        Ok(RunConfig {
            seed,
            out_dir,
            rod,
            env,
            ppo,
            grid,
            holdout_fraction,
            deploy,
        })
    } else {
        Err(ConfigError::Validation(errors))
    }
}

fn unknown(errors: &mut Vec<Violation>, key: &str) {
    let message = match suggest(key) {
        Some(s) => format!("unknown key (did you mean `{s}`?)"),
        None => "unknown key".to_string(),
    };
    errors.push(Violation {
        key: key.to_string(),
        message,
    });
}
