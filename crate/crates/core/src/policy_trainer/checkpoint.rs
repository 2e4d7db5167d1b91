//! Policy checkpoints: one text header line, then little-endian f64 arrays.
//!
//! Body layout: network parameters (actor, log-std, critic), observation
//! normalizer (count, mean, m2, clip), then optionally Adam state (t, m, v)
//! and the reward normalizer (count, mean, m2, clip).

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::norm::RunningNorm;
use super::ppo::{Adam, MlpParams};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "fiberloop-checkpoint";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("body has {got} values, header implies {expected}")]
    Truncated { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainProgress {
    pub update: u64,
    pub steps: u64,
    pub level: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: MlpParams,
    pub obs_norm: RunningNorm,
    pub progress: TrainProgress,
    pub optimizer: Option<Adam>,
    pub reward_norm: Option<RunningNorm>,
}

fn join_sizes(s: &[usize]) -> String {
    s.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn parse_sizes(s: &str) -> Result<Vec<usize>, CheckpointError> {
    let v: Result<Vec<usize>, _> = s.split('x').map(str::parse).collect();
    match v {
        Ok(v) if v.len() >= 2 && v.iter().all(|&n| n > 0) => Ok(v),
        _ => Err(CheckpointError::Header(format!("bad layer sizes {s:?}"))),
    }
}

fn push_norm(out: &mut Vec<f64>, n: &RunningNorm) {
    out.push(n.count);
    out.extend_from_slice(&n.mean);
    out.extend_from_slice(&n.m2);
    out.push(n.clip);
}

fn take_norm(src: &mut &[f64], dim: usize) -> RunningNorm {
    let count = src[0];
    let mean = src[1..1 + dim].to_vec();
    let m2 = src[1 + dim..1 + 2 * dim].to_vec();
    let clip = src[1 + 2 * dim];
    *src = &src[2 + 2 * dim..];
    RunningNorm { count, mean, m2, clip }
}

impl Checkpoint {
    pub fn header(&self) -> String {
        format!(
            "{MAGIC} version={CHECKPOINT_VERSION} actor={} critic={} obs_dim={} update={} steps={} level={} optimizer={} reward_norm={}",
            join_sizes(&self.params.actor.sizes()),
            join_sizes(&self.params.critic.sizes()),
            self.obs_norm.dim(),
            self.progress.update,
            self.progress.steps,
            self.progress.level,
            u8::from(self.optimizer.is_some()),
            u8::from(self.reward_norm.is_some()),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut vals = self.params.to_flat();
        push_norm(&mut vals, &self.obs_norm);
        if let Some(a) = &self.optimizer {
            vals.push(a.t as f64);
            vals.extend_from_slice(&a.m);
            vals.extend_from_slice(&a.v);
        }
        if let Some(r) = &self.reward_norm {
            push_norm(&mut vals, r);
        }
        let mut out = self.header().into_bytes();
        out.push(b'\n');
        out.reserve(vals.len() * 8);
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let f = std::fs::File::open(path)?;
        Self::read(BufReader::new(f))
    }

    pub fn read<R: BufRead>(mut r: R) -> Result<Self, CheckpointError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let mut fields = line.trim_end().split(' ');
        if fields.next() != Some(MAGIC) {
            return Err(CheckpointError::Header("missing magic".into()));
        }
        let mut kv = std::collections::HashMap::new();
        for f in fields {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| CheckpointError::Header(format!("bad field {f:?}")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| CheckpointError::Header(format!("missing {k}")))
        };
        let num = |k: &str| -> Result<u64, CheckpointError> {
            get(k)?
                .parse()
                .map_err(|_| CheckpointError::Header(format!("bad {k}")))
        };
        let version = num("version")? as u32;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch(version));
        }
        let actor = parse_sizes(get("actor")?)?;
        let critic = parse_sizes(get("critic")?)?;
        let obs_dim = num("obs_dim")? as usize;
        if actor[0] != obs_dim || critic[0] != obs_dim || *critic.last().unwrap() != 1 {
            return Err(CheckpointError::Header("inconsistent layer sizes".into()));
        }
        let has_opt = num("optimizer")? == 1;
        let has_rn = num("reward_norm")? == 1;
        let progress = TrainProgress {
            update: num("update")?,
            steps: num("steps")?,
            level: num("level")? as usize,
        };

        let mut params = MlpParams::zeros(&actor, &critic);
        let np = params.n_params();
        let expected = np
            + 2 + 2 * obs_dim
            + if has_opt { 1 + 2 * np } else { 0 }
            + if has_rn { 4 } else { 0 };
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != expected * 8 {
            return Err(CheckpointError::Truncated {
                expected,
                got: bytes.len() / 8,
            });
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut rest = &vals[..];
        params.read_flat(&rest[..np]);
        rest = &rest[np..];
        let obs_norm = take_norm(&mut rest, obs_dim);
        let optimizer = if has_opt {
            let t = rest[0] as u64;
            let m = rest[1..1 + np].to_vec();
            let v = rest[1 + np..1 + 2 * np].to_vec();
            rest = &rest[1 + 2 * np..];
            let mut a = Adam::new(np, 1e-5);
            a.t = t;
            a.m = m;
            a.v = v;
            Some(a)
        } else {
            None
        };
        let reward_norm = has_rn.then(|| take_norm(&mut rest, 1));
        Ok(Self {
            params,
            obs_norm,
            progress,
            optimizer,
            reward_norm,
        })
    }

    /// Normalizes a raw observation and returns the deterministic action
    /// mean.
    pub fn act(&self, raw_obs: &[f64]) -> Vec<f64> {
        let x = self.obs_norm.normalize(raw_obs);
        self.params.forward(&x).expect("observation width").mean
    }
}

/// Reads only the header line of a checkpoint file.
pub fn read_header(path: &Path) -> Result<String, CheckpointError> {
    let mut s = String::new();
    BufReader::new(std::fs::File::open(path)?).read_line(&mut s)?;
    Ok(s.trim_end().to_string())
}
