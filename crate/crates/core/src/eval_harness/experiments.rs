//! Experiment protocols: repeatability, generalization across stiffness and
//! length, closed/open-loop pairs, and held-out evaluation.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use super::{run_closed_loop, run_open_loop, DeployConfig, Deployment, TrialResult};
use crate::dataset::{separation_ok, settle_record, ConfigRecord, Dataset, DatasetError, GridSpec};
use crate::env::EnvError;
use crate::rod::Rod;
use crate::seeds::{rng_for, seed_for, Stream};

/// Bending-rigidity proxies for 50, 80 and 120 um fibers relative to the
/// 80 um training fiber (EI grows with d^4).
pub fn stiffness_scales() -> [f64; 3] {
    [(50.0f64 / 80.0).powi(4), 1.0, (120.0f64 / 80.0).powi(4)]
}

pub const LENGTHS: [f64; 3] = [10.0, 15.0, 20.0];
pub const SHAPES_PER_CONDITION: usize = 5;
pub const REPEAT_TARGETS: usize = 3;
pub const REPEAT_INITS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRow {
    pub trial: usize,
    pub condition: String,
    pub result: TrialResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub condition: String,
    pub trials: usize,
    pub failures: usize,
    pub mean_e_mean: f64,
    pub std_e_mean: f64,
    pub median_e_mean: f64,
    pub mean_e_max: f64,
    pub std_e_max: f64,
    pub median_e_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub name: String,
    pub rows: Vec<TrialRow>,
    pub summary: Vec<SummaryRow>,
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn summarize(condition: &str, results: &[&TrialResult]) -> SummaryRow {
    let em: Vec<f64> = results.iter().map(|r| r.final_e_mean).collect();
    let ex: Vec<f64> = results.iter().map(|r| r.final_e_max).collect();
    let (mean_e_mean, std_e_mean) = mean_std(&em);
    let (mean_e_max, std_e_max) = mean_std(&ex);
    SummaryRow {
        condition: condition.to_string(),
        trials: results.len(),
        failures: results.iter().filter(|r| r.failure.is_some()).count(),
        mean_e_mean,
        std_e_mean,
        median_e_mean: median(&em),
        mean_e_max,
        std_e_max,
        median_e_max: median(&ex),
    }
}

struct Job<'r> {
    condition: String,
    deploy: DeployConfig,
    init: &'r ConfigRecord,
    target: &'r ConfigRecord,
}

fn run_jobs(
    dep: &Deployment,
    name: &str,
    jobs: &[Job],
    seed: u64,
    conditions: &[String],
) -> Result<ExperimentReport, EnvError> {
    let results: Vec<Result<TrialResult, EnvError>> = jobs
        .par_iter()
        .enumerate()
        .map(|(i, j)| {
            let s = seed_for(seed, Stream::Eval, i as u64);
            run_closed_loop(dep, &j.deploy, j.init, j.target, s)
        })
        .collect();
    let mut rows = Vec::with_capacity(jobs.len());
    for (i, (j, r)) in jobs.iter().zip(results).enumerate() {
        rows.push(TrialRow {
            trial: i,
            condition: j.condition.clone(),
            result: r?,
        });
    }
    let mut summary: Vec<SummaryRow> = conditions
        .iter()
        .map(|c| {
            let rs: Vec<&TrialResult> = rows.iter().filter(|r| &r.condition == c).map(|r| &r.result).collect();
            summarize(c, &rs)
        })
        .collect();
    if conditions.len() > 1 {
        let all: Vec<&TrialResult> = rows.iter().map(|r| &r.result).collect();
        summary.push(summarize("all", &all));
    }
    Ok(ExperimentReport {
        name: name.to_string(),
        rows,
        summary,
    })
}

/// Three distinct targets, each with eight distinct initial records
/// (excluding the target), drawn from `dataset`.
pub fn select_repeatability(
    dataset: &Dataset,
    seed: u64,
) -> Result<Vec<(ConfigRecord, Vec<ConfigRecord>)>, DatasetError> {
    let n = dataset.len();
    if n < REPEAT_TARGETS + REPEAT_INITS {
        return Err(DatasetError::EmptyDataset);
    }
    let mut rng = rng_for(seed, Stream::Eval, 1 << 20);
    let targets = sample(&mut rng, n, REPEAT_TARGETS);
    Ok(targets
        .iter()
        .map(|t| {
            let mut inits = Vec::with_capacity(REPEAT_INITS);
            for i in sample(&mut rng, n, REPEAT_INITS + 1).iter() {
                if i != t && inits.len() < REPEAT_INITS {
                    inits.push(dataset.records[i].clone());
                }
            }
            (dataset.records[t].clone(), inits)
        })
        .collect())
}

/// Every (target, init) combination as a closed-loop trial.
pub fn repeatability_experiment(
    dep: &Deployment,
    deploy: &DeployConfig,
    sets: &[(ConfigRecord, Vec<ConfigRecord>)],
    seed: u64,
) -> Result<ExperimentReport, EnvError> {
    let mut jobs = Vec::new();
    let mut conditions = Vec::new();
    for (t, inits) in sets {
        let c = format!("target_{}", t.id);
        for i in inits {
            jobs.push(Job {
                condition: c.clone(),
                deploy: deploy.clone(),
                init: i,
                target: t,
            });
        }
        conditions.push(c);
    }
    let mut report = run_jobs(dep, "repeatability", &jobs, seed, &conditions)?;
    if conditions.len() == 1 {
        let all: Vec<&TrialResult> = report.rows.iter().map(|r| &r.result).collect();
        report.summary.push(summarize("all", &all));
    }
    Ok(report)
}

/// Settled shapes for one generalization condition, drawn from the default
/// grid scaled to the condition's length.
pub fn condition_shapes(
    dep: &Deployment,
    deploy: &DeployConfig,
    count: usize,
    seed: u64,
    condition: u64,
) -> Result<Vec<ConfigRecord>, EnvError> {
    let params = deploy.rod_params(dep.rod);
    let rod = Rod::new(params.clone())?;
    let margin = dep.env.reach_margin;
    let candidates: Vec<_> = GridSpec::default_for_length(deploy.length)
        .candidates()
        .into_iter()
        .filter(|(l, r)| separation_ok((r - l).norm(), params.total_length) && params.is_reachable(*l, *r, margin))
        .collect();
    let mut rng = rng_for(seed, Stream::Eval, (1 << 21) + condition);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < 100 * count.max(1) {
        attempts += 1;
        let (l, r) = candidates[rng.random_range(0..candidates.len())];
        let sign = if rng.random::<bool>() { 1 } else { -1 };
        if out.iter().any(|c: &ConfigRecord| c.left == l && c.right == r && c.buckle_sign == sign) {
            continue;
        }
        if let Ok(rec) = settle_record(&rod, out.len(), l, r, sign, dep.env.state_points, rng.random()) {
            out.push(rec);
        }
    }
    Ok(out)
}

pub fn condition_label(stiffness_scale: f64, length: f64) -> String {
    format!("k{stiffness_scale:.3}_L{length}")
}

/// Per condition: five shapes, each the target once with the other four as
/// initial shapes.
pub fn generalization_experiment(
    dep: &Deployment,
    base: &DeployConfig,
    grid: &[(f64, f64)],
    seed: u64,
) -> Result<ExperimentReport, EnvError> {
    let mut shapes = Vec::new();
    for (ci, &(scale, length)) in grid.iter().enumerate() {
        let d = DeployConfig {
            stiffness_scale: scale,
            length,
            ..base.clone()
        };
        let s = condition_shapes(dep, &d, SHAPES_PER_CONDITION, seed, ci as u64)?;
        shapes.push((condition_label(scale, length), d, s));
    }
    let mut jobs = Vec::new();
    for (label, d, s) in &shapes {
        for t in s {
            for i in s.iter().filter(|i| i.id != t.id) {
                jobs.push(Job {
                    condition: label.clone(),
                    deploy: d.clone(),
                    init: i,
                    target: t,
                });
            }
        }
    }
    let conditions: Vec<String> = shapes.iter().map(|s| s.0.clone()).collect();
    run_jobs(dep, "generalization", &jobs, seed, &conditions)
}

pub fn default_generalization_grid() -> Vec<(f64, f64)> {
    let mut g = Vec::new();
    for s in stiffness_scales() {
        for l in LENGTHS {
            g.push((s, l));
        }
    }
    g
}

/// `count` independent (init, target) draws from `dataset`.
pub fn sample_pairs(
    dataset: &Dataset,
    count: usize,
    seed: u64,
) -> Result<Vec<(ConfigRecord, ConfigRecord)>, DatasetError> {
    let mut rng = rng_for(seed, Stream::Eval, 1 << 22);
    (0..count)
        .map(|_| dataset.sample_pair(&mut rng).map(|(a, b)| (a.clone(), b.clone())))
        .collect()
}

/// Closed- and open-loop trials on the same pairs under the same deployment.
pub fn paired_ablation(
    dep: &Deployment,
    deploy: &DeployConfig,
    pairs: &[(ConfigRecord, ConfigRecord)],
    seed: u64,
) -> Result<Vec<(TrialResult, TrialResult)>, EnvError> {
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, (a, b))| {
            let s = seed_for(seed, Stream::Eval, i as u64);
            Ok((
                run_closed_loop(dep, deploy, a, b, s)?,
                run_open_loop(dep, deploy, a, b, s)?,
            ))
        })
        .collect()
}

/// Closed-loop trials in the unperturbed training simulator.
pub fn holdout_evaluation(
    dep: &Deployment,
    pairs: &[(ConfigRecord, ConfigRecord)],
    seed: u64,
) -> Result<Vec<TrialResult>, EnvError> {
    let mut deploy = DeployConfig::unperturbed(dep.rod.total_length);
    deploy.max_duration = dep.env.horizon_steps as f64 * dep.env.control_dt;
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, (a, b))| run_closed_loop(dep, &deploy, a, b, seed_for(seed, Stream::Eval, i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvConfig;
    use crate::policy_trainer::{Checkpoint, MlpParams, RunningNorm, TrainProgress};
    use crate::rod::RodParams;

    fn still_checkpoint() -> Checkpoint {
        // zero weights: the policy always outputs zero velocity
        Checkpoint {
            params: MlpParams::zeros(
                &crate::policy_trainer::ppo::ACTOR_SIZES,
                &crate::policy_trainer::ppo::CRITIC_SIZES,
            ),
            obs_norm: RunningNorm::new(crate::env::OBS_DIM, 10.0),
            progress: TrainProgress::default(),
            optimizer: None,
            reward_norm: None,
        }
    }

    #[test]
    fn median_and_spread() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }

    #[test]
    fn generalization_counts_and_regulation() {
        let ck = still_checkpoint();
        let rod = RodParams::new(1.0, 0.2);
        let env = EnvConfig::default();
        let dep = Deployment { checkpoint: &ck, rod: &rod, env: &env };
        let base = DeployConfig {
            max_duration: 0.1,
            ..DeployConfig::unperturbed(15.0)
        };
        let grid = [(1.0, 15.0), (stiffness_scales()[0], 10.0)];
        let rep = generalization_experiment(&dep, &base, &grid, 3).unwrap();
        assert_eq!(rep.rows.len(), 2 * 20);
        assert_eq!(rep.summary.len(), 3);
        assert_eq!(rep.summary[0].trials, 20);
        // a still policy leaves an at-rest settled shape in place
        for r in &rep.rows {
            assert!((r.result.final_e_mean - r.result.initial_e_mean()).abs() < 1e-6);
        }
    }

    #[test]
    fn repeatability_selection_shape() {
        let rod = RodParams::new(1.0, 0.2);
        let grid = GridSpec {
            left_x: crate::dataset::AxisRange::new(-5.0, -4.0, 0.5),
            left_y: crate::dataset::AxisRange::fixed(0.0),
            right_x: crate::dataset::AxisRange::new(4.0, 5.0, 0.5),
            right_y: crate::dataset::AxisRange::new(-1.0, 1.0, 1.0),
        };
        let ds = Dataset::generate(&grid, &rod, 10, 0).unwrap();
        let sets = select_repeatability(&ds, 5).unwrap();
        assert_eq!(sets.len(), 3);
        for (t, inits) in &sets {
            assert_eq!(inits.len(), 8);
            assert!(inits.iter().all(|i| i.id != t.id));
        }
        let ck = still_checkpoint();
        let env = EnvConfig::default();
        let dep = Deployment { checkpoint: &ck, rod: &rod, env: &env };
        let d = DeployConfig {
            max_duration: 0.05,
            ..DeployConfig::default()
        };
        let rep = repeatability_experiment(&dep, &d, &sets, 1).unwrap();
        assert_eq!(rep.rows.len(), 24);
        assert_eq!(rep.summary.last().unwrap().condition, "all");
        assert_eq!(rep.summary.last().unwrap().trials, 24);
    }
}
