//! ICL runs with on-disk artifacts, single or swept over seeds.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use icl_core::adjust::ConstraintFn;
use icl_core::crl::{PolicyNet, TrueConstraint};
use icl_core::env::Env;
use icl_core::flow::{ExpertNllStats, FlowModel};
use icl_core::icl::{run_variant, IclConfig, IclObserver, IclResult, IterationRecord, Variant};
#[cfg(test)]
use icl_core::io::open_csv;
use icl_core::io::{create_csv, write_accrual, write_constraint_grid};
use icl_core::metrics::accrual;
use icl_core::Trajectory;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const METRICS_SCHEMA: &str = "icl-metrics/1";
pub const AGGREGATE_SCHEMA: &str = "icl-aggregate/1";

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub env: String,
    pub seed: u64,
    pub iteration: usize,
    pub cmse: Option<f64>,
    pub nad: f64,
    pub policy_weight: f64,
    pub uniform_fallback: bool,
}

/// One row of `aggregate.csv`: a metric at one iteration across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub metric: String,
    pub iteration: usize,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

/// Written next to the config snapshot; together with the expert file it
/// pins down everything a run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunInfo {
    pub variant: Variant,
    pub expert: PathBuf,
}

pub fn write_rows<T: Serialize>(path: &Path, schema: &str, rows: &[T]) -> icl_core::Result<()> {
    let mut w = create_csv(path, schema)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path, schema: &str) -> icl_core::Result<Vec<T>> {
    let mut r = open_csv(path, schema)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

/// Streams every artifact of a run into its directory as the run progresses.
struct ArtifactWriter {
    dir: PathBuf,
    env: Env,
    seed: u64,
    rows: Vec<MetricsRow>,
}

impl ArtifactWriter {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

impl IclObserver for ArtifactWriter {
    fn flow_fitted(&mut self, flow: &FlowModel, stats: &ExpertNllStats) -> icl_core::Result<()> {
        flow.save_json(&self.path("checkpoints/flow.json"))?;
        fs::write(self.path("checkpoints/expert_nll.json"), serde_json::to_string_pretty(stats)?)?;
        Ok(())
    }

    fn iteration_done(
        &mut self,
        record: &IterationRecord,
        constraint: &ConstraintFn,
        policy: &PolicyNet,
        policy_data: &[Trajectory],
    ) -> icl_core::Result<()> {
        let i = record.iteration;
        write_constraint_grid(&self.path(&format!("constraint_iter{i}.csv")), &self.env, constraint)?;
        write_accrual(&self.path(&format!("accrual_iter{i}.csv")), &self.env, &accrual(policy_data, &self.env)?)?;
        record.training.write_csv(&self.path(&format!("training_iter{i}.csv")))?;
        constraint.save_json(&self.path(&format!("checkpoints/constraint_iter{i}.json")))?;
        policy.save_json(&self.path(&format!("checkpoints/policy_iter{i}.json")))?;
        self.rows.push(MetricsRow {
            env: self.env.id().name(),
            seed: self.seed,
            iteration: i,
            cmse: record.cmse,
            nad: record.nad,
            policy_weight: record.policy_weight,
            uniform_fallback: record.uniform_fallback,
        });
        write_rows(&self.path("metrics.csv"), METRICS_SCHEMA, &self.rows)
    }
}

/// Run one configuration into `dir`, which is created if needed.
pub fn run_one(cfg: &IclConfig, expert: &[Trajectory], info: &RunInfo, dir: &Path) -> Result<IclResult> {
    fs::create_dir_all(dir.join("checkpoints")).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(info)?)?;
    let env = Env::new(cfg.env.clone())?;
    write_accrual(&dir.join("accrual_expert.csv"), &env, &accrual(expert, &env)?)?;
    if env.has_true_constraint() {
        write_constraint_grid(&dir.join("constraint_true.csv"), &env, &TrueConstraint(&env))?;
    }
    let mut writer = ArtifactWriter {
        dir: dir.to_path_buf(),
        env,
        seed: cfg.seed,
        rows: Vec::new(),
    };
    let result = run_variant(cfg, expert, info.variant, &mut writer)
        .with_context(|| format!("ICL run with seed {} in {}", cfg.seed, dir.display()))?;
    result.constraint.save_json(&dir.join("checkpoints/constraint.json"))?;
    result.policy.save_json(&dir.join("checkpoints/policy.json"))?;
    Ok(result)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and population standard deviation across seeds of CMSE and NAD at
/// every iteration reached by all seeds, plus a `final` row per metric that
/// uses each seed's last iteration.
pub fn aggregate(runs: &[IclResult]) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    let common = runs.iter().map(|r| r.records.len()).min().unwrap_or(0);
    let metrics: [(&str, fn(&IterationRecord) -> Option<f64>); 2] =
        [("cmse", |r| r.cmse), ("nad", |r| Some(r.nad))];
    for (name, get) in metrics {
        let mut push = |label: String, iteration: usize, values: Vec<f64>| {
            if values.len() == runs.len() {
                let (mean, std) = mean_std(&values);
                rows.push(AggregateRow {
                    metric: label,
                    iteration,
                    mean,
                    std,
                    seeds: values.len(),
                });
            }
        };
        for i in 0..common {
            push(name.to_string(), i, runs.iter().filter_map(|r| get(&r.records[i])).collect());
        }
        let last = runs.iter().filter_map(|r| r.records.last().and_then(get)).collect();
        push(format!("{name}_final"), common.saturating_sub(1), last);
    }
    rows
}

/// Run every seed under `base` into `out/seed-<s>`, up to `workers` at once.
/// With more than one seed, `out/aggregate.csv` summarizes them.
pub fn sweep(
    base: &IclConfig,
    seeds: &[u64],
    expert: &[Trajectory],
    info: &RunInfo,
    out: &Path,
    workers: usize,
) -> Result<Vec<IclResult>> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build()?;
    let runs: Vec<IclResult> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let cfg = IclConfig { seed, ..base.clone() };
                run_one(&cfg, expert, info, &out.join(format!("seed-{seed}")))
            })
            .collect::<Result<_>>()
    })?;
    if runs.len() > 1 {
        write_rows(&out.join("aggregate.csv"), AGGREGATE_SCHEMA, &aggregate(&runs))?;
    }
    Ok(runs)
}
