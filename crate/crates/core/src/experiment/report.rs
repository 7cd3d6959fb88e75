use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::aggregate::{median, resample, step_grid};
use super::{run_experiment, ExperimentConfig, ExperimentResult, Mode};
use crate::applicability::{heatmap, FlagContext, KnowledgeSource};
use crate::error::{Error, Result};
use crate::gridworld::{pruned_fraction, EnvSpec, Task};
use crate::trainer::{EpsilonSchedule, MetricsRow};

pub const REWARD_THRESHOLD: f64 = 0.9;
const FINAL_WINDOW: usize = 10;

/// First grid step whose interpolated reward reaches `threshold`, or `None`.
pub fn steps_to_threshold(rows: &[MetricsRow], budget: usize, threshold: f64) -> Option<usize> {
    let grid = step_grid(budget);
    let curve = resample(rows, &grid, |r| Some(r.mean_reward_norm))?;
    grid.iter().zip(curve).find(|(_, y)| *y >= threshold).map(|(&x, _)| x)
}

/// Results of one mode ready for comparison.
#[derive(Clone, Debug)]
pub struct ModeRuns {
    pub label: String,
    pub task: String,
    pub budget: usize,
    pub runs: Vec<Vec<MetricsRow>>,
}

impl ModeRuns {
    pub fn new(label: impl Into<String>, task: Task, budget: usize, runs: Vec<Vec<MetricsRow>>) -> Self {
        Self {
            label: label.into(),
            task: task.name().to_string(),
            budget,
            runs,
        }
    }

    pub fn from_result(label: impl Into<String>, result: &ExperimentResult) -> Self {
        Self::new(
            label,
            result.config.task,
            result.config.trainer.max_env_steps,
            result.metrics(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeSummary {
    pub label: String,
    /// Median over seeds; seeds that never reach the threshold count as the budget.
    pub median_steps_to_threshold: f64,
    pub seeds_reached: usize,
    pub seeds: usize,
    pub final_reward: f64,
    /// Mean over seeds of the mean of the last iterations.
    pub final_inapplicable: f64,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub task: String,
    pub budget: usize,
    pub modes: Vec<ModeSummary>,
}

impl Comparison {
    pub fn get(&self, label: &str) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.label == label)
    }
}

pub fn final_inapplicable(rows: &[MetricsRow]) -> f64 {
    let tail = &rows[rows.len().saturating_sub(FINAL_WINDOW)..];
    tail.iter().map(|r| r.mean_inapplicable_per_episode).sum::<f64>() / tail.len().max(1) as f64
}

pub fn summarize(label: &str, runs: &[Vec<MetricsRow>], budget: usize) -> Result<ModeSummary> {
    if runs.is_empty() || runs.iter().any(Vec::is_empty) {
        return Err(Error::Empty(format!("mode `{label}` has no metrics")));
    }
    let hits: Vec<Option<usize>> = runs
        .iter()
        .map(|r| steps_to_threshold(r, budget, REWARD_THRESHOLD))
        .collect();
    let steps: Vec<f64> = hits.iter().map(|h| h.unwrap_or(budget) as f64).collect();
    let n = runs.len() as f64;
    Ok(ModeSummary {
        label: label.to_string(),
        median_steps_to_threshold: median(&steps),
        seeds_reached: hits.iter().flatten().count(),
        seeds: runs.len(),
        final_reward: runs.iter().map(|r| r[r.len() - 1].mean_reward_norm).sum::<f64>() / n,
        final_inapplicable: runs.iter().map(|r| final_inapplicable(r)).sum::<f64>() / n,
        rank: 0,
    })
}

/// Steps-to-threshold, final reward and final inapplicable count per mode,
/// ranked by steps then final reward. Equal entries share a rank.
pub fn compare_modes(results: &[ModeRuns]) -> Result<Comparison> {
    let first = results
        .first()
        .ok_or_else(|| Error::Empty("nothing to compare".into()))?;
    for r in results {
        if r.budget != first.budget {
            return Err(Error::Config(format!(
                "misaligned grids: `{}` runs to {} steps, `{}` to {}",
                first.label, first.budget, r.label, r.budget
            )));
        }
        if r.task != first.task {
            return Err(Error::Config(format!(
                "modes come from different tasks: `{}` and `{}`",
                first.task, r.task
            )));
        }
    }
    let mut modes = results
        .iter()
        .map(|r| summarize(&r.label, &r.runs, r.budget))
        .collect::<Result<Vec<_>>>()?;
    let key = |m: &ModeSummary| (m.median_steps_to_threshold, -m.final_reward);
    let mut order: Vec<usize> = (0..modes.len()).collect();
    order.sort_by(|&a, &b| {
        let (ka, kb) = (key(&modes[a]), key(&modes[b]));
        ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1))
    });
    for (pos, &i) in order.iter().enumerate() {
        let rank = if pos > 0 && key(&modes[order[pos - 1]]) == key(&modes[i]) {
            modes[order[pos - 1]].rank
        } else {
            pos + 1
        };
        modes[i].rank = rank;
    }
    Ok(Comparison {
        task: first.task.clone(),
        budget: first.budget,
        modes,
    })
}

pub fn write_comparison<W: Write>(cmp: &Comparison, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for m in &cmp.modes {
        w.serialize(m)?;
    }
    w.flush().map_err(|e| Error::io("<comparison>", e))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub median_steps_to_threshold: f64,
    pub seeds_reached: usize,
    pub final_reward: f64,
    pub final_inapplicable: f64,
    /// Final reward below the threshold.
    pub flagged: bool,
}

pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub results: Vec<ExperimentResult>,
}

impl SweepReport {
    pub fn flagged(&self) -> Vec<f64> {
        self.rows.iter().filter(|r| r.flagged).map(|r| r.epsilon).collect()
    }
}

pub fn sweep_row(epsilon: f64, runs: &[Vec<MetricsRow>], budget: usize) -> Result<SweepRow> {
    let s = summarize(&format!("epsilon {epsilon}"), runs, budget)?;
    Ok(SweepRow {
        epsilon,
        median_steps_to_threshold: s.median_steps_to_threshold,
        seeds_reached: s.seeds_reached,
        final_reward: s.final_reward,
        final_inapplicable: s.final_inapplicable,
        flagged: s.final_reward < REWARD_THRESHOLD,
    })
}

pub fn save_sweep(rows: &[SweepRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Runs `learn_classifier` once per constant ε under `base.out/epsilon_<ε>`
/// and writes the combined `sweep.csv`.
pub fn epsilon_sweep(base: &ExperimentConfig, epsilons: &[f64]) -> Result<SweepReport> {
    if epsilons.is_empty() {
        return Err(Error::Config("the sweep needs at least one epsilon".into()));
    }
    if let Some(e) = epsilons.iter().find(|e| !(0.0..=1.0).contains(*e)) {
        return Err(Error::Config(format!("epsilon {e} outside [0, 1]")));
    }
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for &eps in epsilons {
        let mut cfg = base.clone();
        cfg.mode = Mode::LearnClassifier;
        cfg.trainer.train_classifier = true;
        cfg.trainer.epsilon = EpsilonSchedule::constant(eps);
        cfg.out = base.out.join(format!("epsilon_{eps}"));
        let result = run_experiment(&cfg)?;
        rows.push(sweep_row(eps, &result.metrics(), cfg.trainer.max_env_steps)?);
        results.push(result);
    }
    std::fs::create_dir_all(&base.out).map_err(|e| Error::io(&base.out, e))?;
    save_sweep(&rows, &base.out.join("sweep.csv"))?;
    Ok(SweepReport { rows, results })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeatmapReport {
    pub action: String,
    pub context: String,
    pub mismatches: usize,
}

/// One heatmap CSV per action and reachable flag context for `source`, the
/// matching oracle CSV, and `heatmaps.csv` with per-map mismatch counts.
pub fn emit_heatmaps(spec: &EnvSpec, source: &KnowledgeSource, tau: f64, dir: &Path) -> Result<Vec<HeatmapReport>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let oracle = KnowledgeSource::Oracle(spec.clone());
    let task = spec.layout.name();
    let mut reports = Vec::new();
    for ctx in FlagContext::reachable(spec)? {
        for &a in &spec.actions {
            let learned = heatmap(source, spec, a, tau, ctx)?;
            let truth = heatmap(&oracle, spec, a, tau, ctx)?;
            let stem = format!("{task}_{}_{}", a.name(), ctx.label());
            learned.save_csv(&dir.join(format!("{stem}.csv")))?;
            truth.save_csv(&dir.join(format!("{stem}_oracle.csv")))?;
            reports.push(HeatmapReport {
                action: a.name().to_string(),
                context: ctx.label(),
                mismatches: learned.mismatches(&truth),
            });
        }
    }
    let path = dir.join("heatmaps.csv");
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in &reports {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PruningRow {
    pub task: String,
    pub pruned_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruningReport {
    pub rows: Vec<PruningRow>,
    pub doorkey_exceeds_xisland: bool,
    pub maze_in_band: bool,
}

impl PruningReport {
    pub fn fraction(&self, task: Task) -> f64 {
        self.rows
            .iter()
            .find(|r| r.task == task.name())
            .map_or(f64::NAN, |r| r.pruned_fraction)
    }

    pub fn holds(&self) -> bool {
        self.doorkey_exceeds_xisland && self.maze_in_band
    }
}

/// Exact pruned fraction of every shipped task, optionally written to `out`.
pub fn pruning_report(out: Option<&Path>) -> Result<PruningReport> {
    let rows = Task::ALL
        .iter()
        .map(|&t| {
            Ok(PruningRow {
                task: t.name().to_string(),
                pruned_fraction: pruned_fraction(&t.spec())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let frac = |t: Task| {
        rows.iter()
            .find(|r| r.task == t.name())
            .map_or(f64::NAN, |r| r.pruned_fraction)
    };
    let report = PruningReport {
        doorkey_exceeds_xisland: frac(Task::DoorKey1) > frac(Task::XIsland1),
        maze_in_band: (0.4..=0.6).contains(&frac(Task::Maze)),
        rows,
    };
    if let Some(path) = out {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for r in &report.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}
