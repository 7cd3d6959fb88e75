//! Seeded experiment runs, aggregation and report export.

mod aggregate;
mod config;
mod report;

pub use aggregate::{
    aggregate, interpolate, load_aggregate, mean_se, median, reaggregate, resample, save_aggregate, step_grid,
    write_aggregate, AggregateRow, GRID_STEP,
};
pub use config::{ExperimentConfig, Mode, DEFAULT_PSI, TRANSFER_CLASSIFIER_LR, TRANSFER_EPSILON};
pub use report::{
    compare_modes, emit_heatmaps, epsilon_sweep, final_inapplicable, pruning_report, save_sweep, steps_to_threshold,
    summarize, sweep_row, write_comparison, Comparison, HeatmapReport, ModeRuns, ModeSummary, PruningReport,
    PruningRow, SweepReport, SweepRow, REWARD_THRESHOLD,
};

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::applicability::{ClassifierNet, ClassifierSource, KnowledgeSource};
use crate::error::{Error, Result};
use crate::gridworld::{action_names, Action, EnvSpec};
use crate::policy::PolicyNet;
use crate::trainer::{save_metrics, MetricsRow, Trainer, TrainerConfig};
use crate::transfer::{
    adapt_classifier, load_checkpoint, reuse_expert, save_checkpoint, warm_start, warm_start_shared, Checkpoint,
};

pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const CONFIG_FILE: &str = "config.toml";

pub fn seed_file(seed: u64) -> String {
    format!("seed_{seed}.csv")
}

/// Networks and metrics of one finished seed.
pub struct SeedRun {
    pub seed: u64,
    pub metrics: Vec<MetricsRow>,
    pub policy: PolicyNet,
    pub source: Option<KnowledgeSource>,
    pub best_classifier: Option<(f64, ClassifierSource)>,
}

/// Outputs of [`run_experiment`].
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub runs: Vec<SeedRun>,
    pub aggregate: Vec<AggregateRow>,
}

impl ExperimentResult {
    pub fn metrics(&self) -> Vec<Vec<MetricsRow>> {
        self.runs.iter().map(|r| r.metrics.clone()).collect()
    }

    pub fn dir(&self) -> &Path {
        &self.config.out
    }

    pub fn policy_checkpoint(&self, seed: u64) -> PathBuf {
        checkpoint_path(&self.config.out, seed, "policy")
    }

    pub fn classifier_checkpoint(&self, seed: u64) -> PathBuf {
        checkpoint_path(&self.config.out, seed, "classifier")
    }

    pub fn best_classifier_checkpoint(&self, seed: u64) -> PathBuf {
        checkpoint_path(&self.config.out, seed, "classifier_best")
    }
}

pub fn checkpoint_path(dir: &Path, seed: u64, what: &str) -> PathBuf {
    dir.join("checkpoints").join(format!("seed_{seed}_{what}.ckpt"))
}

fn classifier_seed(seed: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rand::Rng::gen(&mut rng)
}

fn fresh_classifier(cfg: &TrainerConfig, env: &EnvSpec) -> Result<ClassifierSource> {
    let net = ClassifierNet::new(
        cfg.classifier_extractor,
        &env.observation_shape(),
        action_names(&env.actions),
        classifier_seed(cfg.seed),
    )?;
    Ok(ClassifierSource::untrained(net))
}

fn parse_actions(names: &[String]) -> Result<Vec<Action>> {
    names.iter().map(|n| n.parse()).collect()
}

/// Trainer for one seed of `mode`, with any checkpoint already loaded.
pub fn build_trainer(mode: &Mode, cfg: TrainerConfig, env: EnvSpec, ckpt: Option<&Checkpoint>) -> Result<Trainer> {
    let need = || ckpt.ok_or_else(|| Error::Config(format!("mode `{}` needs a checkpoint", mode.name())));
    match mode {
        Mode::BaselinePpo => Trainer::new(cfg, env, None),
        Mode::FullKnowledge => {
            let src = KnowledgeSource::Oracle(env.clone());
            Trainer::new(cfg, env, Some(src))
        }
        Mode::PartialKnowledge {
            actions,
            with_classifier,
        } => {
            let covered = parse_actions(actions)?;
            let src = if *with_classifier {
                KnowledgeSource::composite(env.clone(), &covered, fresh_classifier(&cfg, &env)?)?
            } else {
                KnowledgeSource::partial(env.clone(), &covered)?
            };
            Trainer::new(cfg, env, Some(src))
        }
        Mode::LearnClassifier => {
            let src = KnowledgeSource::Classifier(fresh_classifier(&cfg, &env)?);
            Trainer::new(cfg, env, Some(src))
        }
        Mode::TransferClassifier { .. } => {
            let src = adapt_classifier(need()?, &env.actions)?;
            Trainer::new(cfg, env, Some(src))
        }
        Mode::WarmStart { share_actions, .. } => {
            let policy = if *share_actions {
                let fresh = Trainer::new(cfg.clone(), env.clone(), None)?.policy;
                warm_start_shared(need()?, &env, &fresh)?
            } else {
                warm_start(need()?, &env)?
            };
            Trainer::with_policy(cfg, env, None, policy)
        }
        Mode::PolicyReuse { psi, .. } => {
            let expert = reuse_expert(need()?, &env, *psi)?;
            Ok(Trainer::new(cfg, env, None)?.with_expert(expert))
        }
    }
}

fn save_networks(cfg: &ExperimentConfig, run: &SeedRun, env_steps: u64) -> Result<()> {
    let dir = cfg.out.join("checkpoints");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let task = cfg.task.name();
    let env = cfg.task.spec();
    let policy = Checkpoint::policy(run.policy.clone(), task, env_steps, action_names(&env.actions))?;
    save_checkpoint(&policy, &checkpoint_path(&cfg.out, run.seed, "policy"))?;
    if let Some(c) = run.source.as_ref().and_then(KnowledgeSource::classifier) {
        let ckpt = Checkpoint::classifier(c.net.clone(), task, env_steps);
        save_checkpoint(&ckpt, &checkpoint_path(&cfg.out, run.seed, "classifier"))?;
    }
    if let Some((_, c)) = &run.best_classifier {
        let ckpt = Checkpoint::classifier(c.net.clone(), task, env_steps);
        save_checkpoint(&ckpt, &checkpoint_path(&cfg.out, run.seed, "classifier_best"))?;
    }
    Ok(())
}

fn run_seed(cfg: &ExperimentConfig, seed: u64, ckpt: Option<&Checkpoint>) -> Result<SeedRun> {
    let env = cfg.task.spec();
    let mut trainer = build_trainer(&cfg.mode, cfg.trainer_for_seed(seed), env, ckpt)?;
    let mut rows = Vec::new();
    while !trainer.finished() {
        match trainer.train_iteration() {
            Ok(report) => rows.push(report.metrics),
            Err(e) => {
                let partial = cfg.out.join(format!("seed_{seed}.partial.csv"));
                save_metrics(&rows, &partial)?;
                return Err(e);
            }
        }
    }
    save_metrics(&rows, &cfg.out.join(seed_file(seed)))?;
    let run = SeedRun {
        seed,
        metrics: rows,
        policy: trainer.policy,
        source: trainer.source,
        best_classifier: trainer.best_classifier,
    };
    if cfg.save_checkpoints {
        save_networks(cfg, &run, trainer_steps(&run.metrics))?;
    }
    Ok(run)
}

fn trainer_steps(rows: &[MetricsRow]) -> u64 {
    rows.last().map_or(0, |r| r.env_steps as u64)
}

/// Runs every seed, writing `config.toml`, `seed_<s>.csv`, `aggregate.csv`
/// and per-seed checkpoints under `config.out`. A failing seed aborts the
/// experiment and leaves completed files in place.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    std::fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    let cfg_path = config.out.join(CONFIG_FILE);
    std::fs::write(&cfg_path, config.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
    let ckpt = config.mode.checkpoint().map(load_checkpoint).transpose()?;
    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        runs.push(run_seed(config, seed, ckpt.as_ref())?);
    }
    let metrics: Vec<Vec<MetricsRow>> = runs.iter().map(|r| r.metrics.clone()).collect();
    let agg = aggregate(&metrics, config.trainer.max_env_steps)?;
    let sources: Vec<String> = config.seeds.iter().map(|&s| seed_file(s)).collect();
    save_aggregate(&agg, &sources, &config.out.join(AGGREGATE_FILE))?;
    Ok(ExperimentResult {
        config: config.clone(),
        runs,
        aggregate: agg,
    })
}

/// Per-seed metrics of a finished experiment directory.
pub fn load_experiment(dir: &Path) -> Result<(ExperimentConfig, Vec<Vec<MetricsRow>>)> {
    let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let runs = config
        .seeds
        .iter()
        .map(|&s| crate::trainer::load_metrics(&dir.join(seed_file(s))))
        .collect::<Result<Vec<_>>>()?;
    Ok((config, runs))
}
