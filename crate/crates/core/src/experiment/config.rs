use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{Action, Task};
use crate::trainer::{EpsilonSchedule, TrainerConfig};

pub const DEFAULT_PSI: f64 = 0.25;
/// Gate for transferred classifiers: the mask is ignored on one step in four.
pub const TRANSFER_EPSILON: f64 = 0.75;
pub const TRANSFER_CLASSIFIER_LR: f64 = 1e-4;

fn default_psi() -> f64 {
    DEFAULT_PSI
}

fn default_partial_actions() -> Vec<String> {
    Action::MOVES.iter().map(|a| a.name().to_string()).collect()
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_true() -> bool {
    true
}

/// Knowledge and initialization used by every seed of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Mode {
    BaselinePpo,
    FullKnowledge,
    PartialKnowledge {
        #[serde(default = "default_partial_actions")]
        actions: Vec<String>,
        #[serde(default)]
        with_classifier: bool,
    },
    LearnClassifier,
    TransferClassifier {
        checkpoint: PathBuf,
        #[serde(default)]
        freeze: bool,
    },
    WarmStart {
        checkpoint: PathBuf,
        #[serde(default)]
        share_actions: bool,
    },
    PolicyReuse {
        checkpoint: PathBuf,
        #[serde(default = "default_psi")]
        psi: f64,
    },
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::BaselinePpo => "baseline_ppo",
            Mode::FullKnowledge => "full_knowledge",
            Mode::PartialKnowledge { .. } => "partial_knowledge",
            Mode::LearnClassifier => "learn_classifier",
            Mode::TransferClassifier { .. } => "transfer_classifier",
            Mode::WarmStart { .. } => "warm_start",
            Mode::PolicyReuse { .. } => "policy_reuse",
        }
    }

    pub fn checkpoint(&self) -> Option<&Path> {
        match self {
            Mode::TransferClassifier { checkpoint, .. }
            | Mode::WarmStart { checkpoint, .. }
            | Mode::PolicyReuse { checkpoint, .. } => Some(checkpoint),
            _ => None,
        }
    }

    pub fn uses_classifier(&self) -> bool {
        matches!(
            self,
            Mode::LearnClassifier
                | Mode::TransferClassifier { .. }
                | Mode::PartialKnowledge {
                    with_classifier: true,
                    ..
                }
        )
    }

    /// Trainer defaults for this mode before user overrides.
    pub fn trainer_defaults(&self) -> TrainerConfig {
        let mut c = TrainerConfig::default();
        match self {
            Mode::BaselinePpo | Mode::WarmStart { .. } | Mode::PolicyReuse { .. } => {
                c.epsilon = EpsilonSchedule::constant(0.0);
                c.track_accuracy = false;
            }
            Mode::FullKnowledge => c.epsilon = EpsilonSchedule::constant(1.0),
            Mode::PartialKnowledge { with_classifier, .. } => {
                c.train_classifier = *with_classifier;
                if !with_classifier {
                    c.epsilon = EpsilonSchedule::constant(1.0);
                }
            }
            Mode::LearnClassifier => c.train_classifier = true,
            Mode::TransferClassifier { freeze, .. } => {
                c.train_classifier = !freeze;
                c.epsilon = EpsilonSchedule::constant(TRANSFER_EPSILON);
                c.classifier_lr = TRANSFER_CLASSIFIER_LR;
            }
        }
        c
    }

    pub fn validate(&self, task: Task) -> Result<()> {
        match self {
            Mode::PartialKnowledge { actions, .. } => {
                if actions.is_empty() {
                    return Err(Error::Config(
                        "partial_knowledge needs at least one covered action".into(),
                    ));
                }
                let spec = task.spec();
                for name in actions {
                    let a: Action = name.parse()?;
                    if !spec.actions.contains(&a) {
                        return Err(Error::Config(format!("action `{a}` is not in task `{task}`")));
                    }
                }
                Ok(())
            }
            Mode::PolicyReuse { psi, .. } if !(0.0..=1.0).contains(psi) => {
                Err(Error::Config(format!("psi {psi} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    task: String,
    mode: Mode,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    out: Option<PathBuf>,
    #[serde(default = "default_true")]
    save_checkpoints: bool,
    #[serde(default)]
    trainer: toml::Table,
}

/// One task, one mode, several seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub save_checkpoints: bool,
    /// Fully resolved trainer settings. The per-seed `seed` field is overwritten.
    pub trainer: TrainerConfig,
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    task: &'a str,
    seeds: &'a [u64],
    out: &'a Path,
    save_checkpoints: bool,
    mode: &'a Mode,
    trainer: &'a TrainerConfig,
}

fn merge(base: &mut toml::Table, overrides: &toml::Table) {
    for (k, v) in overrides {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if k != "epsilon" => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl ExperimentConfig {
    /// Config with the mode's trainer defaults.
    pub fn new(task: Task, mode: Mode, seeds: Vec<u64>, out: impl Into<PathBuf>) -> Result<Self> {
        let cfg = Self {
            task,
            trainer: mode.trainer_defaults(),
            mode,
            seeds,
            out: out.into(),
            save_checkpoints: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `runs/<task>_<mode>`.
    pub fn default_out(task: Task, mode: &Mode) -> PathBuf {
        PathBuf::from("runs").join(format!("{}_{}", task.name(), mode.name()))
    }

    /// Parses TOML text. Keys in the `[trainer]` table override the mode's defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let task: Task = raw.task.parse()?;
        let mut base = toml::Table::try_from(raw.mode.trainer_defaults()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, &raw.trainer);
        let trainer: TrainerConfig = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("trainer: {e}")))?;
        let out = raw.out.unwrap_or_else(|| Self::default_out(task, &raw.mode));
        let cfg = Self {
            task,
            mode: raw.mode,
            seeds: raw.seeds,
            out,
            save_checkpoints: raw.save_checkpoints,
            trainer,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("seeds must be distinct, got {:?}", self.seeds)));
        }
        self.mode.validate(self.task)?;
        self.trainer.validate()
    }

    /// TOML with every default spelled out.
    pub fn to_toml(&self) -> Result<String> {
        let resolved = ResolvedConfig {
            task: self.task.name(),
            seeds: &self.seeds,
            out: &self.out,
            save_checkpoints: self.save_checkpoints,
            mode: &self.mode,
            trainer: &self.trainer,
        };
        toml::to_string(&resolved).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn trainer_for_seed(&self, seed: u64) -> TrainerConfig {
        TrainerConfig {
            seed,
            ..self.trainer.clone()
        }
    }
}
