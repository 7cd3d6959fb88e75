//! Joint policy and applicability-classifier training.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::applicability::{
    exhaustive_accuracy, label_applicability, masked_distribution, train_classifier_epoch, ClassifierOptimizer,
    ClassifierSource, KnowledgeSource, LabeledRows, Mask, MASKED_LOGIT,
};
use crate::error::{Error, Result};
use crate::gridworld::{is_applicable, optimal_return, reset_with, step, Action, EnvSpec, EnvState, Observation};
use crate::nn::Extractor;
use crate::policy::{
    compute_gae, policy_forward, ppo_update, PolicyNet, PolicyOptimizer, PpoConfig, PpoStats, RolloutBatch,
};

/// One rollout-buffer row.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: EnvState,
    pub obs: Observation,
    pub action: usize,
    pub reward: f64,
    pub next_state: EnvState,
    pub next_obs: Observation,
    /// 1 iff the action changed the state.
    pub label: u8,
    pub mask: Mask,
    /// The exploration gate selected the knowledge-derived mask.
    pub mask_applied: bool,
    /// The mask was all zeros and sampling ignored it.
    pub fallback: bool,
    /// The action came from the reuse expert.
    pub from_expert: bool,
    pub log_prob: f64,
    pub value: f64,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EpsilonSchedule {
    Constant {
        value: f64,
    },
    Linear {
        start: f64,
        end: f64,
        over_iterations: usize,
    },
    /// `(from_iteration, value)` steps; the first must start at iteration 0.
    Piecewise {
        steps: Vec<(usize, f64)>,
    },
}

impl EpsilonSchedule {
    pub fn constant(value: f64) -> Self {
        EpsilonSchedule::Constant { value }
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64| (0.0..=1.0).contains(&v);
        let ok = match self {
            EpsilonSchedule::Constant { value } => in_range(*value),
            EpsilonSchedule::Linear {
                start,
                end,
                over_iterations,
            } => in_range(*start) && in_range(*end) && *over_iterations > 0,
            EpsilonSchedule::Piecewise { steps } => {
                steps.first().is_some_and(|s| s.0 == 0)
                    && steps.windows(2).all(|w| w[0].0 < w[1].0)
                    && steps.iter().all(|s| in_range(s.1))
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("malformed epsilon schedule {self:?}")))
        }
    }

    /// Value for iteration `k`.
    pub fn at(&self, k: usize) -> f64 {
        match self {
            EpsilonSchedule::Constant { value } => *value,
            EpsilonSchedule::Linear {
                start,
                end,
                over_iterations,
            } => {
                let t = (k as f64 / *over_iterations as f64).min(1.0);
                (start + (end - start) * t).clamp(0.0, 1.0)
            }
            EpsilonSchedule::Piecewise { steps } => steps
                .iter()
                .take_while(|(from, _)| *from <= k)
                .last()
                .map_or(steps[0].1, |s| s.1),
        }
    }
}

/// `eps_{k+1}` from `eps_k` at iteration `k`.
pub fn schedule_epsilon(schedule: &EpsilonSchedule, eps_k: f64, k: usize) -> Result<f64> {
    schedule.validate()?;
    if !(0.0..=1.0).contains(&eps_k) {
        return Err(Error::Config(format!("epsilon {eps_k} outside [0, 1]")));
    }
    Ok(schedule.at(k + 1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Upper bound on iterations (K).
    pub iterations: usize,
    /// Rollout workers (N).
    pub workers: usize,
    /// Steps collected per worker per iteration.
    pub rollout_len: usize,
    /// Classifier epochs per iteration (M).
    pub classifier_epochs: usize,
    pub classifier_batch: usize,
    pub classifier_lr: f64,
    /// Probability that the knowledge-derived mask is applied on a step.
    pub epsilon: EpsilonSchedule,
    pub tau: f64,
    pub train_classifier: bool,
    pub ppo: PpoConfig,
    pub max_env_steps: usize,
    pub early_stop_reward: f64,
    pub early_stop_patience: usize,
    pub policy_extractor: Extractor,
    pub classifier_extractor: Extractor,
    /// Track exhaustive classifier accuracy each iteration.
    pub track_accuracy: bool,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            workers: 1,
            rollout_len: 2048,
            classifier_epochs: 10,
            classifier_batch: 64,
            classifier_lr: 3e-4,
            epsilon: EpsilonSchedule::constant(0.5),
            tau: 0.5,
            train_classifier: false,
            ppo: PpoConfig::default(),
            max_env_steps: 100_000,
            early_stop_reward: 0.99,
            early_stop_patience: 10,
            policy_extractor: Extractor::Compact,
            classifier_extractor: Extractor::Compact,
            track_accuracy: true,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.iterations >= 1, "iterations must be at least 1"),
            (self.workers >= 1, "workers must be at least 1"),
            (self.rollout_len >= 1, "rollout_len must be at least 1"),
            (self.classifier_epochs >= 1, "classifier_epochs must be at least 1"),
            (self.classifier_batch >= 2, "classifier_batch must be at least 2"),
            (self.classifier_lr > 0.0, "classifier_lr must be positive"),
            (self.tau > 0.0 && self.tau < 1.0, "tau must lie in (0, 1)"),
            (self.early_stop_patience >= 1, "early_stop_patience must be at least 1"),
            (
                self.max_env_steps >= self.rollout_len * self.workers,
                "max_env_steps must cover at least one rollout",
            ),
        ];
        if let Some((_, msg)) = checks.iter().find(|(ok, _)| !ok) {
            return Err(Error::Config(format!("trainer: {msg}")));
        }
        self.epsilon.validate()?;
        self.ppo.validate()
    }

    pub fn steps_per_iteration(&self) -> usize {
        self.workers * self.rollout_len
    }
}

/// A frozen expert policy sampled with probability `psi` during collection.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    pub net: PolicyNet,
    /// Expert output index for each target action, if any.
    pub action_map: Vec<Option<usize>>,
    pub psi: f64,
}

impl Expert {
    /// Maps actions by name.
    pub fn new(net: PolicyNet, expert_actions: &[String], target: &[Action], psi: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&psi) {
            return Err(Error::Config(format!("reuse probability {psi} outside [0, 1]")));
        }
        if expert_actions.len() != net.num_actions() {
            return Err(Error::Architecture(
                "expert action list does not match its policy head".into(),
            ));
        }
        let action_map: Vec<Option<usize>> = target
            .iter()
            .map(|a| expert_actions.iter().position(|n| n == a.name()))
            .collect();
        if action_map.iter().all(Option::is_none) {
            return Err(Error::ActionSetMismatch {
                source_actions: expert_actions.to_vec(),
                target_actions: crate::gridworld::action_names(target),
            });
        }
        Ok(Self { net, action_map, psi })
    }

    /// Expert logits over the target action set; unknown actions get the
    /// masked logit.
    pub fn logits(&self, obs: &Observation) -> Result<Vec<f32>> {
        let (raw, _) = policy_forward(&self.net, obs)?;
        Ok(self
            .action_map
            .iter()
            .map(|m| m.map_or(MASKED_LOGIT as f32, |i| raw[i]))
            .collect())
    }
}

/// Outcome of one reuse draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReuseDraw {
    pub action: usize,
    pub from_expert: bool,
    /// Log-probability of `action` under the current policy's masked distribution.
    pub log_prob: f64,
}

/// With probability `psi` act from the expert's masked distribution, otherwise
/// from the current policy's.
pub fn policy_reuse_sample<G: Rng + ?Sized>(
    current_logits: &[f32],
    expert: Option<(&Expert, &Observation)>,
    mask: &Mask,
    rng: &mut G,
) -> Result<ReuseDraw> {
    let own = masked_distribution(current_logits, mask)?;
    if let Some((ex, obs)) = expert {
        if rng.gen::<f64>() < ex.psi {
            let dist = masked_distribution(&ex.logits(obs)?, mask)?;
            let action = dist.sample(rng);
            return Ok(ReuseDraw {
                action,
                from_expert: true,
                log_prob: own.log_probs[action],
            });
        }
    }
    let action = own.sample(rng);
    Ok(ReuseDraw {
        action,
        from_expert: false,
        log_prob: own.log_probs[action],
    })
}

/// Per-episode statistics recorded when an episode ends.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeStats {
    pub normalized_return: f64,
    pub inapplicable: usize,
    pub length: usize,
}

/// One environment instance with its generator and running episode tallies.
#[derive(Clone, Debug)]
pub struct Worker {
    pub state: EnvState,
    pub obs: Observation,
    pub rng: ChaCha8Rng,
    episode_return: f64,
    episode_inapplicable: usize,
    best_return: f64,
}

impl Worker {
    pub fn new(spec: &EnvSpec, seed: u64, optimal: &HashMap<(usize, usize), f64>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (state, obs) = reset_with(spec, &mut rng)?;
        let best_return = optimal[&state.agent_pos];
        Ok(Self {
            state,
            obs,
            rng,
            episode_return: 0.0,
            episode_inapplicable: 0,
            best_return,
        })
    }
}

/// Read-only context for collection.
pub struct CollectContext<'a> {
    pub env: &'a EnvSpec,
    pub policy: &'a PolicyNet,
    pub source: Option<&'a KnowledgeSource>,
    pub epsilon: f64,
    pub tau: f64,
    pub expert: Option<&'a Expert>,
    pub optimal: &'a HashMap<(usize, usize), f64>,
}

#[derive(Clone, Debug, Default)]
pub struct Rollout {
    pub transitions: Vec<Transition>,
    pub episodes: Vec<EpisodeStats>,
    pub fallbacks: usize,
    /// Value of the state following the last transition.
    pub last_value: f64,
}

/// Best return from every start cell.
pub fn optimal_returns(spec: &EnvSpec) -> HashMap<(usize, usize), f64> {
    spec.layout
        .start_cells()
        .into_iter()
        .map(|p| (p, optimal_return(spec, &EnvState::at(p))))
        .collect()
}

/// Runs `steps` environment steps on `worker`, resetting finished episodes.
pub fn collect_trajectories(ctx: &CollectContext<'_>, worker: &mut Worker, steps: usize) -> Result<Rollout> {
    if !(0.0..=1.0).contains(&ctx.epsilon) {
        return Err(Error::Config(format!("epsilon {} outside [0, 1]", ctx.epsilon)));
    }
    let n_actions = ctx.env.num_actions();
    let mut out = Rollout {
        transitions: Vec::with_capacity(steps),
        ..Rollout::default()
    };
    for _ in 0..steps {
        let apply = worker.rng.gen::<f64>() < ctx.epsilon;
        let mask = match ctx.source {
            Some(src) => src.gated_mask(&worker.state, &worker.obs, ctx.tau, apply)?,
            None => Mask::ones(n_actions),
        };
        let (logits, value) = policy_forward(ctx.policy, &worker.obs)?;
        let expert = ctx.expert.map(|e| (e, &worker.obs));
        let draw = policy_reuse_sample(&logits, expert, &mask, &mut worker.rng)?;
        let fallback = mask.all_zeros();
        if fallback {
            out.fallbacks += 1;
            log::debug!("all-zero mask at {:?}; sampling unmasked", worker.state);
        }
        let action = ctx.env.actions[draw.action];
        let result = step(ctx.env, &worker.state, action)?;
        let label = label_applicability(&worker.state, &result.state);
        worker.episode_return += result.reward;
        worker.episode_inapplicable += usize::from(label == 0);
        out.transitions.push(Transition {
            state: worker.state,
            obs: std::mem::replace(&mut worker.obs, result.obs.clone()),
            action: draw.action,
            reward: result.reward,
            next_state: result.state,
            next_obs: result.obs,
            label,
            mask,
            mask_applied: apply,
            fallback,
            from_expert: draw.from_expert,
            log_prob: draw.log_prob,
            value: value as f64,
            done: result.done,
        });
        worker.state = result.state;
        if result.done {
            let normalized = if worker.best_return > 0.0 {
                worker.episode_return / worker.best_return
            } else {
                0.0
            };
            out.episodes.push(EpisodeStats {
                normalized_return: normalized,
                inapplicable: worker.episode_inapplicable,
                length: result.state.steps_elapsed,
            });
            let (state, obs) = reset_with(ctx.env, &mut worker.rng)?;
            worker.best_return = ctx.optimal[&state.agent_pos];
            worker.state = state;
            worker.obs = obs;
            worker.episode_return = 0.0;
            worker.episode_inapplicable = 0;
        }
    }
    out.last_value = policy_forward(ctx.policy, &worker.obs)?.1 as f64;
    Ok(out)
}

/// One row of the metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub env_steps: usize,
    pub mean_reward_norm: f64,
    pub mean_inapplicable_per_episode: f64,
    pub classifier_loss: Option<f64>,
    pub classifier_accuracy: Option<f64>,
    pub epsilon: f64,
    pub zero_mask_fallbacks: usize,
    pub seed: u64,
}

pub const METRICS_HEADER: [&str; 9] = [
    "iteration",
    "env_steps",
    "mean_reward_norm",
    "mean_inapplicable_per_episode",
    "classifier_loss",
    "classifier_accuracy",
    "epsilon",
    "zero_mask_fallbacks",
    "seed",
];

pub fn write_metrics<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<metrics>", e))?;
    Ok(())
}

pub fn save_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics(rows, std::io::BufWriter::new(file))
}

pub fn load_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(Error::Config(format!(
            "{} does not have the metrics header",
            path.display()
        )));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Everything an iteration produced besides the metrics row.
#[derive(Clone, Debug)]
pub struct IterationReport {
    pub metrics: MetricsRow,
    pub ppo: PpoStats,
    pub transitions: Vec<Transition>,
    pub episodes: Vec<EpisodeStats>,
}

/// Training state carried across iterations.
pub struct Trainer {
    pub config: TrainerConfig,
    pub env: EnvSpec,
    pub policy: PolicyNet,
    pub policy_opt: PolicyOptimizer,
    pub source: Option<KnowledgeSource>,
    pub classifier_opt: Option<ClassifierOptimizer>,
    pub expert: Option<Expert>,
    pub workers: Vec<Worker>,
    /// Classifier snapshot with the highest exhaustive accuracy seen so far.
    pub best_classifier: Option<(f64, ClassifierSource)>,
    epsilon: f64,
    iteration: usize,
    env_steps: usize,
    update_rng: ChaCha8Rng,
    optimal: HashMap<(usize, usize), f64>,
    last_reward: f64,
    last_inapplicable: f64,
    streak: usize,
}

impl Trainer {
    /// Fresh policy from the config seed.
    pub fn new(config: TrainerConfig, env: EnvSpec, source: Option<KnowledgeSource>) -> Result<Self> {
        let mut master = ChaCha8Rng::seed_from_u64(config.seed);
        let policy = PolicyNet::new(
            config.policy_extractor,
            &env.observation_shape(),
            env.num_actions(),
            master.gen(),
        )?;
        Self::with_policy(config, env, source, policy)
    }

    /// Starts from the given policy weights with fresh optimizer state.
    pub fn with_policy(
        config: TrainerConfig,
        env: EnvSpec,
        source: Option<KnowledgeSource>,
        policy: PolicyNet,
    ) -> Result<Self> {
        config.validate()?;
        env.validate()?;
        if policy.num_actions() != env.num_actions() || policy.obs_shape() != env.observation_shape() {
            return Err(Error::Architecture(format!(
                "policy with {} actions over {:?} does not fit task `{}`",
                policy.num_actions(),
                policy.obs_shape(),
                env.layout.name()
            )));
        }
        if let Some(src) = &source {
            if src.num_actions() != env.num_actions() {
                return Err(Error::Architecture(format!(
                    "knowledge source answers {} actions, task has {}",
                    src.num_actions(),
                    env.num_actions()
                )));
            }
        }
        let mut master = ChaCha8Rng::seed_from_u64(config.seed);
        let _policy_seed: u64 = master.gen();
        let update_rng = ChaCha8Rng::seed_from_u64(master.gen());
        let optimal = optimal_returns(&env);
        let workers = (0..config.workers)
            .map(|_| Worker::new(&env, master.gen(), &optimal))
            .collect::<Result<Vec<_>>>()?;
        let classifier_opt = source
            .as_ref()
            .and_then(KnowledgeSource::classifier)
            .map(|c| ClassifierOptimizer::new(&c.net, config.classifier_lr));
        Ok(Self {
            policy_opt: PolicyOptimizer::new(&policy, config.ppo.lr),
            epsilon: config.epsilon.at(0),
            config,
            env,
            policy,
            source,
            classifier_opt,
            expert: None,
            workers,
            best_classifier: None,
            iteration: 0,
            env_steps: 0,
            update_rng,
            optimal,
            last_reward: 0.0,
            last_inapplicable: 0.0,
            streak: 0,
        })
    }

    pub fn with_expert(mut self, expert: Expert) -> Self {
        self.expert = Some(expert);
        self
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn env_steps(&self) -> usize {
        self.env_steps
    }

    /// Collection, PPO update, optional classifier update and schedule step.
    pub fn train_iteration(&mut self) -> Result<IterationReport> {
        let epsilon = self.epsilon;
        let mut transitions = Vec::with_capacity(self.config.steps_per_iteration());
        let mut episodes = Vec::new();
        let mut fallbacks = 0;
        let mut batch = RolloutBatch {
            obs_shape: self.env.observation_shape().to_vec(),
            ..RolloutBatch::default()
        };
        for w in 0..self.workers.len() {
            let ctx = CollectContext {
                env: &self.env,
                policy: &self.policy,
                source: self.source.as_ref(),
                epsilon,
                tau: self.config.tau,
                expert: self.expert.as_ref(),
                optimal: &self.optimal,
            };
            let rollout = collect_trajectories(&ctx, &mut self.workers[w], self.config.rollout_len)?;
            let rewards: Vec<f64> = rollout.transitions.iter().map(|t| t.reward).collect();
            let values: Vec<f64> = rollout.transitions.iter().map(|t| t.value).collect();
            let dones: Vec<bool> = rollout.transitions.iter().map(|t| t.done).collect();
            let (adv, ret) = compute_gae(
                &rewards,
                &values,
                &dones,
                rollout.last_value,
                self.config.ppo.gamma,
                self.config.ppo.gae_lambda,
            )?;
            for t in &rollout.transitions {
                batch.obs.extend_from_slice(t.obs.data());
                batch.actions.push(t.action);
                batch.masks.push(t.mask.clone());
                batch.log_probs.push(t.log_prob);
            }
            batch.rewards.extend(rewards);
            batch.values.extend(values);
            batch.dones.extend(dones);
            batch.advantages.extend(adv);
            batch.returns.extend(ret);
            fallbacks += rollout.fallbacks;
            episodes.extend(rollout.episodes);
            transitions.extend(rollout.transitions);
        }
        self.env_steps += transitions.len();
        let ppo = ppo_update(
            &mut self.policy,
            &mut self.policy_opt,
            &batch,
            &self.config.ppo,
            &mut self.update_rng,
        )
        .map_err(|e| self.abort(e))?;
        let classifier_loss = if self.config.train_classifier {
            self.train_classifier(&transitions).map_err(|e| self.abort(e))?
        } else {
            None
        };
        let classifier_accuracy = match (
            self.config.track_accuracy,
            self.source.as_ref().and_then(|s| s.classifier()),
        ) {
            (true, Some(_)) => Some(exhaustive_accuracy(
                self.source.as_ref().expect("source with a classifier"),
                &self.env,
                self.config.tau,
            )?),
            _ => None,
        };
        if let (Some(acc), Some(c)) = (classifier_accuracy, self.source.as_ref().and_then(|s| s.classifier())) {
            if self.best_classifier.as_ref().is_none_or(|(best, _)| acc > *best) {
                self.best_classifier = Some((acc, c.clone()));
            }
        }
        if !episodes.is_empty() {
            let n = episodes.len() as f64;
            self.last_reward = episodes.iter().map(|e| e.normalized_return).sum::<f64>() / n;
            self.last_inapplicable = episodes.iter().map(|e| e.inapplicable as f64).sum::<f64>() / n;
        }
        let metrics = MetricsRow {
            iteration: self.iteration,
            env_steps: self.env_steps,
            mean_reward_norm: self.last_reward,
            mean_inapplicable_per_episode: self.last_inapplicable,
            classifier_loss,
            classifier_accuracy,
            epsilon,
            zero_mask_fallbacks: fallbacks,
            seed: self.config.seed,
        };
        self.epsilon = schedule_epsilon(&self.config.epsilon, epsilon, self.iteration)?;
        self.iteration += 1;
        if metrics.mean_reward_norm >= self.config.early_stop_reward {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        Ok(IterationReport {
            metrics,
            ppo,
            transitions,
            episodes,
        })
    }

    fn abort(&self, e: Error) -> Error {
        Error::RunAborted(format!(
            "{e} (task {}, seed {}, iteration {}, env_steps {}, epsilon {}, last mean reward {:.4})",
            self.env.layout.name(),
            self.config.seed,
            self.iteration,
            self.env_steps,
            self.epsilon,
            self.last_reward
        ))
    }

    fn train_classifier(&mut self, transitions: &[Transition]) -> Result<Option<f64>> {
        let (Some(source), Some(opt)) = (self.source.as_mut(), self.classifier_opt.as_mut()) else {
            return Ok(None);
        };
        let Some(classifier) = source.classifier_mut() else {
            return Ok(None);
        };
        if transitions.is_empty() {
            return Ok(None);
        }
        let mut obs = Vec::with_capacity(transitions.len() * transitions[0].obs.len());
        let mut slots = Vec::with_capacity(transitions.len());
        let mut labels = Vec::with_capacity(transitions.len());
        for t in transitions {
            obs.extend_from_slice(t.obs.data());
            slots.push(classifier.slot(t.action));
            labels.push(t.label);
        }
        let shape = self.env.observation_shape();
        let rows = LabeledRows {
            obs: &obs,
            obs_shape: &shape,
            slots: &slots,
            labels: &labels,
        };
        let mut total = 0.0;
        for _ in 0..self.config.classifier_epochs {
            total += train_classifier_epoch(
                &mut classifier.net,
                opt,
                &rows,
                self.config.classifier_batch,
                &mut self.update_rng,
            )?;
        }
        for t in transitions {
            classifier.record_label(t.action, t.label);
        }
        Ok(Some(total / self.config.classifier_epochs as f64))
    }

    /// True once the step budget or iteration cap is exhausted or the reward
    /// has stayed at the early-stop level for the configured patience.
    pub fn finished(&self) -> bool {
        self.iteration >= self.config.iterations
            || self.env_steps + self.config.steps_per_iteration() > self.config.max_env_steps
            || self.streak >= self.config.early_stop_patience
    }

    /// Iterates until [`Trainer::finished`], returning the metrics table.
    pub fn run(&mut self) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while !self.finished() {
            let report = self.train_iteration()?;
            log::info!(
                "{} seed {} iter {} steps {} reward {:.3} inapplicable {:.2} eps {:.2}",
                self.env.layout.name(),
                self.config.seed,
                report.metrics.iteration,
                report.metrics.env_steps,
                report.metrics.mean_reward_norm,
                report.metrics.mean_inapplicable_per_episode,
                report.metrics.epsilon
            );
            rows.push(report.metrics);
        }
        Ok(rows)
    }
}

/// Trained networks and the metrics table of a finished run.
pub struct RunOutput {
    pub policy: PolicyNet,
    pub source: Option<KnowledgeSource>,
    pub best_classifier: Option<(f64, ClassifierSource)>,
    pub metrics: Vec<MetricsRow>,
}

pub fn run(config: TrainerConfig, env: EnvSpec, source: Option<KnowledgeSource>) -> Result<RunOutput> {
    let mut trainer = Trainer::new(config, env, source)?;
    let metrics = trainer.run()?;
    Ok(RunOutput {
        policy: trainer.policy,
        source: trainer.source,
        best_classifier: trainer.best_classifier,
        metrics,
    })
}

/// True iff `is_applicable` agrees with every stored label.
pub fn labels_match_oracle(env: &EnvSpec, transitions: &[Transition]) -> bool {
    transitions
        .iter()
        .all(|t| (t.label == 1) == is_applicable(env, &t.state, env.actions[t.action]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        assert_eq!(EpsilonSchedule::constant(0.5).at(17), 0.5);
        let lin = EpsilonSchedule::Linear {
            start: 0.5,
            end: 0.1,
            over_iterations: 100,
        };
        assert!((lin.at(50) - 0.3).abs() < 1e-12);
        assert!((lin.at(500) - 0.1).abs() < 1e-12);
        let pw = EpsilonSchedule::Piecewise {
            steps: vec![(0, 0.5), (10, 0.25), (20, 0.1)],
        };
        assert_eq!(pw.at(9), 0.5);
        assert_eq!(pw.at(10), 0.25);
        assert_eq!(pw.at(19), 0.25);
        assert_eq!(pw.at(20), 0.1);
        assert_eq!(schedule_epsilon(&pw, 0.5, 9).unwrap(), 0.25);
    }

    #[test]
    fn malformed_schedules() {
        let bad = [
            EpsilonSchedule::constant(1.5),
            EpsilonSchedule::Piecewise { steps: vec![] },
            EpsilonSchedule::Piecewise { steps: vec![(1, 0.5)] },
            EpsilonSchedule::Piecewise {
                steps: vec![(0, 0.5), (5, 0.2), (5, 0.1)],
            },
        ];
        for s in bad {
            assert!(s.validate().is_err(), "{s:?}");
        }
    }
}
