use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use super::classifier::ClassifierNet;
use super::mask::Mask;
use crate::error::{Error, Result};
use crate::gridworld::{enumerate_states, is_applicable, observe_into, Action, EnvSpec, EnvState, Observation};
use crate::nn::Tensor;

/// A classifier network bound to a task's action set.
///
/// Target actions map onto the net's one-hot slots. An action is pending
/// until the classifier has trained on both an applicable and an
/// inapplicable example of it; pending actions are answered permissively.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierSource {
    pub net: ClassifierNet,
    action_map: Vec<usize>,
    pending: Vec<bool>,
    /// `[inapplicable seen, applicable seen]` per target action.
    seen: Vec<[bool; 2]>,
}

impl ClassifierSource {
    /// Trained net with the identity mapping: nothing is pending.
    pub fn new(net: ClassifierNet) -> Self {
        let n = net.num_actions();
        Self::identity(net, vec![false; n])
    }

    /// Fresh net with the identity mapping: every action is pending.
    pub fn untrained(net: ClassifierNet) -> Self {
        let n = net.num_actions();
        Self::identity(net, vec![true; n])
    }

    fn identity(net: ClassifierNet, pending: Vec<bool>) -> Self {
        let n = net.num_actions();
        Self::with_mapping(net, (0..n).collect(), pending).expect("identity mapping fits")
    }

    pub fn with_mapping(net: ClassifierNet, action_map: Vec<usize>, pending: Vec<bool>) -> Result<Self> {
        if action_map.len() != pending.len() {
            return Err(Error::shape(
                "classifier action map",
                &[action_map.len()],
                &[pending.len()],
            ));
        }
        if let Some(&bad) = action_map.iter().find(|&&i| i >= net.num_actions()) {
            return Err(Error::Usage(format!(
                "action map slot {bad} outside the classifier's {}",
                net.num_actions()
            )));
        }
        let seen = pending.iter().map(|&p| [!p, !p]).collect();
        Ok(Self {
            net,
            action_map,
            pending,
            seen,
        })
    }

    pub fn num_actions(&self) -> usize {
        self.action_map.len()
    }

    /// One-hot slot of target action `a`.
    pub fn slot(&self, a: usize) -> usize {
        self.action_map[a]
    }

    pub fn pending(&self) -> &[bool] {
        &self.pending
    }

    /// Notes that the classifier trained on `label` for target action `a`.
    pub fn record_label(&mut self, a: usize, label: u8) {
        self.seen[a][usize::from(label != 0)] = true;
        if self.seen[a] == [true, true] {
            self.pending[a] = false;
        }
    }

    /// `[rows][target actions]` probabilities in inference mode.
    pub fn probabilities(&self, obs: &Tensor) -> Result<Vec<Vec<f64>>> {
        let raw = self.net.probabilities(obs)?;
        Ok(raw
            .into_iter()
            .map(|row| {
                self.action_map
                    .iter()
                    .zip(&self.pending)
                    .map(|(&slot, &pending)| if pending { 1.0 } else { row[slot] })
                    .collect()
            })
            .collect())
    }
}

/// Provider of the applicability function `C(s, a)`.
#[derive(Clone, Debug, PartialEq)]
pub enum KnowledgeSource {
    /// Exact answers from the environment.
    Oracle(EnvSpec),
    /// Exact answers for covered actions, permissive elsewhere.
    Partial {
        spec: EnvSpec,
        covered: Vec<bool>,
    },
    Classifier(ClassifierSource),
    /// Partial knowledge first, the classifier for uncovered actions.
    Composite {
        spec: EnvSpec,
        covered: Vec<bool>,
        classifier: ClassifierSource,
    },
}

fn coverage(spec: &EnvSpec, actions: &[Action]) -> Result<Vec<bool>> {
    let mut covered = vec![false; spec.num_actions()];
    for a in actions {
        let i = spec
            .actions
            .iter()
            .position(|b| b == a)
            .ok_or_else(|| Error::Config(format!("action `{a}` is not in task `{}`", spec.layout.name())))?;
        covered[i] = true;
    }
    Ok(covered)
}

fn oracle_row(spec: &EnvSpec, state: &EnvState) -> Vec<f64> {
    spec.actions
        .iter()
        .map(|&a| if is_applicable(spec, state, a) { 1.0 } else { 0.0 })
        .collect()
}

impl KnowledgeSource {
    pub fn partial(spec: EnvSpec, actions: &[Action]) -> Result<Self> {
        let covered = coverage(&spec, actions)?;
        Ok(KnowledgeSource::Partial { spec, covered })
    }

    pub fn composite(spec: EnvSpec, actions: &[Action], classifier: ClassifierSource) -> Result<Self> {
        let covered = coverage(&spec, actions)?;
        if classifier.num_actions() != spec.num_actions() {
            return Err(Error::ActionSetMismatch {
                source_actions: classifier.net.actions.clone(),
                target_actions: crate::gridworld::action_names(&spec.actions),
            });
        }
        Ok(KnowledgeSource::Composite {
            spec,
            covered,
            classifier,
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            KnowledgeSource::Oracle(_) => "oracle",
            KnowledgeSource::Partial { .. } => "partial",
            KnowledgeSource::Classifier(_) => "classifier",
            KnowledgeSource::Composite { .. } => "composite",
        }
    }

    pub fn classifier(&self) -> Option<&ClassifierSource> {
        match self {
            KnowledgeSource::Classifier(c) | KnowledgeSource::Composite { classifier: c, .. } => Some(c),
            _ => None,
        }
    }

    pub fn classifier_mut(&mut self) -> Option<&mut ClassifierSource> {
        match self {
            KnowledgeSource::Classifier(c) | KnowledgeSource::Composite { classifier: c, .. } => Some(c),
            _ => None,
        }
    }

    /// Actions answered by exact knowledge regardless of the exploration gate.
    fn trusted(&self) -> Option<(&EnvSpec, &[bool])> {
        match self {
            KnowledgeSource::Composite { spec, covered, .. } => Some((spec, covered)),
            _ => None,
        }
    }

    /// `C(s, a)` for every action of a batch of states. `obs` must stack the
    /// observations of `states`.
    pub fn probabilities_batch(&self, states: &[EnvState], obs: &Tensor) -> Result<Vec<Vec<f64>>> {
        match self {
            KnowledgeSource::Oracle(spec) => Ok(states.iter().map(|s| oracle_row(spec, s)).collect()),
            KnowledgeSource::Partial { spec, covered } => Ok(states
                .iter()
                .map(|s| {
                    oracle_row(spec, s)
                        .into_iter()
                        .zip(covered)
                        .map(|(p, &c)| if c { p } else { 1.0 })
                        .collect()
                })
                .collect()),
            KnowledgeSource::Classifier(c) => c.probabilities(obs),
            KnowledgeSource::Composite {
                spec,
                covered,
                classifier,
            } => {
                let learned = classifier.probabilities(obs)?;
                Ok(states
                    .iter()
                    .zip(learned)
                    .map(|(s, row)| {
                        oracle_row(spec, s)
                            .into_iter()
                            .zip(row)
                            .zip(covered)
                            .map(|((exact, p), &c)| if c { exact } else { p })
                            .collect()
                    })
                    .collect())
            }
        }
    }

    pub fn probabilities(&self, state: &EnvState, obs: &Observation) -> Result<Vec<f64>> {
        let batch = as_batch(obs)?;
        Ok(self
            .probabilities_batch(std::slice::from_ref(state), &batch)?
            .pop()
            .expect("one row"))
    }

    pub fn classify(&self, state: &EnvState, obs: &Observation, a: Action) -> Result<f64> {
        let probs = self.probabilities(state, obs)?;
        probs
            .get(a.index())
            .copied()
            .ok_or_else(|| Error::Usage(format!("action `{a}` outside the source's action set")))
    }

    /// Mask used during collection. With `apply` false the mask is all ones,
    /// except that a composite source still enforces its exact partial knowledge.
    pub fn gated_mask(&self, state: &EnvState, obs: &Observation, tau: f64, apply: bool) -> Result<Mask> {
        if apply {
            return build_mask(self, state, obs, tau);
        }
        match self.trusted() {
            None => Ok(Mask::ones(self.num_actions())),
            Some((spec, covered)) => Ok(Mask::new(
                spec.actions
                    .iter()
                    .zip(covered)
                    .map(|(&a, &c)| !c || is_applicable(spec, state, a))
                    .collect(),
            )),
        }
    }

    pub fn num_actions(&self) -> usize {
        match self {
            KnowledgeSource::Oracle(spec)
            | KnowledgeSource::Partial { spec, .. }
            | KnowledgeSource::Composite { spec, .. } => spec.num_actions(),
            KnowledgeSource::Classifier(c) => c.num_actions(),
        }
    }
}

fn as_batch(obs: &Observation) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(obs.shape());
    obs.clone().reshape(shape)
}

/// Stacked observations of `states`.
pub fn observe_batch(spec: &EnvSpec, states: &[EnvState]) -> Tensor {
    let shape = spec.observation_shape();
    let len: usize = shape.iter().product();
    let mut data = vec![0.0; states.len() * len];
    for (s, chunk) in states.iter().zip(data.chunks_mut(len)) {
        observe_into(spec, s, chunk);
    }
    let mut full = vec![states.len()];
    full.extend_from_slice(&shape);
    Tensor::new(full, data).expect("observation batch shape")
}

/// Mask bit `i` is set iff `C(s, a_i) >= tau`.
pub fn build_mask(source: &KnowledgeSource, state: &EnvState, obs: &Observation, tau: f64) -> Result<Mask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("threshold {tau} outside (0, 1)")));
    }
    Ok(Mask::from_probabilities(&source.probabilities(state, obs)?, tau))
}

/// `1` iff the transition changed the state (identity distance, zero tolerance).
pub fn label_applicability(s: &EnvState, next: &EnvState) -> u8 {
    u8::from(s.key() != next.key())
}

/// Enumerated states whose `C(s, a)` reaches `tau`.
pub fn initiation_set(source: &KnowledgeSource, spec: &EnvSpec, a: Action, tau: f64) -> Result<Vec<EnvState>> {
    let states = enumerate_states(spec)?;
    let probs = source.probabilities_batch(&states, &observe_batch(spec, &states))?;
    Ok(states
        .into_iter()
        .zip(probs)
        .filter(|(_, p)| p[a.index()] >= tau)
        .map(|(s, _)| s)
        .collect())
}

/// Fraction of enumerated `(state, action)` pairs on which the thresholded
/// source agrees with the environment.
pub fn exhaustive_accuracy(source: &KnowledgeSource, spec: &EnvSpec, tau: f64) -> Result<f64> {
    let states = enumerate_states(spec)?;
    let probs = source.probabilities_batch(&states, &observe_batch(spec, &states))?;
    let mut correct = 0usize;
    for (s, row) in states.iter().zip(&probs) {
        for (&a, &p) in spec.actions.iter().zip(row) {
            if (p >= tau) == is_applicable(spec, s, a) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / (states.len() * spec.num_actions()) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeatCell {
    Applicable,
    Inapplicable,
    NotACell,
}

impl HeatCell {
    pub fn value(self) -> i8 {
        match self {
            HeatCell::Applicable => 1,
            HeatCell::Inapplicable => 0,
            HeatCell::NotACell => -1,
        }
    }
}

/// Flag context of a position-indexed heatmap.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct FlagContext {
    pub has_key: bool,
    pub door_open: bool,
}

impl FlagContext {
    pub fn label(self) -> String {
        format!(
            "{}_{}",
            if self.has_key { "key" } else { "nokey" },
            if self.door_open { "open" } else { "closed" }
        )
    }

    /// Contexts that occur in at least one reachable state.
    pub fn reachable(spec: &EnvSpec) -> Result<Vec<FlagContext>> {
        let set: HashSet<(bool, bool)> = enumerate_states(spec)?
            .into_iter()
            .map(|s| (s.has_key, s.door_open))
            .collect();
        let mut out: Vec<(bool, bool)> = set.into_iter().collect();
        out.sort();
        Ok(out
            .into_iter()
            .map(|(has_key, door_open)| FlagContext { has_key, door_open })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Heatmap {
    pub action: Action,
    pub context: FlagContext,
    /// `cells[row][col]`.
    pub cells: Vec<Vec<HeatCell>>,
}

impl Heatmap {
    /// Cells where the two maps disagree.
    pub fn mismatches(&self, other: &Heatmap) -> usize {
        self.cells
            .iter()
            .flatten()
            .zip(other.cells.iter().flatten())
            .filter(|(a, b)| a != b)
            .count()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["row", "col", "value"])?;
        for (r, row) in self.cells.iter().enumerate() {
            for (c, cell) in row.iter().enumerate() {
                w.write_record([r.to_string(), c.to_string(), cell.value().to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Per-cell applicability of `a` with the flags fixed to `context`. Cells that
/// are not reachable agent positions in that context are `NotACell`.
pub fn heatmap(source: &KnowledgeSource, spec: &EnvSpec, a: Action, tau: f64, context: FlagContext) -> Result<Heatmap> {
    let states: Vec<EnvState> = enumerate_states(spec)?
        .into_iter()
        .filter(|s| s.has_key == context.has_key && s.door_open == context.door_open)
        .collect();
    let probs = if states.is_empty() {
        Vec::new()
    } else {
        source.probabilities_batch(&states, &observe_batch(spec, &states))?
    };
    let layout = &spec.layout;
    let mut cells = vec![vec![HeatCell::NotACell; layout.width()]; layout.height()];
    for (s, row) in states.iter().zip(&probs) {
        let p = *row
            .get(a.index())
            .ok_or_else(|| Error::Usage(format!("action `{a}` outside the source's action set")))?;
        cells[s.agent_pos.0][s.agent_pos.1] = if p >= tau {
            HeatCell::Applicable
        } else {
            HeatCell::Inapplicable
        };
    }
    Ok(Heatmap {
        action: a,
        context,
        cells,
    })
}
