use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layout::{Cell, Layout};
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Refusal threshold for [`enumerate_states`].
pub const ENUMERATION_LIMIT: usize = 1_000_000;

/// Observation planes, in channel order.
pub const CHANNELS: [&str; 8] = [
    "wall",
    "floor",
    "agent",
    "goal",
    "key_present",
    "door_closed",
    "door_open",
    "has_key_plane",
];

pub type Observation = Tensor<f32>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Up,
    Right,
    Down,
    Left,
    Pickup,
    Open,
}

impl Action {
    pub const MOVES: [Action; 4] = [Action::Up, Action::Right, Action::Down, Action::Left];
    pub const ALL: [Action; 6] = [
        Action::Up,
        Action::Right,
        Action::Down,
        Action::Left,
        Action::Pickup,
        Action::Open,
    ];

    /// Ordinal in the action set. Both shipped action sets share this prefix order.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Up => "up",
            Action::Right => "right",
            Action::Down => "down",
            Action::Left => "left",
            Action::Pickup => "pickup",
            Action::Open => "open",
        }
    }

    pub fn delta(self) -> Option<(isize, isize)> {
        match self {
            Action::Up => Some((-1, 0)),
            Action::Right => Some((0, 1)),
            Action::Down => Some((1, 0)),
            Action::Left => Some((0, -1)),
            Action::Pickup | Action::Open => None,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Action::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown action `{s}`")))
    }
}

pub fn action_names(actions: &[Action]) -> Vec<String> {
    actions.iter().map(|a| a.name().to_string()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EnvState {
    pub agent_pos: (usize, usize),
    pub has_key: bool,
    pub door_open: bool,
    pub steps_elapsed: usize,
}

impl EnvState {
    pub fn at(agent_pos: (usize, usize)) -> Self {
        EnvState {
            agent_pos,
            has_key: false,
            door_open: false,
            steps_elapsed: 0,
        }
    }

    /// The fields compared by the applicability test.
    pub fn key(&self) -> ((usize, usize), bool, bool) {
        (self.agent_pos, self.has_key, self.door_open)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub layout: Layout,
    pub actions: Vec<Action>,
    pub max_steps: usize,
    pub gamma: f64,
}

impl EnvSpec {
    /// Standard action set for the layout and `T = 4 * width * height`.
    pub fn new(layout: Layout) -> Self {
        let actions = if layout.has_key_and_door() {
            Action::ALL.to_vec()
        } else {
            Action::MOVES.to_vec()
        };
        let max_steps = 4 * layout.width() * layout.height();
        EnvSpec {
            layout,
            actions,
            max_steps,
            gamma: 0.99,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expected = if self.layout.has_key_and_door() { 6 } else { 4 };
        if self.actions != Action::ALL[..expected] {
            return Err(Error::Config(format!(
                "layout `{}` requires actions {:?}",
                self.layout.name(),
                action_names(&Action::ALL[..expected])
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max episode length must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("discount {} outside (0, 1]", self.gamma)));
        }
        Ok(())
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn observation_shape(&self) -> [usize; 3] {
        [CHANNELS.len(), self.layout.height(), self.layout.width()]
    }

    pub fn is_terminal(&self, state: &EnvState) -> bool {
        state.agent_pos == self.layout.goal() || state.steps_elapsed >= self.max_steps
    }

    /// Goal reward after `steps` steps.
    pub fn goal_reward(&self, steps: usize) -> f64 {
        1.0 - 0.9 * steps as f64 / self.max_steps as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
    pub obs: Observation,
}

pub fn reset(spec: &EnvSpec, seed: u64) -> Result<(EnvState, Observation)> {
    reset_with(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Draws a start state uniformly over Floor cells.
pub fn reset_with<G: Rng + ?Sized>(spec: &EnvSpec, rng: &mut G) -> Result<(EnvState, Observation)> {
    let starts = spec.layout.start_cells();
    if starts.is_empty() {
        return Err(Error::Config(format!(
            "layout `{}` has no floor cell to start from",
            spec.layout.name()
        )));
    }
    let state = EnvState::at(starts[rng.gen_range(0..starts.len())]);
    Ok((state, observe(spec, &state)))
}

fn passable(spec: &EnvSpec, state: &EnvState, pos: (usize, usize)) -> bool {
    match spec.layout.cell(pos.0, pos.1) {
        Cell::Wall | Cell::Water => false,
        Cell::DoorClosed => state.door_open,
        _ => true,
    }
}

/// Effect of `a` on `state`, ignoring the clock.
fn apply(spec: &EnvSpec, state: &EnvState, a: Action) -> EnvState {
    let mut next = *state;
    let layout = &spec.layout;
    match a {
        Action::Pickup => {
            if layout.cell(state.agent_pos.0, state.agent_pos.1) == Cell::Key {
                next.has_key = true;
            }
        }
        Action::Open => {
            if state.has_key {
                if let Some(door) = layout.door() {
                    let dist = state.agent_pos.0.abs_diff(door.0) + state.agent_pos.1.abs_diff(door.1);
                    if dist == 1 {
                        next.door_open = true;
                    }
                }
            }
        }
        _ => {
            let delta = a.delta().expect("movement action");
            if let Some(target) = layout.neighbor(state.agent_pos, delta) {
                if passable(spec, state, target) {
                    next.agent_pos = target;
                }
            }
        }
    }
    next
}

pub fn step(spec: &EnvSpec, state: &EnvState, a: Action) -> Result<StepResult> {
    let (state, reward, done) = transition(spec, state, a)?;
    let obs = observe(spec, &state);
    Ok(StepResult {
        state,
        reward,
        done,
        obs,
    })
}

/// [`step`] without building the observation.
pub fn transition(spec: &EnvSpec, state: &EnvState, a: Action) -> Result<(EnvState, f64, bool)> {
    if spec.is_terminal(state) {
        return Err(Error::Usage("step called on a finished episode".into()));
    }
    if a.index() >= spec.num_actions() || spec.actions[a.index()] != a {
        return Err(Error::Usage(format!("action `{a}` is not in the task's action set")));
    }
    let mut next = apply(spec, state, a);
    next.steps_elapsed = state.steps_elapsed + 1;
    let at_goal = next.agent_pos == spec.layout.goal();
    let reward = if at_goal {
        spec.goal_reward(next.steps_elapsed)
    } else {
        0.0
    };
    let done = at_goal || next.steps_elapsed >= spec.max_steps;
    Ok((next, reward, done))
}

/// Precondition check: does `a` change `(agent_pos, has_key, door_open)`?
pub fn is_applicable(spec: &EnvSpec, state: &EnvState, a: Action) -> bool {
    let layout = &spec.layout;
    let (row, col) = state.agent_pos;
    match a {
        Action::Pickup => !state.has_key && layout.key() == Some((row, col)),
        Action::Open => {
            let Some((dr, dc)) = layout.door() else {
                return false;
            };
            state.has_key && !state.door_open && row.abs_diff(dr) + col.abs_diff(dc) == 1
        }
        _ => match layout.neighbor((row, col), a.delta().expect("movement action")) {
            None => false,
            Some((r, c)) => match layout.cell(r, c) {
                Cell::Wall | Cell::Water => false,
                Cell::DoorClosed => state.door_open,
                Cell::Floor | Cell::Goal | Cell::Key => true,
            },
        },
    }
}

/// Writes the observation planes for `state` into `out` (length `8 * h * w`).
pub fn observe_into(spec: &EnvSpec, state: &EnvState, out: &mut [f32]) {
    let layout = &spec.layout;
    let (h, w) = (layout.height(), layout.width());
    let plane = h * w;
    assert_eq!(out.len(), CHANNELS.len() * plane, "observation buffer size");
    out.fill(0.0);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let cell = layout.cell(r, c);
            if cell.is_solid() {
                out[i] = 1.0;
            } else {
                out[plane + i] = 1.0;
            }
            match cell {
                Cell::Goal => out[3 * plane + i] = 1.0,
                Cell::Key if !state.has_key => out[4 * plane + i] = 1.0,
                Cell::DoorClosed if state.door_open => out[6 * plane + i] = 1.0,
                Cell::DoorClosed => out[5 * plane + i] = 1.0,
                _ => {}
            }
        }
    }
    let (ar, ac) = state.agent_pos;
    out[2 * plane + ar * w + ac] = 1.0;
    if state.has_key {
        out[7 * plane..8 * plane].fill(1.0);
    }
}

pub fn observe(spec: &EnvSpec, state: &EnvState) -> Observation {
    let shape = spec.observation_shape();
    let mut data = vec![0.0; shape.iter().product()];
    observe_into(spec, state, &mut data);
    Tensor::new(shape.to_vec(), data).expect("observation shape")
}

pub fn enumerate_states(spec: &EnvSpec) -> Result<Vec<EnvState>> {
    enumerate_states_limited(spec, ENUMERATION_LIMIT)
}

/// Non-terminal states reachable from any start cell, sorted, with a zero clock.
pub fn enumerate_states_limited(spec: &EnvSpec, limit: usize) -> Result<Vec<EnvState>> {
    let layout = &spec.layout;
    let flags = if layout.has_key_and_door() { 4 } else { 1 };
    let count = layout.width() * layout.height() * flags;
    if count > limit {
        return Err(Error::EnumerationTooLarge { count, limit });
    }
    let goal = layout.goal();
    let mut seen: HashSet<EnvState> = HashSet::new();
    let mut queue: VecDeque<EnvState> = VecDeque::new();
    for pos in layout.start_cells() {
        let s = EnvState::at(pos);
        if seen.insert(s) {
            queue.push_back(s);
        }
    }
    while let Some(s) = queue.pop_front() {
        for &a in &spec.actions {
            let next = apply(spec, &s, a);
            if next.agent_pos != goal && seen.insert(next) {
                queue.push_back(next);
            }
        }
    }
    let mut states: Vec<EnvState> = seen.into_iter().collect();
    states.sort_by_key(|s| (s.has_key, s.door_open, s.agent_pos));
    Ok(states)
}

pub fn pruned_fraction(spec: &EnvSpec) -> Result<f64> {
    let states = enumerate_states(spec)?;
    let total = states.len() * spec.num_actions();
    let pruned = states
        .iter()
        .flat_map(|s| spec.actions.iter().map(move |&a| (s, a)))
        .filter(|&(s, a)| !is_applicable(spec, s, a))
        .count();
    Ok(pruned as f64 / total as f64)
}

/// Fewest steps from `state` to the goal, by breadth-first search.
pub fn shortest_path(spec: &EnvSpec, state: &EnvState) -> Option<usize> {
    let goal = spec.layout.goal();
    let start = EnvState {
        steps_elapsed: 0,
        ..*state
    };
    if start.agent_pos == goal {
        return Some(0);
    }
    let mut seen = HashSet::from([start]);
    let mut frontier = vec![start];
    let mut depth = 0;
    while !frontier.is_empty() {
        depth += 1;
        let mut next_frontier = Vec::new();
        for s in &frontier {
            for &a in &spec.actions {
                let next = apply(spec, s, a);
                if next.agent_pos == goal {
                    return Some(depth);
                }
                if seen.insert(next) {
                    next_frontier.push(next);
                }
            }
        }
        frontier = next_frontier;
    }
    None
}

/// Best undiscounted return from a fresh episode starting in `state`.
pub fn optimal_return(spec: &EnvSpec, state: &EnvState) -> f64 {
    match shortest_path(spec, state) {
        Some(d) if state.steps_elapsed + d <= spec.max_steps => spec.goal_reward(state.steps_elapsed + d),
        _ => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::super::layout::parse_layout;
    use super::*;

    fn spec(text: &str) -> EnvSpec {
        EnvSpec::new(parse_layout("t", text).unwrap())
    }

    #[test]
    fn blocked_move_keeps_state() {
        let s = spec("####\n#.G#\n####");
        let start = EnvState::at((1, 1));
        let out = step(&s, &start, Action::Up).unwrap();
        assert_eq!(out.state.key(), start.key());
        assert_eq!(out.state.steps_elapsed, 1);
        assert_eq!(out.reward, 0.0);
        assert!(!out.done);
    }

    #[test]
    fn goal_reward_at_step_ten() {
        let mut s = spec("####\n#.G#\n####");
        s.max_steps = 100;
        let state = EnvState {
            steps_elapsed: 9,
            ..EnvState::at((1, 1))
        };
        let out = step(&s, &state, Action::Right).unwrap();
        assert!((out.reward - 0.91).abs() < 1e-12);
        assert!(out.done);
        assert!(step(&s, &out.state, Action::Left).is_err());
    }

    #[test]
    fn time_limit_ends_episode() {
        let mut s = spec("####\n#.G#\n####");
        s.max_steps = 2;
        let a = step(&s, &EnvState::at((1, 1)), Action::Up).unwrap();
        assert!(!a.done);
        let b = step(&s, &a.state, Action::Up).unwrap();
        assert!(b.done);
        assert_eq!(b.reward, 0.0);
    }

    #[test]
    fn key_and_door_rules() {
        let s = spec("######\n#K#.G#\n#.D..#\n######");
        let on_key = EnvState::at((1, 1));
        assert!(is_applicable(&s, &on_key, Action::Pickup));
        let with_key = EnvState {
            has_key: true,
            ..on_key
        };
        assert!(!is_applicable(&s, &with_key, Action::Pickup));
        let by_door = EnvState::at((2, 1));
        let out = step(&s, &by_door, Action::Open).unwrap();
        assert_eq!(out.state.key(), by_door.key());
        assert!(!is_applicable(&s, &by_door, Action::Right));
        let opened = step(
            &s,
            &EnvState {
                has_key: true,
                ..by_door
            },
            Action::Open,
        )
        .unwrap();
        assert!(opened.state.door_open);
        assert!(is_applicable(&s, &opened.state, Action::Right));
        let through = step(&s, &opened.state, Action::Right).unwrap();
        assert_eq!(through.state.agent_pos, (2, 2));
    }

    #[test]
    fn single_floor_cell_start() {
        let s = spec("####\n#.G#\n####");
        for seed in 0..20 {
            assert_eq!(reset(&s, seed).unwrap().0, EnvState::at((1, 1)));
        }
        assert_eq!(enumerate_states(&s).unwrap().len(), 1);
        assert!(reset(&spec("###\n#G#\n###"), 0).is_err());
    }

    #[test]
    fn enumeration_refuses_large_grids() {
        let s = spec("####\n#.G#\n####");
        match enumerate_states_limited(&s, 5) {
            Err(Error::EnumerationTooLarge { count: 12, limit: 5 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn observation_planes() {
        let s = spec("######\n#K#.G#\n#.D..#\n######");
        let st = EnvState {
            agent_pos: (2, 1),
            has_key: true,
            door_open: false,
            steps_elapsed: 0,
        };
        let obs = observe(&s, &st);
        assert_eq!(obs.shape(), &[8, 4, 6]);
        let plane = |ch: usize| &obs.data()[ch * 24..(ch + 1) * 24];
        assert_eq!(plane(2).iter().sum::<f32>(), 1.0);
        assert_eq!(plane(2)[2 * 6 + 1], 1.0);
        assert!(plane(7).iter().all(|&v| v == 1.0));
        assert_eq!(plane(4).iter().sum::<f32>(), 0.0);
        assert_eq!(plane(5)[2 * 6 + 2], 1.0);
    }

    #[test]
    fn shortest_path_through_door() {
        let s = spec("######\n#K#.G#\n#.D..#\n######");
        // down, pickup... key at (1,1): pickup, down, open, right, right, up, right
        assert_eq!(shortest_path(&s, &EnvState::at((1, 1))), Some(7));
        let r = optimal_return(&s, &EnvState::at((1, 1)));
        assert!((r - s.goal_reward(7)).abs() < 1e-12);
    }
}
