//! Deterministic grid tasks with an applicability oracle.

mod env;
mod layout;

use std::fmt;
use std::str::FromStr;

pub use env::{
    action_names, enumerate_states, enumerate_states_limited, is_applicable, observe, observe_into, optimal_return,
    pruned_fraction, reset, reset_with, shortest_path, step, transition, Action, EnvSpec, EnvState, Observation,
    StepResult, CHANNELS, ENUMERATION_LIMIT,
};
pub use layout::{parse_layout, Cell, Layout};

use crate::error::{Error, Result};

/// The five shipped tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Maze,
    XIsland1,
    XIsland2,
    DoorKey1,
    DoorKey2,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::Maze,
        Task::XIsland1,
        Task::XIsland2,
        Task::DoorKey1,
        Task::DoorKey2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Maze => "maze",
            Task::XIsland1 => "xisland1",
            Task::XIsland2 => "xisland2",
            Task::DoorKey1 => "doorkey1",
            Task::DoorKey2 => "doorkey2",
        }
    }

    pub fn layout_text(self) -> &'static str {
        match self {
            Task::Maze => include_str!("../../layouts/maze.txt"),
            Task::XIsland1 => include_str!("../../layouts/xisland1.txt"),
            Task::XIsland2 => include_str!("../../layouts/xisland2.txt"),
            Task::DoorKey1 => include_str!("../../layouts/doorkey1.txt"),
            Task::DoorKey2 => include_str!("../../layouts/doorkey2.txt"),
        }
    }

    pub fn layout(self) -> Layout {
        parse_layout(self.name(), self.layout_text()).expect("bundled layout parses")
    }

    pub fn spec(self) -> EnvSpec {
        EnvSpec::new(self.layout())
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let wanted = s.to_ascii_lowercase().replace(['-', '_'], "");
        Task::ALL.into_iter().find(|t| t.name() == wanted).ok_or_else(|| {
            Error::Config(format!(
                "unknown task `{s}` (expected one of maze, xisland1, xisland2, doorkey1, doorkey2)"
            ))
        })
    }
}
