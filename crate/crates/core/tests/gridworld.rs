use std::collections::{HashMap, HashSet};

use maskrl::gridworld::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn applicability_matches_state_change_on_every_task() {
    for task in Task::ALL {
        let spec = task.spec();
        for s in enumerate_states(&spec).unwrap() {
            for &a in &spec.actions {
                let (next, reward, _) = transition(&spec, &s, a).unwrap();
                let changed = next.key() != s.key();
                assert_eq!(is_applicable(&spec, &s, a), changed, "{task} {s:?} {a}");
                if !changed {
                    assert_eq!(reward, 0.0);
                }
                assert_eq!(next.steps_elapsed, s.steps_elapsed + 1);
            }
        }
    }
}

#[test]
fn step_is_deterministic_on_enumerated_states() {
    for task in Task::ALL {
        let spec = task.spec();
        for s in enumerate_states(&spec).unwrap() {
            for &a in &spec.actions {
                let x = step(&spec, &s, a).unwrap();
                let y = step(&spec, &s, a).unwrap();
                assert_eq!(x.state, y.state);
                assert_eq!(x.reward, y.reward);
                assert_eq!(x.obs, y.obs);
            }
        }
    }
}

#[test]
fn distinct_states_give_distinct_observations() {
    for task in Task::ALL {
        let spec = task.spec();
        let states = enumerate_states(&spec).unwrap();
        let obs: HashSet<Vec<u32>> = states
            .iter()
            .map(|s| observe(&spec, s).data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(obs.len(), states.len(), "{task}");
    }
}

#[test]
fn shipped_layouts_are_8x8() {
    for task in Task::ALL {
        let l = task.layout();
        assert_eq!((l.width(), l.height()), (8, 8), "{task}");
    }
}

#[test]
fn flagless_tasks_have_one_state_per_free_cell() {
    for task in [Task::Maze, Task::XIsland1, Task::XIsland2] {
        let spec = task.spec();
        let free = spec
            .layout
            .positions()
            .filter(|&(r, c)| spec.layout.cell(r, c) == Cell::Floor)
            .count();
        assert_eq!(enumerate_states(&spec).unwrap().len(), free, "{task}");
    }
}

#[test]
fn doorkey_states_bounded_by_three_flag_contexts() {
    for task in [Task::DoorKey1, Task::DoorKey2] {
        let spec = task.spec();
        let free = spec
            .layout
            .positions()
            .filter(|&(r, c)| !spec.layout.cell(r, c).is_solid())
            .count();
        let states = enumerate_states(&spec).unwrap();
        assert!(
            states.len() <= 3 * free,
            "{task}: {} states for {free} cells",
            states.len()
        );
        assert!(states.iter().all(|s| !s.door_open || s.has_key));
    }
}

#[test]
fn reset_is_uniform_over_ten_cells() {
    let layout = parse_layout("ten", "#######\n#.....#\n#.....#\n#G~~~~#\n#######\n").unwrap();
    let spec = EnvSpec::new(layout);
    assert_eq!(spec.layout.start_cells().len(), 10);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    let n = 10_000;
    for _ in 0..n {
        let (s, _) = reset_with(&spec, &mut rng).unwrap();
        *counts.entry(s.agent_pos).or_default() += 1;
    }
    assert_eq!(counts.len(), 10);
    let mut chi2 = 0.0;
    for &c in counts.values() {
        let freq = c as f64 / n as f64;
        assert!((freq - 0.1).abs() <= 0.05, "frequency {freq}");
        chi2 += (c as f64 - 1000.0).powi(2) / 1000.0;
    }
    // 9 degrees of freedom, 99.9th percentile.
    assert!(chi2 < 27.88, "chi-square {chi2}");
}

#[test]
fn same_seed_same_start() {
    for task in Task::ALL {
        let spec = task.spec();
        assert_eq!(reset(&spec, 11).unwrap(), reset(&spec, 11).unwrap());
    }
}

fn task_strategy() -> impl Strategy<Value = Task> {
    prop::sample::select(Task::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn episodes_respect_reward_and_door_invariants(task in task_strategy(), seed in any::<u64>()) {
        let spec = task.spec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut s, obs) = reset_with(&spec, &mut rng).unwrap();
        let plane = spec.layout.width() * spec.layout.height();
        prop_assert_eq!(obs.data()[2 * plane..3 * plane].iter().sum::<f32>(), 1.0);
        let mut ret = 0.0;
        let reached = loop {
            let a = spec.actions[rng.gen_range(0..spec.num_actions())];
            let r = step(&spec, &s, a).unwrap();
            prop_assert!(!s.door_open || r.state.door_open);
            let agent = &r.obs.data()[2 * plane..3 * plane];
            prop_assert_eq!(agent.iter().sum::<f32>(), 1.0);
            let key_plane = &r.obs.data()[7 * plane..8 * plane];
            prop_assert!(key_plane.iter().all(|&v| v == key_plane[0]));
            ret += r.reward;
            if r.done {
                let at_goal = spec.layout.cell(r.state.agent_pos.0, r.state.agent_pos.1) == Cell::Goal;
                prop_assert!(at_goal || r.state.steps_elapsed == spec.max_steps);
                break at_goal;
            }
            s = r.state;
        };
        prop_assert!((0.0..=1.0).contains(&ret));
        prop_assert_eq!(ret > 0.0, reached);
    }
}
