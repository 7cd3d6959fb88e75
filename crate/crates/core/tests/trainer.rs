use maskrl::applicability::{ClassifierNet, ClassifierSource, KnowledgeSource};
use maskrl::gridworld::{action_names, Task};
use maskrl::nn::Extractor;
use maskrl::trainer::*;

fn short(seed: u64, epsilon: f64) -> TrainerConfig {
    TrainerConfig {
        seed,
        rollout_len: 512,
        max_env_steps: 2048,
        classifier_epochs: 2,
        epsilon: EpsilonSchedule::constant(epsilon),
        ppo: maskrl::policy::PpoConfig {
            epochs: 2,
            ..Default::default()
        },
        ..TrainerConfig::default()
    }
}

fn learner(task: Task, seed: u64) -> KnowledgeSource {
    let spec = task.spec();
    let net = ClassifierNet::new(
        Extractor::Compact,
        &spec.observation_shape(),
        action_names(&spec.actions),
        seed,
    )
    .unwrap();
    KnowledgeSource::Classifier(ClassifierSource::new(net))
}

fn collect_all(trainer: &mut Trainer) -> Vec<Transition> {
    let mut all = Vec::new();
    while !trainer.finished() {
        all.extend(trainer.train_iteration().unwrap().transitions);
    }
    all
}

#[test]
fn gate_off_stores_only_all_ones_masks() {
    let spec = Task::DoorKey1.spec();
    let mut t = Trainer::new(short(0, 0.0), spec.clone(), Some(KnowledgeSource::Oracle(spec))).unwrap();
    let all = collect_all(&mut t);
    assert!(all.iter().all(|tr| tr.mask.all_ones() && !tr.mask_applied));
}

#[test]
fn oracle_with_gate_on_never_takes_inapplicable_actions() {
    for task in Task::ALL {
        let spec = task.spec();
        let mut t = Trainer::new(short(1, 1.0), spec.clone(), Some(KnowledgeSource::Oracle(spec))).unwrap();
        while !t.finished() {
            let report = t.train_iteration().unwrap();
            assert!(report.transitions.iter().all(|tr| tr.label == 1), "{task}");
            assert!(report.episodes.iter().all(|e| e.inapplicable == 0));
            assert_eq!(report.metrics.mean_inapplicable_per_episode, 0.0);
        }
    }
}

#[test]
fn gate_frequency_matches_epsilon() {
    let spec = Task::Maze.spec();
    let cfg = TrainerConfig {
        rollout_len: 10_000,
        max_env_steps: 10_000,
        ..short(2, 0.5)
    };
    let mut t = Trainer::new(cfg, spec.clone(), Some(KnowledgeSource::Oracle(spec))).unwrap();
    let all = t.train_iteration().unwrap().transitions;
    let applied = all.iter().filter(|tr| tr.mask_applied).count() as f64 / all.len() as f64;
    assert!((0.47..=0.53).contains(&applied), "applied fraction {applied}");
    let nontrivial = all.iter().filter(|tr| !tr.mask.all_ones()).count() as f64 / all.len() as f64;
    assert!(nontrivial <= applied);
}

#[test]
fn stored_transitions_satisfy_mask_and_label_invariants() {
    for task in [Task::Maze, Task::DoorKey1] {
        let spec = task.spec();
        let cfg = TrainerConfig {
            train_classifier: true,
            ..short(3, 0.5)
        };
        let mut t = Trainer::new(cfg, spec.clone(), Some(learner(task, 3))).unwrap();
        let all = collect_all(&mut t);
        assert!(labels_match_oracle(&spec, &all));
        for tr in &all {
            assert!(tr.mask.get(tr.action) || tr.fallback || tr.mask.all_ones());
            assert!(tr.label <= 1);
            assert!(tr.log_prob.is_finite());
        }
    }
}

#[test]
fn frozen_classifier_keeps_its_weights() {
    let spec = Task::Maze.spec();
    let src = learner(Task::Maze, 4);
    let before = src.classifier().unwrap().net.clone();
    let mut t = Trainer::new(short(4, 0.5), spec, Some(src)).unwrap();
    t.run().unwrap();
    assert_eq!(t.source.unwrap().classifier().unwrap().net, before);
}

#[test]
fn training_classifier_changes_weights_and_reports_loss() {
    let spec = Task::Maze.spec();
    let src = learner(Task::Maze, 5);
    let before = src.classifier().unwrap().net.clone();
    let cfg = TrainerConfig {
        train_classifier: true,
        ..short(5, 0.5)
    };
    let mut t = Trainer::new(cfg, spec, Some(src)).unwrap();
    let rows = t.run().unwrap();
    assert!(rows
        .iter()
        .all(|r| r.classifier_loss.is_some() && r.classifier_accuracy.is_some()));
    assert_ne!(t.source.unwrap().classifier().unwrap().net, before);
}

#[test]
fn gate_off_matches_plain_ppo() {
    let spec = Task::XIsland1.spec();
    let a = run(short(6, 0.0), spec.clone(), None).unwrap().metrics;
    let b = run(short(6, 0.0), spec.clone(), Some(KnowledgeSource::Oracle(spec)))
        .unwrap()
        .metrics;
    assert_eq!(a, b);
}

#[test]
fn same_seed_gives_identical_metrics_bytes() {
    let spec = Task::DoorKey1.spec();
    let cfg = TrainerConfig {
        train_classifier: true,
        ..short(7, 0.5)
    };
    let bytes = |cfg: TrainerConfig| {
        let rows = run(cfg, spec.clone(), Some(learner(Task::DoorKey1, 7)))
            .unwrap()
            .metrics;
        let mut buf = Vec::new();
        write_metrics(&rows, &mut buf).unwrap();
        buf
    };
    let first = bytes(cfg.clone());
    assert_eq!(first, bytes(cfg));
    let text = String::from_utf8(first).unwrap();
    assert!(text.starts_with(&METRICS_HEADER.join(",")));
}

#[test]
fn metrics_round_trip_through_csv() {
    let spec = Task::Maze.spec();
    let rows = run(short(8, 0.0), spec, None).unwrap().metrics;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    save_metrics(&rows, &path).unwrap();
    assert_eq!(load_metrics(&path).unwrap(), rows);
}

#[test]
fn budget_caps_env_steps() {
    let spec = Task::Maze.spec();
    let rows = run(short(9, 0.0), spec, None).unwrap().metrics;
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.last().unwrap().env_steps, 2048);
    assert!(rows.windows(2).all(|w| w[1].env_steps > w[0].env_steps));
}

#[test]
fn invalid_configs_are_rejected() {
    let spec = Task::Maze.spec();
    let bad = [
        TrainerConfig {
            workers: 0,
            ..short(0, 0.5)
        },
        TrainerConfig {
            tau: 1.0,
            ..short(0, 0.5)
        },
        TrainerConfig {
            epsilon: EpsilonSchedule::constant(1.5),
            ..short(0, 0.5)
        },
    ];
    for cfg in bad {
        assert!(Trainer::new(cfg, spec.clone(), None).is_err());
    }
    let wrong = learner(Task::DoorKey1, 0);
    assert!(Trainer::new(short(0, 0.5), spec, Some(wrong)).is_err());
}

#[test]
fn untrained_actions_stay_permissive_until_both_labels_are_seen() {
    let spec = Task::Maze.spec();
    let net = ClassifierNet::new(
        Extractor::Compact,
        &spec.observation_shape(),
        action_names(&spec.actions),
        1,
    )
    .unwrap();
    let mut src = ClassifierSource::untrained(net);
    assert!(src.pending().iter().all(|&p| p));
    src.record_label(0, 0);
    src.record_label(0, 0);
    assert!(src.pending()[0]);
    src.record_label(0, 1);
    assert_eq!(src.pending(), &[false, true, true, true]);

    let obs = maskrl::gridworld::observe(&spec, &maskrl::gridworld::enumerate_states(&spec).unwrap()[0]);
    let batch = obs.reshape(vec![1, 8, 8, 8]).unwrap();
    let probs = src.probabilities(&batch).unwrap();
    assert!(probs[0][1..].iter().all(|&p| p == 1.0));
}

#[test]
fn learned_source_leaves_pending_once_trained_on_both_classes() {
    let spec = Task::Maze.spec();
    let net = ClassifierNet::new(
        Extractor::Compact,
        &spec.observation_shape(),
        action_names(&spec.actions),
        2,
    )
    .unwrap();
    let cfg = TrainerConfig {
        train_classifier: true,
        ..short(2, 0.5)
    };
    let mut t = Trainer::new(
        cfg,
        spec,
        Some(KnowledgeSource::Classifier(ClassifierSource::untrained(net))),
    )
    .unwrap();
    let first = t.train_iteration().unwrap();
    let pending = t.source.as_ref().unwrap().classifier().unwrap().pending().to_vec();
    for (a, &p) in pending.iter().enumerate() {
        let labels: Vec<u8> = first
            .transitions
            .iter()
            .filter(|tr| tr.action == a)
            .map(|tr| tr.label)
            .collect();
        assert_eq!(p, !(labels.contains(&0) && labels.contains(&1)), "action {a}");
    }
    assert!(first.transitions.iter().all(|tr| tr.mask.all_ones()));
}
