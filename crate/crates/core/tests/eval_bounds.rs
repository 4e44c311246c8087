//! Reference policies bracket the evaluation protocol.

use rgvlm::env::{EnvConfig, InitMode, MAX_SUBTASKS};
use rgvlm::eval::{evaluate, EvalConfig, RandomPolicy, ScriptedPolicy};

#[test]
fn random_policy_rarely_finishes_long_tasks() {
    let cfg = EvalConfig {
        task_lengths: vec![6],
        tasks_per_length: 100,
        episodes_per_task: 100,
        max_steps: Some(100),
        ..EvalConfig::default()
    };
    let report = evaluate(&RandomPolicy, "random", 0, &EnvConfig::default(), &cfg).unwrap();
    let row = &report.rows[0];
    assert_eq!(row.episodes, 10_000);
    assert!(row.mean_completion <= 0.25, "random completion {}", row.mean_completion);
}

#[test]
fn scripted_policy_completes_every_task() {
    for mode in [InitMode::Fixed, InitMode::Randomized] {
        let cfg = EvalConfig {
            task_lengths: (1..=MAX_SUBTASKS).collect(),
            tasks_per_length: 20,
            init_mode: mode,
            ..EvalConfig::default()
        };
        let report = evaluate(&ScriptedPolicy, "scripted", 0, &EnvConfig::default(), &cfg).unwrap();
        for row in &report.rows {
            assert_eq!(row.mean_completion, 1.0, "length {} under {mode:?}", row.task_length);
        }
    }
}
