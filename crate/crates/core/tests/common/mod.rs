//! Shared builders for the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rgvlm::dataset::{Trajectory, TrajectoryMeta};
use rgvlm::env::{generate_task, instruction_of, scripted_rollout, Action, EnvConfig, TaskSpec};
use rgvlm::iql::{Batch, Mlp, MlpShape, Params};
use rgvlm::seed;

pub const INPUT: usize = 6;

pub fn small_params(seed_: u64) -> Params<f64> {
    let mut rng = seed::rng(seed_);
    let shape = |output| MlpShape { input: INPUT, hidden: [8, 8], output };
    let q = Mlp::init(shape(Action::COUNT), &mut rng);
    Params { v: Mlp::init(shape(1), &mut rng), q_target: Mlp::init(shape(Action::COUNT), &mut rng), q, policy: Mlp::init(shape(Action::COUNT), &mut rng) }
}

pub fn random_batch(len: usize, seed_: u64, done_rate: f64) -> Batch<f64> {
    let mut rng = seed::rng(seed_);
    let mut row = |_| (0..INPUT).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let x: Vec<f64> = (0..len).flat_map(&mut row).collect();
    let x_next: Vec<f64> = (0..len).flat_map(&mut row).collect();
    let mut rng = seed::rng(seed_ ^ 0x55);
    Batch {
        len,
        input: INPUT,
        x,
        x_next,
        actions: (0..len).map(|_| rng.random_range(0..Action::COUNT)).collect(),
        rewards: (0..len).map(|_| rng.random_range(0.0..1.3)).collect(),
        dones: (0..len).map(|_| rng.random_bool(done_rate)).collect(),
    }
}

/// A scripted demonstration for the task generated from `task_seed`.
pub fn demo(id: &str, task_seed: u64, length: usize) -> (TaskSpec, Trajectory) {
    let task = generate_task(&EnvConfig::default(), task_seed, length).unwrap();
    let mut rng = seed::rng(task_seed);
    let instruction = instruction_of(&task, &mut rng);
    let ep = scripted_rollout(&task, 0.3, &mut rng).unwrap();
    let t = Trajectory {
        id: id.into(),
        instruction,
        states: ep.states,
        actions: ep.actions,
        meta: TrajectoryMeta { seed: task_seed, num_subtasks: length, suboptimality: 0.3 },
    };
    (task, t)
}
