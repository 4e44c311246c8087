mod common;

use common::{demo, random_batch, small_params};
use proptest::prelude::*;
use rgvlm::baselines::sparse_labels;
use rgvlm::dataset::attach_labels;
use rgvlm::env::Action;
use rgvlm::iql::{
    expectile_loss, policy_loss, polyak, q_loss, train, v_loss, ArtifactError, Hyper, Learner, PolicyArtifact,
};

fn norm_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
}

proptest! {
    #[test]
    fn expectile_half_is_half_square(x in -1e3f64..1e3) {
        prop_assert_eq!(expectile_loss(x, 0.5).unwrap(), 0.5 * x * x);
    }

    #[test]
    fn upper_expectile_penalizes_positive_residuals_more(x in 1e-6f64..1e3, q in 0.5001f64..0.9999) {
        prop_assert!(expectile_loss(x, q).unwrap() > expectile_loss(-x, q).unwrap());
    }
}

#[test]
fn terminal_q_loss_ignores_the_value_net() {
    let p = small_params(1);
    let b = random_batch(32, 2, 1.0);
    let base = q_loss(&p, &b, 0.99);
    let mut moved = p.clone();
    moved.v.params.iter_mut().for_each(|w| *w += 0.5);
    let again = q_loss(&moved, &b, 0.99);
    assert_eq!(base.loss, again.loss);
    assert_eq!(base.grad, again.grad);

    // with bootstrapping the value net matters
    let b = random_batch(32, 2, 0.0);
    assert_ne!(q_loss(&p, &b, 0.99).loss, q_loss(&moved, &b, 0.99).loss);
}

#[test]
fn each_loss_depends_only_on_its_declared_inputs() {
    let p = small_params(3);
    let b = random_batch(16, 4, 0.3);
    let mut other = p.clone();
    // the learned critic feeds neither V nor the policy, which read Q_target
    other.q.params.iter_mut().for_each(|w| *w -= 0.25);
    assert_eq!(v_loss(&p, &b, 0.7), v_loss(&other, &b, 0.7));
    assert_eq!(policy_loss(&p, &b, 3.0, 100.0), policy_loss(&other, &b, 3.0, 100.0));
    // Q regression never reads Q_target or the policy
    let mut other = p.clone();
    other.q_target.params.iter_mut().for_each(|w| *w += 0.25);
    other.policy.params.iter_mut().for_each(|w| *w += 0.25);
    assert_eq!(q_loss(&p, &b, 0.99), q_loss(&other, &b, 0.99));
    // gradients have exactly the size of the network they belong to
    assert_eq!(v_loss(&p, &b, 0.7).grad.len(), p.v.params.len());
    assert_eq!(q_loss(&p, &b, 0.99).grad.len(), p.q.params.len());
    assert_eq!(policy_loss(&p, &b, 3.0, 100.0).grad.len(), p.policy.params.len());
}

#[test]
fn policy_gradient_is_invariant_to_a_shared_value_offset() {
    let p = small_params(5);
    let b = random_batch(24, 6, 0.2);
    let mut shifted = p.clone();
    // output biases are the last entries of each flat parameter vector
    let nv = shifted.v.params.len();
    shifted.v.params[nv - 1] += 2.5;
    let nq = shifted.q_target.params.len();
    for w in &mut shifted.q_target.params[nq - Action::COUNT..] {
        *w += 2.5;
    }
    let a = policy_loss(&p, &b, 3.0, 100.0);
    let s = policy_loss(&shifted, &b, 3.0, 100.0);
    assert!((a.loss - s.loss).abs() < 1e-9);
    for (x, y) in a.grad.iter().zip(&s.grad) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn polyak_contracts_towards_the_critic() {
    let p = small_params(7).cast::<f32>();
    for tau in [0.005, 0.1, 0.5] {
        let mut target = p.q_target.params.clone();
        polyak(&mut target, &p.q.params, tau);
        let before = norm_diff(&p.q_target.params, &p.q.params);
        let after = norm_diff(&target, &p.q.params);
        assert!((after - (1.0 - tau) * before).abs() < 1e-5 * before, "tau {tau}");
    }
}

#[test]
fn full_polyak_step_copies_the_critic() {
    let hyper = Hyper { polyak_tau: 1.0, hidden: [8, 8], ..Hyper::default() };
    let mut learner = Learner::<f64>::from_params(small_params(8), hyper);
    learner.update_step(&random_batch(16, 9, 0.2)).unwrap();
    assert_eq!(learner.params.q_target, learner.params.q);
}

#[test]
fn identical_batch_streams_give_identical_metrics() {
    let hyper = Hyper { hidden: [8, 8], ..Hyper::default() };
    let run = || {
        let mut l = Learner::<f32>::new(common::INPUT, hyper.clone());
        (0..20)
            .map(|i| l.update_step(&random_batch(16, 100 + i, 0.2).cast()).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

fn tiny_dataset() -> rgvlm::dataset::LabeledDataset {
    let trajs: Vec<_> = (0..6).map(|i| demo(&format!("t{i}"), 40 + i, 1).1).collect();
    let labels: Vec<_> = trajs.iter().map(|t| sparse_labels(t).unwrap()).collect();
    attach_labels(&trajs, &labels).unwrap()
}

#[test]
fn zero_updates_return_the_initialization() {
    let data = tiny_dataset();
    let hyper = Hyper { updates: 0, hidden: [16, 16], ..Hyper::default() };
    let out = train(&data, &hyper).unwrap();
    let input = out.artifact.header.dims.state + out.artifact.header.dims.instruction;
    let init = Learner::<f32>::new(input, hyper);
    assert_eq!(out.artifact.params, init.params);
    assert!(out.metrics.is_empty());
}

#[test]
fn artifact_round_trip_is_bit_exact_and_corruption_is_caught() {
    let data = tiny_dataset();
    let hyper = Hyper { updates: 30, batch_size: 32, hidden: [16, 16], log_every: 10, ..Hyper::default() };
    let art = train(&data, &hyper).unwrap().artifact;
    let bytes = art.to_bytes();
    let back = PolicyArtifact::from_bytes(&bytes).unwrap();
    assert_eq!(back, art);
    assert_eq!(back.to_bytes(), bytes);

    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x01;
    assert!(matches!(PolicyArtifact::from_bytes(&bad), Err(ArtifactError::Checksum)));
    assert!(matches!(PolicyArtifact::from_bytes(&bytes[..bytes.len() - 5]), Err(ArtifactError::Checksum)));
    assert!(matches!(PolicyArtifact::from_bytes(b"not a policy"), Err(ArtifactError::Magic)));
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = tiny_dataset();
    let hyper = Hyper { updates: 25, batch_size: 32, hidden: [16, 16], log_every: 5, ..Hyper::default() };
    let a = train(&data, &hyper).unwrap();
    let b = train(&data, &hyper).unwrap();
    assert_eq!(a.artifact.to_bytes(), b.artifact.to_bytes());
    assert_eq!(a.metrics, b.metrics);
    let c = train(&data, &Hyper { seed: 1, ..hyper }).unwrap();
    assert_ne!(a.artifact.params, c.artifact.params);
}
