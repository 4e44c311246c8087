//! Language-conditioned implicit Q-learning.
//!
//! Four small MLPs over `state ++ instruction` features: a state value `V`,
//! an action-value critic `Q` (one output per action), its Polyak-averaged
//! copy `Q_target`, and a softmax policy. Each update fits `V` to an upper
//! expectile of `Q_target`, regresses `Q` onto `r + gamma V(s')`, and
//! extracts the policy by advantage-weighted likelihood.

mod artifact;
mod features;
mod gradcheck;
mod losses;
mod mlp;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use artifact::{ArtifactError, ArtifactHeader, PolicyArtifact};
pub use features::GridEncoder;
pub use gradcheck::{grad_check, grad_check_with, GradCheckReport};
pub use losses::{policy_loss, q_loss, v_loss, Batch, LossGrad, Params};
pub use mlp::{matmul, ForwardCache, Mlp, MlpShape, Scalar};

use crate::dataset::{sample_indices, DatasetError, FeatureEncoder, LabeledDataset};
use crate::env::{Action, MAX_SUBTASKS};
use crate::seed;

#[derive(Debug, Error)]
pub enum IqlError {
    #[error("expectile must be in [0.5, 1), got {0}")]
    Expectile(f64),
    #[error("invalid hyperparameters: {0}")]
    Hyper(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("training diverged at update {update}: {metrics:?}")]
    Divergence { update: usize, metrics: Metrics },
}

/// `|q - 1(x < 0)| * x^2`.
pub fn expectile_loss(x: f64, q: f64) -> Result<f64, IqlError> {
    if !(0.5..1.0).contains(&q) {
        return Err(IqlError::Expectile(q));
    }
    Ok(losses::expectile_weight(x, q) * x * x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub gamma: f64,
    pub q_expectile: f64,
    pub beta: f64,
    pub polyak_tau: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub updates: usize,
    pub awr_weight_clip: f64,
    pub seed: u64,
    pub hidden: [usize; 2],
    /// Metrics are averaged over blocks of this many updates.
    pub log_every: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            gamma: 0.99,
            q_expectile: 0.7,
            beta: 3.0,
            polyak_tau: 0.005,
            learning_rate: 3e-4,
            batch_size: 256,
            updates: 50_000,
            awr_weight_clip: 100.0,
            seed: 0,
            hidden: [128, 128],
            log_every: 500,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<(), IqlError> {
        let bad = |m: String| Err(IqlError::Hyper(m));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must be in [0, 1), got {}", self.gamma));
        }
        if !(0.5..1.0).contains(&self.q_expectile) {
            return Err(IqlError::Expectile(self.q_expectile));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.polyak_tau > 0.0 && self.polyak_tau <= 1.0) {
            return bad(format!("polyak_tau must be in (0, 1], got {}", self.polyak_tau));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.awr_weight_clip > 0.0 && self.awr_weight_clip.is_finite()) {
            return bad(format!("awr_weight_clip must be positive, got {}", self.awr_weight_clip));
        }
        if self.hidden.contains(&0) {
            return bad("hidden sizes must be >= 1".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1".into());
        }
        Ok(())
    }
}

/// Losses of one update (or the mean over a block of updates).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub v_loss: f64,
    pub q_loss: f64,
    pub policy_loss: f64,
    pub mean_advantage: f64,
}

impl Metrics {
    fn is_finite(&self) -> bool {
        [self.v_loss, self.q_loss, self.policy_loss, self.mean_advantage].iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Number of updates applied when the row was recorded.
    pub update: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// Adam with the usual bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam { m: vec![T::ZERO; len], v: vec![T::ZERO; len], t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        self.t += 1;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let c1 = T::from_f64(1.0 / (1.0 - self.beta1.powi(self.t)));
        let c2 = T::from_f64(1.0 / (1.0 - self.beta2.powi(self.t)));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (T::ONE - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::ONE - b2) * g * g;
            let mh = self.m[i] * c1;
            let vh = self.v[i] * c2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// `target <- target + tau (source - target)`; `tau = 1` copies exactly.
pub fn polyak<T: Scalar>(target: &mut [T], source: &[T], tau: f64) {
    if tau >= 1.0 {
        target.copy_from_slice(source);
        return;
    }
    let tau = T::from_f64(tau);
    for (t, &s) in target.iter_mut().zip(source) {
        *t += tau * (s - *t);
    }
}

/// Parameters plus optimizer state.
#[derive(Debug, Clone)]
pub struct Learner<T> {
    pub params: Params<T>,
    pub hyper: Hyper,
    opt_v: Adam<T>,
    opt_q: Adam<T>,
    opt_pi: Adam<T>,
    pub updates_done: usize,
}

impl<T: Scalar> Learner<T> {
    pub fn new(input: usize, hyper: Hyper) -> Self {
        let mut rng = seed::rng(seed::derive(hyper.seed, &[0x696e_6974]));
        let shape = |output| MlpShape { input, hidden: hyper.hidden, output };
        let v = Mlp::init(shape(1), &mut rng);
        let q = Mlp::init(shape(Action::COUNT), &mut rng);
        let policy = Mlp::init(shape(Action::COUNT), &mut rng);
        let params = Params { q_target: q.clone(), v, q, policy };
        Self::from_params(params, hyper)
    }

    pub fn from_params(params: Params<T>, hyper: Hyper) -> Self {
        let lr = hyper.learning_rate;
        Learner {
            opt_v: Adam::new(params.v.params.len(), lr),
            opt_q: Adam::new(params.q.params.len(), lr),
            opt_pi: Adam::new(params.policy.params.len(), lr),
            params,
            hyper,
            updates_done: 0,
        }
    }

    /// One interleaved step: all three losses are evaluated on the current
    /// parameters, each network takes an Adam step, then the target critic
    /// moves towards the critic.
    pub fn update_step(&mut self, b: &Batch<T>) -> Result<Metrics, IqlError> {
        let h = &self.hyper;
        let p = &self.params;
        let sh = losses::shared(p, b);
        let lv = losses::v_loss_from(p, b, &sh, T::from_f64(h.q_expectile));
        let lq = losses::q_loss_impl(p, b, T::from_f64(h.gamma));
        let (lpi, adv) =
            losses::policy_loss_from(p, b, &sh, T::from_f64(h.beta), T::from_f64(h.awr_weight_clip));
        let metrics = Metrics {
            v_loss: lv.loss.to_f64(),
            q_loss: lq.loss.to_f64(),
            policy_loss: lpi.loss.to_f64(),
            mean_advantage: adv.to_f64(),
        };
        if !metrics.is_finite() {
            return Err(IqlError::Divergence { update: self.updates_done, metrics });
        }
        self.opt_v.step(&mut self.params.v.params, &lv.grad);
        self.opt_q.step(&mut self.params.q.params, &lq.grad);
        self.opt_pi.step(&mut self.params.policy.params, &lpi.grad);
        polyak(&mut self.params.q_target.params, &self.params.q.params, h.polyak_tau);
        self.updates_done += 1;
        Ok(metrics)
    }
}

/// The whole labeled dataset encoded once, so batches are row copies.
struct EncodedData {
    state_dim: usize,
    instr_dim: usize,
    states: Vec<f32>,
    instructions: Vec<f32>,
    /// Per sample: (row of s_t in `states`, trajectory index, action, reward, done).
    samples: Vec<(usize, usize, usize, f32, bool)>,
}

impl EncodedData {
    fn new(labeled: &LabeledDataset, enc: &GridEncoder) -> Self {
        let mut states = Vec::new();
        let mut instructions = Vec::new();
        let mut samples = Vec::with_capacity(labeled.len());
        let mut row = 0;
        for (ti, t) in labeled.trajectories().iter().enumerate() {
            for s in &t.states {
                enc.encode_state(s, &t.instruction.text, &mut states);
            }
            enc.encode_instruction(&t.instruction.text, &mut instructions);
            let rewards = labeled.rewards(ti);
            for (k, a) in t.actions.iter().enumerate() {
                samples.push((row + k, ti, a.id(), rewards[k] as f32, k + 1 == t.len()));
            }
            row += t.states.len();
        }
        EncodedData { state_dim: enc.state_dim(), instr_dim: enc.instruction_dim(), states, instructions, samples }
    }

    fn batch(&self, idx: &[usize]) -> Batch<f32> {
        let (sd, id) = (self.state_dim, self.instr_dim);
        let input = sd + id;
        let mut b = Batch {
            len: idx.len(),
            input,
            x: Vec::with_capacity(idx.len() * input),
            x_next: Vec::with_capacity(idx.len() * input),
            actions: Vec::with_capacity(idx.len()),
            rewards: Vec::with_capacity(idx.len()),
            dones: Vec::with_capacity(idx.len()),
        };
        for &i in idx {
            let (row, ti, a, r, done) = self.samples[i];
            let instr = &self.instructions[ti * id..(ti + 1) * id];
            b.x.extend_from_slice(&self.states[row * sd..(row + 1) * sd]);
            b.x.extend_from_slice(instr);
            b.x_next.extend_from_slice(&self.states[(row + 1) * sd..(row + 2) * sd]);
            b.x_next.extend_from_slice(instr);
            b.actions.push(a);
            b.rewards.push(r);
            b.dones.push(done);
        }
        b
    }
}

/// Encoder sized for a dataset: board from its first state, one clause
/// slot per sub-task of its longest instruction.
pub fn encoder_for(labeled: &LabeledDataset) -> GridEncoder {
    let trajs = labeled.trajectories();
    let (w, h) = trajs.first().map(|t| (t.states[0].width, t.states[0].height)).unwrap_or((8, 8));
    let clauses = trajs
        .iter()
        .map(|t| t.instruction.text.to_lowercase().split_whitespace().filter(|w| *w == "then").count() + 1)
        .max()
        .unwrap_or(1);
    GridEncoder::new(w, h, clauses.min(MAX_SUBTASKS))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub artifact: PolicyArtifact,
    pub metrics: Vec<MetricsRow>,
}

/// Runs `hyper.updates` updates on uniform batches drawn with a generator
/// seeded from `hyper.seed`.
pub fn train(labeled: &LabeledDataset, hyper: &Hyper) -> Result<TrainOutcome, IqlError> {
    train_with(labeled, hyper, |_| {})
}

/// [`train`] with a callback receiving each logged metrics row.
pub fn train_with(
    labeled: &LabeledDataset,
    hyper: &Hyper,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome, IqlError> {
    hyper.validate()?;
    if labeled.is_empty() {
        return Err(DatasetError::Empty.into());
    }
    let enc = encoder_for(labeled);
    let data = EncodedData::new(labeled, &enc);
    let mut learner: Learner<f32> = Learner::new(data.state_dim + data.instr_dim, hyper.clone());
    let mut rng = seed::rng(seed::derive(hyper.seed, &[0x0062_6174_6368]));
    let mut rows = Vec::new();
    let mut acc = [0.0f64; 4];
    let mut in_block = 0;
    for _ in 0..hyper.updates {
        let idx = sample_indices(data.samples.len(), hyper.batch_size, &mut rng)?;
        let m = learner.update_step(&data.batch(&idx))?;
        for (a, v) in acc.iter_mut().zip([m.v_loss, m.q_loss, m.policy_loss, m.mean_advantage]) {
            *a += v;
        }
        in_block += 1;
        if in_block == hyper.log_every || learner.updates_done == hyper.updates {
            let k = in_block as f64;
            let row = MetricsRow {
                update: learner.updates_done,
                metrics: Metrics {
                    v_loss: acc[0] / k,
                    q_loss: acc[1] / k,
                    policy_loss: acc[2] / k,
                    mean_advantage: acc[3] / k,
                },
            };
            on_row(&row);
            rows.push(row);
            acc = [0.0; 4];
            in_block = 0;
        }
    }
    let artifact = PolicyArtifact::new(enc, hyper.clone(), Some(labeled.source), learner.updates_done, learner.params);
    Ok(TrainOutcome { artifact, metrics: rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActMode {
    Greedy,
    Sample,
}

/// Index of the largest logit; ties go to the lowest index.
pub fn greedy_action(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

/// Draws from `softmax(logits)`.
pub fn sample_action<R: Rng + ?Sized>(logits: &[f32], rng: &mut R) -> usize {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let w: Vec<f64> = logits.iter().map(|&l| (l as f64 - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &x) in w.iter().enumerate() {
        if u < x {
            return i;
        }
        u -= x;
    }
    w.len() - 1
}
