//! The three IQL objectives and their analytic gradients.

use super::mlp::{ForwardCache, Mlp, Scalar};
use crate::dataset::TransitionBatch;
use crate::env::Action;

/// Network inputs for one batch: `x` and `x_next` are `len x input`
/// row-major, state features followed by instruction features.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub len: usize,
    pub input: usize,
    pub x: Vec<T>,
    pub x_next: Vec<T>,
    pub actions: Vec<usize>,
    pub rewards: Vec<T>,
    pub dones: Vec<bool>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_transitions(tb: &TransitionBatch) -> Self {
        let input = tb.state_dim + tb.instruction_dim;
        let mut x = Vec::with_capacity(tb.len * input);
        let mut x_next = Vec::with_capacity(tb.len * input);
        for i in 0..tb.len {
            let s = &tb.states[i * tb.state_dim..(i + 1) * tb.state_dim];
            let n = &tb.next_states[i * tb.state_dim..(i + 1) * tb.state_dim];
            let l = &tb.instructions[i * tb.instruction_dim..(i + 1) * tb.instruction_dim];
            x.extend(s.iter().chain(l).map(|&v| T::from_f32(v)));
            x_next.extend(n.iter().chain(l).map(|&v| T::from_f32(v)));
        }
        Batch {
            len: tb.len,
            input,
            x,
            x_next,
            actions: tb.actions.clone(),
            rewards: tb.rewards.iter().map(|&r| T::from_f32(r)).collect(),
            dones: tb.dones.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Batch<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::from_f64(x.to_f64())).collect();
        Batch {
            len: self.len,
            input: self.input,
            x: conv(&self.x),
            x_next: conv(&self.x_next),
            actions: self.actions.clone(),
            rewards: conv(&self.rewards),
            dones: self.dones.clone(),
        }
    }
}

/// Value and critic/actor weights `(phi, omega, omega_bar, theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub v: Mlp<T>,
    pub q: Mlp<T>,
    pub q_target: Mlp<T>,
    pub policy: Mlp<T>,
}

impl<T: Scalar> Params<T> {
    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params { v: self.v.cast(), q: self.q.cast(), q_target: self.q_target.cast(), policy: self.policy.cast() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<T> {
    pub loss: T,
    pub grad: Vec<T>,
}

/// `|q - 1(x < 0)| * x^2`, without the range check.
pub(crate) fn expectile_weight<T: Scalar>(x: T, q: T) -> T {
    if x < T::ZERO {
        T::ONE - q
    } else {
        q
    }
}

fn select<T: Scalar>(out: &[T], actions: &[usize]) -> Vec<T> {
    actions.iter().enumerate().map(|(i, &a)| out[i * Action::COUNT + a]).collect()
}

/// Forward results shared between the value and policy objectives.
pub(crate) struct Shared<T> {
    pub v_cache: ForwardCache<T>,
    /// `Q_target(s, a)` for the batch actions.
    pub q_target_sa: Vec<T>,
}

pub(crate) fn shared<T: Scalar>(p: &Params<T>, b: &Batch<T>) -> Shared<T> {
    let v_cache = p.v.forward(&b.x, b.len);
    let qt = p.q_target.forward(&b.x, b.len).out;
    Shared { v_cache, q_target_sa: select(&qt, &b.actions) }
}

pub(crate) fn v_loss_from<T: Scalar>(p: &Params<T>, b: &Batch<T>, sh: &Shared<T>, expectile: T) -> LossGrad<T> {
    let n = T::from_f64(b.len as f64);
    let mut loss = T::ZERO;
    let mut dout = vec![T::ZERO; b.len];
    for i in 0..b.len {
        let u = sh.q_target_sa[i] - sh.v_cache.out[i];
        let w = expectile_weight(u, expectile);
        loss += w * u * u;
        // d/dV of w * (Qt - V)^2
        dout[i] = -(T::from_f64(2.0) * w * u) / n;
    }
    LossGrad { loss: loss / n, grad: p.v.backward(&b.x, &sh.v_cache, &dout) }
}

pub(crate) fn q_loss_impl<T: Scalar>(p: &Params<T>, b: &Batch<T>, gamma: T) -> LossGrad<T> {
    let n = T::from_f64(b.len as f64);
    let v_next = p.v.forward(&b.x_next, b.len).out;
    let cache = p.q.forward(&b.x, b.len);
    let mut loss = T::ZERO;
    let mut dout = vec![T::ZERO; b.len * Action::COUNT];
    for i in 0..b.len {
        let bootstrap = if b.dones[i] { T::ZERO } else { gamma * v_next[i] };
        let delta = cache.out[i * Action::COUNT + b.actions[i]] - (b.rewards[i] + bootstrap);
        loss += delta * delta;
        dout[i * Action::COUNT + b.actions[i]] = T::from_f64(2.0) * delta / n;
    }
    LossGrad { loss: loss / n, grad: p.q.backward(&b.x, &cache, &dout) }
}

/// Returns the loss with its gradient and the mean advantage.
pub(crate) fn policy_loss_from<T: Scalar>(
    p: &Params<T>,
    b: &Batch<T>,
    sh: &Shared<T>,
    beta: T,
    clip: T,
) -> (LossGrad<T>, T) {
    let n = T::from_f64(b.len as f64);
    let cache = p.policy.forward(&b.x, b.len);
    let mut loss = T::ZERO;
    let mut adv_sum = T::ZERO;
    let mut dout = vec![T::ZERO; b.len * Action::COUNT];
    for i in 0..b.len {
        let adv = sh.q_target_sa[i] - sh.v_cache.out[i];
        adv_sum += adv;
        let raw = (beta * adv).exp();
        // NaN-safe min: a non-finite advantage stays non-finite and is caught upstream
        let w = if raw > clip { clip } else { raw };
        let logits = &cache.out[i * Action::COUNT..(i + 1) * Action::COUNT];
        let m = logits.iter().copied().fold(logits[0], |a, x| if x > a { x } else { a });
        let mut z = T::ZERO;
        for &l in logits {
            z += (l - m).exp();
        }
        let lse = m + z.ln();
        let a = b.actions[i];
        loss += -(w * (logits[a] - lse));
        for (j, &l) in logits.iter().enumerate() {
            let pj = (l - lse).exp();
            let onehot = if j == a { T::ONE } else { T::ZERO };
            dout[i * Action::COUNT + j] = -(w * (onehot - pj)) / n;
        }
    }
    (LossGrad { loss: loss / n, grad: p.policy.backward(&b.x, &cache, &dout) }, adv_sum / n)
}

/// Expectile regression of `V` towards `Q_target(s, a)`; gradient w.r.t. `V` only.
pub fn v_loss<T: Scalar>(p: &Params<T>, b: &Batch<T>, expectile: f64) -> LossGrad<T> {
    v_loss_from(p, b, &shared(p, b), T::from_f64(expectile))
}

/// Squared TD error against `r + gamma * (1 - done) * V(s')`; gradient
/// w.r.t. `Q` only.
pub fn q_loss<T: Scalar>(p: &Params<T>, b: &Batch<T>, gamma: f64) -> LossGrad<T> {
    q_loss_impl(p, b, T::from_f64(gamma))
}

/// Advantage-weighted negative log-likelihood with weights
/// `min(exp(beta * (Q_target - V)), clip)` held constant; gradient w.r.t.
/// the policy only.
pub fn policy_loss<T: Scalar>(p: &Params<T>, b: &Batch<T>, beta: f64, clip: f64) -> LossGrad<T> {
    policy_loss_from(p, b, &shared(p, b), T::from_f64(beta), T::from_f64(clip)).0
}
