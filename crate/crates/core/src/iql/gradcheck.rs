//! Central finite-difference verification of the analytic gradients.

use rand::seq::index::sample;

use super::losses::{policy_loss, q_loss, v_loss, Batch, Params};
use super::mlp::Mlp;
use super::Hyper;
use crate::seed;

const MIN_COORDS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub v: f64,
    pub q: f64,
    pub policy: f64,
    pub coords_per_net: usize,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        self.v.max(self.q).max(self.policy)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps coordinates whose true
/// gradient is zero from dominating through rounding noise.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn check_net(
    params: &Params<f64>,
    get: fn(&mut Params<f64>) -> &mut Mlp<f64>,
    loss: &dyn Fn(&Params<f64>) -> f64,
    analytic: &[f64],
    eps: f64,
    coords: &[usize],
) -> f64 {
    let mut p = params.clone();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let orig = get(&mut p).params[i];
        get(&mut p).params[i] = orig + eps;
        let up = loss(&p);
        get(&mut p).params[i] = orig - eps;
        let down = loss(&p);
        get(&mut p).params[i] = orig;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * eps)));
    }
    worst
}

fn pick_coords(len: usize, salt: u64) -> Vec<usize> {
    if len <= MIN_COORDS {
        return (0..len).collect();
    }
    let mut rng = seed::rng(seed::derive(0x6772_6164, &[salt, len as u64]));
    let mut idx = sample(&mut rng, len, MIN_COORDS).into_vec();
    idx.sort_unstable();
    idx
}

/// Worst relative error between analytic and central-difference gradients
/// of the three losses, each w.r.t. its own network, over at least 200
/// coordinates per network (all of them for smaller networks).
pub fn grad_check(params: &Params<f64>, batch: &Batch<f64>, hyper: &Hyper, eps: f64) -> GradCheckReport {
    grad_check_with(params, batch, hyper, eps, |_| {})
}

/// Like [`grad_check`], but `mutate` may alter the analytic gradients
/// first; used to confirm the check detects a wrong gradient.
pub fn grad_check_with(
    params: &Params<f64>,
    batch: &Batch<f64>,
    hyper: &Hyper,
    eps: f64,
    mutate: impl Fn(&mut [f64]),
) -> GradCheckReport {
    let (q, g, beta, clip) = (hyper.q_expectile, hyper.gamma, hyper.beta, hyper.awr_weight_clip);

    let mut gv = v_loss(params, batch, q).grad;
    mutate(&mut gv);
    let cv = pick_coords(gv.len(), 1);
    let v = check_net(params, |p| &mut p.v, &|p| v_loss(p, batch, q).loss, &gv, eps, &cv);

    let mut gq = q_loss(params, batch, g).grad;
    mutate(&mut gq);
    let cq = pick_coords(gq.len(), 2);
    let qe = check_net(params, |p| &mut p.q, &|p| q_loss(p, batch, g).loss, &gq, eps, &cq);

    let mut gp = policy_loss(params, batch, beta, clip).grad;
    mutate(&mut gp);
    let cp = pick_coords(gp.len(), 3);
    let pe = check_net(params, |p| &mut p.policy, &|p| policy_loss(p, batch, beta, clip).loss, &gp, eps, &cp);

    GradCheckReport { v, q: qe, policy: pe, coords_per_net: cv.len().min(cq.len()).min(cp.len()) }
}
