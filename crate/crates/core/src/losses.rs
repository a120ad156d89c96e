//! Training penalties, their gradients, the adaptive weight rule and the Physics
//! Violation Score.
//!
//! Hinge and absolute-value kinks use the zero subgradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::MetricsRecord;

#[inline]
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        v.sum::<f64>() / n as f64
    }
}

pub fn data_mse(pred: &[f64], target: &[f64]) -> f64 {
    mean(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)), pred.len())
}

pub fn data_mse_grad(pred: &[f64], target: &[f64]) -> Vec<f64> {
    let c = 2.0 / pred.len() as f64;
    pred.iter().zip(target).map(|(p, t)| c * (p - t)).collect()
}

/// Mean of `R_i^2`.
pub fn loss_fv(residual: &[f64]) -> f64 {
    mean(residual.iter().map(|r| r * r), residual.len())
}

pub fn loss_fv_grad(residual: &[f64]) -> Vec<f64> {
    let c = 2.0 / residual.len() as f64;
    residual.iter().map(|r| c * r).collect()
}

/// Mean of `max(0, r_i)`.
pub fn loss_entropy(residual: &[f64]) -> f64 {
    mean(residual.iter().map(|r| r.max(0.0)), residual.len())
}

pub fn loss_entropy_grad(residual: &[f64]) -> Vec<f64> {
    let c = 1.0 / residual.len() as f64;
    residual.iter().map(|&r| if r > 0.0 { c } else { 0.0 }).collect()
}

/// Mean of squared RH residuals.
pub fn loss_rh(residual: &[f64]) -> f64 {
    loss_fv(residual)
}

pub fn loss_rh_grad(residual: &[f64]) -> Vec<f64> {
    loss_fv_grad(residual)
}

/// Mean of squared excursions outside `[u_min, u_max]`.
pub fn loss_bounds(values: &[f64], u_min: f64, u_max: f64) -> f64 {
    mean(
        values.iter().map(|&u| {
            let hi = (u - u_max).max(0.0);
            let lo = (u_min - u).max(0.0);
            hi * hi + lo * lo
        }),
        values.len(),
    )
}

pub fn loss_bounds_grad(values: &[f64], u_min: f64, u_max: f64) -> Vec<f64> {
    let c = 2.0 / values.len() as f64;
    values
        .iter()
        .map(|&u| c * ((u - u_max).max(0.0) - (u_min - u).max(0.0)))
        .collect()
}

/// Total variation over faces whose two cells are both unmasked.
pub fn masked_total_variation(values: &[f64], mask: Option<&[bool]>) -> f64 {
    let n = values.len();
    (0..n)
        .filter(|&i| mask.is_none_or(|m| !m[i] && !m[(i + 1) % n]))
        .map(|i| (values[(i + 1) % n] - values[i]).abs())
        .sum()
}

/// `max(0, TV(next) - TV(prev))`; faces touching a masked cell count in neither sum.
pub fn loss_tvd(prev: &[f64], next: &[f64], mask: Option<&[bool]>) -> f64 {
    (masked_total_variation(next, mask) - masked_total_variation(prev, mask)).max(0.0)
}

/// Gradient of [`loss_tvd`] with respect to `(prev, next)`.
pub fn loss_tvd_grad(prev: &[f64], next: &[f64], mask: Option<&[bool]>) -> (Vec<f64>, Vec<f64>) {
    let n = prev.len();
    let mut g_prev = vec![0.0; n];
    let mut g_next = vec![0.0; n];
    if loss_tvd(prev, next, mask) <= 0.0 {
        return (g_prev, g_next);
    }
    for i in 0..n {
        let ip = (i + 1) % n;
        if mask.is_some_and(|m| m[i] || m[ip]) {
            continue;
        }
        let sn = sign0(next[ip] - next[i]);
        g_next[ip] += sn;
        g_next[i] -= sn;
        let sp = sign0(prev[ip] - prev[i]);
        g_prev[ip] -= sp;
        g_prev[i] += sp;
    }
    (g_prev, g_next)
}

/// Per-term values of one objective evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub data_mse: f64,
    pub l_fv: f64,
    pub l_rh: f64,
    pub l_ent: f64,
    pub l_tvd: f64,
    pub l_bnd: f64,
    pub total: f64,
}

/// Fixed weights of the constraint terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub fv: f64,
    pub ent: f64,
    pub rh: f64,
    pub tvd: f64,
    pub bnd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { fv: 0.0, ent: 0.8, rh: 0.0, tvd: 0.10, bnd: 0.0 }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 5] {
        [self.fv, self.ent, self.rh, self.tvd, self.bnd]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self { fv: a[0], ent: a[1], rh: a[2], tvd: a[3], bnd: a[4] }
    }
}

impl LossBreakdown {
    pub fn constraint_terms(&self) -> [f64; 5] {
        [self.l_fv, self.l_ent, self.l_rh, self.l_tvd, self.l_bnd]
    }

    /// Recomputes `total = data_mse + sum(w_i L_i)`.
    pub fn with_total(mut self, w: &LossWeights) -> Self {
        self.total = self.data_mse
            + w.as_array().iter().zip(self.constraint_terms()).map(|(w, l)| w * l).sum::<f64>();
        self
    }

    pub fn add(&mut self, other: &LossBreakdown) {
        self.data_mse += other.data_mse;
        self.l_fv += other.l_fv;
        self.l_rh += other.l_rh;
        self.l_ent += other.l_ent;
        self.l_tvd += other.l_tvd;
        self.l_bnd += other.l_bnd;
        self.total += other.total;
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.data_mse *= s;
        self.l_fv *= s;
        self.l_rh *= s;
        self.l_ent *= s;
        self.l_tvd *= s;
        self.l_bnd *= s;
        self.total *= s;
        self
    }
}

/// State of the adaptive constraint-weight rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightState {
    pub lambdas: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    /// Normalizer `L0`; the trainer sets it to the data MSE at the start of each epoch.
    pub l0: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl WeightState {
    pub fn new(lambdas: Vec<f64>) -> Self {
        Self { lambdas, alpha: 0.5, beta: 0.0, l0: 1.0, lambda_min: 1e-3, lambda_max: 1e3 }
    }
}

/// `lambda_i <- lambda_i (L_i/L0)^alpha g_i (1 + beta H_i) / mean_j(g_j (1 + beta H_j))`,
/// clipped into `[lambda_min, lambda_max]`. A zero mean leaves the weights unscaled
/// apart from the clip.
pub fn update_weights(w: &WeightState, losses: &[f64], grad_norms: &[f64], curvatures: &[f64]) -> WeightState {
    let n = w.lambdas.len();
    let score: Vec<f64> = (0..n).map(|i| grad_norms[i] * (1.0 + w.beta * curvatures[i])).collect();
    let denom = score.iter().sum::<f64>() / n as f64;
    let lambdas = (0..n)
        .map(|i| {
            let ratio = if denom > 0.0 { (losses[i] / w.l0).powf(w.alpha) * score[i] / denom } else { 1.0 };
            let v = w.lambdas[i] * ratio;
            if v.is_nan() {
                w.lambda_min
            } else {
                v.clamp(w.lambda_min, w.lambda_max)
            }
        })
        .collect();
    WeightState { lambdas, ..w.clone() }
}

/// Hutchinson estimate of `mean |v^T H v| / dim` over Rademacher probes (the mean
/// Hessian eigenvalue scale), with the Hessian-vector product replaced by
/// `(grad(theta + h v) - grad(theta)) / h`, `h = 1e-4`.
pub fn hutchinson_curvature(grad: impl Fn(&[f64]) -> Vec<f64>, params: &[f64], n_probes: usize, seed: u64) -> f64 {
    const H: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g0 = grad(params);
    let mut acc = 0.0;
    for _ in 0..n_probes.max(1) {
        let v: Vec<f64> = (0..params.len()).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        let shifted: Vec<f64> = params.iter().zip(&v).map(|(p, vi)| p + H * vi).collect();
        let g1 = grad(&shifted);
        let vhv: f64 = g1.iter().zip(&g0).zip(&v).map(|((a, b), vi)| (a - b) / H * vi).sum();
        acc += vhv.abs();
    }
    acc / (n_probes.max(1) * params.len().max(1)) as f64
}

/// Cosine-annealed TVD weight `w0 (1 + cos(pi t)) / 2` with floor `w0 / 10`, `t` in `[0, 1]`.
pub fn cosine_tvd_weight(w0: f64, t: f64) -> f64 {
    let w = 0.5 * w0 * (1.0 + (std::f64::consts::PI * t.clamp(0.0, 1.0)).cos());
    w.max(0.1 * w0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PvsCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Default for PvsCoefficients {
    fn default() -> Self {
        Self { a: 1.0, b: 1.0, c: 1.0, d: 1.0 }
    }
}

/// `a ||R||_2 + b EntViol + c TVDViol + d BoundViol`.
pub fn pvs(m: &MetricsRecord, k: &PvsCoefficients) -> f64 {
    k.a * m.fv_residual_norm + k.b * m.ent_pos_mean + k.c * m.dtv_plus + k.d * m.bound_viol
}
