//! Projected training loop.
//!
//! Every prediction passes through the projection chain before any loss sees it,
//! and gradients flow back through the chain. The entropy clamp is treated as the
//! identity in the backward pass; the sensor mask and limiter gates are held fixed.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, CplError, Result};
use crate::fv::{entropy_residual_vjp, rh_residual, Scheme};
use crate::grid::{total_variation_of, GridState, Mesh1D};
use crate::losses::{
    cosine_tvd_weight, data_mse, data_mse_grad, hutchinson_curvature, loss_bounds, loss_bounds_grad, loss_entropy,
    loss_entropy_grad, loss_fv, loss_fv_grad, loss_rh, loss_tvd, loss_tvd_grad, update_weights, LossBreakdown,
    LossWeights, WeightState,
};
use crate::net::{init_params, ArchSpec, Checkpoint, Normalization, PredictorParams};
use crate::projectors::{entropy_clamp_outcome, project_box, project_box_sum, project_mass, Bound};
use crate::reference::Dataset;

/// One member of the output-space projection chain, applied in list order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ChainStep {
    /// Shift every cell equally so the total mass equals that of the previous state.
    MassBalance,
    /// On sensor-flagged cells, `x <- gamma x + (1 - gamma) fv_step(prev)`, then a
    /// uniform shift that undoes the mass change of the blend.
    BergerBlend { gamma: f64 },
    EntropyClamp { max_iters: usize, tol: f64 },
    /// Mass-preserving clamp into `[lower, upper]`.
    Bounds { lower: f64, upper: f64 },
}

pub const DEFAULT_BLEND_GAMMA: f64 = 0.5;

pub fn default_chain() -> Vec<ChainStep> {
    vec![
        ChainStep::MassBalance,
        ChainStep::BergerBlend { gamma: DEFAULT_BLEND_GAMMA },
        ChainStep::EntropyClamp {
            max_iters: crate::projectors::DEFAULT_CLAMP_ITERS,
            tol: crate::projectors::DEFAULT_CLAMP_TOL,
        },
    ]
}

/// Chain used while training and rolling out: entropy is penalized in the loss
/// rather than clamped.
pub fn training_chain() -> Vec<ChainStep> {
    vec![ChainStep::MassBalance, ChainStep::BergerBlend { gamma: DEFAULT_BLEND_GAMMA }]
}

/// What the backward pass needs from each chain member.
#[derive(Debug, Clone)]
pub(crate) enum StepRecord {
    Mass,
    Blend { mask: Vec<bool>, gamma: f64 },
    Clamp,
    BoundsSum { free: Vec<bool> },
    BoundsClip { inside: Vec<bool> },
}

#[derive(Debug, Clone, Default)]
pub(crate) struct ProjectionRecord {
    steps: Vec<StepRecord>,
    /// Largest positive entropy residual the clamp left behind.
    pub clamp_residual: f64,
}

pub(crate) fn project_recorded(
    candidate: &[f64],
    prev: &[f64],
    mesh: &Mesh1D,
    chain: &[ChainStep],
    scheme: &Scheme,
) -> Result<(Vec<f64>, ProjectionRecord)> {
    let dx = mesh.dx;
    let mut x = candidate.to_vec();
    let mut rec = ProjectionRecord::default();
    for step in chain {
        match *step {
            ChainStep::MassBalance => {
                let m: f64 = dx * prev.iter().sum::<f64>();
                x = project_mass(&x, dx, m);
                rec.steps.push(StepRecord::Mass);
            }
            ChainStep::BergerBlend { gamma } => {
                let faces = scheme.faces_of(prev);
                let fv = scheme.step_values(prev, mesh);
                let m_in: f64 = x.iter().sum();
                for i in 0..x.len() {
                    if faces.limiter_active[i] {
                        x[i] = gamma * x[i] + (1.0 - gamma) * fv[i];
                    }
                }
                let shift = (x.iter().sum::<f64>() - m_in) / x.len() as f64;
                x.iter_mut().for_each(|v| *v -= shift);
                rec.steps.push(StepRecord::Blend { mask: faces.limiter_active, gamma });
            }
            ChainStep::EntropyClamp { max_iters, tol } => {
                let p = GridState::with_time(prev.to_vec(), 0);
                let c = GridState::with_time(x, 1);
                let faces = scheme.faces_of(prev);
                let out = entropy_clamp_outcome(&p, &c, mesh, &faces, max_iters, tol)?;
                rec.clamp_residual = rec.clamp_residual.max(out.residual);
                x = out.state.values;
                rec.steps.push(StepRecord::Clamp);
            }
            ChainStep::Bounds { lower, upper } => {
                let (lo, hi) = (Bound::Uniform(lower), Bound::Uniform(upper));
                let total: f64 = x.iter().sum();
                match project_box_sum(&x, &lo, &hi, total)? {
                    Some(y) => {
                        let free = y.iter().map(|&v| v > lower && v < upper).collect();
                        x = y;
                        rec.steps.push(StepRecord::BoundsSum { free });
                    }
                    None => {
                        let inside = x.iter().map(|&v| v >= lower && v <= upper).collect();
                        x = project_box(&x, &lo, &hi)?;
                        rec.steps.push(StepRecord::BoundsClip { inside });
                    }
                }
            }
        }
    }
    Ok((x, rec))
}

/// VJP of the chain: returns gradients with respect to `(candidate, prev)`.
pub(crate) fn project_vjp(
    rec: &ProjectionRecord,
    prev: &[f64],
    mesh: &Mesh1D,
    scheme: &Scheme,
    upstream: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = upstream.len();
    let nf = n as f64;
    let mut g = upstream.to_vec();
    let mut g_prev = vec![0.0; n];
    for step in rec.steps.iter().rev() {
        match step {
            StepRecord::Mass => {
                let mean = g.iter().sum::<f64>() / nf;
                g.iter_mut().for_each(|v| *v -= mean);
                g_prev.iter_mut().for_each(|v| *v += mean);
            }
            StepRecord::Blend { mask, gamma } => {
                let mean = g.iter().sum::<f64>() / nf;
                let mut g_fv = vec![0.0; n];
                for i in 0..n {
                    if mask[i] {
                        g_fv[i] = (1.0 - gamma) * (g[i] - mean);
                        g[i] = gamma * g[i] + (1.0 - gamma) * mean;
                    }
                }
                let back = scheme.step_vjp(prev, mesh, &g_fv);
                g_prev.iter_mut().zip(back).for_each(|(a, b)| *a += b);
            }
            StepRecord::Clamp => {}
            StepRecord::BoundsSum { free } => {
                let n_free = free.iter().filter(|f| **f).count();
                let s_free: f64 = g.iter().zip(free).filter(|(_, f)| **f).map(|(v, _)| v).sum();
                let share = if n_free > 0 { s_free / n_free as f64 } else { 0.0 };
                for (v, f) in g.iter_mut().zip(free) {
                    if !*f {
                        *v = share;
                    }
                }
            }
            StepRecord::BoundsClip { inside } => {
                for (v, ok) in g.iter_mut().zip(inside) {
                    if !*ok {
                        *v = 0.0;
                    }
                }
            }
        }
    }
    (g, g_prev)
}

/// Projection of raw values, discarding the backward record.
pub fn project_values(candidate: &[f64], prev: &[f64], mesh: &Mesh1D, chain: &[ChainStep], scheme: &Scheme) -> Result<Vec<f64>> {
    Ok(project_recorded(candidate, prev, mesh, chain, scheme)?.0)
}

/// Applies `chain` to `candidate` given the previous state `prev`.
pub fn cpl_project_output(candidate: &GridState, prev: &GridState, mesh: &Mesh1D, chain: &[ChainStep]) -> Result<GridState> {
    if chain.is_empty() {
        return Err(CplError::InvalidConfig("projection chain is empty".into()));
    }
    candidate.check_on(mesh)?;
    prev.check_on(mesh)?;
    let out = project_values(&candidate.values, &prev.values, mesh, chain, &Scheme::default())?;
    ensure_finite(&out, "projected state")?;
    Ok(GridState::with_time(out, candidate.time_index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TvdSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Curriculum {
    Off,
    LinearRamp,
}

/// Rollout length at training progress `t` in `[0, 1]`: `1 + floor(t (R_max - 1))`.
pub fn curriculum_rollout(curriculum: Curriculum, r_max: usize, t: f64) -> usize {
    match curriculum {
        Curriculum::Off => 1,
        Curriculum::LinearRamp => (1 + (t.clamp(0.0, 1.0) * (r_max.saturating_sub(1)) as f64).floor() as usize).min(r_max),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveWeights {
    pub alpha: f64,
    pub beta: f64,
    /// Optimizer steps between weight updates.
    pub cadence: usize,
    pub hutchinson_probes: usize,
}

impl Default for AdaptiveWeights {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.0, cadence: 50, hutchinson_probes: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchSpec,
    /// Step size on the dimensionless objective (see [`loss_scales`]).
    pub eta: f64,
    pub momentum: f64,
    /// Cosine decay of `eta` to `eta / 100` over the run.
    pub eta_decay: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub adaptive: Option<AdaptiveWeights>,
    pub tvd_schedule: TvdSchedule,
    /// Exclude sensor-flagged cells from the TVD penalty.
    pub tvd_mask: bool,
    pub rollout_max: usize,
    pub curriculum: Curriculum,
    pub chain: Vec<ChainStep>,
    /// Bounds for the `L_bnd` penalty; `None` disables it.
    pub loss_bounds: Option<(f64, f64)>,
    pub seed: u64,
    pub val_fraction: f64,
    /// Global gradient-norm cap after scaling; `0` disables clipping.
    pub grad_clip: f64,
    /// Windows drawn per epoch; `0` uses every window.
    pub max_windows_per_epoch: usize,
    pub checkpoint_every: usize,
    /// Write zeros in the timing columns of the metrics CSV.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchSpec::default(),
            eta: 0.03,
            momentum: 0.9,
            eta_decay: true,
            epochs: 40,
            batch_size: 32,
            weights: LossWeights::default(),
            adaptive: None,
            tvd_schedule: TvdSchedule::Cosine,
            tvd_mask: true,
            rollout_max: 1,
            curriculum: Curriculum::Off,
            chain: training_chain(),
            loss_bounds: None,
            seed: 0,
            val_fraction: 0.1,
            grad_clip: 0.0,
            max_windows_per_epoch: 0,
            checkpoint_every: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if !(self.eta > 0.0) {
            return Err(CplError::InvalidConfig("eta must be > 0".into()));
        }
        if self.rollout_max < 1 {
            return Err(CplError::InvalidConfig("rollout_max must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(CplError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(CplError::InvalidConfig("val_fraction must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CplError::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Term multipliers for one objective evaluation: `[data, fv, ent, rh, tvd, bnd]`.
type TermWeights = [f64; 6];

/// Factors that make each term dimensionless before weighting.
///
/// With `s` the output scale, `U` the input scale and `N` cells: data and bound
/// excursions in units of `s^2`, the FV residual in `s/dt`, the entropy residual
/// (a hinge, linear) in `U s/dt`, the RH residual in `U s`, and the TVD excess in
/// `N s`. A correction of size `s` then contributes `O(1)` to every term.
pub fn loss_scales(norm: &Normalization, mesh: &Mesh1D) -> [f64; 6] {
    let s = norm.output_scale;
    let u = norm.input_scale;
    let n = mesh.n_cells as f64;
    [
        1.0 / (s * s),
        (mesh.dt / s).powi(2),
        mesh.dt / (u * s),
        1.0 / (u * s).powi(2),
        1.0 / (n * s),
        1.0 / (s * s),
    ]
}

/// Lawfulness statistics of projected predictions.
#[derive(Debug, Clone, Copy, Default)]
struct StepStats {
    mass_drift: f64,
    ent_pos_sum: f64,
    ent_pos_count: f64,
    cells: f64,
    dtv_plus_sum: f64,
    steps: f64,
    proj_secs: f64,
}

impl StepStats {
    fn merge(&mut self, o: &StepStats) {
        self.mass_drift = self.mass_drift.max(o.mass_drift);
        self.ent_pos_sum += o.ent_pos_sum;
        self.ent_pos_count += o.ent_pos_count;
        self.cells += o.cells;
        self.dtv_plus_sum += o.dtv_plus_sum;
        self.steps += o.steps;
        self.proj_secs += o.proj_secs;
    }
}

struct SampleResult {
    loss: LossBreakdown,
    grad: Vec<f64>,
    stats: StepStats,
}

/// Loss and parameter gradient of one window `(U^0, ..., U^R)` unrolled for `R`
/// projected steps; every term is averaged over the steps.
fn window_objective(
    params: &PredictorParams,
    window: &[Vec<f64>],
    mesh: &Mesh1D,
    cfg: &TrainConfig,
    tw: &TermWeights,
    want_grad: bool,
) -> Result<SampleResult> {
    let r = window.len() - 1;
    let scheme = Scheme::default();
    let inv_r = 1.0 / r as f64;
    let mut states: Vec<Vec<f64>> = Vec::with_capacity(r + 1);
    states.push(window[0].clone());
    let mut tapes = Vec::with_capacity(r);
    let mut records = Vec::with_capacity(r);
    let mut masks = Vec::with_capacity(r);
    let mut loss = LossBreakdown::default();
    let mut stats = StepStats::default();
    let m0: f64 = mesh.dx * window[0].iter().sum::<f64>();
    for t in 1..=r {
        let prev = &states[t - 1];
        let (raw, tape) = params.predict_values(prev, mesh);
        ensure_finite(&raw, "network output")?;
        let t0 = Instant::now();
        let (x, rec) = project_recorded(&raw, prev, mesh, &cfg.chain, &scheme)?;
        stats.proj_secs += t0.elapsed().as_secs_f64();
        ensure_finite(&x, "projected prediction")?;

        let ps = GridState::with_time(prev.clone(), 0);
        let xs = GridState::with_time(x.clone(), 1);
        let faces = scheme.faces(&ps);
        let fv_res: Vec<f64> = {
            let base = scheme.step_values(prev, mesh);
            x.iter().zip(&base).map(|(a, b)| (a - b) / mesh.dt).collect()
        };
        let ent = crate::fv::entropy_residual(&ps, &xs, &faces, mesh);
        let rh = rh_residual(&scheme.faces(&xs));
        let mask = if cfg.tvd_mask { Some(faces.limiter_active.clone()) } else { None };
        let (lo, hi) = cfg.loss_bounds.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));

        loss.data_mse += inv_r * data_mse(&x, &window[t]);
        loss.l_fv += inv_r * loss_fv(&fv_res);
        loss.l_ent += inv_r * loss_entropy(&ent);
        loss.l_rh += inv_r * loss_rh(&rh);
        loss.l_tvd += inv_r * loss_tvd(prev, &x, mask.as_deref());
        loss.l_bnd += inv_r * if cfg.loss_bounds.is_some() { loss_bounds(&x, lo, hi) } else { 0.0 };

        stats.mass_drift = stats.mass_drift.max((mesh.dx * x.iter().sum::<f64>() - m0).abs());
        stats.ent_pos_sum += ent.iter().map(|v| v.max(0.0)).sum::<f64>();
        stats.ent_pos_count += ent.iter().filter(|&&v| v > crate::diagnostics::ENTROPY_POS_FLOOR).count() as f64;
        stats.cells += x.len() as f64;
        stats.dtv_plus_sum += (total_variation_of(&x) - total_variation_of(prev)).max(0.0);
        stats.steps += 1.0;

        tapes.push(tape);
        records.push(rec);
        masks.push(mask);
        states.push(x);
    }
    loss.total = tw[0] * loss.data_mse
        + tw[1] * loss.l_fv
        + tw[2] * loss.l_ent
        + tw[3] * loss.l_rh
        + tw[4] * loss.l_tvd
        + tw[5] * loss.l_bnd;
    if !want_grad {
        return Ok(SampleResult { loss, grad: Vec::new(), stats });
    }

    let n = mesh.n_cells;
    let mut grad = vec![0.0; params.theta.len()];
    let mut g_state = vec![0.0; n];
    for t in (1..=r).rev() {
        let prev = &states[t - 1];
        let x = &states[t];
        let mut g_x = g_state;
        let mut g_prev = vec![0.0; n];
        let add = |acc: &mut [f64], src: &[f64], w: f64| acc.iter_mut().zip(src).for_each(|(a, b)| *a += w * b);

        if tw[0] != 0.0 {
            add(&mut g_x, &data_mse_grad(x, &window[t]), tw[0] * inv_r);
        }
        if tw[1] != 0.0 {
            let base = scheme.step_values(prev, mesh);
            let res: Vec<f64> = x.iter().zip(&base).map(|(a, b)| (a - b) / mesh.dt).collect();
            let gr: Vec<f64> = loss_fv_grad(&res).iter().map(|v| v / mesh.dt).collect();
            add(&mut g_x, &gr, tw[1] * inv_r);
            add(&mut g_prev, &scheme.step_vjp(prev, mesh, &gr), -tw[1] * inv_r);
        }
        if tw[2] != 0.0 {
            let ps = GridState::with_time(prev.clone(), 0);
            let xs = GridState::with_time(x.clone(), 1);
            let ent = crate::fv::entropy_residual(&ps, &xs, &scheme.faces(&ps), mesh);
            let ge = loss_entropy_grad(&ent);
            let (gp, gn) = entropy_residual_vjp(&scheme, prev, x, mesh, &ge);
            add(&mut g_x, &gn, tw[2] * inv_r);
            add(&mut g_prev, &gp, tw[2] * inv_r);
        }
        // L_RH is identically zero for Burgers faces, so it contributes no gradient.
        if tw[4] != 0.0 {
            let (gp, gn) = loss_tvd_grad(prev, x, masks[t - 1].as_deref());
            add(&mut g_x, &gn, tw[4] * inv_r);
            add(&mut g_prev, &gp, tw[4] * inv_r);
        }
        if tw[5] != 0.0 {
            if let Some((lo, hi)) = cfg.loss_bounds {
                add(&mut g_x, &loss_bounds_grad(x, lo, hi), tw[5] * inv_r);
            }
        }

        let (g_cand, g_prev_proj) = project_vjp(&records[t - 1], prev, mesh, &scheme, &g_x);
        let (g_theta, g_in) = params.predict_vjp(prev, mesh, &tapes[t - 1], &g_cand);
        grad.iter_mut().zip(&g_theta).for_each(|(a, b)| *a += b);
        g_state = g_in.iter().zip(&g_prev_proj).zip(&g_prev).map(|((a, b), c)| a + b + c).collect();
    }
    Ok(SampleResult { loss, grad, stats })
}

/// Objective and parameter gradient of one window `(U^0, ..., U^R)` unrolled for
/// `R` projected steps, with the configured weights (no TVD schedule) and the
/// dimensionless scaling of [`loss_scales`].
pub fn unrolled_objective(
    params: &PredictorParams,
    window: &[Vec<f64>],
    mesh: &Mesh1D,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    if window.len() < 2 {
        return Err(CplError::InsufficientData { needed: 2, found: window.len() });
    }
    let c = loss_scales(&params.norm, mesh);
    let w = cfg.weights;
    let tw = [c[0], c[1] * w.fv, c[2] * w.ent, c[3] * w.rh, c[4] * w.tvd, c[5] * w.bnd];
    let r = window_objective(params, window, mesh, cfg, &tw, true)?;
    Ok((r.loss, r.grad))
}

/// Runs `f` on a dedicated one-thread pool, so batch reductions and timing-free
/// outputs are reproducible bit for bit.
pub fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| CplError::InvalidConfig(e.to_string()))?;
    Ok(pool.install(f))
}

/// Batch mean of loss and gradient; samples run in parallel, reduction is sequential
/// in sample order.
fn batch_objective(
    params: &PredictorParams,
    windows: &[&[Vec<f64>]],
    mesh: &Mesh1D,
    cfg: &TrainConfig,
    tw: &TermWeights,
    want_grad: bool,
) -> Result<SampleResult> {
    let results: Vec<Result<SampleResult>> =
        windows.par_iter().map(|w| window_objective(params, w, mesh, cfg, tw, want_grad)).collect();
    let inv = 1.0 / windows.len() as f64;
    let mut loss = LossBreakdown::default();
    let mut grad = if want_grad { vec![0.0; params.theta.len()] } else { Vec::new() };
    let mut stats = StepStats::default();
    for r in results {
        let r = r?;
        loss.add(&r.loss.scaled(inv));
        grad.iter_mut().zip(&r.grad).for_each(|(a, b)| *a += inv * b);
        stats.merge(&r.stats);
    }
    Ok(SampleResult { loss, grad, stats })
}

/// Fits the fixed input and output scalings on the training windows.
///
/// Input scale: `max|U|`. Output scale: RMS of `U^{n+1} - fv_step(U^n)` in residual
/// mode, `max|U|` otherwise.
pub fn fit_normalization(dataset: &Dataset, arch: &ArchSpec) -> Normalization {
    let mut max_abs = 0.0f64;
    let mut sq = 0.0;
    let mut count = 0usize;
    let scheme = arch.scheme();
    for seq in &dataset.sequences {
        for s in seq {
            max_abs = s.iter().fold(max_abs, |m, v| m.max(v.abs()));
        }
        if arch.residual_mode {
            for w in seq.windows(2) {
                let base = scheme.step_values(&w[0], &dataset.mesh);
                sq += base.iter().zip(&w[1]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                count += base.len();
            }
        }
    }
    let input_scale = if max_abs > 0.0 { max_abs } else { 1.0 };
    let output_scale = if arch.residual_mode {
        let rms = (sq / count.max(1) as f64).sqrt();
        if rms > 1e-12 * input_scale {
            rms
        } else {
            1e-6 * input_scale
        }
    } else {
        input_scale
    };
    Normalization { input_scale, output_scale }
}

/// One row of the per-epoch metrics CSV.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub data_mse: f64,
    pub l_fv: f64,
    pub l_rh: f64,
    pub l_ent: f64,
    pub l_tvd: f64,
    pub l_bnd: f64,
    pub w_tvd: f64,
    pub rollout: usize,
    pub mass_drift: f64,
    pub ent_pos_mean: f64,
    pub ent_pos_frac: f64,
    pub dtv_plus: f64,
    pub wall_ms: f64,
    pub proj_overhead: f64,
    pub val_mse: f64,
}

pub const METRICS_CSV_HEADER: &str = "epoch,data_mse,l_fv,l_rh,l_ent,l_tvd,l_bnd,w_tvd,R,mass_drift,\
ent_pos_mean,ent_pos_frac,dtv_plus,wall_ms,proj_overhead";

impl EpochRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{:e},{:e},{:e},{:e},{:.3},{:.4}",
            self.epoch,
            self.data_mse,
            self.l_fv,
            self.l_rh,
            self.l_ent,
            self.l_tvd,
            self.l_bnd,
            self.w_tvd,
            self.rollout,
            self.mass_drift,
            self.ent_pos_mean,
            self.ent_pos_frac,
            self.dtv_plus,
            self.wall_ms,
            self.proj_overhead
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    pub best_epoch: Option<usize>,
    pub best_val_mse: f64,
    pub best_params: Option<PredictorParams>,
    pub step_count: u64,
    /// Number of times a non-finite step halved the learning rate.
    pub eta_halvings: usize,
    /// Set when training stopped early on repeated non-finite steps.
    pub aborted: Option<String>,
    pub final_lambdas: Option<Vec<f64>>,
}

impl TrainReport {
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{METRICS_CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(w, "{}", r.csv_row())?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn mean_proj_overhead(&self) -> f64 {
        let n = self.rows.len().max(1) as f64;
        self.rows.iter().map(|r| r.proj_overhead).sum::<f64>() / n
    }
}

/// Mutable optimizer state around the parameters.
pub struct Trainer<'a> {
    pub params: PredictorParams,
    pub cfg: &'a TrainConfig,
    pub mesh: Mesh1D,
    pub eta: f64,
    pub step_count: u64,
    pub eta_halvings: usize,
    velocity: Vec<f64>,
    pub weights: WeightState,
    w_tvd_factor: f64,
}

const MAX_HALVINGS: usize = 20;

impl<'a> Trainer<'a> {
    pub fn new(params: PredictorParams, cfg: &'a TrainConfig, mesh: Mesh1D) -> Self {
        let mut weights = WeightState::new(cfg.weights.as_array().to_vec());
        if let Some(a) = &cfg.adaptive {
            weights.alpha = a.alpha;
            weights.beta = a.beta;
            // adaptive weights start from the fixed values, floored into the clip range
            weights.lambdas.iter_mut().for_each(|l| *l = l.clamp(weights.lambda_min, weights.lambda_max));
        }
        let velocity = vec![0.0; params.theta.len()];
        Self { params, cfg, mesh, eta: cfg.eta, step_count: 0, eta_halvings: 0, velocity, weights, w_tvd_factor: 1.0 }
    }

    /// Current constraint weights `[fv, ent, rh, tvd, bnd]`, schedule applied.
    pub fn current_weights(&self) -> LossWeights {
        let mut w = LossWeights::from_array([
            self.weights.lambdas[0],
            self.weights.lambdas[1],
            self.weights.lambdas[2],
            self.weights.lambdas[3],
            self.weights.lambdas[4],
        ]);
        w.tvd *= self.w_tvd_factor;
        w
    }

    fn term_weights(&self) -> TermWeights {
        let w = self.current_weights();
        let c = loss_scales(&self.params.norm, &self.mesh);
        [c[0], c[1] * w.fv, c[2] * w.ent, c[3] * w.rh, c[4] * w.tvd, c[5] * w.bnd]
    }

    /// One momentum step on a batch of `(U^n, U^{n+1})` pairs.
    pub fn train_step(&mut self, batch: &[(&[f64], &[f64])]) -> Result<LossBreakdown> {
        let windows: Vec<Vec<Vec<f64>>> = batch.iter().map(|(a, b)| vec![a.to_vec(), b.to_vec()]).collect();
        let refs: Vec<&[Vec<f64>]> = windows.iter().map(|w| w.as_slice()).collect();
        Ok(self.step_windows(&refs)?.0)
    }

    /// One momentum step on windows of length `R + 1` unrolled for `R` steps.
    pub fn rollout_train_step(&mut self, sequences: &[&[Vec<f64>]], r: usize) -> Result<LossBreakdown> {
        if sequences.is_empty() {
            return Err(CplError::EmptyDataset);
        }
        let windows: Vec<&[Vec<f64>]> = sequences
            .iter()
            .map(|s| {
                if s.len() < r + 1 {
                    Err(CplError::InvalidConfig(format!("rollout {r} needs {} snapshots, got {}", r + 1, s.len())))
                } else {
                    Ok(&s[..r + 1])
                }
            })
            .collect::<Result<_>>()?;
        Ok(self.step_windows(&windows)?.0)
    }

    fn step_windows(&mut self, windows: &[&[Vec<f64>]]) -> Result<(LossBreakdown, StepStats)> {
        if windows.is_empty() {
            return Err(CplError::EmptyDataset);
        }
        let tw = self.term_weights();
        let res = match batch_objective(&self.params, windows, &self.mesh, self.cfg, &tw, true) {
            Ok(r) if r.loss.total.is_finite() && r.grad.iter().all(|g| g.is_finite()) => r,
            Ok(_) | Err(CplError::NonFinite { .. }) => {
                self.eta *= 0.5;
                self.eta_halvings += 1;
                log::warn!("non-finite step {}; eta halved to {:e}", self.step_count, self.eta);
                return Err(CplError::NonFinite { context: "training step", index: self.step_count as usize });
            }
            Err(e) => return Err(e),
        };
        if let Some(a) = self.cfg.adaptive.clone() {
            if a.cadence > 0 && self.step_count % a.cadence as u64 == 0 {
                self.adapt_weights(windows, &a, &res.loss)?;
            }
        }
        let mut g = res.grad;
        if self.cfg.grad_clip > 0.0 {
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > self.cfg.grad_clip {
                let c = self.cfg.grad_clip / norm;
                g.iter_mut().for_each(|v| *v *= c);
            }
        }
        for ((th, v), gi) in self.params.theta.iter_mut().zip(self.velocity.iter_mut()).zip(&g) {
            *v = self.cfg.momentum * *v - self.eta * gi;
            *th += *v;
        }
        self.step_count += 1;
        Ok((res.loss, res.stats))
    }

    fn adapt_weights(&mut self, windows: &[&[Vec<f64>]], a: &AdaptiveWeights, loss: &LossBreakdown) -> Result<()> {
        let c = loss_scales(&self.params.norm, &self.mesh);
        let raw = loss.constraint_terms();
        let terms: Vec<f64> = (0..5).map(|k| raw[k] * c[k + 1]).collect();
        let mut norms = [0.0; 5];
        let mut curv = [0.0; 5];
        for k in 0..5 {
            let mut tw = [0.0; 6];
            tw[k + 1] = c[k + 1];
            let g = batch_objective(&self.params, windows, &self.mesh, self.cfg, &tw, true)?.grad;
            norms[k] = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if self.weights.beta > 0.0 && norms[k] > 0.0 {
                let grad_fn = |theta: &[f64]| -> Vec<f64> {
                    let mut p = self.params.clone();
                    p.theta.copy_from_slice(theta);
                    batch_objective(&p, windows, &self.mesh, self.cfg, &tw, true).map(|r| r.grad).unwrap_or_default()
                };
                curv[k] = hutchinson_curvature(grad_fn, &self.params.theta, a.hutchinson_probes, self.cfg.seed ^ self.step_count);
            }
        }
        self.weights = update_weights(&self.weights, &terms, &norms, &curv);
        Ok(())
    }
}

/// All windows of length `r + 1`.
fn windows_of(dataset: &Dataset, r: usize) -> Vec<&[Vec<f64>]> {
    dataset
        .sequences
        .iter()
        .flat_map(|s| (0..s.len().saturating_sub(r)).map(move |t| &s[t..t + r + 1]))
        .collect()
}

/// Mean projected one-step data MSE over every pair of `dataset`.
pub fn one_step_mse(params: &PredictorParams, dataset: &Dataset, chain: &[ChainStep]) -> Result<f64> {
    let cfg = TrainConfig { chain: chain.to_vec(), tvd_mask: false, ..TrainConfig::default() };
    let windows = windows_of(dataset, 1);
    if windows.is_empty() {
        return Err(CplError::EmptyDataset);
    }
    Ok(batch_objective(params, &windows, &dataset.mesh, &cfg, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], false)?.loss.data_mse)
}

/// Full training run: normalization fit, optional sequence-level validation split,
/// epochs of shuffled minibatches, TVD schedule, curriculum and best-on-validation
/// tracking. `on_checkpoint` receives periodic checkpoints.
pub fn run_training_with(
    dataset: &Dataset,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    mut on_checkpoint: impl FnMut(usize, &Checkpoint) -> Result<()>,
) -> Result<(PredictorParams, TrainReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(CplError::EmptyDataset);
    }
    if cfg.rollout_max + 1 > dataset.seq_len {
        return Err(CplError::InvalidConfig(format!(
            "rollout_max {} needs sequences of length {}, dataset has {}",
            cfg.rollout_max,
            cfg.rollout_max + 1,
            dataset.seq_len
        )));
    }
    let (train, val) = if cfg.val_fraction > 0.0 && dataset.len() > 1 {
        dataset.split(cfg.val_fraction, cfg.seed)
    } else {
        (dataset.clone(), Dataset { sequences: Vec::new(), ..dataset.clone() })
    };
    let (params, start_step) = match resume {
        Some(ck) => {
            if ck.params.arch != cfg.arch {
                return Err(CplError::InvalidConfig("resume checkpoint architecture differs from config".into()));
            }
            (ck.params, ck.step_count)
        }
        None => {
            let mut p = init_params(&cfg.arch, cfg.seed)?;
            p.norm = fit_normalization(&train, &cfg.arch);
            (p, 0)
        }
    };
    let mut trainer = Trainer::new(params, cfg, dataset.mesh);
    trainer.step_count = start_step;
    let mut report = TrainReport {
        rows: Vec::with_capacity(cfg.epochs),
        best_epoch: None,
        best_val_mse: f64::INFINITY,
        best_params: None,
        step_count: start_step,
        eta_halvings: 0,
        aborted: None,
        final_lambdas: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let t = epoch as f64 / cfg.epochs as f64;
        let progress = if cfg.epochs > 1 { epoch as f64 / (cfg.epochs - 1) as f64 } else { 1.0 };
        let r = curriculum_rollout(cfg.curriculum, cfg.rollout_max, progress);
        trainer.w_tvd_factor = match cfg.tvd_schedule {
            TvdSchedule::Constant => 1.0,
            TvdSchedule::Cosine => cosine_tvd_weight(1.0, t),
        };
        if cfg.eta_decay {
            let base = cfg.eta * 0.5f64.powi(trainer.eta_halvings as i32);
            trainer.eta = base * (0.01 + 0.99 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()));
        }
        let mut windows = windows_of(&train, r);
        windows.shuffle(&mut rng);
        if cfg.max_windows_per_epoch > 0 {
            windows.truncate(cfg.max_windows_per_epoch);
        }
        let mut sum = LossBreakdown::default();
        let mut stats = StepStats::default();
        let mut batches = 0usize;
        let mut first = true;
        for batch in windows.chunks(cfg.batch_size) {
            if first && cfg.adaptive.is_some() {
                let c = loss_scales(&trainer.params.norm, &trainer.mesh);
                let tw = [c[0], 0.0, 0.0, 0.0, 0.0, 0.0];
                let l0 = batch_objective(&trainer.params, batch, &trainer.mesh, cfg, &tw, false)?.loss.total;
                trainer.weights.l0 = if l0 > 0.0 { l0 } else { 1.0 };
            }
            first = false;
            match trainer.step_windows(batch) {
                Ok((loss, st)) => {
                    sum.add(&loss);
                    stats.merge(&st);
                    batches += 1;
                }
                Err(CplError::NonFinite { .. }) if trainer.eta_halvings < MAX_HALVINGS => continue,
                Err(CplError::NonFinite { .. }) => {
                    report.aborted = Some(format!("repeated non-finite steps at epoch {epoch}"));
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let mean = sum.scaled(1.0 / batches.max(1) as f64);
        let val_mse = if val.is_empty() { mean.data_mse } else { one_step_mse(&trainer.params, &val, &cfg.chain)? };
        let wall = started.elapsed().as_secs_f64();
        let row = EpochRow {
            epoch,
            data_mse: mean.data_mse,
            l_fv: mean.l_fv,
            l_rh: mean.l_rh,
            l_ent: mean.l_ent,
            l_tvd: mean.l_tvd,
            l_bnd: mean.l_bnd,
            w_tvd: trainer.current_weights().tvd,
            rollout: r,
            mass_drift: stats.mass_drift,
            ent_pos_mean: stats.ent_pos_sum / stats.cells.max(1.0),
            ent_pos_frac: stats.ent_pos_count / stats.cells.max(1.0),
            dtv_plus: stats.dtv_plus_sum / stats.steps.max(1.0),
            wall_ms: if cfg.deterministic { 0.0 } else { 1e3 * wall },
            proj_overhead: if cfg.deterministic { 0.0 } else { stats.proj_secs / (wall * rayon::current_num_threads() as f64).max(1e-12) },
            val_mse,
        };
        log::info!(
            "epoch {epoch:>4} R={r} data_mse={:.3e} val_mse={:.3e} l_tvd={:.3e} dtv+={:.3e}",
            row.data_mse,
            row.val_mse,
            row.l_tvd,
            row.dtv_plus
        );
        report.rows.push(row);
        if val_mse < report.best_val_mse {
            report.best_val_mse = val_mse;
            report.best_epoch = Some(epoch);
            report.best_params = Some(trainer.params.clone());
        }
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(epoch, &Checkpoint { params: trainer.params.clone(), step_count: trainer.step_count })?;
        }
        if report.aborted.is_some() {
            break;
        }
    }
    report.step_count = trainer.step_count;
    report.eta_halvings = trainer.eta_halvings;
    if cfg.adaptive.is_some() {
        report.final_lambdas = Some(trainer.weights.lambdas.clone());
    }
    Ok((trainer.params, report))
}

pub fn run_training(dataset: &Dataset, cfg: &TrainConfig) -> Result<(PredictorParams, TrainReport)> {
    run_training_with(dataset, cfg, None, |_, _| Ok(()))
}
