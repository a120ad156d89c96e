//! Reliability metrics: per-step rollout diagnostics, shock alignment, Wilson
//! intervals and split-conformal quantiles.

use serde::{Deserialize, Serialize};

use crate::error::{CplError, Result};
use crate::fv::{entropy_residual, fv_residual, rh_residual, Scheme};
use crate::grid::{total_mass, total_variation_of, GridState, Mesh1D};
use crate::losses::{loss_bounds, pvs, PvsCoefficients};
use crate::net::PredictorParams;
use crate::reference::Dataset;
use crate::trainer::{cpl_project_output, project_values, ChainStep};

/// Entropy residuals at or below this floor count as round-off.
pub const ENTROPY_POS_FLOOR: f64 = 1e-12;

/// One row of diagnostics. `step == 0` marks the aggregate row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub mse_cpl: f64,
    pub mae_cpl: f64,
    /// `|M(t) - M(0)|`, worst sequence.
    pub mass_drift: f64,
    pub rh_mean: f64,
    pub ent_pos_mean: f64,
    pub ent_pos_frac: f64,
    /// Positive-residual fraction of the unprojected prediction.
    pub ent_pos_frac_raw: f64,
    pub dtv_plus: f64,
    pub bound_viol: f64,
    pub fv_residual_norm: f64,
    pub pvs: f64,
    pub shock_align_cells: f64,
    pub lawful_distance: f64,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "step,mse_cpl,mae_cpl,mass_drift,rh_mean,ent_pos_mean,ent_pos_frac,\
ent_pos_frac_raw,dtv_plus,bound_viol,fv_residual_norm,pvs,shock_align_cells,lawful_distance";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step,
            self.mse_cpl,
            self.mae_cpl,
            self.mass_drift,
            self.rh_mean,
            self.ent_pos_mean,
            self.ent_pos_frac,
            self.ent_pos_frac_raw,
            self.dtv_plus,
            self.bound_viol,
            self.fv_residual_norm,
            self.pvs,
            self.shock_align_cells,
            self.lawful_distance
        )
    }

    fn fields(&self) -> [f64; 13] {
        [
            self.mse_cpl,
            self.mae_cpl,
            self.mass_drift,
            self.rh_mean,
            self.ent_pos_mean,
            self.ent_pos_frac,
            self.ent_pos_frac_raw,
            self.dtv_plus,
            self.bound_viol,
            self.fv_residual_norm,
            self.pvs,
            self.shock_align_cells,
            self.lawful_distance,
        ]
    }

    fn from_fields(step: usize, f: [f64; 13]) -> Self {
        Self {
            step,
            mse_cpl: f[0],
            mae_cpl: f[1],
            mass_drift: f[2],
            rh_mean: f[3],
            ent_pos_mean: f[4],
            ent_pos_frac: f[5],
            ent_pos_frac_raw: f[6],
            dtv_plus: f[7],
            bound_viol: f[8],
            fv_residual_norm: f[9],
            pvs: f[10],
            shock_align_cells: f[11],
            lawful_distance: f[12],
        }
    }

    /// Mean over `rows`, except `mass_drift` which keeps the maximum.
    pub fn aggregate(rows: &[MetricsRecord]) -> MetricsRecord {
        let mut acc = [0.0; 13];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.fields()) {
                *a += v;
            }
        }
        let n = rows.len().max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc[2] = rows.iter().map(|r| r.mass_drift).fold(0.0, f64::max);
        MetricsRecord::from_fields(0, acc)
    }
}

fn argmax_slope(u: &[f64], slope: impl Fn(f64) -> f64) -> Result<usize> {
    let n = u.len();
    let mut best = (0usize, -1.0f64);
    for i in 0..n {
        let g = slope(u[(i + 1) % n] - u[(i + n - 1) % n]);
        if g > best.1 {
            best = (i, g);
        }
    }
    if best.1 <= 0.0 {
        return Err(CplError::DegenerateField);
    }
    Ok(best.0)
}

/// `argmax_i |U_{i+1} - U_{i-1}|`, lowest index on ties.
pub fn steepest_cell(u: &[f64]) -> Result<usize> {
    argmax_slope(u, f64::abs)
}

/// `argmax_i (U_{i-1} - U_{i+1})`: the steepest compressive (shock-like) drop.
pub fn shock_cell(u: &[f64]) -> Result<usize> {
    argmax_slope(u, |d| -d)
}

/// Circular index distance between the two cell indices.
pub fn circular_distance(a: usize, b: usize, n: usize) -> usize {
    let d = a.abs_diff(b) % n;
    d.min(n - d)
}

/// Circular distance between the steepest-gradient cells of `pred` and `reference`.
pub fn shock_alignment(pred: &GridState, reference: &GridState) -> Result<usize> {
    if pred.len() != reference.len() {
        return Err(CplError::ShapeMismatch { expected: reference.len(), found: pred.len() });
    }
    let (a, b) = (steepest_cell(&pred.values)?, steepest_cell(&reference.values)?);
    Ok(circular_distance(a, b, pred.len()))
}

/// Wilson score interval for a Bernoulli proportion.
pub fn wilson_interval(p_hat: f64, n_eff: usize, z: f64) -> (f64, f64) {
    let n = n_eff.max(1) as f64;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p_hat + z2 / (2.0 * n)) / denom;
    let half = z * (p_hat * (1.0 - p_hat) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).clamp(0.0, 1.0).min(p_hat), (center + half).clamp(0.0, 1.0).max(p_hat))
}

/// `||candidate - Pi_C(candidate)||_2`.
pub fn lawful_distance(candidate: &GridState, prev: &GridState, mesh: &Mesh1D, chain: &[ChainStep]) -> Result<f64> {
    let p = cpl_project_output(candidate, prev, mesh, chain)?;
    Ok(candidate.values.iter().zip(&p.values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// Split-conformal thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalQuantiles {
    pub q_global: f64,
    pub q_roll: Vec<f64>,
    pub coverage_target: f64,
}

/// `ceil((m+1) target)`-th smallest residual; ranks past `m` (e.g. `target = 1`)
/// are clipped to the largest residual.
pub fn conformal_quantile(residuals: &[f64], target: f64) -> Result<f64> {
    const MIN_CALIBRATION: usize = 20;
    let m = residuals.len();
    if m < MIN_CALIBRATION {
        return Err(CplError::InsufficientData { needed: MIN_CALIBRATION, found: m });
    }
    if !(target > 0.0 && target <= 1.0) {
        return Err(CplError::InvalidConfig(format!("coverage target {target} outside (0, 1]")));
    }
    let mut s = residuals.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = (((m + 1) as f64 * target).ceil() as usize).clamp(1, m);
    Ok(s[rank - 1])
}

/// `q_global` from the pooled one-step residuals, `q_roll[t]` from the residuals at
/// rollout step `t + 1`.
pub fn conformal_calibrate(one_step: &[f64], per_step: &[Vec<f64>], target: f64) -> Result<ConformalQuantiles> {
    let q_global = conformal_quantile(one_step, target)?;
    let q_roll = per_step.iter().map(|r| conformal_quantile(r, target)).collect::<Result<Vec<_>>>()?;
    Ok(ConformalQuantiles { q_global, q_roll, coverage_target: target })
}

/// Fraction of `residuals` at or below `q`.
pub fn empirical_coverage(residuals: &[f64], q: f64) -> f64 {
    residuals.iter().filter(|&&r| r <= q).count() as f64 / residuals.len().max(1) as f64
}

/// What advances the state during an evaluation rollout.
#[derive(Debug, Clone, Copy)]
pub enum Stepper<'a> {
    Model(&'a PredictorParams),
    Classical(Scheme),
}

impl Stepper<'_> {
    fn raw_step(&self, u: &[f64], mesh: &Mesh1D) -> Vec<f64> {
        match self {
            Stepper::Model(p) => p.predict_values(u, mesh).0,
            Stepper::Classical(s) => s.step_values(u, mesh),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub chain: Vec<ChainStep>,
    pub bounds: Option<(f64, f64)>,
    pub pvs: PvsCoefficients,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { chain: crate::trainer::training_chain(), bounds: None, pvs: PvsCoefficients::default() }
    }
}

/// Per-step output of [`evaluate_rollout`].
#[derive(Debug, Clone)]
pub struct RolloutEvaluation {
    /// One record per step `1..=horizon`, then the aggregate (step 0).
    pub records: Vec<MetricsRecord>,
    /// `abs_errors[t]`: every per-cell absolute error at step `t + 1`.
    pub abs_errors: Vec<Vec<f64>>,
}

/// Autoregressive rollout from the first snapshot of every sequence, projecting
/// after each step and scoring against the stored snapshots.
pub fn evaluate_rollout(stepper: Stepper<'_>, dataset: &Dataset, horizon: usize, cfg: &EvalConfig) -> Result<RolloutEvaluation> {
    if dataset.is_empty() {
        return Err(CplError::EmptyDataset);
    }
    if horizon == 0 || horizon + 1 > dataset.seq_len {
        return Err(CplError::InvalidConfig(format!(
            "horizon {horizon} needs sequences of length {}, dataset has {}",
            horizon + 1,
            dataset.seq_len
        )));
    }
    let mesh = dataset.mesh;
    let scheme = Scheme::default();
    let n = mesh.n_cells as f64;
    let mut sums = vec![[0.0f64; 13]; horizon];
    let mut drift = vec![0.0f64; horizon];
    let mut abs_errors = vec![Vec::new(); horizon];
    let mut align_counts = vec![0usize; horizon];
    for seq in &dataset.sequences {
        let mut state = GridState::with_time(seq[0].clone(), 0);
        let m0 = total_mass(&state, &mesh);
        for t in 0..horizon {
            let raw = stepper.raw_step(&state.values, &mesh);
            crate::error::ensure_finite(&raw, "rollout prediction")?;
            let projected = project_values(&raw, &state.values, &mesh, &cfg.chain, &scheme)?;
            let next = GridState::with_time(projected, state.time_index + 1);
            let truth = &seq[t + 1];
            let faces = scheme.faces(&state);
            let ent = entropy_residual(&state, &next, &faces, &mesh);
            let raw_state = GridState::with_time(raw.clone(), state.time_index + 1);
            let ent_raw = entropy_residual(&state, &raw_state, &faces, &mesh);
            let fvr = fv_residual(&state, &next, &mesh, &faces);
            let rh = rh_residual(&scheme.faces(&next));
            let errs: Vec<f64> = next.values.iter().zip(truth).map(|(a, b)| (a - b).abs()).collect();

            let row = &mut sums[t];
            row[0] += errs.iter().map(|e| e * e).sum::<f64>() / n;
            row[1] += errs.iter().sum::<f64>() / n;
            row[3] += rh.iter().sum::<f64>() / n;
            row[4] += ent.iter().map(|r| r.max(0.0)).sum::<f64>() / n;
            row[5] += ent.iter().filter(|&&r| r > ENTROPY_POS_FLOOR).count() as f64 / n;
            row[6] += ent_raw.iter().filter(|&&r| r > ENTROPY_POS_FLOOR).count() as f64 / n;
            row[7] += (total_variation_of(&next.values) - total_variation_of(&state.values)).max(0.0);
            if let Some((lo, hi)) = cfg.bounds {
                row[8] += loss_bounds(&next.values, lo, hi);
            }
            row[9] += fvr.iter().map(|r| r * r).sum::<f64>().sqrt();
            if let Ok(d) = shock_alignment(&next, &GridState::with_time(truth.clone(), 0)) {
                row[11] += d as f64;
                align_counts[t] += 1;
            }
            row[12] += raw.iter().zip(&next.values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            drift[t] = drift[t].max((total_mass(&next, &mesh) - m0).abs());
            abs_errors[t].extend(errs);
            state = next;
        }
    }
    let n_seq = dataset.len() as f64;
    let mut records: Vec<MetricsRecord> = sums
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let mut f = s.map(|v| v / n_seq);
            f[2] = drift[t];
            f[11] = if align_counts[t] > 0 { s[11] / align_counts[t] as f64 } else { 0.0 };
            let mut r = MetricsRecord::from_fields(t + 1, f);
            r.pvs = pvs(&r, &cfg.pvs);
            r
        })
        .collect();
    records.push(MetricsRecord::aggregate(&records));
    Ok(RolloutEvaluation { records, abs_errors })
}

/// Teacher-forced one-step evaluation over every consecutive pair of `dataset`.
///
/// The returned records hold step 1 and the aggregate; `abs_errors[0]` pools all
/// per-cell errors.
pub fn evaluate_one_step(stepper: Stepper<'_>, dataset: &Dataset, cfg: &EvalConfig) -> Result<RolloutEvaluation> {
    evaluate_rollout(stepper, &dataset.one_step_pairs(), 1, cfg)
}

/// PVS with each component divided by its standard deviation over `rows`
/// (components with zero spread are left unscaled).
pub fn normalized_pvs(rows: &[MetricsRecord], k: &PvsCoefficients) -> Vec<f64> {
    let comps = |r: &MetricsRecord| [r.fv_residual_norm, r.ent_pos_mean, r.dtv_plus, r.bound_viol];
    let n = rows.len().max(1) as f64;
    let mut mean = [0.0; 4];
    for r in rows {
        for (m, c) in mean.iter_mut().zip(comps(r)) {
            *m += c / n;
        }
    }
    let mut sd = [0.0; 4];
    for r in rows {
        for ((s, c), m) in sd.iter_mut().zip(comps(r)).zip(mean) {
            *s += (c - m) * (c - m) / n;
        }
    }
    let sd = sd.map(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
    rows.iter()
        .map(|r| {
            let c = comps(r);
            k.a * c[0] / sd[0] + k.b * c[1] / sd[1] + k.c * c[2] / sd[2] + k.d * c[3] / sd[3]
        })
        .collect()
}
