//! Inference-time entropy clamp.
//!
//! With the faces of `prev` fixed, the flux part `D_i` of the entropy residual does
//! not depend on the candidate, so `r_i <= 0` is the interval constraint
//! `|U_i| <= rho_i` with `rho_i^2 = U_i^n^2 - 2 dt D_i`. One sweep damps every
//! violating amplitude onto its interval and restores the mass by a common shift,
//! solved jointly as the Euclidean projection onto (intervals ∩ mass hyperplane).
//! Later sweeps only mop up round-off. Cells whose interval is empty
//! (`rho_i^2 < 0`) are clamped to zero and keep a positive residual; the clamp
//! then reports the residual it achieved.

use crate::error::{CplError, Result};
use crate::fv::{entropy_flux_divergence, entropy_residual};
use crate::grid::{total_mass, FaceStates, GridState, Mesh1D};

use super::box_affine::{project_box_sum, project_mass, Bound};

pub const DEFAULT_CLAMP_TOL: f64 = 1e-10;
pub const DEFAULT_CLAMP_ITERS: usize = 8;

#[derive(Debug, Clone)]
pub struct ClampOutcome {
    pub state: GridState,
    /// Largest positive entropy residual after the clamp.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn max_positive(r: &[f64]) -> f64 {
    r.iter().fold(0.0f64, |m, &v| m.max(v))
}

/// Runs the clamp and always returns the final state with its achieved residual.
pub fn entropy_clamp_outcome(
    prev: &GridState,
    candidate: &GridState,
    mesh: &Mesh1D,
    faces: &FaceStates,
    max_iters: usize,
    tol: f64,
) -> Result<ClampOutcome> {
    candidate.check_on(mesh)?;
    let residual_of = |s: &GridState| max_positive(&entropy_residual(prev, s, faces, mesh));
    let residual = residual_of(candidate);
    if residual <= tol {
        return Ok(ClampOutcome { state: candidate.clone(), residual, iterations: 0, converged: true });
    }

    let div = entropy_flux_divergence(prev, faces, mesh);
    let radius: Vec<f64> = prev
        .values
        .iter()
        .zip(&div)
        .map(|(u, d)| (u * u - 2.0 * mesh.dt * d).max(0.0).sqrt())
        .collect();
    let lower = Bound::PerCell(radius.iter().map(|r| -r).collect());
    let upper = Bound::PerCell(radius);
    let mass = total_mass(candidate, mesh);
    let time_index = candidate.time_index;

    let mut state = candidate.clone();
    let mut residual = residual;
    let mut iterations = 0;
    while iterations < max_iters && residual > tol {
        iterations += 1;
        let values = match project_box_sum(&state.values, &lower, &upper, mass / mesh.dx)? {
            Some(v) => v,
            // mass outside the admissible range: mass wins
            None => project_mass(&super::project_box(&state.values, &lower, &upper)?, mesh.dx, mass),
        };
        state = GridState::with_time(values, time_index);
        residual = residual_of(&state);
    }
    Ok(ClampOutcome { state, residual, iterations, converged: residual <= tol })
}

/// Entropy clamp with a hard contract: `MaxItersExceeded` when the positive residual
/// stays above `tol`. The error carries the achieved residual; callers that accept
/// a best effort use [`entropy_clamp_outcome`].
pub fn project_entropy_clamp(
    prev: &GridState,
    candidate: &GridState,
    mesh: &Mesh1D,
    faces: &FaceStates,
    max_iters: usize,
    tol: f64,
) -> Result<GridState> {
    let out = entropy_clamp_outcome(prev, candidate, mesh, faces, max_iters, tol)?;
    if out.converged {
        Ok(out.state)
    } else {
        Err(CplError::MaxItersExceeded { iterations: out.iterations, residual: out.residual })
    }
}
