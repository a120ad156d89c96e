//! Projections onto the constraint sets of the lawful set and their composition.
//!
//! No Rankine-Hugoniot projector exists: for the Burgers flux with the
//! arithmetic-mean speed the RH residual vanishes identically
//! (see [`crate::fv::rh_residual`]), so the constraint is always satisfied.

mod box_affine;
mod entropy;
mod helmholtz;

pub use box_affine::{
    project_affine, project_affine_vjp, project_box, project_box_sum, project_box_vjp, project_mass,
    project_mass_vjp, Bound,
};
pub use entropy::{entropy_clamp_outcome, project_entropy_clamp, ClampOutcome, DEFAULT_CLAMP_ITERS, DEFAULT_CLAMP_TOL};
pub use helmholtz::{project_helmholtz, spectral_divergence, spectral_vorticity, VectorField2D};

use crate::error::{CplError, Result};
use crate::fv::Scheme;
use crate::grid::{GridState, Mesh1D};

pub const DEFAULT_DYKSTRA_PASSES: usize = 10;
pub const DEFAULT_DYKSTRA_TOL: f64 = 1e-10;

/// One factor of the constraint intersection, acting on a flat vector.
#[derive(Debug, Clone, PartialEq)]
pub enum ProjectorDescriptor {
    Box { lower: Bound, upper: Bound },
    /// `weights . x = target`.
    AffineBalance { weights: Vec<f64>, target: f64 },
    /// Entropy clamp relative to the previous state; faces are rebuilt from `prev`.
    EntropyClamp { prev: Vec<f64>, mesh: Mesh1D, scheme: Scheme, max_iters: usize, tol: f64 },
    /// Acts on `[u, v]` flattened row-major.
    Helmholtz2D { nx: usize, ny: usize, hx: f64, hy: f64 },
}

impl ProjectorDescriptor {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            ProjectorDescriptor::Box { lower, upper } => box_affine::check_bounds(dim, lower, upper),
            ProjectorDescriptor::AffineBalance { weights, target } => {
                if weights.len() != dim {
                    return Err(CplError::ShapeMismatch { expected: dim, found: weights.len() });
                }
                if weights.iter().all(|w| *w == 0.0) {
                    return Err(CplError::DegenerateConstraint);
                }
                if !target.is_finite() {
                    return Err(CplError::InvalidConfig("affine target must be finite".into()));
                }
                Ok(())
            }
            ProjectorDescriptor::EntropyClamp { prev, mesh, .. } => {
                if prev.len() != dim || mesh.n_cells != dim {
                    return Err(CplError::ShapeMismatch { expected: dim, found: prev.len() });
                }
                Ok(())
            }
            ProjectorDescriptor::Helmholtz2D { nx, ny, .. } => {
                if 2 * nx * ny != dim {
                    return Err(CplError::ShapeMismatch { expected: dim, found: 2 * nx * ny });
                }
                Ok(())
            }
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            ProjectorDescriptor::Box { lower, upper } => project_box(x, lower, upper),
            ProjectorDescriptor::AffineBalance { weights, target } => project_affine(x, weights, *target),
            ProjectorDescriptor::EntropyClamp { prev, mesh, scheme, max_iters, tol } => {
                let prev = GridState::with_time(prev.clone(), 0);
                let cand = GridState::with_time(x.to_vec(), 1);
                let faces = scheme.faces(&prev);
                Ok(entropy_clamp_outcome(&prev, &cand, mesh, &faces, *max_iters, *tol)?.state.values)
            }
            ProjectorDescriptor::Helmholtz2D { nx, ny, hx, hy } => {
                let n = nx * ny;
                if x.len() != 2 * n {
                    return Err(CplError::ShapeMismatch { expected: 2 * n, found: x.len() });
                }
                let f = VectorField2D::new(*nx, *ny, *hx, *hy, x[..n].to_vec(), x[n..].to_vec())?;
                Ok(project_helmholtz(&f).to_flat())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct DykstraOutcome {
    pub x: Vec<f64>,
    /// Largest displacement `||P_j(x) - x||` over the constraints at the returned point.
    pub infeasibility: f64,
    pub passes: usize,
    pub converged: bool,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn infeasibility(x: &[f64], projectors: &[ProjectorDescriptor]) -> Result<f64> {
    let mut worst = 0.0f64;
    for p in projectors {
        worst = worst.max(dist(&p.apply(x)?, x));
    }
    Ok(worst)
}

/// Dykstra's alternating projections with per-constraint increments.
///
/// For convex factors the iterates converge to the Euclidean projection of `x0`
/// onto the intersection. Stops once every constraint moves the point by at most
/// `tol` and a full cycle moves it by at most `tol`, or after `passes` cycles; a
/// shortfall is reported, not raised.
pub fn compose_dykstra(x0: &[f64], projectors: &[ProjectorDescriptor], passes: usize, tol: f64) -> Result<DykstraOutcome> {
    if passes == 0 {
        return Err(CplError::InvalidConfig("passes must be >= 1".into()));
    }
    for p in projectors {
        p.validate(x0.len())?;
    }
    let mut x = x0.to_vec();
    let mut incr = vec![vec![0.0; x0.len()]; projectors.len()];
    let mut gap = infeasibility(&x, projectors)?;
    if gap <= tol {
        return Ok(DykstraOutcome { x, infeasibility: gap, passes: 0, converged: true });
    }
    for pass in 1..=passes {
        let start = x.clone();
        for (p, q) in projectors.iter().zip(incr.iter_mut()) {
            let shifted: Vec<f64> = x.iter().zip(q.iter()).map(|(a, b)| a + b).collect();
            let y = p.apply(&shifted)?;
            for ((qi, si), yi) in q.iter_mut().zip(&shifted).zip(&y) {
                *qi = si - yi;
            }
            x = y;
        }
        gap = infeasibility(&x, projectors)?;
        if gap <= tol && dist(&x, &start) <= tol {
            return Ok(DykstraOutcome { x, infeasibility: gap, passes: pass, converged: true });
        }
    }
    Ok(DykstraOutcome { x, infeasibility: gap, passes, converged: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_box() -> ProjectorDescriptor {
        ProjectorDescriptor::Box { lower: Bound::Uniform(0.0), upper: Bound::Uniform(1.0) }
    }

    #[test]
    fn box_and_simplex_line_in_2d() {
        let chain = [unit_box(), ProjectorDescriptor::AffineBalance { weights: vec![1.0, 1.0], target: 1.0 }];
        let out = compose_dykstra(&[2.0, -1.0], &chain, DEFAULT_DYKSTRA_PASSES, DEFAULT_DYKSTRA_TOL).unwrap();
        // brute force over the segment {(t, 1-t) : t in [0, 1]}
        let best = (0..=100_000)
            .map(|k| k as f64 / 100_000.0)
            .map(|t| (t, (t - 2.0).powi(2) + (1.0 - t + 1.0).powi(2)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        assert!(out.converged);
        assert!(dist(&out.x, &[best, 1.0 - best]) <= 1e-5);
        assert!(dist(&out.x, &[1.0, 0.0]) <= 1e-12);
    }

    #[test]
    fn single_projector_and_fixed_points() {
        let x = [1.7, -0.2, 0.4];
        let out = compose_dykstra(&x, &[unit_box()], 10, 1e-12).unwrap();
        assert_eq!(out.x, project_box(&x, &Bound::Uniform(0.0), &Bound::Uniform(1.0)).unwrap());
        let feasible = [0.5, 0.5];
        let chain = [unit_box(), ProjectorDescriptor::AffineBalance { weights: vec![1.0, 1.0], target: 1.0 }];
        let out = compose_dykstra(&feasible, &chain, 10, 1e-12).unwrap();
        assert_eq!(out.x, feasible.to_vec());
        assert_eq!(out.passes, 0);
    }

    /// Two routes to the same point: Dykstra against the closed-form box∩sum solver.
    #[test]
    fn dykstra_agrees_with_box_sum_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let n = 16;
            let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let t = rng.gen_range(2.0..14.0);
            let chain = [unit_box(), ProjectorDescriptor::AffineBalance { weights: vec![1.0; n], target: t }];
            let out = compose_dykstra(&z, &chain, 2000, 1e-13).unwrap();
            let exact = project_box_sum(&z, &Bound::Uniform(0.0), &Bound::Uniform(1.0), t).unwrap().unwrap();
            assert!(dist(&out.x, &exact) <= 1e-9, "distance {}", dist(&out.x, &exact));
        }
    }

    #[test]
    fn shortfall_is_reported() {
        let chain = [unit_box(), ProjectorDescriptor::AffineBalance { weights: vec![1.0, 2.0, 3.0], target: 2.5 }];
        let out = compose_dykstra(&[5.0, -4.0, 3.0], &chain, 1, 1e-15).unwrap();
        assert_eq!(out.passes, 1);
        assert!(!out.converged || out.infeasibility <= 1e-15);
    }

    #[test]
    fn descriptor_validation() {
        assert!(matches!(
            ProjectorDescriptor::AffineBalance { weights: vec![0.0; 3], target: 1.0 }.validate(3),
            Err(CplError::DegenerateConstraint)
        ));
        assert!(matches!(unit_box().validate(3), Ok(())));
        let bad = ProjectorDescriptor::Box { lower: Bound::Uniform(1.0), upper: Bound::Uniform(0.0) };
        assert!(matches!(bad.validate(2), Err(CplError::InvalidBounds { .. })));
        assert!(ProjectorDescriptor::Helmholtz2D { nx: 4, ny: 4, hx: 0.25, hy: 0.25 }.validate(31).is_err());
    }
}
