//! Shared inputs for the benchmarks.

use cpl_core::{GridState, Mesh1D};

/// Periodic unit-domain mesh at CFL 0.4 for `|U| <= 1.5`, `nu = 0.01`.
pub fn mesh(n: usize) -> Mesh1D {
    let dx = 1.0 / n as f64;
    Mesh1D::new(n, dx, Mesh1D::stable_dt(dx, 0.01, 1.5, 0.4), 0.01).expect("valid mesh")
}

/// Sine with a step: smooth and shocked regions in one state.
pub fn state(mesh: &Mesh1D) -> GridState {
    GridState::from_fn(mesh, |x| (2.0 * std::f64::consts::PI * x).sin() + if x < 0.5 { 0.5 } else { 0.0 })
}
