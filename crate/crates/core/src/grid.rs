//! Uniform periodic 1-D mesh and the cell-average state container.
//!
//! Cell `i` covers `[i*dx, (i+1)*dx)` on a periodic domain of length `n_cells * dx`.
//! Face `i+1/2` sits between cell `i` and cell `(i+1) mod n`; every face-indexed
//! vector in this crate stores face `i+1/2` at index `i`.

use crate::error::{ensure_finite, CplError, Result};

/// Wraps `i` into `[0, n)`.
#[inline]
pub fn periodic_index(i: isize, n: usize) -> usize {
    debug_assert!(n >= 1);
    i.rem_euclid(n as isize) as usize
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mesh1D {
    pub n_cells: usize,
    pub dx: f64,
    pub dt: f64,
    pub nu: f64,
}

impl Mesh1D {
    pub fn new(n_cells: usize, dx: f64, dt: f64, nu: f64) -> Result<Self> {
        if n_cells < 4 {
            return Err(CplError::InvalidConfig(format!("n_cells must be >= 4, got {n_cells}")));
        }
        if !(dx > 0.0 && dx.is_finite()) || !(dt > 0.0 && dt.is_finite()) {
            return Err(CplError::InvalidConfig(format!("dx and dt must be positive, got dx={dx}, dt={dt}")));
        }
        if !(nu >= 0.0 && nu.is_finite()) {
            return Err(CplError::InvalidConfig(format!("nu must be >= 0, got {nu}")));
        }
        Ok(Self { n_cells, dx, dt, nu })
    }

    /// Mesh on a domain of the given length.
    pub fn on_domain(n_cells: usize, length: f64, dt: f64, nu: f64) -> Result<Self> {
        Self::new(n_cells, length / n_cells as f64, dt, nu)
    }

    pub fn domain_length(&self) -> f64 {
        self.n_cells as f64 * self.dx
    }

    /// Cell-centre coordinate of cell `i`.
    pub fn center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dx
    }

    /// Combined advective-diffusive Courant number `dt * (a/dx + 2 nu/dx^2)`.
    ///
    /// Reduces to `a dt/dx` in the inviscid case.
    pub fn cfl_number(&self, max_speed: f64) -> f64 {
        self.dt * (max_speed / self.dx + 2.0 * self.nu / (self.dx * self.dx))
    }

    /// Largest step whose combined Courant number equals `cfl`.
    pub fn stable_dt(dx: f64, nu: f64, max_speed: f64, cfl: f64) -> f64 {
        let rate = max_speed / dx + 2.0 * nu / (dx * dx);
        if rate > 0.0 {
            cfl / rate
        } else {
            cfl * dx
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    pub values: Vec<f64>,
    pub time_index: usize,
}

impl GridState {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        ensure_finite(&values, "grid state")?;
        Ok(Self { values, time_index: 0 })
    }

    pub fn with_time(values: Vec<f64>, time_index: usize) -> Self {
        Self { values, time_index }
    }

    /// Samples `f` at the cell centres of `mesh`.
    pub fn from_fn(mesh: &Mesh1D, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..mesh.n_cells).map(|i| f(mesh.center(i))).collect();
        Self { values, time_index: 0 }
    }

    pub fn constant(n: usize, value: f64) -> Self {
        Self { values: vec![value; n], time_index: 0 }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn check_on(&self, mesh: &Mesh1D) -> Result<()> {
        if self.values.len() != mesh.n_cells {
            return Err(CplError::ShapeMismatch { expected: mesh.n_cells, found: self.values.len() });
        }
        Ok(())
    }

    /// Cyclic rotation: new[i] = old[(i - shift) mod n].
    pub fn rotated(&self, shift: isize) -> Self {
        let n = self.values.len();
        let values = (0..n)
            .map(|i| self.values[periodic_index(i as isize - shift, n)])
            .collect();
        Self { values, time_index: self.time_index }
    }
}

/// Reconstructed interface states; `left[i]` is U^-_{i+1/2} (from cell i) and
/// `right[i]` is U^+_{i+1/2} (from cell i+1).
#[derive(Debug, Clone, PartialEq)]
pub struct FaceStates {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub limiter_active: Vec<bool>,
}

impl FaceStates {
    /// First-order faces: both sides take the adjacent cell average.
    pub fn piecewise_constant(values: &[f64]) -> Self {
        let n = values.len();
        Self {
            left: values.to_vec(),
            right: (0..n).map(|i| values[(i + 1) % n]).collect(),
            limiter_active: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }
}

/// M = dx * sum(U), summed left to right.
pub fn total_mass(state: &GridState, mesh: &Mesh1D) -> f64 {
    mesh.dx * state.values.iter().sum::<f64>()
}

/// Periodic total variation including the wrap-around face.
pub fn total_variation(state: &GridState) -> f64 {
    total_variation_of(&state.values)
}

pub fn total_variation_of(values: &[f64]) -> f64 {
    let n = values.len();
    (0..n).map(|i| (values[(i + 1) % n] - values[i]).abs()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn periodic_index_examples() {
        assert_eq!(periodic_index(5, 4), 1);
        assert_eq!(periodic_index(-1, 128), 127);
        assert_eq!(periodic_index(0, 7), 0);
    }

    #[test]
    fn mass_examples() {
        let mesh = Mesh1D::on_domain(128, 1.0, 1e-3, 0.0).unwrap();
        assert_eq!(total_mass(&GridState::constant(128, 0.0), &mesh), 0.0);
        assert!((total_mass(&GridState::constant(128, 1.0), &mesh) - 1.0).abs() < 1e-15);
        let sine = GridState::from_fn(&mesh, |x| (2.0 * PI * x).sin());
        assert!(total_mass(&sine, &mesh).abs() <= 1e-14);
    }

    #[test]
    fn tv_examples() {
        assert_eq!(total_variation_of(&[3.0; 8]), 0.0);
        assert_eq!(total_variation_of(&[0.0, 1.0, 0.0, 0.0]), 2.0);
        let step: Vec<f64> = (0..16).map(|i| if i < 8 { 1.0 } else { 0.0 }).collect();
        assert_eq!(total_variation_of(&step), 2.0);
    }

    #[test]
    fn mesh_rejects_bad_input() {
        assert!(Mesh1D::new(3, 0.1, 0.1, 0.0).is_err());
        assert!(Mesh1D::new(8, 0.0, 0.1, 0.0).is_err());
        assert!(Mesh1D::new(8, 0.1, 0.1, -1.0).is_err());
        assert!(GridState::new(vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn stable_dt_hits_target_cfl() {
        let dt = Mesh1D::stable_dt(1.0 / 128.0, 0.01, 2.0, 0.4);
        let mesh = Mesh1D::on_domain(128, 1.0, dt, 0.01).unwrap();
        assert!((mesh.cfl_number(2.0) - 0.4).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn tv_rotation_invariant(values in prop::collection::vec(-5.0f64..5.0, 4..40), shift in -50isize..50) {
            let s = GridState::with_time(values, 0);
            let a = total_variation(&s);
            let b = total_variation(&s.rotated(shift));
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
        }

        #[test]
        fn mass_is_linear(
            pair in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 4..64),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let n = pair.len();
            let mesh = Mesh1D::on_domain(n, 1.0, 1e-3, 0.0).unwrap();
            let u = GridState::with_time(pair.iter().map(|p| p.0).collect(), 0);
            let v = GridState::with_time(pair.iter().map(|p| p.1).collect(), 0);
            let w = GridState::with_time(pair.iter().map(|p| a * p.0 + b * p.1).collect(), 0);
            let lhs = total_mass(&w, &mesh);
            let rhs = a * total_mass(&u, &mesh) + b * total_mass(&v, &mesh);
            let scale = (a.abs() * total_mass(&u, &mesh).abs() + b.abs() * total_mass(&v, &mesh).abs()).max(1.0);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * scale);
        }

        #[test]
        fn periodic_index_shift(i in -10_000isize..10_000, n in 1usize..500) {
            prop_assert_eq!(periodic_index(i + n as isize, n), periodic_index(i, n));
        }
    }
}
