//! Finite-volume machinery for viscous Burgers, `U_t + (U^2/2)_x = nu U_xx`.
//!
//! The step is forward Euler on the conservative form
//!
//! ```text
//! U_i^{n+1} = U_i^n - dt/dx (F_{i+1/2} - F_{i-1/2}),
//! F_{i+1/2} = G(U^-_{i+1/2}, U^+_{i+1/2}) - nu (U_{i+1} - U_i) / dx
//! ```
//!
//! with `G` the exact Godunov flux and face states from a sensor-gated Berger
//! reconstruction. Every map used by the training loop also has a hand-written
//! vector-Jacobian product (`*_vjp`). The sensor gate is treated as piecewise
//! constant, so its derivative is zero.

use crate::error::{ensure_finite, Result};
use crate::grid::{FaceStates, GridState, Mesh1D};

pub const DEFAULT_EPS: f64 = 1e-12;
pub const DEFAULT_CHI_THRESHOLD: f64 = 0.2;

#[inline]
pub fn burgers_flux(u: f64) -> f64 {
    0.5 * u * u
}

/// Which state the Godunov solution takes at the interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RiemannState {
    Left,
    Right,
    /// Transonic rarefaction; the interface state is the sonic point 0.
    Sonic,
}

/// Interface state of the exact Riemann solution for Burgers.
#[inline]
pub fn riemann_state(ul: f64, ur: f64) -> RiemannState {
    if ul <= ur {
        if ul >= 0.0 {
            RiemannState::Left
        } else if ur <= 0.0 {
            RiemannState::Right
        } else {
            RiemannState::Sonic
        }
    } else if 0.5 * (ul + ur) > 0.0 {
        RiemannState::Left
    } else {
        RiemannState::Right
    }
}

#[inline]
fn interface_value(ul: f64, ur: f64) -> (RiemannState, f64) {
    match riemann_state(ul, ur) {
        RiemannState::Left => (RiemannState::Left, ul),
        RiemannState::Right => (RiemannState::Right, ur),
        RiemannState::Sonic => (RiemannState::Sonic, 0.0),
    }
}

/// Godunov flux: `min` of `f` over `[ul, ur]` for rarefactions, upwind by the
/// shock speed otherwise.
#[inline]
pub fn godunov_flux(ul: f64, ur: f64) -> f64 {
    burgers_flux(interface_value(ul, ur).1)
}

/// Partial derivatives `(dG/dul, dG/dur)`.
#[inline]
pub fn godunov_flux_grad(ul: f64, ur: f64) -> (f64, f64) {
    match riemann_state(ul, ur) {
        RiemannState::Left => (ul, 0.0),
        RiemannState::Right => (0.0, ur),
        RiemannState::Sonic => (0.0, 0.0),
    }
}

/// Berger limiter `max(0, min(2r, 1))`.
#[inline]
pub fn berger_phi(r: f64) -> f64 {
    (2.0 * r).min(1.0).max(0.0)
}

#[inline]
fn berger_phi_grad(r: f64) -> f64 {
    if r > 0.0 && r < 0.5 {
        2.0
    } else {
        0.0
    }
}

/// Curvature sensor `chi_i` in `[0, 1]`.
pub fn shock_sensor(state: &GridState, eps: f64) -> Vec<f64> {
    sensor_of(&state.values, eps)
}

pub(crate) fn sensor_of(u: &[f64], eps: f64) -> Vec<f64> {
    let n = u.len();
    (0..n)
        .map(|i| {
            let um = u[(i + n - 1) % n];
            let up = u[(i + 1) % n];
            let dm = u[i] - um;
            let dp = up - u[i];
            (up - 2.0 * u[i] + um).abs() / (dp.abs() + dm.abs() + eps)
        })
        .collect()
}

/// Sensor-gated Berger reconstruction.
///
/// Gated cells (`chi_i > chi_threshold`) get the limited slope
/// `sigma_i = phi(r_i) * D+_i` with `r_i = D-_i / (eps + D+_i)`; both faces of the
/// cell use it, so `U^-_{i+1/2} = U_i + sigma_i/2` and `U^+_{i-1/2} = U_i - sigma_i/2`.
/// Ungated cells are piecewise constant.
pub fn berger_reconstruct(state: &GridState, chi_threshold: f64, eps: f64) -> FaceStates {
    reconstruct_values(&state.values, chi_threshold, eps)
}

fn limited_slope(um: f64, u: f64, up: f64, eps: f64) -> f64 {
    let dm = u - um;
    let dp = up - u;
    berger_phi(dm / (eps + dp)) * dp
}

fn reconstruct_values(u: &[f64], chi_threshold: f64, eps: f64) -> FaceStates {
    let n = u.len();
    let chi = sensor_of(u, eps);
    let mut left = vec![0.0; n];
    let mut right = vec![0.0; n];
    let mut active = vec![false; n];
    for i in 0..n {
        let gated = chi[i] > chi_threshold;
        let sigma = if gated {
            limited_slope(u[(i + n - 1) % n], u[i], u[(i + 1) % n], eps)
        } else {
            0.0
        };
        active[i] = gated;
        left[i] = u[i] + 0.5 * sigma;
        right[(i + n - 1) % n] = u[i] - 0.5 * sigma;
    }
    FaceStates { left, right, limiter_active: active }
}

/// Pulls face-state cotangents back onto cell averages with the gate held fixed.
fn reconstruct_vjp(u: &[f64], faces: &FaceStates, g_left: &[f64], g_right: &[f64], eps: f64, out: &mut [f64]) {
    let n = u.len();
    for i in 0..n {
        let im = (i + n - 1) % n;
        let ip = (i + 1) % n;
        // U_i enters left[i] and right[i-1] with unit weight.
        out[i] += g_left[i] + g_right[im];
        if !faces.limiter_active[i] {
            continue;
        }
        let g_sigma = 0.5 * g_left[i] - 0.5 * g_right[im];
        if g_sigma == 0.0 {
            continue;
        }
        let dm = u[i] - u[im];
        let dp = u[ip] - u[i];
        let den = eps + dp;
        let r = dm / den;
        let dphi = berger_phi_grad(r);
        let d_sigma_d_dm = dphi * dp / den;
        let d_sigma_d_dp = berger_phi(r) - dphi * dp * dm / (den * den);
        // dm = u_i - u_{i-1}, dp = u_{i+1} - u_i
        out[i] += g_sigma * (d_sigma_d_dm - d_sigma_d_dp);
        out[im] -= g_sigma * d_sigma_d_dm;
        out[ip] += g_sigma * d_sigma_d_dp;
    }
}

/// Diffusive face flux `-nu (U_{i+1} - U_i) / dx`.
pub fn viscous_flux(state: &GridState, mesh: &Mesh1D) -> Vec<f64> {
    viscous_flux_of(&state.values, mesh)
}

fn viscous_flux_of(u: &[f64], mesh: &Mesh1D) -> Vec<f64> {
    let n = u.len();
    let c = mesh.nu / mesh.dx;
    (0..n).map(|i| -c * (u[(i + 1) % n] - u[i])).collect()
}

/// Total (advective + viscous) face flux `F_{i+1/2}`.
pub fn face_flux(state: &GridState, mesh: &Mesh1D, faces: &FaceStates) -> Vec<f64> {
    face_flux_of(&state.values, mesh, faces)
}

fn face_flux_of(u: &[f64], mesh: &Mesh1D, faces: &FaceStates) -> Vec<f64> {
    let visc = viscous_flux_of(u, mesh);
    faces
        .left
        .iter()
        .zip(&faces.right)
        .zip(visc)
        .map(|((&l, &r), v)| godunov_flux(l, r) + v)
        .collect()
}

/// Reconstruction and limiter settings of the classical step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scheme {
    pub use_berger: bool,
    pub chi_threshold: f64,
    pub eps: f64,
}

impl Default for Scheme {
    fn default() -> Self {
        Self { use_berger: true, chi_threshold: DEFAULT_CHI_THRESHOLD, eps: DEFAULT_EPS }
    }
}

impl Scheme {
    pub fn godunov() -> Self {
        Self { use_berger: false, ..Self::default() }
    }

    pub fn faces(&self, state: &GridState) -> FaceStates {
        self.faces_of(&state.values)
    }

    pub(crate) fn faces_of(&self, u: &[f64]) -> FaceStates {
        if self.use_berger {
            reconstruct_values(u, self.chi_threshold, self.eps)
        } else {
            FaceStates::piecewise_constant(u)
        }
    }

    pub fn step(&self, state: &GridState, mesh: &Mesh1D) -> Result<GridState> {
        let cfl = mesh.cfl_number(state.max_abs());
        if cfl > 1.0 {
            log::warn!("CFL number {cfl:.3} exceeds 1 at step {}", state.time_index);
        }
        let next = self.step_values(&state.values, mesh);
        ensure_finite(&next, "fv_step output")?;
        Ok(GridState { values: next, time_index: state.time_index + 1 })
    }

    pub(crate) fn step_values(&self, u: &[f64], mesh: &Mesh1D) -> Vec<f64> {
        let faces = self.faces_of(u);
        let flux = face_flux_of(u, mesh, &faces);
        let n = u.len();
        let lambda = mesh.dt / mesh.dx;
        (0..n).map(|i| u[i] - lambda * (flux[i] - flux[(i + n - 1) % n])).collect()
    }

    /// Vector-Jacobian product of [`Scheme::step`]: returns `J^T upstream`.
    pub fn step_vjp(&self, u: &[f64], mesh: &Mesh1D, upstream: &[f64]) -> Vec<f64> {
        let n = u.len();
        let faces = self.faces_of(u);
        let lambda = mesh.dt / mesh.dx;
        let c = mesh.nu / mesh.dx;
        let mut out = upstream.to_vec();
        let mut g_left = vec![0.0; n];
        let mut g_right = vec![0.0; n];
        for i in 0..n {
            let ip = (i + 1) % n;
            // F_{i+1/2} appears in S_i with -lambda and in S_{i+1} with +lambda.
            let g_flux = -lambda * (upstream[i] - upstream[ip]);
            let (dl, dr) = godunov_flux_grad(faces.left[i], faces.right[i]);
            g_left[i] = g_flux * dl;
            g_right[i] = g_flux * dr;
            out[ip] -= g_flux * c;
            out[i] += g_flux * c;
        }
        reconstruct_vjp(u, &faces, &g_left, &g_right, self.eps, &mut out);
        out
    }
}

/// One forward-Euler finite-volume step with default limiter settings.
pub fn fv_step(state: &GridState, mesh: &Mesh1D, use_berger: bool) -> Result<GridState> {
    Scheme { use_berger, ..Scheme::default() }.step(state, mesh)
}

/// Per-cell residual of the discrete balance; the source term is fixed at zero.
pub fn fv_residual(prev: &GridState, next: &GridState, mesh: &Mesh1D, faces: &FaceStates) -> Vec<f64> {
    let flux = face_flux(prev, mesh, faces);
    let n = prev.len();
    (0..n)
        .map(|i| {
            (next.values[i] - prev.values[i]) / mesh.dt + (flux[i] - flux[(i + n - 1) % n]) / mesh.dx
        })
        .collect()
}

/// `|f(U+) - f(U-) - s (U+ - U-)|` with `s = (U- + U+)/2`.
///
/// For the Burgers flux this vanishes identically:
/// `(U+^2 - U-^2)/2 = (U- + U+)(U+ - U-)/2`.
pub fn rh_residual(faces: &FaceStates) -> Vec<f64> {
    let speeds: Vec<f64> = faces.left.iter().zip(&faces.right).map(|(l, r)| 0.5 * (l + r)).collect();
    rh_residual_with_speed(faces, &speeds)
}

/// RH residual for externally supplied interface speeds.
pub fn rh_residual_with_speed(faces: &FaceStates, speeds: &[f64]) -> Vec<f64> {
    faces
        .left
        .iter()
        .zip(&faces.right)
        .zip(speeds)
        .map(|((&l, &r), &s)| (burgers_flux(r) - burgers_flux(l) - s * (r - l)).abs())
        .collect()
}

/// Numerical entropy flux for `eta = U^2/2`.
///
/// The advective part is `q = U_face^3 / 3` at the Godunov interface state; the
/// viscous part `-nu (eta_{i+1} - eta_i)/dx` pairs with the diffusive mass flux.
fn entropy_flux_of(u: &[f64], faces: &FaceStates, mesh: &Mesh1D) -> Vec<f64> {
    let n = u.len();
    let c = mesh.nu / mesh.dx;
    (0..n)
        .map(|i| {
            let uf = interface_value(faces.left[i], faces.right[i]).1;
            let up = u[(i + 1) % n];
            uf * uf * uf / 3.0 - c * 0.5 * (up * up - u[i] * u[i])
        })
        .collect()
}

/// Cell entropy production `r_i = (eta(U^{n+1}) - eta(U^n))/dt + (Q_{i+1/2} - Q_{i-1/2})/dx`.
///
/// `faces` must be the faces of `prev`, the ones the flux used.
pub fn entropy_residual(prev: &GridState, next: &GridState, faces: &FaceStates, mesh: &Mesh1D) -> Vec<f64> {
    let q = entropy_flux_of(&prev.values, faces, mesh);
    let n = prev.len();
    (0..n)
        .map(|i| {
            let eta_new = 0.5 * next.values[i] * next.values[i];
            let eta_old = 0.5 * prev.values[i] * prev.values[i];
            (eta_new - eta_old) / mesh.dt + (q[i] - q[(i + n - 1) % n]) / mesh.dx
        })
        .collect()
}

/// Flux-divergence part `(Q_{i+1/2} - Q_{i-1/2})/dx` of the entropy residual.
pub fn entropy_flux_divergence(prev: &GridState, faces: &FaceStates, mesh: &Mesh1D) -> Vec<f64> {
    let q = entropy_flux_of(&prev.values, faces, mesh);
    let n = q.len();
    (0..n).map(|i| (q[i] - q[(i + n - 1) % n]) / mesh.dx).collect()
}

/// VJP of the entropy residual with respect to `(prev, next)`, faces rebuilt from
/// `prev` by `scheme`.
pub fn entropy_residual_vjp(
    scheme: &Scheme,
    prev: &[f64],
    next: &[f64],
    mesh: &Mesh1D,
    upstream: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = prev.len();
    let faces = scheme.faces_of(prev);
    let c = mesh.nu / mesh.dx;
    let mut g_prev = vec![0.0; n];
    let g_next: Vec<f64> = (0..n).map(|i| upstream[i] * next[i] / mesh.dt).collect();
    let mut g_left = vec![0.0; n];
    let mut g_right = vec![0.0; n];
    for i in 0..n {
        let ip = (i + 1) % n;
        g_prev[i] -= upstream[i] * prev[i] / mesh.dt;
        let g_q = (upstream[i] - upstream[ip]) / mesh.dx;
        let (side, uf) = interface_value(faces.left[i], faces.right[i]);
        let dq = uf * uf;
        match side {
            RiemannState::Left => g_left[i] = g_q * dq,
            RiemannState::Right => g_right[i] = g_q * dq,
            RiemannState::Sonic => {}
        }
        g_prev[ip] -= g_q * c * prev[ip];
        g_prev[i] += g_q * c * prev[i];
    }
    if scheme.use_berger {
        reconstruct_vjp(prev, &faces, &g_left, &g_right, scheme.eps, &mut g_prev);
    } else {
        for i in 0..n {
            g_prev[i] += g_left[i] + g_right[(i + n - 1) % n];
        }
    }
    (g_prev, g_next)
}
