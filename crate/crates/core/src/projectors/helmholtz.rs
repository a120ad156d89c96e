//! Spectral Leray projection `P = I - grad lap^{-1} div` on a periodic rectangle.
//!
//! Derivatives use the exact Fourier wavenumbers; the Nyquist wavenumber of an
//! even-length axis is treated as zero so that the derivative of a real field stays
//! real. Divergence and vorticity below use the same symbols, which makes the
//! projected field divergence-free to round-off.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{ensure_finite, CplError, Result};

/// Two velocity components stored row-major with shape `(ny, nx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField2D {
    pub nx: usize,
    pub ny: usize,
    pub hx: f64,
    pub hy: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl VectorField2D {
    pub fn new(nx: usize, ny: usize, hx: f64, hy: f64, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        let len = nx * ny;
        for comp in [&u, &v] {
            if comp.len() != len {
                return Err(CplError::ShapeMismatch { expected: len, found: comp.len() });
            }
        }
        ensure_finite(&u, "vector field u")?;
        ensure_finite(&v, "vector field v")?;
        Ok(Self { nx, ny, hx, hy, u, v })
    }

    /// Samples `f(x, y) -> (u, v)` at the nodes `(j hx, i hy)` of the periodic unit square.
    pub fn on_unit_square(nx: usize, ny: usize, f: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let (hx, hy) = (1.0 / nx as f64, 1.0 / ny as f64);
        let (mut u, mut v) = (Vec::with_capacity(nx * ny), Vec::with_capacity(nx * ny));
        for i in 0..ny {
            for j in 0..nx {
                let (a, b) = f(j as f64 * hx, i as f64 * hy);
                u.push(a);
                v.push(b);
            }
        }
        Self { nx, ny, hx, hy, u, v }
    }

    /// Discrete L2 norm `sqrt(hx hy sum(u^2 + v^2))`.
    pub fn l2_norm(&self) -> f64 {
        (self.hx * self.hy * self.u.iter().chain(&self.v).map(|a| a * a).sum::<f64>()).sqrt()
    }

    /// Flattened `[u, v]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.u.iter().chain(&self.v).copied().collect()
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let len = self.nx * self.ny;
        if flat.len() != 2 * len {
            return Err(CplError::ShapeMismatch { expected: 2 * len, found: flat.len() });
        }
        Self::new(self.nx, self.ny, self.hx, self.hy, flat[..len].to_vec(), flat[len..].to_vec())
    }
}

fn wavenumbers(n: usize, h: f64) -> Vec<f64> {
    let length = n as f64 * h;
    (0..n)
        .map(|k| {
            let m = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
            if n % 2 == 0 && k == n / 2 {
                0.0
            } else {
                2.0 * PI * m / length
            }
        })
        .collect()
}

struct Spectral {
    nx: usize,
    ny: usize,
    kx: Vec<f64>,
    ky: Vec<f64>,
    planner: FftPlanner<f64>,
}

impl Spectral {
    fn new(f: &VectorField2D) -> Self {
        Self { nx: f.nx, ny: f.ny, kx: wavenumbers(f.nx, f.hx), ky: wavenumbers(f.ny, f.hy), planner: FftPlanner::new() }
    }

    fn transform(&mut self, data: &mut [Complex64], inverse: bool) {
        let (nx, ny) = (self.nx, self.ny);
        let row = if inverse { self.planner.plan_fft_inverse(nx) } else { self.planner.plan_fft_forward(nx) };
        for r in data.chunks_mut(nx) {
            row.process(r);
        }
        let col = if inverse { self.planner.plan_fft_inverse(ny) } else { self.planner.plan_fft_forward(ny) };
        let mut buf = vec![Complex64::default(); ny];
        for j in 0..nx {
            for i in 0..ny {
                buf[i] = data[i * nx + j];
            }
            col.process(&mut buf);
            for i in 0..ny {
                data[i * nx + j] = buf[i];
            }
        }
        if inverse {
            let s = 1.0 / (nx * ny) as f64;
            data.iter_mut().for_each(|c| *c *= s);
        }
    }

    fn forward(&mut self, x: &[f64]) -> Vec<Complex64> {
        let mut c: Vec<Complex64> = x.iter().map(|&a| Complex64::new(a, 0.0)).collect();
        self.transform(&mut c, false);
        c
    }

    fn inverse_real(&mut self, mut c: Vec<Complex64>) -> Vec<f64> {
        self.transform(&mut c, true);
        c.into_iter().map(|z| z.re).collect()
    }
}

/// Removes the gradient part of `field`. Linear, idempotent and an orthogonal
/// projector in the discrete L2 inner product; the mean flow is kept.
pub fn project_helmholtz(field: &VectorField2D) -> VectorField2D {
    let mut sp = Spectral::new(field);
    let mut uh = sp.forward(&field.u);
    let mut vh = sp.forward(&field.v);
    for i in 0..field.ny {
        for j in 0..field.nx {
            let (kx, ky) = (sp.kx[j], sp.ky[i]);
            let k2 = kx * kx + ky * ky;
            if k2 == 0.0 {
                continue;
            }
            let idx = i * field.nx + j;
            let proj = (uh[idx] * kx + vh[idx] * ky) / k2;
            uh[idx] -= proj * kx;
            vh[idx] -= proj * ky;
        }
    }
    let u = sp.inverse_real(uh);
    let v = sp.inverse_real(vh);
    VectorField2D { u, v, ..field.clone() }
}

/// Spectral divergence `du/dx + dv/dy`.
pub fn spectral_divergence(field: &VectorField2D) -> Vec<f64> {
    spectral_combination(field, |kx, ky, u, v| Complex64::i() * (u * kx + v * ky))
}

/// Spectral vorticity `dv/dx - du/dy`.
pub fn spectral_vorticity(field: &VectorField2D) -> Vec<f64> {
    spectral_combination(field, |kx, ky, u, v| Complex64::i() * (v * kx - u * ky))
}

fn spectral_combination(
    field: &VectorField2D,
    op: impl Fn(f64, f64, Complex64, Complex64) -> Complex64,
) -> Vec<f64> {
    let mut sp = Spectral::new(field);
    let uh = sp.forward(&field.u);
    let vh = sp.forward(&field.v);
    let mut out = vec![Complex64::default(); uh.len()];
    for i in 0..field.ny {
        for j in 0..field.nx {
            let idx = i * field.nx + j;
            out[idx] = op(sp.kx[j], sp.ky[i], uh[idx], vh[idx]);
        }
    }
    sp.inverse_real(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn max_abs(v: &[f64]) -> f64 {
        v.iter().fold(0.0f64, |m, a| m.max(a.abs()))
    }

    fn random_field(n: usize, seed: u64) -> VectorField2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        VectorField2D::new(n, n, 1.0 / n as f64, 1.0 / n as f64, u, v).unwrap()
    }

    #[test]
    fn constant_field_is_kept() {
        let f = VectorField2D::on_unit_square(16, 16, |_, _| (1.0, 0.0));
        let p = project_helmholtz(&f);
        assert!(p.u.iter().all(|a| (a - 1.0).abs() <= 1e-14));
        assert!(max_abs(&p.v) <= 1e-14);
    }

    #[test]
    fn gradients_are_annihilated() {
        let tp = 2.0 * PI;
        let f = VectorField2D::on_unit_square(64, 64, |x, y| {
            (tp * (tp * x).cos() * (tp * y).sin(), tp * (tp * x).sin() * (tp * y).cos())
        });
        let p = project_helmholtz(&f);
        assert!(max_abs(&p.u) <= 1e-10 && max_abs(&p.v) <= 1e-10);
    }

    /// Analytic split: a stream-function field plus a potential gradient; the
    /// projection must return exactly the stream-function part.
    #[test]
    fn recovers_solenoidal_part() {
        let tp = 2.0 * PI;
        // psi = sin(2 pi x) cos(4 pi y): (u, v) = (dpsi/dy, -dpsi/dx)
        let sol = |x: f64, y: f64| (-2.0 * tp * (tp * x).sin() * (2.0 * tp * y).sin(), -tp * (tp * x).cos() * (2.0 * tp * y).cos());
        // phi = cos(6 pi x + 2 pi y)
        let grad = |x: f64, y: f64| {
            let s = -(3.0 * tp * x + tp * y).sin();
            (3.0 * tp * s, tp * s)
        };
        let f = VectorField2D::on_unit_square(32, 48, |x, y| {
            let (a, b) = sol(x, y);
            let (c, d) = grad(x, y);
            (a + c + 0.25, b + d)
        });
        let want = VectorField2D::on_unit_square(32, 48, |x, y| {
            let (a, b) = sol(x, y);
            (a + 0.25, b)
        });
        let p = project_helmholtz(&f);
        let err = p.u.iter().chain(&p.v).zip(want.u.iter().chain(&want.v)).map(|(a, b)| (a - b).abs());
        assert!(err.fold(0.0, f64::max) <= 1e-10);
    }

    #[test]
    fn random_fields_64() {
        for seed in 0..4 {
            let f = random_field(64, seed);
            let p = project_helmholtz(&f);
            assert!(max_abs(&spectral_divergence(&p)) <= 1e-10);
            let pp = project_helmholtz(&p);
            let d = p.u.iter().chain(&p.v).zip(pp.u.iter().chain(&pp.v)).map(|(a, b)| (a - b).abs());
            assert!(d.fold(0.0, f64::max) <= 1e-12);
            let (w0, w1) = (spectral_vorticity(&f), spectral_vorticity(&p));
            let dw = w0.iter().zip(&w1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(dw <= 1e-10 * max_abs(&w0).max(1.0));
            assert!(p.l2_norm() <= f.l2_norm() + 1e-12);
        }
    }
}
