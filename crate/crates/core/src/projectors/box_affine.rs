use serde::{Deserialize, Serialize};

use crate::error::{CplError, Result};

/// A bound that is either shared by every entry or given per entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Bound {
    Uniform(f64),
    PerCell(Vec<f64>),
}

impl Bound {
    #[inline]
    pub fn at(&self, i: usize) -> f64 {
        match self {
            Bound::Uniform(v) => *v,
            Bound::PerCell(v) => v[i],
        }
    }

    fn check_len(&self, n: usize) -> Result<()> {
        match self {
            Bound::PerCell(v) if v.len() != n => Err(CplError::ShapeMismatch { expected: n, found: v.len() }),
            _ => Ok(()),
        }
    }
}

impl From<f64> for Bound {
    fn from(v: f64) -> Self {
        Bound::Uniform(v)
    }
}

pub(crate) fn check_bounds(n: usize, lower: &Bound, upper: &Bound) -> Result<()> {
    lower.check_len(n)?;
    upper.check_len(n)?;
    for i in 0..n {
        let (lo, hi) = (lower.at(i), upper.at(i));
        if !(lo <= hi) {
            return Err(CplError::InvalidBounds { index: i, lower: lo, upper: hi });
        }
    }
    Ok(())
}

/// Elementwise clamp into `[lower, upper]`.
pub fn project_box(x: &[f64], lower: &Bound, upper: &Bound) -> Result<Vec<f64>> {
    check_bounds(x.len(), lower, upper)?;
    Ok(x.iter().enumerate().map(|(i, &v)| v.clamp(lower.at(i), upper.at(i))).collect())
}

/// VJP of [`project_box`]: passes `upstream` where `x` is inside the closed box,
/// zero where it was clipped.
pub fn project_box_vjp(x: &[f64], lower: &Bound, upper: &Bound, upstream: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(upstream)
        .enumerate()
        .map(|(i, (&v, &g))| if v >= lower.at(i) && v <= upper.at(i) { g } else { 0.0 })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Closest point to `z` on the hyperplane `a . x = b`: `x = z - a (a.z - b)/(a.a)`.
pub fn project_affine(z: &[f64], a: &[f64], b: f64) -> Result<Vec<f64>> {
    if a.len() != z.len() {
        return Err(CplError::ShapeMismatch { expected: z.len(), found: a.len() });
    }
    let aa = dot(a, a);
    if aa == 0.0 {
        return Err(CplError::DegenerateConstraint);
    }
    let c = (dot(a, z) - b) / aa;
    Ok(z.iter().zip(a).map(|(zi, ai)| zi - c * ai).collect())
}

/// VJP of [`project_affine`]. The Jacobian `I - a a^T/(a.a)` is symmetric.
pub fn project_affine_vjp(a: &[f64], upstream: &[f64]) -> Vec<f64> {
    let c = dot(a, upstream) / dot(a, a);
    upstream.iter().zip(a).map(|(g, ai)| g - c * ai).collect()
}

/// Mass-balance specialization `a = dx * 1`: shifts every cell by the same amount
/// so that `dx * sum(x) == mass`.
pub fn project_mass(z: &[f64], dx: f64, mass: f64) -> Vec<f64> {
    let n = z.len() as f64;
    let shift = (dx * z.iter().sum::<f64>() - mass) / (dx * n);
    z.iter().map(|v| v - shift).collect()
}

/// VJP of [`project_mass`]: removes the mean of `upstream`.
pub fn project_mass_vjp(upstream: &[f64]) -> Vec<f64> {
    let mean = upstream.iter().sum::<f64>() / upstream.len() as f64;
    upstream.iter().map(|g| g - mean).collect()
}

/// Euclidean projection onto `{lower <= x <= upper} ∩ {sum(x) = total}`.
///
/// The minimizer is `x_i = clamp(z_i - mu)` for the scalar `mu` at which the sum
/// hits `total`; `sum` is piecewise linear and nonincreasing in `mu`, so the
/// breakpoint segment containing the root is located by bisection over the sorted
/// breakpoints and solved in closed form. Returns `None` when `total` lies outside
/// `[sum(lower), sum(upper)]`.
pub fn project_box_sum(z: &[f64], lower: &Bound, upper: &Bound, total: f64) -> Result<Option<Vec<f64>>> {
    check_bounds(z.len(), lower, upper)?;
    let n = z.len();
    let lo_sum: f64 = (0..n).map(|i| lower.at(i)).sum();
    let hi_sum: f64 = (0..n).map(|i| upper.at(i)).sum();
    if total < lo_sum || total > hi_sum {
        return Ok(None);
    }
    let clamp_sum = |mu: f64| -> f64 { (0..n).map(|i| (z[i] - mu).clamp(lower.at(i), upper.at(i))).sum() };

    let mut bps: Vec<f64> = (0..n).flat_map(|i| [z[i] - upper.at(i), z[i] - lower.at(i)]).collect();
    bps.sort_by(f64::total_cmp);
    // sum(mu) is >= total left of the root; find the last breakpoint with that property
    let (mut a, mut b) = (0usize, bps.len() - 1);
    if clamp_sum(bps[b]) >= total {
        a = b;
    } else {
        while b - a > 1 {
            let m = (a + b) / 2;
            if clamp_sum(bps[m]) >= total {
                a = m;
            } else {
                b = m;
            }
        }
    }
    let mu_lo = bps[a];
    let mu_hi = if a + 1 < bps.len() { bps[a + 1] } else { bps[a] + 1.0 };
    let probe = 0.5 * (mu_lo + mu_hi);
    let (mut fixed, mut free_z, mut n_free) = (0.0, 0.0, 0usize);
    for i in 0..n {
        let (lo, hi) = (lower.at(i), upper.at(i));
        let v = z[i] - probe;
        if v <= lo {
            fixed += lo;
        } else if v >= hi {
            fixed += hi;
        } else {
            free_z += z[i];
            n_free += 1;
        }
    }
    let mu = if n_free == 0 { mu_lo } else { (free_z + fixed - total) / n_free as f64 };
    Ok(Some((0..n).map(|i| (z[i] - mu).clamp(lower.at(i), upper.at(i))).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn norm(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    #[test]
    fn box_examples() {
        let (lo, hi) = (Bound::Uniform(0.0), Bound::Uniform(1.0));
        assert_eq!(project_box(&[-1.0, 0.5, 2.0], &lo, &hi).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(project_box(&[0.2, 0.9], &lo, &hi).unwrap(), vec![0.2, 0.9]);
        assert!(matches!(
            project_box(&[0.0], &Bound::Uniform(1.0), &Bound::Uniform(0.0)),
            Err(CplError::InvalidBounds { index: 0, .. })
        ));
    }

    #[test]
    fn affine_examples() {
        assert_eq!(project_affine(&[1.0, 2.0, 3.0], &[1.0; 3], 3.0).unwrap(), vec![0.0, 1.0, 2.0]);
        assert_eq!(project_affine(&[1.0, 1.0], &[1.0, 1.0], 2.0).unwrap(), vec![1.0, 1.0]);
        assert!(matches!(project_affine(&[1.0], &[0.0], 1.0), Err(CplError::DegenerateConstraint)));
    }

    #[test]
    fn affine_is_minimal_against_sampled_feasible_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 128;
        let a: Vec<f64> = vec![1.0 / n as f64; n];
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b = 0.3;
        let x = project_affine(&z, &a, b).unwrap();
        assert!((dot(&a, &x) - b).abs() <= 1e-12);
        let d = norm(&x, &z);
        for _ in 0..100 {
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y = project_affine(&w, &a, b).unwrap();
            assert!(d <= norm(&y, &z) + 1e-12);
        }
    }

    #[test]
    fn mass_specialization_matches_general_form() {
        let z = [0.3, -1.0, 2.5, 0.0, 0.7];
        let dx = 0.2;
        let x1 = project_mass(&z, dx, 1.0);
        let x2 = project_affine(&z, &[dx; 5], 1.0).unwrap();
        assert!(norm(&x1, &x2) <= 1e-14);
        assert!((dx * x1.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn box_sum_examples() {
        let (lo, hi) = (Bound::Uniform(0.0), Bound::Uniform(1.0));
        let x = project_box_sum(&[2.0, -1.0], &lo, &hi, 1.0).unwrap().unwrap();
        assert!(norm(&x, &[1.0, 0.0]) <= 1e-15);
        let x = project_box_sum(&[0.2, 0.2, 0.2], &lo, &hi, 1.5).unwrap().unwrap();
        assert!(norm(&x, &[0.5, 0.5, 0.5]) <= 1e-15);
        assert!(project_box_sum(&[0.0, 0.0], &lo, &hi, 3.0).unwrap().is_none());
    }

    /// Brute force: the projection onto box ∩ {sum = t} satisfies the variational
    /// inequality `(z - x) . (y - x) <= 0` for every feasible `y`.
    #[test]
    fn box_sum_variational_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = 12;
            let lower: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..0.0)).collect();
            let upper: Vec<f64> = lower.iter().map(|l| l + rng.gen_range(0.0..2.0)).collect();
            let (lo, hi) = (Bound::PerCell(lower.clone()), Bound::PerCell(upper.clone()));
            let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let s: f64 = lower.iter().zip(&upper).map(|(l, u)| l + rng.gen_range(0.0..1.0) * (u - l)).sum();
            let x = project_box_sum(&z, &lo, &hi, s).unwrap().unwrap();
            assert!((x.iter().sum::<f64>() - s).abs() <= 1e-12);
            for _ in 0..200 {
                // random feasible point: sample in box then fix the sum by a bounded shift
                let y0: Vec<f64> = lower.iter().zip(&upper).map(|(l, u)| rng.gen_range(*l..=*u)).collect();
                let Some(y) = project_box_sum(&y0, &lo, &hi, s).unwrap() else { continue };
                let vi: f64 = (0..n).map(|i| (z[i] - x[i]) * (y[i] - x[i])).sum();
                assert!(vi <= 1e-10, "variational inequality violated: {vi}");
            }
        }
    }

    #[test]
    fn vjps_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 7;
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (lo, hi) = (Bound::Uniform(-1.0), Bound::Uniform(1.0));
        let h = 1e-6;
        let va = project_affine_vjp(&a, &g);
        let vb = project_box_vjp(&z, &lo, &hi, &g);
        for j in 0..n {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += h;
            zm[j] -= h;
            let fa = |v: &[f64]| dot(&g, &project_affine(v, &a, 0.4).unwrap());
            let fb = |v: &[f64]| dot(&g, &project_box(v, &lo, &hi).unwrap());
            let fda = (fa(&zp) - fa(&zm)) / (2.0 * h);
            let fdb = (fb(&zp) - fb(&zm)) / (2.0 * h);
            assert!((fda - va[j]).abs() <= 1e-5 * va[j].abs().max(1.0));
            assert!((fdb - vb[j]).abs() <= 1e-5 * vb[j].abs().max(1.0));
        }
    }

    proptest! {
        #[test]
        fn box_idempotent(x in prop::collection::vec(-5.0f64..5.0, 1..40)) {
            let (lo, hi) = (Bound::Uniform(-1.0), Bound::Uniform(2.0));
            let p = project_box(&x, &lo, &hi).unwrap();
            prop_assert_eq!(project_box(&p, &lo, &hi).unwrap(), p);
        }

        #[test]
        fn affine_correction_parallel_to_weights(
            z in prop::collection::vec(-5.0f64..5.0, 8),
            a in prop::collection::vec(0.1f64..2.0, 8),
            b in -3.0f64..3.0,
        ) {
            let x = project_affine(&z, &a, b).unwrap();
            let d: Vec<f64> = x.iter().zip(&z).map(|(x, z)| x - z).collect();
            let dn = dot(&d, &d).sqrt();
            let an = dot(&a, &a).sqrt();
            prop_assert!((dot(&a, &x) - b).abs() <= 1e-13 * an * (1.0 + dot(&z, &z).sqrt()) + 1e-13);
            if dn > 1e-9 {
                let cos = dot(&d, &a).abs() / (dn * an);
                prop_assert!((1.0 - cos).abs() <= 1e-12);
            }
        }
    }
}
