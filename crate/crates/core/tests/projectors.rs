use proptest::prelude::*;

use cpl_core::projectors::{
    compose_dykstra, project_box, project_box_sum, project_helmholtz, project_mass, spectral_divergence, Bound,
    ProjectorDescriptor, VectorField2D,
};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    // projection onto a closed convex set: <x - P x, y - P x> <= 0 for every y in the set
    #[test]
    fn box_projection_obtuse_angle(
        x in prop::collection::vec(-3.0f64..3.0, 16),
        y in prop::collection::vec(-1.0f64..1.0, 16),
    ) {
        let p = project_box(&x, &Bound::Uniform(-1.0), &Bound::Uniform(1.0)).unwrap();
        let r: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a - b).collect();
        let d: Vec<f64> = y.iter().zip(&p).map(|(a, b)| a - b).collect();
        prop_assert!(dot(&r, &d) <= 1e-12);
    }

    #[test]
    fn mass_projection_moves_along_the_normal(z in prop::collection::vec(-3.0f64..3.0, 16), mass in -1.0f64..1.0) {
        let dx = 1.0 / 16.0;
        let p = project_mass(&z, dx, mass);
        prop_assert!((dx * p.iter().sum::<f64>() - mass).abs() <= 1e-13);
        let shift: Vec<f64> = z.iter().zip(&p).map(|(a, b)| a - b).collect();
        prop_assert!(shift.iter().all(|s| (s - shift[0]).abs() <= 1e-13));
    }

    // closed-form box-sum projection against Dykstra's alternating projections
    #[test]
    fn box_sum_matches_dykstra(z in prop::collection::vec(-2.0f64..2.0, 12), total in -5.0f64..5.0) {
        let (lo, hi) = (Bound::Uniform(-0.8), Bound::Uniform(0.9));
        let exact = project_box_sum(&z, &lo, &hi, total).unwrap().unwrap();
        let factors = [
            ProjectorDescriptor::Box { lower: lo, upper: hi },
            ProjectorDescriptor::AffineBalance { weights: vec![1.0; 12], target: total },
        ];
        let d = compose_dykstra(&z, &factors, 5000, 1e-13).unwrap();
        prop_assert!(d.converged);
        let gap = exact.iter().zip(&d.x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(gap <= 1e-8, "gap {}", gap);
    }
}

#[test]
fn box_sum_infeasible_total_is_none() {
    let z = [0.0; 4];
    assert!(project_box_sum(&z, &Bound::Uniform(0.0), &Bound::Uniform(1.0), 4.5).unwrap().is_none());
    assert!(project_box_sum(&z, &Bound::Uniform(0.0), &Bound::Uniform(1.0), 4.0).unwrap().is_some());
}

#[test]
fn helmholtz_removes_gradients_and_keeps_solenoidal_fields() {
    let tau = 2.0 * std::f64::consts::PI;
    // grad of sin(2 pi x) cos(4 pi y)
    let grad = VectorField2D::on_unit_square(32, 32, |x, y| {
        (tau * (tau * x).cos() * (2.0 * tau * y).cos(), -2.0 * tau * (tau * x).sin() * (2.0 * tau * y).sin())
    });
    assert!(project_helmholtz(&grad).l2_norm() <= 1e-12 * grad.l2_norm());

    // curl of a stream function
    let curl = VectorField2D::on_unit_square(32, 32, |x, y| {
        ((tau * x).sin() * tau * (tau * y).cos(), -tau * (tau * x).cos() * (tau * y).sin())
    });
    let p = project_helmholtz(&curl);
    let diff = p.to_flat().iter().zip(curl.to_flat()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-12);
    assert!(spectral_divergence(&p).iter().all(|d| d.abs() <= 1e-10));
}
