use proptest::prelude::*;
use wallflow::gcv::{approximate_trace, gcv_score, SpectrumModel};
use wallflow::grid::{ScalarField, VolumeGrid};
use wallflow::io::{read_scalar, write_scalar, ScalarType};
use wallflow::operators::{first_derivative_stencil, second_derivative_stencil};
use wallflow::wss::{musker_u_plus, musker_velocity};

proptest! {
    #[test]
    fn stencils_exact_on_quadratics(
        theta in 0.01f64..=1.0,
        h in 1e-4f64..1e-1,
        a in -10.0f64..10.0,
        b in -10.0f64..10.0,
        c in -10.0f64..10.0,
    ) {
        // near node at x = 0, wall at -theta h, next node at +h
        let p = |x: f64| a + b * x + c * x * x;
        let (uw, u1, u2) = (p(-theta * h), p(0.0), p(h));
        let d1 = first_derivative_stencil(theta, h).unwrap().apply(uw, u1, u2);
        let d2 = second_derivative_stencil(theta, h).unwrap().apply(uw, u1, u2);
        let scale = 1.0 + b.abs() + c.abs() + a.abs() / h;
        prop_assert!((d1 - b).abs() <= 1e-9 * scale, "d1 {d1} vs {b}");
        prop_assert!((d2 - 2.0 * c).abs() <= 1e-6 * (scale / h), "d2 {d2} vs {}", 2.0 * c);
    }

    #[test]
    fn stencil_rejects_bad_theta(theta in prop_oneof![-1.0f64..=0.0, 1.0001f64..5.0]) {
        prop_assert!(first_derivative_stencil(theta, 0.1).is_err());
    }

    #[test]
    fn trace_decreases_in_s(
        eig in prop::collection::vec(0.0f64..100.0, 3..40),
        s in 1e-4f64..1e3,
    ) {
        let model = SpectrumModel::complete(eig.clone());
        let lo = approximate_trace(&model, s);
        let hi = approximate_trace(&model, s * 2.0);
        prop_assert!(hi <= lo);
        prop_assert!(lo <= eig.len() as f64 + 1e-12);
        prop_assert_eq!(approximate_trace(&model, 0.0), eig.len() as f64);
        if eig.iter().any(|&l| l > 1e-6) {
            prop_assert!(hi < lo);
        }
    }

    #[test]
    fn gcv_score_nonnegative(rss in 0.0f64..1e3, frac in 0.0f64..0.99, total in 10usize..1000) {
        let score = gcv_score(rss, frac * total as f64, total as f64, total).unwrap();
        prop_assert!(score >= 0.0);
        prop_assert!(gcv_score(rss, total as f64, total as f64, total).is_none());
    }

    #[test]
    fn musker_monotone(y in 1e-3f64..1e4, f in 1.001f64..3.0, ut in 1e-3f64..1.0) {
        prop_assert!(musker_u_plus(y * f) > musker_u_plus(y));
        prop_assert!(musker_velocity(y, ut * f) > musker_velocity(y, ut));
    }

    #[test]
    fn scalar_round_trip(values in prop::collection::vec(-1e6f64..1e6, 60)) {
        let grid = VolumeGrid::new([3, 4, 5], [0.1, 0.2, 0.3], [1.0, -2.0, 0.5]).unwrap();
        let field = ScalarField::new(grid, values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.wfv");
        write_scalar(&path, &field, ScalarType::F64).unwrap();
        prop_assert_eq!(read_scalar(&path).unwrap(), field);
    }
}

#[test]
fn unit_theta_is_central() {
    let h = 0.5;
    let d1 = first_derivative_stencil(1.0, h).unwrap();
    assert_eq!(d1.apply(1.0, 0.0, 3.0), (3.0 - 1.0) / (2.0 * h));
    let d2 = second_derivative_stencil(1.0, h).unwrap();
    assert_eq!(d2.apply(1.0, 2.0, 5.0), (1.0 - 4.0 + 5.0) / (h * h));
}
