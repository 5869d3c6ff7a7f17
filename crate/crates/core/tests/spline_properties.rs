use adjflow::params::SplineSignal;
use proptest::collection::vec;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clamped_interpolates_knots_and_end_data(mu in vec(-1.0f64..1.0, 4), end in -1.0f64..1.0, s0 in -2.0f64..2.0, s1 in -2.0f64..2.0) {
        let sp = SplineSignal::clamped(2.0, 6, 0.3, end, s0, s1, 0).unwrap();
        let knots = sp.knot_times();
        prop_assert_eq!(knots.len(), 6);
        let want: Vec<f64> = std::iter::once(0.3).chain(mu.iter().copied()).chain(std::iter::once(end)).collect();
        for (t, y) in knots.iter().zip(&want) {
            prop_assert!((sp.eval(*t, &mu).unwrap().value - y).abs() < 1e-12);
        }
        prop_assert!((sp.eval(0.0, &mu).unwrap().rate - s0).abs() < 1e-10);
        prop_assert!((sp.eval(2.0, &mu).unwrap().rate - s1).abs() < 1e-10);
    }

    #[test]
    fn parameter_derivatives_are_exact_for_a_linear_map(mu in vec(-1.0f64..1.0, 3), dmu in vec(-1.0f64..1.0, 3), t in 0.0f64..1.0) {
        let sp = SplineSignal::clamped(1.0, 5, 0.0, 0.0, 0.0, 0.0, 0).unwrap();
        let a = sp.eval(t, &mu).unwrap();
        let moved: Vec<f64> = mu.iter().zip(&dmu).map(|(m, d)| m + d).collect();
        let b = sp.eval(t, &moved).unwrap();
        let dv: f64 = a.d_value.iter().zip(&dmu).map(|(g, d)| g * d).sum();
        let dr: f64 = a.d_rate.iter().zip(&dmu).map(|(g, d)| g * d).sum();
        prop_assert!((b.value - a.value - dv).abs() < 1e-12);
        prop_assert!((b.rate - a.rate - dr).abs() < 1e-10);
    }

    #[test]
    fn mirrored_is_antiperiodic_and_c2(mu in vec(-1.0f64..1.0, 3), t in 0.0f64..4.0) {
        let period = 1.5;
        let sp = SplineSignal::mirrored(period, 4, 0).unwrap();
        let a = sp.eval(t, &mu).unwrap();
        let b = sp.eval(t + period / 2.0, &mu).unwrap();
        prop_assert!((a.value + b.value).abs() < 1e-12);
        prop_assert!((a.rate + b.rate).abs() < 1e-10);
        for k in sp.knot_times() {
            let (l, r) = sp.second_derivative_jump(k + 0.0, &mu).unwrap();
            prop_assert!((l - r).abs() < 1e-8 * (1.0 + l.abs()));
        }
    }
}
