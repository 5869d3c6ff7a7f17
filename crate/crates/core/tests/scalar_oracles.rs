//! Closed-form oracles on `u' = -mu u`: the DIRK update is `u^(n) = R(z) u^(n-1)`
//! with `z = -mu dt`, and stage states are `y_i(z) u^(n-1)` with
//! `(I - zA) y = 1`.

use adjflow::adjoint::forward_sensitivity;
use adjflow::config::{Problem, RunConfig};
use adjflow::system::relative_error;
use adjflow::tableau::{ButcherTableau, TableauKind};
use proptest::prelude::*;

fn scalar_config(tableau: TableauKind, steps: usize, horizon: f64, rate: f64, stage_time: f64) -> RunConfig {
    let text = format!(
        r#"
[problem]
model = "scalar_decay"
rate = {{ kind = "param", index = 0 }}
initial = {{ kind = "constant", value = 1.0 }}
integrands = [{{ kind = "state" }}, {{ kind = "state_squared" }}]

[time]
horizon = {horizon}
steps = {steps}
tableau = "{tableau}"

[parameters]
count = 1
initial = [{rate}]

[[qoi]]
name = "final"
integrand = "state"
weight = {{ kind = "time_impulse", t = {horizon} }}

[[qoi]]
name = "stage"
integrand = "state"
weight = {{ kind = "time_impulse", t = {stage_time} }}

[[qoi]]
name = "integral"
integrand = "state"

[[qoi]]
name = "energy"
integrand = "state_squared"
"#
    );
    RunConfig::from_toml_str(&text).unwrap()
}

/// `y(z)` and `dy/dz` with `(I - zA) y = 1`, `(I - zA) y' = A y`.
fn stage_factors(tab: &ButcherTableau, z: f64) -> (Vec<f64>, Vec<f64>) {
    let s = tab.stages();
    let (mut y, mut dy) = (vec![0.0; s], vec![0.0; s]);
    for i in 0..s {
        let mut acc = 1.0;
        let mut dacc = 0.0;
        for j in 0..i {
            acc += z * tab.a(i, j) * y[j];
            dacc += tab.a(i, j) * y[j] + z * tab.a(i, j) * dy[j];
        }
        let d = 1.0 - z * tab.a(i, i);
        y[i] = acc / d;
        dy[i] = (dacc + tab.a(i, i) * y[i]) / d;
    }
    (y, dy)
}

/// `R(z)` and `R'(z)`.
fn amplification(tab: &ButcherTableau, z: f64) -> (f64, f64) {
    let (y, dy) = stage_factors(tab, z);
    let by: f64 = (0..tab.stages()).map(|i| tab.b(i) * y[i]).sum();
    let bdy: f64 = (0..tab.stages()).map(|i| tab.b(i) * dy[i]).sum();
    (1.0 + z * by, by + z * bdy)
}

fn kind_strategy() -> impl Strategy<Value = TableauKind> {
    prop_oneof![Just(TableauKind::Dirk1), Just(TableauKind::Dirk2), Just(TableauKind::Dirk3)]
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn terminal_value_and_gradient_match_closed_form(kind in kind_strategy(), steps in 2usize..30, rate in 0.05f64..4.0) {
        let tab = ButcherTableau::new(kind);
        let horizon = 1.0;
        let dt = horizon / steps as f64;
        let stage_time = dt * tab.c(0);
        let cfg = scalar_config(kind, steps, horizon, rate, stage_time);
        let problem = Problem::build(&cfg).unwrap();
        let final_q = problem.qoi_index("final").unwrap();
        let (out, _, grads) = problem.gradients(&[rate], &[final_q]).unwrap();

        let z = -rate * dt;
        let (r, dr) = amplification(&tab, z);
        let n = steps as i32;
        let value = r.powi(n);
        let deriv = n as f64 * r.powi(n - 1) * dr * (-dt);
        prop_assert!(close(out.values[final_q], value, 1e-13), "{} vs {}", out.values[final_q], value);
        prop_assert!(close(grads[0].value[0], deriv, 1e-12), "{} vs {}", grads[0].value[0], deriv);
    }

    #[test]
    fn first_stage_impulse_matches_closed_form(kind in prop_oneof![Just(TableauKind::Dirk2), Just(TableauKind::Dirk3)], steps in 2usize..20, rate in 0.05f64..4.0) {
        let tab = ButcherTableau::new(kind);
        let dt = 1.0 / steps as f64;
        let cfg = scalar_config(kind, steps, 1.0, rate, dt * tab.c(0));
        let problem = Problem::build(&cfg).unwrap();
        let q = problem.qoi_index("stage").unwrap();
        let (out, _, grads) = problem.gradients(&[rate], &[q]).unwrap();

        let (y, dy) = stage_factors(&tab, -rate * dt);
        prop_assert!(close(out.values[q], y[0], 1e-14));
        prop_assert!(close(grads[0].value[0], dy[0] * (-dt), 1e-13), "{} vs {}", grads[0].value[0], -dy[0] * dt);
    }

    #[test]
    fn adjoint_equals_forward_sensitivity(kind in kind_strategy(), steps in 1usize..25, rate in 0.05f64..4.0, horizon in 0.2f64..3.0) {
        let cfg = scalar_config(kind, steps, horizon, rate, horizon);
        let problem = Problem::build(&cfg).unwrap();
        let which: Vec<usize> = (0..problem.qois.len()).collect();
        let (_, _, adj) = problem.gradients(&[rate], &which).unwrap();
        let fwd = forward_sensitivity(problem.system(), &problem.tab, &problem.grid, &[rate], &problem.qois, &problem.newton).unwrap();
        for (a, f) in adj.iter().zip(&fwd) {
            prop_assert!(relative_error(&a.value, f.as_slice()) <= 1e-12);
        }
    }
}

#[test]
fn gradient_parts_add_up() {
    let cfg = scalar_config(TableauKind::Dirk3, 12, 1.5, 0.7, 1.5);
    let problem = Problem::build(&cfg).unwrap();
    let (_, _, grads) = problem.gradients(&[0.7], &[0, 1, 2, 3]).unwrap();
    for g in grads {
        let sum = g.partial[0] + g.initial_condition[0] + g.stage_sum[0];
        assert!((sum - g.value[0]).abs() <= 1e-15 * (1.0 + g.value[0].abs()));
        // constant initial state, rate enters through the residual only
        assert_eq!(g.initial_condition[0], 0.0);
    }
}
