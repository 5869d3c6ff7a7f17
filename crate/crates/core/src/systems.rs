//! Small closed-form systems used by tests, order studies and the CLI.

use crate::error::{Error, Result};
use crate::system::{InitialCondition, Matrix, SemiDiscreteSystem, TimePoint, Vector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rate {
    /// Decay rate `mu_p`.
    Param(usize),
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarIc {
    Constant(f64),
    /// `u_0 = mu_p`.
    Param(usize),
    /// `u_0` solves the steady equation `u_0 - mu_p^2 = 0`.
    SteadySquare(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarIntegrand {
    State,
    One,
    TimeSquared,
    /// `mu_p u`.
    Weighted(usize),
    StateSquared,
}

impl ScalarIntegrand {
    fn name(self) -> String {
        match self {
            ScalarIntegrand::State => "state".into(),
            ScalarIntegrand::One => "one".into(),
            ScalarIntegrand::TimeSquared => "time_squared".into(),
            ScalarIntegrand::Weighted(p) => format!("weighted_{p}"),
            ScalarIntegrand::StateSquared => "state_squared".into(),
        }
    }
}

/// `du/dt = -rate * u` for a scalar `u`.
#[derive(Debug, Clone)]
pub struct ScalarDecay {
    pub rate: Rate,
    pub ic: ScalarIc,
    pub integrands: Vec<ScalarIntegrand>,
    n_params: usize,
    mass: Matrix,
}

impl ScalarDecay {
    pub fn new(rate: Rate, ic: ScalarIc, integrands: Vec<ScalarIntegrand>, n_params: usize) -> Result<Self> {
        let mut used = Vec::new();
        if let Rate::Param(p) = rate {
            used.push(p);
        }
        match ic {
            ScalarIc::Param(p) | ScalarIc::SteadySquare(p) => used.push(p),
            ScalarIc::Constant(_) => {}
        }
        for f in &integrands {
            if let ScalarIntegrand::Weighted(p) = f {
                used.push(*p);
            }
        }
        if let Some(p) = used.into_iter().find(|&p| p >= n_params) {
            return Err(Error::Config(format!("parameter index {p} out of range for {n_params} parameters")));
        }
        Ok(Self { rate, ic, integrands, n_params, mass: Matrix::identity(1, 1) })
    }

    /// `u' = -mu_0 u`, `u(0) = 1`, with the state and the unit integrand.
    pub fn linear_decay() -> Self {
        Self::new(Rate::Param(0), ScalarIc::Constant(1.0), vec![ScalarIntegrand::State, ScalarIntegrand::One], 1)
            .expect("valid setup")
    }

    fn rate_value(&self, mu: &[f64]) -> f64 {
        match self.rate {
            Rate::Param(p) => mu[p],
            Rate::Fixed(v) => v,
        }
    }
}

fn scalar(v: f64) -> Vector {
    Vector::from_element(1, v)
}

impl SemiDiscreteSystem for ScalarDecay {
    fn dim(&self) -> usize {
        1
    }

    fn n_params(&self) -> usize {
        self.n_params
    }

    fn mass(&self) -> &Matrix {
        &self.mass
    }

    fn residual(&self, u: &Vector, mu: &[f64], _: TimePoint) -> Result<Vector> {
        Ok(scalar(-self.rate_value(mu) * u[0]))
    }

    fn jac_state(&self, _: &Vector, mu: &[f64], _: TimePoint) -> Result<Matrix> {
        Ok(Matrix::from_element(1, 1, -self.rate_value(mu)))
    }

    fn jac_param(&self, u: &Vector, _: &[f64], _: TimePoint) -> Result<Matrix> {
        let mut m = Matrix::zeros(1, self.n_params);
        if let Rate::Param(p) = self.rate {
            m[(0, p)] = -u[0];
        }
        Ok(m)
    }

    fn qoi_names(&self) -> Vec<String> {
        self.integrands.iter().map(|f| f.name()).collect()
    }

    fn qoi(&self, which: usize, u: &Vector, mu: &[f64], tp: TimePoint) -> Result<f64> {
        Ok(match self.integrands[which] {
            ScalarIntegrand::State => u[0],
            ScalarIntegrand::One => 1.0,
            ScalarIntegrand::TimeSquared => tp.t * tp.t,
            ScalarIntegrand::Weighted(p) => mu[p] * u[0],
            ScalarIntegrand::StateSquared => u[0] * u[0],
        })
    }

    fn qoi_jac_state(&self, which: usize, u: &Vector, mu: &[f64], _: TimePoint) -> Result<Vector> {
        Ok(scalar(match self.integrands[which] {
            ScalarIntegrand::State => 1.0,
            ScalarIntegrand::One | ScalarIntegrand::TimeSquared => 0.0,
            ScalarIntegrand::Weighted(p) => mu[p],
            ScalarIntegrand::StateSquared => 2.0 * u[0],
        }))
    }

    fn qoi_jac_param(&self, which: usize, u: &Vector, _: &[f64], _: TimePoint) -> Result<Vector> {
        let mut g = Vector::zeros(self.n_params);
        if let ScalarIntegrand::Weighted(p) = self.integrands[which] {
            g[p] = u[0];
        }
        Ok(g)
    }

    fn initial(&self, mu: &[f64]) -> Result<InitialCondition> {
        let np = self.n_params;
        Ok(match self.ic {
            ScalarIc::Constant(v) => InitialCondition::fixed(scalar(v), np),
            ScalarIc::Param(p) => {
                let mut d = Matrix::zeros(1, np);
                d[(0, p)] = 1.0;
                InitialCondition::analytic(scalar(mu[p]), d)
            }
            ScalarIc::SteadySquare(p) => {
                let u0 = mu[p] * mu[p];
                let residual = scalar(u0 - mu[p] * mu[p]);
                let mut dr_dmu = Matrix::zeros(1, np);
                dr_dmu[(0, p)] = -2.0 * mu[p];
                InitialCondition::steady(scalar(u0), &residual, Matrix::identity(1, 1), dr_dmu, 1e-12)?
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::verify_derivatives;

    #[test]
    fn linear_system_derivatives_are_exact() {
        let sys = ScalarDecay::new(
            Rate::Param(0),
            ScalarIc::Param(1),
            vec![ScalarIntegrand::State, ScalarIntegrand::Weighted(1), ScalarIntegrand::StateSquared],
            2,
        )
        .unwrap();
        let rep = verify_derivatives(&sys, &scalar(1.0), &[1.0, 0.5], TimePoint::free(0.0), 1e-3).unwrap();
        assert!(rep.max() <= 1e-10, "{rep:?}");
    }

    #[test]
    fn corrupted_jacobian_is_detected() {
        struct Corrupt(ScalarDecay);
        impl SemiDiscreteSystem for Corrupt {
            fn dim(&self) -> usize {
                1
            }
            fn n_params(&self) -> usize {
                self.0.n_params()
            }
            fn mass(&self) -> &Matrix {
                self.0.mass()
            }
            fn residual(&self, u: &Vector, mu: &[f64], tp: TimePoint) -> Result<Vector> {
                self.0.residual(u, mu, tp)
            }
            fn jac_state(&self, u: &Vector, mu: &[f64], tp: TimePoint) -> Result<Matrix> {
                Ok(self.0.jac_state(u, mu, tp)? + Matrix::from_element(1, 1, 1e-3))
            }
            fn jac_param(&self, u: &Vector, mu: &[f64], tp: TimePoint) -> Result<Matrix> {
                self.0.jac_param(u, mu, tp)
            }
            fn qoi_names(&self) -> Vec<String> {
                self.0.qoi_names()
            }
            fn qoi(&self, w: usize, u: &Vector, mu: &[f64], tp: TimePoint) -> Result<f64> {
                self.0.qoi(w, u, mu, tp)
            }
            fn qoi_jac_state(&self, w: usize, u: &Vector, mu: &[f64], tp: TimePoint) -> Result<Vector> {
                self.0.qoi_jac_state(w, u, mu, tp)
            }
            fn qoi_jac_param(&self, w: usize, u: &Vector, mu: &[f64], tp: TimePoint) -> Result<Vector> {
                self.0.qoi_jac_param(w, u, mu, tp)
            }
            fn initial(&self, mu: &[f64]) -> Result<InitialCondition> {
                self.0.initial(mu)
            }
        }
        let sys = Corrupt(ScalarDecay::linear_decay());
        let rep = verify_derivatives(&sys, &scalar(1.0), &[1.0], TimePoint::free(0.0), 1e-3).unwrap();
        assert!(rep.jac_state >= 1e-4, "{rep:?}");
    }

    #[test]
    fn tiny_step_underflows() {
        let sys = ScalarDecay::linear_decay();
        let err = verify_derivatives(&sys, &scalar(1.0), &[1.0], TimePoint::free(0.0), 1e-300).unwrap_err();
        assert!(matches!(err, Error::StepUnderflow { .. }));
    }

    #[test]
    fn mass_is_parameter_independent() {
        let sys = ScalarDecay::linear_decay();
        assert_eq!(sys.mass(), &Matrix::identity(1, 1));
    }
}
