//! Quantities of interest and their solver-consistent time discretization.
//!
//! A QoI pairs a system integrand `f_h(u, mu, t)` with a temporal weight. The
//! uniform weight integrates `f_h` over the time horizon with the DIRK
//! quadrature of the primal scheme,
//! `F^(n) = F^(n-1) + dt_n sum_i b_i f_h(u_i^(n), mu, t_(n-1) + c_i dt_n)`,
//! and impulse weights sample `f_h` at a single grid point or stage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::primal::TimeGrid;
use crate::system::{SemiDiscreteSystem, Vector};
use crate::tableau::ButcherTableau;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QoiWeight {
    Uniform,
    TimeImpulse { t: f64 },
    /// Spatial point weight. The spatial part is carried by the integrand (a
    /// trace value in `dg1d`); in time this behaves like `Uniform`.
    SpacePoint { x: f64 },
    SpaceTimePoint { x: f64, t: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QoiSpec {
    pub name: String,
    /// Index into the system's integrand family.
    pub integrand: usize,
    pub weight: QoiWeight,
}

impl QoiSpec {
    pub fn uniform(name: impl Into<String>, integrand: usize) -> Self {
        Self { name: name.into(), integrand, weight: QoiWeight::Uniform }
    }

    pub fn time_impulse(name: impl Into<String>, integrand: usize, t: f64) -> Self {
        Self { name: name.into(), integrand, weight: QoiWeight::TimeImpulse { t } }
    }
}

/// Discrete location of an impulse weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImpulseSlot {
    Grid(usize),
    Stage { step: usize, stage: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeSupport {
    Uniform,
    Impulse(ImpulseSlot),
}

/// A QoI whose time weight has been resolved against a grid and tableau.
#[derive(Debug, Clone, PartialEq)]
pub struct RegisteredQoi {
    pub spec: QoiSpec,
    pub support: TimeSupport,
}

impl RegisteredQoi {
    pub fn integrand(&self) -> usize {
        self.spec.integrand
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }
}

/// Resolves the time weight of `spec`. Impulse times must coincide with a grid
/// point or a stage time; grid points take precedence when both match.
pub fn register(spec: QoiSpec, n_integrands: usize, grid: &TimeGrid, tab: &ButcherTableau) -> Result<RegisteredQoi> {
    if spec.integrand >= n_integrands {
        return Err(Error::Config(format!(
            "QoI '{}' refers to integrand {} but the system has {}",
            spec.name, spec.integrand, n_integrands
        )));
    }
    let t_star = match spec.weight {
        QoiWeight::Uniform | QoiWeight::SpacePoint { .. } => {
            return Ok(RegisteredQoi { spec, support: TimeSupport::Uniform });
        }
        QoiWeight::TimeImpulse { t } | QoiWeight::SpaceTimePoint { t, .. } => t,
    };
    let tol = 1e-12 * grid.end().abs().max(1.0);
    for n in 0..=grid.n_steps() {
        if (grid.t(n) - t_star).abs() <= tol {
            return Ok(RegisteredQoi { spec, support: TimeSupport::Impulse(ImpulseSlot::Grid(n)) });
        }
    }
    for n in 1..=grid.n_steps() {
        for i in 0..tab.stages() {
            if (grid.stage_time(tab, n, i) - t_star).abs() <= tol {
                let slot = ImpulseSlot::Stage { step: n, stage: i };
                return Ok(RegisteredQoi { spec, support: TimeSupport::Impulse(slot) });
            }
        }
    }
    Err(Error::Config(format!(
        "impulse time {t_star} of QoI '{}' is neither a grid point nor a stage time",
        spec.name
    )))
}

/// One step of the uniform-weight update `F_prev + dt sum_i b_i f_i`.
pub fn accumulate(f_prev: f64, stage_values: &[f64], tab: &ButcherTableau, dt: f64) -> f64 {
    assert_eq!(stage_values.len(), tab.stages(), "one integrand value per stage");
    let mut sum = 0.0;
    for (i, f) in stage_values.iter().enumerate() {
        sum += tab.b(i) * f;
    }
    f_prev + dt * sum
}

/// Partial derivatives of one QoI with respect to the variables of step `n`.
#[derive(Debug, Clone)]
pub struct StepPartials {
    /// Contribution to `dF/du^(n-1)` through the stage states of step `n`.
    pub du_prev: Vector,
    /// `dF/dk_p^(n)` for each stage `p`.
    pub dk: Vec<Vector>,
    /// Contribution to the explicit `dF/dmu` from step `n`.
    pub dmu: Vector,
}

/// Partials of `q` with respect to the stage variables of step `n`, given the
/// stage states `u_i^(n)` reconstructed from the trajectory.
pub fn step_partials<S: SemiDiscreteSystem + ?Sized>(
    sys: &S,
    q: &RegisteredQoi,
    tab: &ButcherTableau,
    grid: &TimeGrid,
    n: usize,
    stage_states: &[Vector],
    mu: &[f64],
) -> Result<StepPartials> {
    let s = tab.stages();
    let nu = sys.dim();
    let mut out = StepPartials {
        du_prev: Vector::zeros(nu),
        dk: vec![Vector::zeros(nu); s],
        dmu: Vector::zeros(sys.n_params()),
    };
    let which = q.integrand();
    match q.support {
        TimeSupport::Uniform => {
            let dt = grid.dt(n);
            for i in 0..s {
                let tp = grid.stage_point(tab, n, i);
                let w = dt * tab.b(i);
                let df = sys.qoi_jac_state(which, &stage_states[i], mu, tp)?;
                out.du_prev.axpy(w, &df, 1.0);
                for p in 0..=i {
                    out.dk[p].axpy(w * tab.a(i, p), &df, 1.0);
                }
                let dfm = sys.qoi_jac_param(which, &stage_states[i], mu, tp)?;
                out.dmu.axpy(w, &dfm, 1.0);
            }
        }
        TimeSupport::Impulse(ImpulseSlot::Stage { step, stage }) if step == n => {
            let tp = grid.stage_point(tab, n, stage);
            let df = sys.qoi_jac_state(which, &stage_states[stage], mu, tp)?;
            out.du_prev.copy_from(&df);
            for p in 0..=stage {
                out.dk[p].axpy(tab.a(stage, p), &df, 1.0);
            }
            out.dmu = sys.qoi_jac_param(which, &stage_states[stage], mu, tp)?;
        }
        TimeSupport::Impulse(_) => {}
    }
    Ok(out)
}

/// Direct partials of `q` with respect to the grid state `u^(n)` and `mu`.
/// Nonzero only for an impulse located at grid point `n`.
pub fn grid_partials<S: SemiDiscreteSystem + ?Sized>(
    sys: &S,
    q: &RegisteredQoi,
    grid: &TimeGrid,
    n: usize,
    u_n: &Vector,
    mu: &[f64],
) -> Result<(Vector, Vector)> {
    match q.support {
        TimeSupport::Impulse(ImpulseSlot::Grid(m)) if m == n => {
            let tp = grid.grid_point(n);
            Ok((sys.qoi_jac_state(q.integrand(), u_n, mu, tp)?, sys.qoi_jac_param(q.integrand(), u_n, mu, tp)?))
        }
        _ => Ok((Vector::zeros(sys.dim()), Vector::zeros(sys.n_params()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tableau::TableauKind;

    #[test]
    fn accumulate_constant_integrand_sums_to_horizon() {
        for kind in TableauKind::ALL {
            let tab = ButcherTableau::new(kind);
            let grid = TimeGrid::uniform(1.7, 13).unwrap();
            let ones = vec![1.0; tab.stages()];
            let mut f = 0.0;
            for n in 1..=grid.n_steps() {
                f = accumulate(f, &ones, &tab, grid.dt(n));
            }
            assert!((f - 1.7).abs() < 1e-14, "{kind}: {f}");
        }
    }

    #[test]
    fn impulse_registration_prefers_grid_points() {
        let tab = ButcherTableau::new(TableauKind::Dirk2);
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let q = register(QoiSpec::time_impulse("end", 0, 1.0), 1, &grid, &tab).unwrap();
        assert_eq!(q.support, TimeSupport::Impulse(ImpulseSlot::Grid(4)));
        let t_stage = grid.stage_time(&tab, 2, 0);
        let q = register(QoiSpec::time_impulse("mid", 0, t_stage), 1, &grid, &tab).unwrap();
        assert_eq!(q.support, TimeSupport::Impulse(ImpulseSlot::Stage { step: 2, stage: 0 }));
        assert!(register(QoiSpec::time_impulse("off", 0, 0.3), 1, &grid, &tab).is_err());
    }

    #[test]
    fn unknown_integrand_is_rejected() {
        let tab = ButcherTableau::new(TableauKind::Dirk1);
        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        assert!(register(QoiSpec::uniform("x", 3), 2, &grid, &tab).is_err());
    }
}
