//! Verification studies shared by the CLI and the test suites: finite-difference
//! gradient checks, temporal and spatial convergence, and freestream
//! preservation.

use serde::Serialize;

use crate::config::{ProblemSpec, Problem, RunConfig, TimeSpec};
use crate::dg1d::{InitialSpec, Profile};
use crate::error::{Error, Result};
use crate::optimize::{minimize, OptResult};
use crate::system::{relative_error, Vector};
use crate::tableau::TableauKind;

/// Fourth-order central difference of every QoI along every parameter.
pub fn fd_gradients(problem: &Problem, mu: &[f64], tau: f64) -> Result<Vec<Vec<f64>>> {
    let nq = problem.qois.len();
    let mut out = vec![vec![0.0; mu.len()]; nq];
    for p in 0..mu.len() {
        let at = |k: f64| -> Result<Vec<f64>> {
            let mut m = mu.to_vec();
            m[p] += k * tau;
            problem.values(&m)
        };
        let (fp2, fp1, fm1, fm2) = (at(2.0)?, at(1.0)?, at(-1.0)?, at(-2.0)?);
        for q in 0..nq {
            out[q][p] = (fm2[q] - fp2[q] + 8.0 * (fp1[q] - fm1[q])) / (12.0 * tau);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckRow {
    pub tau: f64,
    /// Per checked QoI.
    pub fd: Vec<Vec<f64>>,
    pub rel_error: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub qois: Vec<String>,
    pub mu: Vec<f64>,
    pub adjoint: Vec<Vec<f64>>,
    pub rows: Vec<GradCheckRow>,
    /// Minimum over `tau` per QoI.
    pub min_error: Vec<f64>,
}

impl GradCheckReport {
    pub fn worst_min_error(&self) -> f64 {
        self.min_error.iter().fold(0.0_f64, |m, v| m.max(*v))
    }
}

/// Adjoint gradient against central differences for each step `tau`.
pub fn grad_check(problem: &Problem, mu: &[f64], which: &[usize], taus: &[f64]) -> Result<GradCheckReport> {
    let (_, _, grads) = problem.gradients(mu, which)?;
    let adjoint: Vec<Vec<f64>> = grads.into_iter().map(|g| g.value).collect();
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let all = fd_gradients(problem, mu, tau)?;
        let fd: Vec<Vec<f64>> = which.iter().map(|&q| all[q].clone()).collect();
        let rel_error = adjoint.iter().zip(&fd).map(|(a, f)| relative_error(a, f)).collect();
        rows.push(GradCheckRow { tau, fd, rel_error });
    }
    let min_error = (0..which.len())
        .map(|q| rows.iter().fold(f64::INFINITY, |m, r| m.min(r.rel_error[q])))
        .collect();
    Ok(GradCheckReport {
        qois: which.iter().map(|&q| problem.qois[q].name().to_string()).collect(),
        mu: mu.to_vec(),
        adjoint,
        rows,
        min_error,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StudyPoint {
    pub order_label: usize,
    /// `dt` or `h`.
    pub size: f64,
    pub count: usize,
    pub error: f64,
}

/// Least-squares slope of `log(error)` against `log(size)`.
pub fn fitted_slope(points: &[StudyPoint]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.size.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.error.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn final_state(cfg: &RunConfig, time: TimeSpec, mu: &[f64]) -> Result<Vector> {
    let p = Problem::build_with(&cfg.problem, &time, cfg, cfg.parameters.count)?;
    Ok(p.primal(mu, &mut crate::store::NullSink)?.final_state)
}

/// Reference final state for temporal studies: the closed form for the
/// scalar decay problem with a constant initial state, a fine dirk3 solve
/// otherwise.
pub fn temporal_reference(cfg: &RunConfig, finest_steps: usize) -> Result<Vector> {
    let mu = cfg.initial_parameters();
    if let ProblemSpec::ScalarDecay(spec) = &cfg.problem {
        use crate::config::{ScalarIcSpec, ScalarRateSpec};
        let rate = match spec.rate {
            ScalarRateSpec::Param { index } => mu[index],
            ScalarRateSpec::Fixed { value } => value,
        };
        let u0 = match spec.initial {
            ScalarIcSpec::Constant { value } => value,
            ScalarIcSpec::Param { index } => mu[index],
            ScalarIcSpec::SteadySquare { index } => mu[index] * mu[index],
        };
        return Ok(Vector::from_element(1, u0 * (-rate * cfg.time.horizon).exp()));
    }
    let time = TimeSpec { steps: finest_steps * 8, tableau: TableauKind::Dirk3, ..cfg.time };
    final_state(cfg, time, &mu)
}

/// Max-norm error of the final state for one tableau and step count.
pub fn temporal_case(cfg: &RunConfig, tableau: TableauKind, steps: usize, reference: &Vector) -> Result<StudyPoint> {
    let time = TimeSpec { steps, tableau, ..cfg.time };
    let u = final_state(cfg, time, &cfg.initial_parameters())?;
    Ok(StudyPoint {
        order_label: tableau.order(),
        size: cfg.time.horizon / steps as f64,
        count: steps,
        error: (u - reference).amax(),
    })
}

/// `L2` error at the final time on a refined/reordered copy of the dg1d problem.
pub fn spatial_case(cfg: &RunConfig, order: usize, elements: usize, exact: &Profile) -> Result<StudyPoint> {
    let ProblemSpec::Dg1d(spec) = &cfg.problem else {
        return Err(Error::Config("spatial order study needs a dg1d problem".into()));
    };
    let mut spec = spec.clone();
    spec.order = order;
    spec.elements = elements;
    let problem = ProblemSpec::Dg1d(spec.clone());
    let p = Problem::build_with(&problem, &cfg.time, cfg, cfg.parameters.count)?;
    let mu = cfg.initial_parameters();
    let out = p.primal(&mu, &mut crate::store::NullSink)?;
    let n = p.grid.n_steps();
    let sys = p.dg1d().expect("dg1d problem");
    let error = sys.l2_error(&out.final_state, &mu, p.grid.grid_point(n), |x, t| exact.eval(x, t))?;
    Ok(StudyPoint { order_label: order, size: (spec.domain[1] - spec.domain[0]) / elements as f64, count: elements, error })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GclCheck {
    pub with_gcl: f64,
    pub without_gcl: f64,
}

/// Newton tolerance used by [`gcl_check`] regardless of the configured one,
/// per unit of the freestream value.
pub const GCL_CHECK_NEWTON_TOL: f64 = 1e-15;

/// Max deviation from a constant state over all grid points, with the GCL
/// field on and off, under the configured mapping.
pub fn gcl_check(cfg: &RunConfig, value: f64) -> Result<GclCheck> {
    let ProblemSpec::Dg1d(spec) = &cfg.problem else {
        return Err(Error::Config("gcl-check needs a dg1d problem".into()));
    };
    let mu = cfg.initial_parameters();
    let mut defects = [0.0; 2];
    for (slot, gcl) in [true, false].into_iter().enumerate() {
        let mut s = spec.clone();
        s.gcl = gcl;
        s.left = Profile::Constant { value };
        s.right = Profile::Constant { value };
        s.initial = InitialSpec::Profile { profile: Profile::Constant { value } };
        let mut p = Problem::build_with(&ProblemSpec::Dg1d(s), &cfg.time, cfg, cfg.parameters.count)?;
        // the check targets the discretization, so stage solves go to roundoff
        p.newton.tol = p.newton.tol.min(GCL_CHECK_NEWTON_TOL * value.abs().max(1.0));
        let (traj, _) = p.primal_in_memory(&mu)?;
        let sys = p.dg1d().expect("dg1d problem");
        for (n, u) in traj.states.iter().enumerate() {
            let d = sys.freestream_defect(u, &mu, p.grid.grid_point(n), value)?;
            defects[slot] = f64::max(defects[slot], d);
        }
    }
    Ok(GclCheck { with_gcl: defects[0], without_gcl: defects[1] })
}

/// Runs the `[optimize]` block of `cfg` from its initial parameters. With
/// `checkpoint` set every evaluation goes through that file.
pub fn optimize(cfg: &RunConfig, checkpoint: Option<&std::path::Path>) -> Result<OptResult> {
    let o = cfg.optimize.as_ref().ok_or_else(|| Error::Config("missing [optimize] block".into()))?;
    let problem = Problem::build(cfg)?;
    let objective = problem.qoi_index(&o.objective)?;
    let constraint = o.constraint.as_ref().map(|c| problem.qoi_index(&c.qoi)).transpose()?;
    let mut eval = |mu: &[f64]| problem.evaluate(mu, objective, constraint, checkpoint);
    minimize(&cfg.opt_problem()?, &mut eval, &o.options)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<StudyPoint> = [0.1, 0.05, 0.025]
            .iter()
            .map(|&h| StudyPoint { order_label: 2, size: h, count: 0, error: 3.0 * h * h })
            .collect();
        assert!((fitted_slope(&pts) - 2.0).abs() < 1e-12);
    }
}
