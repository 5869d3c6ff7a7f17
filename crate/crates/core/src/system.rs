//! The semi-discrete system contract `M du/dt = r(u, mu, t)` and helpers shared by
//! every implementation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Which discrete instant a time argument refers to.
///
/// Systems with cached time-dependent data (the GCL field) need to know the
/// grid point or stage slot; `Free` is for evaluations off the time grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TimeSlot {
    /// Grid point `t_n`, `n = 0..=N_t`.
    Grid(usize),
    /// Stage `stage` (zero based) of step `step` (one based).
    Stage { step: usize, stage: usize },
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimePoint {
    pub t: f64,
    pub slot: TimeSlot,
}

impl TimePoint {
    pub fn free(t: f64) -> Self {
        Self { t, slot: TimeSlot::Free }
    }

    pub fn grid(t: f64, n: usize) -> Self {
        Self { t, slot: TimeSlot::Grid(n) }
    }

    pub fn stage(t: f64, step: usize, stage: usize) -> Self {
        Self { t, slot: TimeSlot::Stage { step, stage } }
    }
}

/// Semi-discrete ODE with a constant mass matrix and analytic derivatives.
///
/// All methods are pure functions of their arguments so implementations can be
/// evaluated from several threads at once.
pub trait SemiDiscreteSystem: Sync {
    fn dim(&self) -> usize;

    fn n_params(&self) -> usize;

    /// Constant mass matrix.
    fn mass(&self) -> &Matrix;

    fn residual(&self, u: &Vector, mu: &[f64], tp: TimePoint) -> Result<Vector>;

    fn jac_state(&self, u: &Vector, mu: &[f64], tp: TimePoint) -> Result<Matrix>;

    /// Total derivative of the residual with respect to the parameters (`N_u x N_mu`).
    fn jac_param(&self, u: &Vector, mu: &[f64], tp: TimePoint) -> Result<Matrix>;

    /// Names of the QoI integrands this system provides, indexed by `which`.
    fn qoi_names(&self) -> Vec<String>;

    fn qoi(&self, which: usize, u: &Vector, mu: &[f64], tp: TimePoint) -> Result<f64>;

    fn qoi_jac_state(&self, which: usize, u: &Vector, mu: &[f64], tp: TimePoint) -> Result<Vector>;

    fn qoi_jac_param(&self, which: usize, u: &Vector, mu: &[f64], tp: TimePoint) -> Result<Vector>;

    fn initial(&self, mu: &[f64]) -> Result<InitialCondition>;

    /// Residual and state Jacobian together. Implementations that share work
    /// between the two may override this.
    fn residual_and_jac(&self, u: &Vector, mu: &[f64], tp: TimePoint) -> Result<(Vector, Matrix)> {
        Ok((self.residual(u, mu, tp)?, self.jac_state(u, mu, tp)?))
    }

    fn n_qois(&self) -> usize {
        self.qoi_names().len()
    }

    fn qoi_index(&self, name: &str) -> Option<usize> {
        self.qoi_names().iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone)]
pub enum IcKind {
    /// `u_0(mu)` given in closed form together with its parameter Jacobian.
    Analytic { du0_dmu: Matrix },
    /// `u_0` solves `R(u_0, mu) = 0`; the Jacobians are evaluated at the solution.
    Steady { dr_du0: Matrix, dr_dmu: Matrix, residual_norm: f64 },
}

#[derive(Debug, Clone)]
pub struct InitialCondition {
    pub value: Vector,
    pub kind: IcKind,
}

impl InitialCondition {
    pub fn analytic(value: Vector, du0_dmu: Matrix) -> Self {
        assert_eq!(du0_dmu.nrows(), value.len());
        Self { value, kind: IcKind::Analytic { du0_dmu } }
    }

    /// Parameter-independent initial state.
    pub fn fixed(value: Vector, n_params: usize) -> Self {
        let n = value.len();
        Self::analytic(value, Matrix::zeros(n, n_params))
    }

    /// Steady initial state; rejects states whose residual exceeds `tol`.
    pub fn steady(value: Vector, residual: &Vector, dr_du0: Matrix, dr_dmu: Matrix, tol: f64) -> Result<Self> {
        let residual_norm = residual.amax();
        if !(residual_norm <= tol) {
            return Err(Error::Contract(format!(
                "steady initial condition residual {residual_norm:e} exceeds tolerance {tol:e}"
            )));
        }
        Ok(Self { value, kind: IcKind::Steady { dr_du0, dr_dmu, residual_norm } })
    }

    /// Parameter Jacobian of `u_0`. For the steady kind this needs a linear solve
    /// per parameter and is meant for oracles, not the adjoint path.
    pub fn du0_dmu(&self) -> Result<Matrix> {
        match &self.kind {
            IcKind::Analytic { du0_dmu } => Ok(du0_dmu.clone()),
            IcKind::Steady { dr_du0, dr_dmu, .. } => {
                let rhs = -dr_dmu;
                solve(dr_du0.clone(), &rhs, "steady initial-condition sensitivity")
            }
        }
    }
}

/// Dense LU solve of `a x = b`.
pub fn solve(a: Matrix, b: &Matrix, context: &str) -> Result<Matrix> {
    let lu = a.lu();
    lu.solve(b).ok_or_else(|| Error::SingularSystem(context.to_string()))
}

pub fn solve_vec(a: Matrix, b: &Vector, context: &str) -> Result<Vector> {
    let lu = a.lu();
    lu.solve(b).ok_or_else(|| Error::SingularSystem(context.to_string()))
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    /// Absolute tolerance on the max norm of the nonlinear residual.
    pub tol: f64,
    pub max_iter: usize,
    /// Keep the first Jacobian factorization for all iterations of a solve.
    pub reuse_jacobian: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { tol: 1e-11, max_iter: 20, reuse_jacobian: false }
    }
}

/// Outcome of a Newton solve: the root and the residual norm per iterate.
#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub x: Vector,
    pub history: Vec<f64>,
}

/// Plain Newton iteration with full steps on `g(x) = 0`.
///
/// `eval` returns the residual and, when asked, its Jacobian. Failures carry the
/// residual history.
pub fn newton<F>(x0: Vector, opts: &NewtonOptions, mut eval: F) -> std::result::Result<NewtonOutcome, NewtonFailure>
where
    F: FnMut(&Vector, bool) -> Result<(Vector, Option<Matrix>)>,
{
    let mut x = x0;
    let mut history = Vec::new();
    let mut lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> = None;
    loop {
        let need_jac = lu.is_none() || !opts.reuse_jacobian;
        let (g, jac) = eval(&x, need_jac).map_err(|e| NewtonFailure::Eval(e, history.clone()))?;
        let norm = g.amax();
        history.push(norm);
        if !norm.is_finite() {
            return Err(NewtonFailure::Diverged(history));
        }
        if norm <= opts.tol {
            return Ok(NewtonOutcome { x, history });
        }
        if history.len() > opts.max_iter {
            return Err(NewtonFailure::Diverged(history));
        }
        if let Some(j) = jac {
            lu = Some(j.lu());
        }
        let dx = lu
            .as_ref()
            .expect("a Jacobian is requested on the first iteration")
            .solve(&g)
            .ok_or_else(|| NewtonFailure::Singular(history.clone()))?;
        x -= dx;
    }
}

#[derive(Debug)]
pub enum NewtonFailure {
    Diverged(Vec<f64>),
    Singular(Vec<f64>),
    Eval(Error, Vec<f64>),
}

impl NewtonFailure {
    pub fn history(&self) -> &[f64] {
        match self {
            NewtonFailure::Diverged(h) | NewtonFailure::Singular(h) | NewtonFailure::Eval(_, h) => h,
        }
    }
}

/// Relative errors of the analytic derivatives against 4th-order central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeReport {
    pub jac_state: f64,
    pub jac_param: f64,
    /// One entry per QoI integrand.
    pub qoi_jac_state: Vec<f64>,
    pub qoi_jac_param: Vec<f64>,
}

impl DerivativeReport {
    pub fn max(&self) -> f64 {
        self.qoi_jac_state
            .iter()
            .chain(&self.qoi_jac_param)
            .fold(self.jac_state.max(self.jac_param), |a, &b| a.max(b))
    }
}

/// `||a - b||_max / max(||a||_max, ||b||_max)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], fd: &[f64]) -> f64 {
    assert_eq!(analytic.len(), fd.len());
    let amax = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let scale = amax(analytic).max(amax(fd));
    if scale == 0.0 {
        return 0.0;
    }
    analytic.iter().zip(fd).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

fn checked_step(value: f64, step: f64) -> Result<()> {
    if value + step == value || value - step == value {
        return Err(Error::StepUnderflow { step, value });
    }
    Ok(())
}

/// Fourth-order central difference of a vector-valued function along one coordinate.
fn central4<F>(x: f64, h: f64, mut f: F) -> Result<Vector>
where
    F: FnMut(f64) -> Result<Vector>,
{
    checked_step(x, h)?;
    let fp2 = f(x + 2.0 * h)?;
    let fp1 = f(x + h)?;
    let fm1 = f(x - h)?;
    let fm2 = f(x - 2.0 * h)?;
    Ok((fm2 - fp2 + (fp1 - fm1) * 8.0) / (12.0 * h))
}

/// Compares every analytic derivative of `sys` with finite differences at one probe.
pub fn verify_derivatives<S: SemiDiscreteSystem + ?Sized>(
    sys: &S,
    u: &Vector,
    mu: &[f64],
    tp: TimePoint,
    step: f64,
) -> Result<DerivativeReport> {
    if !(step > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let n = sys.dim();
    let np = sys.n_params();
    let nq = sys.n_qois();

    // Residual and all integrands stacked into one vector so each perturbation
    // costs a single pass.
    let stacked = |u: &Vector, mu: &[f64]| -> Result<Vector> {
        let r = sys.residual(u, mu, tp)?;
        let mut out = Vector::zeros(n + nq);
        out.rows_mut(0, n).copy_from(&r);
        for q in 0..nq {
            out[n + q] = sys.qoi(q, u, mu, tp)?;
        }
        Ok(out)
    };

    let mut fd_u = Matrix::zeros(n + nq, n);
    for j in 0..n {
        let col = central4(u[j], step, |v| {
            let mut up = u.clone();
            up[j] = v;
            stacked(&up, mu)
        })?;
        fd_u.set_column(j, &col);
    }
    let mut fd_mu = Matrix::zeros(n + nq, np);
    for p in 0..np {
        let col = central4(mu[p], step, |v| {
            let mut mp = mu.to_vec();
            mp[p] = v;
            stacked(u, &mp)
        })?;
        fd_mu.set_column(p, &col);
    }

    let jac_state = relative_error(sys.jac_state(u, mu, tp)?.as_slice(), fd_u.rows(0, n).into_owned().as_slice());
    let jac_param = relative_error(sys.jac_param(u, mu, tp)?.as_slice(), fd_mu.rows(0, n).into_owned().as_slice());
    let mut qoi_jac_state = Vec::with_capacity(nq);
    let mut qoi_jac_param = Vec::with_capacity(nq);
    for q in 0..nq {
        let fd: Vec<f64> = fd_u.row(n + q).iter().copied().collect();
        qoi_jac_state.push(relative_error(sys.qoi_jac_state(q, u, mu, tp)?.as_slice(), &fd));
        let fd: Vec<f64> = fd_mu.row(n + q).iter().copied().collect();
        qoi_jac_param.push(relative_error(sys.qoi_jac_param(q, u, mu, tp)?.as_slice(), &fd));
    }
    Ok(DerivativeReport { jac_state, jac_param, qoi_jac_state, qoi_jac_param })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_of_zero_blocks_is_zero() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 1.0]), 0.5);
    }

    #[test]
    fn newton_solves_scalar_quadratic() {
        let out = newton(Vector::from_element(1, 1.0), &NewtonOptions::default(), |x, _| {
            let g = Vector::from_element(1, x[0] * x[0] - 2.0);
            let j = Matrix::from_element(1, 1, 2.0 * x[0]);
            Ok((g, Some(j)))
        })
        .unwrap();
        assert!((out.x[0] - 2f64.sqrt()).abs() < 1e-11);
        // quadratic convergence: each residual at most a tenth of the previous near the root
        let h = &out.history;
        for w in h.windows(2).skip(1) {
            assert!(w[1] <= 0.1 * w[0]);
        }
    }

    #[test]
    fn newton_reports_history_on_failure() {
        let opts = NewtonOptions { max_iter: 3, ..Default::default() };
        // Newton on atan diverges from |x0| > 1.39
        let err = newton(Vector::from_element(1, 1.5), &opts, |x, _| {
            let d = 1.0 / (1.0 + x[0] * x[0]);
            Ok((Vector::from_element(1, x[0].atan()), Some(Matrix::from_element(1, 1, d))))
        })
        .unwrap_err();
        assert_eq!(err.history().len(), 4);
    }

    #[test]
    fn steady_ic_rejects_large_residual() {
        let v = Vector::from_element(1, 1.0);
        let r = Vector::from_element(1, 1e-3);
        let err = InitialCondition::steady(v, &r, Matrix::identity(1, 1), Matrix::zeros(1, 1), 1e-10);
        assert!(err.is_err());
    }
}
