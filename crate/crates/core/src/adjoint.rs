//! Fully discrete adjoint of the DIRK scheme, gradient reconstruction, and the
//! oracles used to check it (forward sensitivities and Lagrangian stationarity).
//!
//! With `u_i^(n) = u^(n-1) + sum_j a_ij k_j^(n)` and `J_i = dr/du(u_i^(n))`, the
//! reverse sweep solves for each step `n = N_t..1` and stage `i = s..1`
//!
//! ```text
//! (M - a_ii dt J_i)^T kappa_i = dF/dk_i + b_i lambda^(n) + sum_(j>i) a_ji dt J_j^T kappa_j
//! lambda^(n-1) = lambda^(n) + dF/du^(n-1) + sum_i dt J_i^T kappa_i
//! ```
//!
//! starting from `lambda^(N_t) = dF/du^(N_t)`, and the gradient is
//! `dF/dmu = dF/dmu|_explicit + lambda^(0)^T du_0/dmu + sum_n dt_n sum_i kappa_i^T dr/dmu(u_i)`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::primal::{integrate_in_memory, stage_matrix, stage_states, TimeGrid};
use crate::qoi::{grid_partials, step_partials, RegisteredQoi};
use crate::store::{ReverseTrajectory, Slot, StoreError, TrajectorySink};
use crate::system::{solve, IcKind, InitialCondition, Matrix, NewtonOptions, SemiDiscreteSystem, Vector};
use crate::tableau::ButcherTableau;

/// Dual variables of one QoI plus the gradient terms accumulated during the sweep.
#[derive(Debug, Clone)]
pub struct DualTrajectory {
    pub qoi: String,
    /// `lambda^(0) .. lambda^(N_t)`.
    pub lambda: Vec<Vector>,
    /// `kappa[n - 1][i]` = `kappa_(i+1)^(n)`.
    pub kappa: Vec<Vec<Vector>>,
    /// Explicit `dF/dmu`.
    pub partial: Vector,
    /// `sum_n dt_n sum_i kappa_i^T dr/dmu(u_i)`.
    pub stage_sum: Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Gradient {
    pub value: Vec<f64>,
    pub partial: Vec<f64>,
    pub initial_condition: Vec<f64>,
    pub stage_sum: Vec<f64>,
}

/// Reverse sweep for all `qois` at once; each stage matrix is factored once and
/// applied to every QoI.
pub fn adjoint_sweep<S: SemiDiscreteSystem + ?Sized>(
    sys: &S,
    tab: &ButcherTableau,
    grid: &TimeGrid,
    mu: &[f64],
    qois: &[RegisteredQoi],
    src: &mut dyn ReverseTrajectory,
) -> Result<Vec<DualTrajectory>> {
    let s = tab.stages();
    let n_t = grid.n_steps();
    let nu = sys.dim();
    src.layout().check_matches(&grid.layout(nu, s))?;
    let mass_t = sys.mass().transpose();

    let u_final = src.final_state()?;
    let mut duals: Vec<DualTrajectory> = Vec::with_capacity(qois.len());
    for q in qois {
        let (du, dmu) = grid_partials(sys, q, grid, n_t, &u_final, mu)?;
        let mut lambda = vec![Vector::zeros(0); n_t + 1];
        lambda[n_t] = du;
        duals.push(DualTrajectory {
            qoi: q.name().to_string(),
            lambda,
            kappa: vec![Vec::new(); n_t],
            partial: dmu,
            stage_sum: Vector::zeros(sys.n_params()),
        });
    }

    for n in (1..=n_t).rev() {
        let rec = src.step(n).map_err(|e| step_error(e, n))?;
        let dt = grid.dt(n);
        let u_stage = stage_states(tab, &rec.u_prev, &rec.stages);
        let mut jac_t = Vec::with_capacity(s);
        for (i, u_i) in u_stage.iter().enumerate() {
            jac_t.push(sys.jac_state(u_i, mu, grid.stage_point(tab, n, i))?.transpose());
        }
        let partials: Vec<_> = qois
            .iter()
            .map(|q| step_partials(sys, q, tab, grid, n, &u_stage, mu))
            .collect::<Result<_>>()?;

        // products[q][i] = J_i^T kappa_i for the current step
        let mut products: Vec<Vec<Vector>> = vec![vec![Vector::zeros(nu); s]; qois.len()];
        let mut kappas: Vec<Vec<Vector>> = vec![vec![Vector::zeros(nu); s]; qois.len()];
        for i in (0..s).rev() {
            let a = &mass_t - &jac_t[i] * (tab.a(i, i) * dt);
            let lu = a.lu();
            let dr_dmu = sys.jac_param(&u_stage[i], mu, grid.stage_point(tab, n, i))?;
            for (q, dual) in duals.iter_mut().enumerate() {
                let mut rhs = partials[q].dk[i].clone();
                rhs.axpy(tab.b(i), &dual.lambda[n], 1.0);
                for j in (i + 1)..s {
                    let a_ji = tab.a(j, i);
                    if a_ji != 0.0 {
                        rhs.axpy(a_ji * dt, &products[q][j], 1.0);
                    }
                }
                let kappa = lu.solve(&rhs).ok_or_else(|| {
                    Error::SingularSystem(format!("adjoint stage matrix at step {n}, stage {}", i + 1))
                })?;
                products[q][i] = &jac_t[i] * &kappa;
                dual.stage_sum += dr_dmu.tr_mul(&kappa) * dt;
                kappas[q][i] = kappa;
            }
        }

        for (q, dual) in duals.iter_mut().enumerate() {
            let (du_grid, dmu_grid) = grid_partials(sys, &qois[q], grid, n - 1, &rec.u_prev, mu)?;
            let mut lam = dual.lambda[n].clone();
            lam += &partials[q].du_prev;
            lam += du_grid;
            for p in &products[q] {
                lam.axpy(dt, p, 1.0);
            }
            dual.lambda[n - 1] = lam;
            dual.partial += &partials[q].dmu;
            dual.partial += dmu_grid;
            dual.kappa[n - 1] = std::mem::take(&mut kappas[q]);
        }
    }
    Ok(duals)
}

fn step_error(e: StoreError, n: usize) -> Error {
    match e {
        StoreError::Io { slot, source } => Error::Store(StoreError::Io { slot: format!("{slot} (step {n})"), source }),
        other => Error::Store(other),
    }
}

/// `lambda_0^T du_0/dmu`. For a steady initial condition this is
/// `-v^T dR/dmu` with `(dR/du_0)^T v = lambda_0`.
pub fn ic_sensitivity_contribution(ic: &InitialCondition, lambda0: &Vector) -> Result<Vector> {
    match &ic.kind {
        IcKind::Analytic { du0_dmu } => Ok(du0_dmu.tr_mul(lambda0)),
        IcKind::Steady { dr_du0, dr_dmu, .. } => {
            let rhs = Matrix::from_column_slice(lambda0.len(), 1, lambda0.as_slice());
            let v = solve(dr_du0.transpose(), &rhs, "steady initial-condition adjoint")?;
            Ok(-dr_dmu.tr_mul(&v.column(0).into_owned()))
        }
    }
}

/// Assembles `dF/dmu` from a completed sweep.
pub fn reconstruct_gradient(dual: &DualTrajectory, ic: &InitialCondition) -> Result<Gradient> {
    let ic_term = ic_sensitivity_contribution(ic, &dual.lambda[0])?;
    let value = &dual.partial + &ic_term + &dual.stage_sum;
    Ok(Gradient {
        value: value.as_slice().to_vec(),
        partial: dual.partial.as_slice().to_vec(),
        initial_condition: ic_term.as_slice().to_vec(),
        stage_sum: dual.stage_sum.as_slice().to_vec(),
    })
}

/// Sweep plus reconstruction for every QoI.
pub fn adjoint_gradients<S: SemiDiscreteSystem + ?Sized>(
    sys: &S,
    tab: &ButcherTableau,
    grid: &TimeGrid,
    mu: &[f64],
    qois: &[RegisteredQoi],
    src: &mut dyn ReverseTrajectory,
) -> Result<(Vec<DualTrajectory>, Vec<Gradient>)> {
    let duals = adjoint_sweep(sys, tab, grid, mu, qois, src)?;
    let ic = sys.initial(mu)?;
    let grads = duals.iter().map(|d| reconstruct_gradient(d, &ic)).collect::<Result<_>>()?;
    Ok((duals, grads))
}

/// Writes a dual trajectory in the checkpoint record scheme:
/// `lambda^(0)`, then per step `kappa_1 .. kappa_s, lambda^(n)`.
pub fn write_dual(dual: &DualTrajectory, grid: &TimeGrid, sink: &mut dyn TrajectorySink) -> Result<()> {
    let nu = dual.lambda[0].len();
    let s = dual.kappa.first().map_or(0, Vec::len);
    sink.begin(&grid.layout(nu, s))?;
    sink.write(Slot::Initial, &dual.lambda[0])?;
    for n in 1..=grid.n_steps() {
        for (i, k) in dual.kappa[n - 1].iter().enumerate() {
            sink.write(Slot::Stage { step: n, stage: i }, k)?;
        }
        sink.write(Slot::State { step: n }, &dual.lambda[n])?;
    }
    sink.finish()?;
    Ok(())
}

/// Gradient by forward propagation of `du/dmu` and `dk_i/dmu` through the
/// linearized stage equations. Cost grows with `N_mu`; meant as an oracle.
pub fn forward_sensitivity<S: SemiDiscreteSystem + ?Sized>(
    sys: &S,
    tab: &ButcherTableau,
    grid: &TimeGrid,
    mu: &[f64],
    qois: &[RegisteredQoi],
    opts: &NewtonOptions,
) -> Result<Vec<Vector>> {
    let (traj, _) = integrate_in_memory(sys, tab, grid, mu, qois, opts)?;
    let s = tab.stages();
    let np = sys.n_params();
    let mass = sys.mass();
    let ic = sys.initial(mu)?;

    let mut sens = ic.du0_dmu()?;
    let mut grads: Vec<Vector> = Vec::with_capacity(qois.len());
    for q in qois {
        let (du, dmu) = grid_partials(sys, q, grid, 0, &traj.states[0], mu)?;
        grads.push(dmu + sens.tr_mul(&du));
    }
    for n in 1..=grid.n_steps() {
        let dt = grid.dt(n);
        let stages = &traj.stages[n - 1];
        let u_stage = stage_states(tab, &traj.states[n - 1], stages);
        let mut sk: Vec<Matrix> = Vec::with_capacity(s);
        for i in 0..s {
            let tp = grid.stage_point(tab, n, i);
            let jac = sys.jac_state(&u_stage[i], mu, tp)?;
            let mut base = sens.clone();
            for (j, skj) in sk.iter().enumerate() {
                base += skj * tab.a(i, j);
            }
            let rhs = (&jac * base + sys.jac_param(&u_stage[i], mu, tp)?) * dt;
            let ski = solve(stage_matrix(mass, tab.a(i, i), dt, &jac), &rhs, "stage sensitivity")?;
            sk.push(ski);
        }
        for (g, q) in grads.iter_mut().zip(qois) {
            let p = step_partials(sys, q, tab, grid, n, &u_stage, mu)?;
            *g += &p.dmu + sens.tr_mul(&p.du_prev);
            for (i, ski) in sk.iter().enumerate() {
                *g += ski.tr_mul(&p.dk[i]);
            }
        }
        let mut next = sens.clone();
        for (i, ski) in sk.iter().enumerate() {
            next += ski * tab.b(i);
        }
        sens = next;
        for (g, q) in grads.iter_mut().zip(qois) {
            let (du, dmu) = grid_partials(sys, q, grid, n, &traj.states[n], mu)?;
            *g += dmu + sens.tr_mul(&du);
        }
    }
    debug_assert!(grads.iter().all(|g| g.len() == np));
    Ok(grads)
}

/// Max norms of the Lagrangian derivatives at a primal/dual pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LagrangianReport {
    /// `max_n ||dL/du^(n)||_inf`.
    pub state: f64,
    /// `max_(n,i) ||dL/dk_i^(n)||_inf`.
    pub stage: f64,
    /// `max_n ||lambda^(n)||_inf`.
    pub lambda_max: f64,
}

impl LagrangianReport {
    pub fn max(&self) -> f64 {
        self.state.max(self.stage)
    }

    /// Residuals within `tol * (1 + ||lambda||_inf)`.
    pub fn passes(&self, tol: f64) -> bool {
        self.max() <= tol * (1.0 + self.lambda_max)
    }
}

/// Evaluates `dL/du^(n)` and `dL/dk_i^(n)` for
/// `L = F - sum_n lambda^(n)^T (u^(n) - u^(n-1) - sum_i b_i k_i)
///        - sum_(n,i) kappa_i^T (M k_i - dt r(u_i))`
/// with freshly assembled Jacobians and explicit products.
pub fn lagrangian_residuals<S: SemiDiscreteSystem + ?Sized>(
    sys: &S,
    tab: &ButcherTableau,
    grid: &TimeGrid,
    mu: &[f64],
    qoi: &RegisteredQoi,
    traj: &crate::primal::PrimalTrajectory,
    dual: &DualTrajectory,
) -> Result<LagrangianReport> {
    let s = tab.stages();
    let n_t = grid.n_steps();
    let mass = sys.mass();
    let lambda_max = dual.lambda.iter().fold(0.0_f64, |m, l| m.max(l.amax()));

    let (du_end, _) = grid_partials(sys, qoi, grid, n_t, &traj.states[n_t], mu)?;
    let mut state = (du_end - &dual.lambda[n_t]).amax();
    let mut stage = 0.0_f64;
    for n in 1..=n_t {
        let dt = grid.dt(n);
        let u_stage = stage_states(tab, &traj.states[n - 1], &traj.stages[n - 1]);
        let kappa = &dual.kappa[n - 1];
        let mut products = Vec::with_capacity(s);
        for i in 0..s {
            let jac = sys.jac_state(&u_stage[i], mu, grid.stage_point(tab, n, i))?;
            products.push(jac.tr_mul(&kappa[i]));
        }
        let p = step_partials(sys, qoi, tab, grid, n, &u_stage, mu)?;
        let (du_grid, _) = grid_partials(sys, qoi, grid, n - 1, &traj.states[n - 1], mu)?;

        let mut du = du_grid + &p.du_prev - &dual.lambda[n - 1] + &dual.lambda[n];
        for prod in &products {
            du.axpy(dt, prod, 1.0);
        }
        state = state.max(du.amax());

        for pi in 0..s {
            let mut dk = &p.dk[pi] + &dual.lambda[n] * tab.b(pi) - mass.tr_mul(&kappa[pi]);
            for i in pi..s {
                dk.axpy(dt * tab.a(i, pi), &products[i], 1.0);
            }
            stage = stage.max(dk.amax());
        }
    }
    Ok(LagrangianReport { state, stage, lambda_max })
}
