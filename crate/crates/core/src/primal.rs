//! DIRK time integration with Newton stage solves and QoI accumulation.

use log::debug;

use crate::error::{Error, Result};
use crate::qoi::{self, ImpulseSlot, RegisteredQoi, TimeSupport};
use crate::store::{Layout, ReverseTrajectory, Slot, StepRecord, StoreError, TrajectorySink};
use crate::system::{newton, Matrix, NewtonFailure, NewtonOptions, SemiDiscreteSystem, TimePoint, Vector};
use crate::tableau::ButcherTableau;

/// Strictly increasing time points `t_0 < ... < t_Nt`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    t: Vec<f64>,
}

impl TimeGrid {
    pub fn new(t: Vec<f64>) -> Result<Self> {
        if t.len() < 2 {
            return Err(Error::Contract("a time grid needs at least one step".into()));
        }
        if t.iter().any(|v| !v.is_finite()) || t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Contract("time grid must be strictly increasing".into()));
        }
        Ok(Self { t })
    }

    /// `n_steps` equal steps on `[0, end]`.
    pub fn uniform(end: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 || !(end > 0.0) {
            return Err(Error::Contract(format!("invalid uniform grid: T = {end}, N_t = {n_steps}")));
        }
        let dt = end / n_steps as f64;
        let mut t: Vec<f64> = (0..=n_steps).map(|n| n as f64 * dt).collect();
        t[n_steps] = end;
        Self::new(t)
    }

    pub fn n_steps(&self) -> usize {
        self.t.len() - 1
    }

    pub fn t(&self, n: usize) -> f64 {
        self.t[n]
    }

    pub fn points(&self) -> &[f64] {
        &self.t
    }

    pub fn end(&self) -> f64 {
        self.t[self.t.len() - 1]
    }

    /// `dt_n = t_n - t_(n-1)` for `n >= 1`.
    pub fn dt(&self, n: usize) -> f64 {
        self.t[n] - self.t[n - 1]
    }

    /// Stage time `t_(n-1) + c_i dt_n` (step `n` one based, stage `i` zero based).
    pub fn stage_time(&self, tab: &ButcherTableau, n: usize, i: usize) -> f64 {
        self.t[n - 1] + tab.c(i) * self.dt(n)
    }

    pub fn stage_point(&self, tab: &ButcherTableau, n: usize, i: usize) -> TimePoint {
        TimePoint::stage(self.stage_time(tab, n, i), n, i)
    }

    pub fn grid_point(&self, n: usize) -> TimePoint {
        TimePoint::grid(self.t[n], n)
    }

    pub fn layout(&self, n_u: usize, stages: usize) -> Layout {
        Layout { n_u, stages, grid: self.t.clone() }
    }
}

/// Stage state `u_i = u_prev + sum_(j<=i) a_ij k_j`.
///
/// Shared by the primal, adjoint and sensitivity code so that every engine sees
/// bit-identical stage states.
pub fn stage_state(tab: &ButcherTableau, u_prev: &Vector, stages: &[Vector], i: usize) -> Vector {
    let mut u = u_prev.clone();
    for (j, k) in stages.iter().enumerate().take(i + 1) {
        let a = tab.a(i, j);
        if a != 0.0 {
            u.axpy(a, k, 1.0);
        }
    }
    u
}

/// All stage states of a step.
pub fn stage_states(tab: &ButcherTableau, u_prev: &Vector, stages: &[Vector]) -> Vec<Vector> {
    (0..tab.stages()).map(|i| stage_state(tab, u_prev, stages, i)).collect()
}

/// State update `u^(n) = u^(n-1) + sum_i b_i k_i`.
pub fn state_update(tab: &ButcherTableau, u_prev: &Vector, stages: &[Vector]) -> Vector {
    let mut u = u_prev.clone();
    for (i, k) in stages.iter().enumerate() {
        u.axpy(tab.b(i), k, 1.0);
    }
    u
}

/// Stage matrix `M - a_ii dt J`.
pub fn stage_matrix(mass: &Matrix, a_ii: f64, dt: f64, jac: &Matrix) -> Matrix {
    mass - jac * (a_ii * dt)
}

/// Solves `M k_i = dt r(u_i, mu, t_(n-1) + c_i dt)` for stage `i` of step `n`.
///
/// `prior` holds `k_1 .. k_(i-1)`; `guess` is the Newton starting point. Returns
/// the stage and the residual history.
#[allow(clippy::too_many_arguments)]
pub fn solve_stage<S: SemiDiscreteSystem + ?Sized>(
    sys: &S,
    tab: &ButcherTableau,
    grid: &TimeGrid,
    n: usize,
    i: usize,
    u_prev: &Vector,
    prior: &[Vector],
    mu: &[f64],
    guess: Vector,
    opts: &NewtonOptions,
) -> Result<(Vector, Vec<f64>)> {
    assert_eq!(prior.len(), i, "stage {i} needs exactly {i} prior stages");
    let dt = grid.dt(n);
    let tp = grid.stage_point(tab, n, i);
    let a_ii = tab.a(i, i);
    let mass = sys.mass();
    let mut stages = prior.to_vec();
    stages.push(guess.clone());
    let result = newton(guess, opts, |k, need_jac| {
        stages[i].copy_from(k);
        let u_i = stage_state(tab, u_prev, &stages, i);
        if need_jac {
            let (r, j) = sys.residual_and_jac(&u_i, mu, tp)?;
            Ok((mass * k - r * dt, Some(stage_matrix(mass, a_ii, dt, &j))))
        } else {
            let r = sys.residual(&u_i, mu, tp)?;
            Ok((mass * k - r * dt, None))
        }
    });
    match result {
        Ok(out) => Ok((out.x, out.history)),
        Err(NewtonFailure::Eval(e, _)) => Err(e),
        Err(NewtonFailure::Singular(history)) | Err(NewtonFailure::Diverged(history)) => {
            Err(Error::StageFailure { step: n, stage: i + 1, history })
        }
    }
}

/// Per grid point history of every registered QoI.
#[derive(Debug, Clone, Default)]
pub struct QoiHistory {
    pub t: Vec<f64>,
    /// `f[q][n]`: integrand `q` at `(u^(n), t_n)`.
    pub f: Vec<Vec<f64>>,
    /// `running[q][n]`: `F_h^(n)`.
    pub running: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct PrimalOutput {
    /// `F = F_h^(N_t)` per QoI.
    pub values: Vec<f64>,
    pub history: QoiHistory,
    pub newton_iterations: usize,
    pub final_state: Vector,
}

/// Runs the primal DIRK solve, writing `u^(0)`, every stage and every state to
/// `sink` in forward order and accumulating all QoIs in one pass.
pub fn integrate<S: SemiDiscreteSystem + ?Sized>(
    sys: &S,
    tab: &ButcherTableau,
    grid: &TimeGrid,
    mu: &[f64],
    qois: &[RegisteredQoi],
    sink: &mut dyn TrajectorySink,
    opts: &NewtonOptions,
) -> Result<PrimalOutput> {
    let s = tab.stages();
    let n_t = grid.n_steps();
    let nq = qois.len();
    if mu.len() != sys.n_params() {
        return Err(Error::Contract(format!("expected {} parameters, got {}", sys.n_params(), mu.len())));
    }
    let u0 = sys.initial(mu)?.value;
    sink.begin(&grid.layout(sys.dim(), s))?;
    sink.write(Slot::Initial, &u0)?;

    let mut running = vec![0.0; nq];
    let mut history = QoiHistory {
        t: Vec::with_capacity(n_t + 1),
        f: vec![Vec::with_capacity(n_t + 1); nq],
        running: vec![Vec::with_capacity(n_t + 1); nq],
    };
    let record = |history: &mut QoiHistory, running: &[f64], n: usize, u: &Vector| -> Result<()> {
        history.t.push(grid.t(n));
        for (q, spec) in qois.iter().enumerate() {
            history.f[q].push(sys.qoi(spec.integrand(), u, mu, grid.grid_point(n))?);
            history.running[q].push(running[q]);
        }
        Ok(())
    };
    for (q, spec) in qois.iter().enumerate() {
        if spec.support == TimeSupport::Impulse(ImpulseSlot::Grid(0)) {
            running[q] = sys.qoi(spec.integrand(), &u0, mu, grid.grid_point(0))?;
        }
    }
    record(&mut history, &running, 0, &u0)?;

    let mut u = u0;
    let mut guess = Vector::zeros(sys.dim());
    let mut iterations = 0;
    for n in 1..=n_t {
        let mut stages: Vec<Vector> = Vec::with_capacity(s);
        let mut step_iters = 0;
        for i in 0..s {
            let (k, hist) = solve_stage(sys, tab, grid, n, i, &u, &stages, mu, guess.clone(), opts)?;
            step_iters += hist.len() - 1;
            sink.write(Slot::Stage { step: n, stage: i }, &k)?;
            guess.copy_from(&k);
            stages.push(k);
        }
        iterations += step_iters;
        let u_stage = stage_states(tab, &u, &stages);
        let u_next = state_update(tab, &u, &stages);

        for (q, spec) in qois.iter().enumerate() {
            match spec.support {
                TimeSupport::Uniform => {
                    let mut values = Vec::with_capacity(s);
                    for i in 0..s {
                        values.push(sys.qoi(spec.integrand(), &u_stage[i], mu, grid.stage_point(tab, n, i))?);
                    }
                    running[q] = qoi::accumulate(running[q], &values, tab, grid.dt(n));
                }
                TimeSupport::Impulse(ImpulseSlot::Stage { step, stage }) if step == n => {
                    running[q] = sys.qoi(spec.integrand(), &u_stage[stage], mu, grid.stage_point(tab, n, stage))?;
                }
                TimeSupport::Impulse(ImpulseSlot::Grid(m)) if m == n => {
                    running[q] = sys.qoi(spec.integrand(), &u_next, mu, grid.grid_point(n))?;
                }
                TimeSupport::Impulse(_) => {}
            }
        }
        sink.write(Slot::State { step: n }, &u_next)?;
        u = u_next;
        record(&mut history, &running, n, &u)?;
        debug!("step {n} t={:.6e} newton={step_iters} F={running:?}", grid.t(n));
    }
    sink.finish()?;
    Ok(PrimalOutput { values: running, history, newton_iterations: iterations, final_state: u })
}

/// In-memory trajectory. Serves as a sink for [`integrate`] and as a reverse
/// source for the adjoint sweep.
#[derive(Debug, Clone, Default)]
pub struct PrimalTrajectory {
    layout: Option<Layout>,
    /// `u^(0) .. u^(N_t)`.
    pub states: Vec<Vector>,
    /// `stages[n - 1][i]` = `k_(i+1)^(n)`.
    pub stages: Vec<Vec<Vector>>,
    next: u64,
}

impl PrimalTrajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_steps(&self) -> usize {
        self.stages.len()
    }

    /// Largest relative defect of the update identity over all steps.
    pub fn update_defect(&self, tab: &ButcherTableau) -> f64 {
        let mut worst = 0.0_f64;
        for n in 1..self.states.len() {
            let rebuilt = state_update(tab, &self.states[n - 1], &self.stages[n - 1]);
            let scale = self.states[n].amax().max(1e-300);
            worst = worst.max((&rebuilt - &self.states[n]).amax() / scale);
        }
        worst
    }

    fn layout_ref(&self) -> &Layout {
        self.layout.as_ref().expect("trajectory has been written")
    }
}

impl TrajectorySink for PrimalTrajectory {
    fn begin(&mut self, layout: &Layout) -> Result<(), StoreError> {
        self.layout = Some(layout.clone());
        self.states = Vec::with_capacity(layout.n_steps() + 1);
        self.stages = Vec::with_capacity(layout.n_steps());
        self.next = 0;
        Ok(())
    }

    fn write(&mut self, slot: Slot, data: &Vector) -> Result<(), StoreError> {
        let s = self.layout_ref().stages;
        let got = slot.record_index(s);
        if got != self.next {
            return Err(StoreError::OutOfOrder {
                expected: Slot::from_index(self.next, s).to_string(),
                got: slot.to_string(),
            });
        }
        match slot {
            Slot::Initial | Slot::State { .. } => self.states.push(data.clone()),
            Slot::Stage { stage: 0, .. } => self.stages.push(vec![data.clone()]),
            Slot::Stage { .. } => self.stages.last_mut().expect("stage 1 precedes").push(data.clone()),
        }
        self.next += 1;
        Ok(())
    }

    fn finish(&mut self) -> Result<(), StoreError> {
        let expected = self.layout_ref().n_records();
        if self.next != expected {
            return Err(StoreError::Incomplete(format!("{} of {expected} records written", self.next)));
        }
        Ok(())
    }
}

impl ReverseTrajectory for PrimalTrajectory {
    fn layout(&self) -> &Layout {
        self.layout_ref()
    }

    fn final_state(&mut self) -> Result<Vector, StoreError> {
        self.states
            .last()
            .cloned()
            .ok_or_else(|| StoreError::Incomplete("empty trajectory".into()))
    }

    fn step(&mut self, n: usize) -> Result<StepRecord, StoreError> {
        if n == 0 || n > self.stages.len() {
            return Err(StoreError::Incomplete(format!("step {n} not stored")));
        }
        Ok(StepRecord { u_prev: self.states[n - 1].clone(), stages: self.stages[n - 1].clone() })
    }
}

/// Convenience wrapper running [`integrate`] into a fresh in-memory trajectory.
pub fn integrate_in_memory<S: SemiDiscreteSystem + ?Sized>(
    sys: &S,
    tab: &ButcherTableau,
    grid: &TimeGrid,
    mu: &[f64],
    qois: &[RegisteredQoi],
    opts: &NewtonOptions,
) -> Result<(PrimalTrajectory, PrimalOutput)> {
    let mut traj = PrimalTrajectory::new();
    let out = integrate(sys, tab, grid, mu, qois, &mut traj, opts)?;
    Ok((traj, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_grid_ends_exactly_at_horizon() {
        let g = TimeGrid::uniform(0.3, 7).unwrap();
        assert_eq!(g.end(), 0.3);
        assert_eq!(g.n_steps(), 7);
    }

    #[test]
    fn grid_rejects_non_increasing_points() {
        assert!(TimeGrid::new(vec![0.0]).is_err());
        assert!(TimeGrid::new(vec![0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn stage_state_uses_lower_triangle() {
        let tab = ButcherTableau::new(crate::tableau::TableauKind::Dirk2);
        let u = Vector::from_element(1, 1.0);
        let ks = vec![Vector::from_element(1, 2.0), Vector::from_element(1, 5.0)];
        let u0 = stage_state(&tab, &u, &ks, 0);
        assert_eq!(u0[0], 1.0 + tab.a(0, 0) * 2.0);
        let u1 = stage_state(&tab, &u, &ks, 1);
        assert!((u1[0] - (1.0 + tab.a(1, 0) * 2.0 + tab.a(1, 1) * 5.0)).abs() < 1e-15);
    }
}
