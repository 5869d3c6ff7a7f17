//! Gradient-based design driver: projected L-BFGS with Armijo backtracking for
//! box constraints, wrapped in an augmented-Lagrangian loop for one scalar
//! equality constraint.

use std::collections::VecDeque;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Objective (and constraint) values and gradients at one design point, all
/// produced from a single primal solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub objective: f64,
    pub objective_grad: Vec<f64>,
    pub constraint: Option<(f64, Vec<f64>)>,
}

pub trait Evaluator {
    fn evaluate(&mut self, mu: &[f64]) -> Result<Evaluation>;
}

impl<F> Evaluator for F
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    fn evaluate(&mut self, mu: &[f64]) -> Result<Evaluation> {
        self(mu)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptProblem {
    pub initial: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Target `q` of the equality constraint `C(mu) = q`.
    pub constraint_target: Option<f64>,
}

impl OptProblem {
    pub fn unbounded(initial: Vec<f64>) -> Self {
        let n = initial.len();
        Self { initial, lower: vec![f64::NEG_INFINITY; n], upper: vec![f64::INFINITY; n], constraint_target: None }
    }

    fn validate(&self) -> Result<()> {
        let n = self.initial.len();
        if n == 0 || self.lower.len() != n || self.upper.len() != n {
            return Err(Error::Config(format!(
                "bounds sized {}/{} for {n} parameters",
                self.lower.len(),
                self.upper.len()
            )));
        }
        if let Some(j) = (0..n).find(|&j| !(self.lower[j] <= self.upper[j])) {
            return Err(Error::Config(format!("empty box for parameter {j}")));
        }
        Ok(())
    }

    fn project(&self, x: &mut [f64]) {
        for (j, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[j], self.upper[j]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptOptions {
    pub memory: usize,
    /// On the max norm of the projected, scaled merit gradient.
    pub grad_tol: f64,
    /// On the max norm of an accepted step.
    pub step_tol: f64,
    /// Inner iterations per subproblem.
    pub max_iter: usize,
    pub max_outer: usize,
    /// On `|C - q|`, unscaled.
    pub constraint_tol: f64,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
    /// Evaluator failures tolerated per line search.
    pub max_failures: usize,
}

impl Default for OptOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            grad_tol: 1e-8,
            step_tol: 1e-14,
            max_iter: 200,
            max_outer: 30,
            constraint_tol: 1e-10,
            initial_penalty: 10.0,
            penalty_growth: 10.0,
            armijo: 1e-4,
            max_backtracks: 40,
            max_failures: 8,
        }
    }
}

/// One accepted iterate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptRecord {
    pub outer: usize,
    pub iter: usize,
    pub mu: Vec<f64>,
    pub objective: f64,
    pub constraint: Option<f64>,
    pub constraint_violation: f64,
    /// Max norm of the projected gradient of the scaled merit function.
    pub grad_norm: f64,
    pub merit: f64,
    /// Predicted decrease `g^T s` of the accepted step (zero for the first record).
    pub directional: f64,
    pub step_length: f64,
    pub step_norm: f64,
    pub backtracks: usize,
    pub multiplier: f64,
    pub penalty: f64,
    /// Cumulative evaluator calls.
    pub evaluations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    StepTolerance,
    MaxIterations,
    LineSearchFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptResult {
    pub mu: Vec<f64>,
    pub objective: f64,
    pub constraint: Option<f64>,
    pub termination: Termination,
    pub trace: Vec<OptRecord>,
    pub evaluations: usize,
}

/// Scaled augmented Lagrangian `f/s_f + lambda c + rho/2 c^2`, `c = (C - q)/s_c`.
struct Merit {
    f_scale: f64,
    c_scale: f64,
    target: Option<f64>,
    multiplier: f64,
    penalty: f64,
}

impl Merit {
    fn value_grad(&self, e: &Evaluation) -> Result<(f64, Vec<f64>)> {
        let mut v = e.objective / self.f_scale;
        let mut g: Vec<f64> = e.objective_grad.iter().map(|x| x / self.f_scale).collect();
        if let Some(q) = self.target {
            let (c, dc) = e
                .constraint
                .as_ref()
                .ok_or_else(|| Error::Evaluation("constrained problem but no constraint value".into()))?;
            let cs = (c - q) / self.c_scale;
            v += self.multiplier * cs + 0.5 * self.penalty * cs * cs;
            let w = (self.multiplier + self.penalty * cs) / self.c_scale;
            for (gj, dj) in g.iter_mut().zip(dc) {
                *gj += w * dj;
            }
        }
        Ok((v, g))
    }
}

struct Point {
    x: Vec<f64>,
    eval: Evaluation,
    merit: f64,
    grad: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn amax(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

fn projected_gradient(p: &OptProblem, x: &[f64], g: &[f64]) -> Vec<f64> {
    let mut y: Vec<f64> = x.iter().zip(g).map(|(x, g)| x - g).collect();
    p.project(&mut y);
    y.iter().zip(x).map(|(y, x)| x - y).collect()
}

/// Two-loop recursion on the variables not held at a bound.
fn lbfgs_direction(grad: &[f64], free: &[bool], mem: &VecDeque<(Vec<f64>, Vec<f64>)>) -> Vec<f64> {
    let mut q: Vec<f64> = grad.iter().zip(free).map(|(g, f)| if *f { *g } else { 0.0 }).collect();
    let mask = |v: &[f64]| -> Vec<f64> { v.iter().zip(free).map(|(a, f)| if *f { *a } else { 0.0 }).collect() };
    let pairs: Vec<(Vec<f64>, Vec<f64>, f64)> = mem
        .iter()
        .filter_map(|(s, y)| {
            let (s, y) = (mask(s), mask(y));
            let sy = dot(&s, &y);
            (sy > 1e-12 * (dot(&s, &s) * dot(&y, &y)).sqrt()).then(|| (s, y, 1.0 / sy))
        })
        .collect();
    let mut alpha = vec![0.0; pairs.len()];
    for (k, (s, y, rho)) in pairs.iter().enumerate().rev() {
        alpha[k] = rho * dot(s, &q);
        for (qj, yj) in q.iter_mut().zip(y) {
            *qj -= alpha[k] * yj;
        }
    }
    let gamma = pairs.last().map_or(1.0, |(s, y, _)| dot(s, y) / dot(y, y));
    for v in q.iter_mut() {
        *v *= gamma;
    }
    for (k, (s, y, rho)) in pairs.iter().enumerate() {
        let beta = rho * dot(y, &q);
        for (qj, sj) in q.iter_mut().zip(s) {
            *qj += (alpha[k] - beta) * sj;
        }
    }
    q.iter().map(|v| -v).collect()
}

struct Driver<'a, E: Evaluator> {
    problem: &'a OptProblem,
    evaluator: &'a mut E,
    options: OptOptions,
    evaluations: usize,
    trace: Vec<OptRecord>,
}

impl<E: Evaluator> Driver<'_, E> {
    fn evaluate(&mut self, x: &[f64]) -> Result<Evaluation> {
        self.evaluations += 1;
        let e = self.evaluator.evaluate(x)?;
        if !e.objective.is_finite() || e.objective_grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Evaluation(format!("non-finite objective at {x:?}")));
        }
        if e.objective_grad.len() != x.len() {
            return Err(Error::Evaluation(format!("gradient has length {}", e.objective_grad.len())));
        }
        Ok(e)
    }

    fn point(&self, x: Vec<f64>, eval: Evaluation, merit: &Merit) -> Result<Point> {
        let (m, g) = merit.value_grad(&eval)?;
        Ok(Point { x, eval, merit: m, grad: g })
    }

    #[allow(clippy::too_many_arguments)]
    fn record(&mut self, outer: usize, iter: usize, p: &Point, merit: &Merit, directional: f64, step_length: f64, step_norm: f64, backtracks: usize) {
        let constraint = p.eval.constraint.as_ref().map(|c| c.0);
        let violation = match (constraint, self.problem.constraint_target) {
            (Some(c), Some(q)) => (c - q).abs(),
            _ => 0.0,
        };
        self.trace.push(OptRecord {
            outer,
            iter,
            mu: p.x.clone(),
            objective: p.eval.objective,
            constraint,
            constraint_violation: violation,
            grad_norm: amax(&projected_gradient(self.problem, &p.x, &p.grad)),
            merit: p.merit,
            directional,
            step_length,
            step_norm,
            backtracks,
            multiplier: merit.multiplier,
            penalty: merit.penalty,
            evaluations: self.evaluations,
        });
    }

    /// Projected L-BFGS on the current merit function, starting from `start`.
    fn inner(&mut self, outer: usize, start: Point, merit: &Merit) -> Result<(Point, Termination)> {
        let opts = self.options;
        let n = start.x.len();
        let mut cur = start;
        let mut mem: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::with_capacity(opts.memory);
        for iter in 1..=opts.max_iter {
            let pg = projected_gradient(self.problem, &cur.x, &cur.grad);
            if amax(&pg) <= opts.grad_tol {
                return Ok((cur, Termination::GradientTolerance));
            }
            // variables at a bound with the gradient pointing outward stay fixed
            let free: Vec<bool> = (0..n)
                .map(|j| {
                    let at_lo = cur.x[j] <= self.problem.lower[j] && cur.grad[j] > 0.0;
                    let at_hi = cur.x[j] >= self.problem.upper[j] && cur.grad[j] < 0.0;
                    !(at_lo || at_hi)
                })
                .collect();
            let mut d = lbfgs_direction(&cur.grad, &free, &mem);
            if !(dot(&d, &cur.grad) < 0.0) {
                mem.clear();
                d = cur.grad.iter().zip(&free).map(|(g, f)| if *f { -g } else { 0.0 }).collect();
            }
            let mut alpha = if mem.is_empty() { (1.0 / amax(&d)).min(1.0) } else { 1.0 };
            let mut failures = 0;
            let mut backtracks = 0;
            let accepted = loop {
                let mut trial: Vec<f64> = cur.x.iter().zip(&d).map(|(x, d)| x + alpha * d).collect();
                self.problem.project(&mut trial);
                let step: Vec<f64> = trial.iter().zip(&cur.x).map(|(a, b)| a - b).collect();
                let directional = dot(&cur.grad, &step);
                if amax(&step) <= opts.step_tol {
                    break None;
                }
                match self.evaluate(&trial) {
                    Ok(e) => {
                        let p = self.point(trial, e, merit)?;
                        if p.merit <= cur.merit + opts.armijo * directional {
                            break Some((p, step, directional));
                        }
                    }
                    Err(err) => {
                        failures += 1;
                        warn!("evaluation failed at step length {alpha:e}: {err}");
                        if failures > opts.max_failures {
                            return Err(Error::Evaluation(format!(
                                "{failures} evaluator failures in one line search; last: {err}"
                            )));
                        }
                    }
                }
                backtracks += 1;
                if backtracks > opts.max_backtracks {
                    return Ok((cur, Termination::LineSearchFailure));
                }
                alpha *= 0.5;
            };
            let Some((next, step, directional)) = accepted else {
                return Ok((cur, Termination::StepTolerance));
            };
            let y: Vec<f64> = next.grad.iter().zip(&cur.grad).map(|(a, b)| a - b).collect();
            if dot(&step, &y) > 1e-12 * (dot(&step, &step) * dot(&y, &y)).sqrt() {
                if mem.len() == opts.memory {
                    mem.pop_front();
                }
                mem.push_back((step.clone(), y));
            }
            let step_norm = amax(&step);
            self.record(outer, iter, &next, merit, directional, alpha, step_norm, backtracks);
            debug!("outer {outer} iter {iter}: merit {:.12e} |pg| {:.3e}", next.merit, self.trace.last().map_or(0.0, |r| r.grad_norm));
            cur = next;
            if step_norm <= opts.step_tol {
                return Ok((cur, Termination::StepTolerance));
            }
        }
        Ok((cur, Termination::MaxIterations))
    }
}

/// Minimizes the objective over the box, subject to the equality constraint
/// when `problem.constraint_target` is set. Every evaluator call is one
/// primal solve plus one adjoint batch.
pub fn minimize<E: Evaluator>(problem: &OptProblem, evaluator: &mut E, options: &OptOptions) -> Result<OptResult> {
    problem.validate()?;
    let mut driver = Driver { problem, evaluator, options: *options, evaluations: 0, trace: Vec::new() };
    let mut x0 = problem.initial.clone();
    problem.project(&mut x0);
    let e0 = driver.evaluate(&x0)?;
    let scale = |v: f64| if v.abs() > 1e-300 { v.abs() } else { 1.0 };
    let f_scale = scale(e0.objective);
    let c_scale = match (problem.constraint_target, &e0.constraint) {
        (Some(_), Some((c, _))) => scale(*c),
        (Some(_), None) => return Err(Error::Evaluation("constrained problem but no constraint value".into())),
        _ => 1.0,
    };
    let mut merit = Merit { f_scale, c_scale, target: problem.constraint_target, multiplier: 0.0, penalty: options.initial_penalty };
    let mut cur = driver.point(x0, e0, &merit)?;
    driver.record(0, 0, &cur, &merit, 0.0, 0.0, 0.0, 0);

    let outer_max = if problem.constraint_target.is_some() { options.max_outer } else { 1 };
    let mut termination = Termination::MaxIterations;
    let mut last_violation = f64::INFINITY;
    for outer in 0..outer_max {
        let (p, term) = driver.inner(outer, cur, &merit)?;
        termination = term;
        cur = p;
        let Some(q) = problem.constraint_target else { break };
        let c = cur.eval.constraint.as_ref().expect("checked above").0;
        let violation = (c - q).abs();
        info!("outer {outer}: objective {:.10e} violation {violation:.3e} ({term:?})", cur.eval.objective);
        if violation <= options.constraint_tol && term != Termination::LineSearchFailure {
            break;
        }
        merit.multiplier += merit.penalty * (c - q) / c_scale;
        if violation > 0.25 * last_violation {
            merit.penalty *= options.penalty_growth;
        }
        last_violation = violation;
        let (m, g) = merit.value_grad(&cur.eval)?;
        cur.merit = m;
        cur.grad = g;
        // restart record so merit monotonicity is checked per subproblem
        driver.record(outer + 1, 0, &cur, &merit, 0.0, 0.0, 0.0, 0);
    }
    Ok(OptResult {
        objective: cur.eval.objective,
        constraint: cur.eval.constraint.as_ref().map(|c| c.0),
        mu: cur.x,
        termination,
        evaluations: driver.evaluations,
        trace: driver.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(mu: &[f64]) -> Result<Evaluation> {
        Ok(Evaluation { objective: (mu[0] - 2.0).powi(2), objective_grad: vec![2.0 * (mu[0] - 2.0)], constraint: None })
    }

    #[test]
    fn one_dimensional_quadratic() {
        let r = minimize(&OptProblem::unbounded(vec![-3.0]), &mut quadratic, &OptOptions::default()).unwrap();
        assert!((r.mu[0] - 2.0).abs() < 1e-8, "{r:?}");
    }

    #[test]
    fn bounds_are_respected() {
        let p = OptProblem { initial: vec![0.0], lower: vec![-1.0], upper: vec![1.5], constraint_target: None };
        let r = minimize(&p, &mut quadratic, &OptOptions::default()).unwrap();
        assert_eq!(r.mu[0], 1.5);
        assert_eq!(r.termination, Termination::GradientTolerance);
    }

    #[test]
    fn equality_constrained_quadratic() {
        let mut f = |mu: &[f64]| -> Result<Evaluation> {
            Ok(Evaluation {
                objective: mu[0] * mu[0] + mu[1] * mu[1],
                objective_grad: vec![2.0 * mu[0], 2.0 * mu[1]],
                constraint: Some((mu[0] + mu[1], vec![1.0, 1.0])),
            })
        };
        let mut p = OptProblem::unbounded(vec![2.0, -0.5]);
        p.constraint_target = Some(1.0);
        let r = minimize(&p, &mut f, &OptOptions::default()).unwrap();
        assert!((r.mu[0] - 0.5).abs() < 1e-8 && (r.mu[1] - 0.5).abs() < 1e-8, "{:?}", r.mu);
        assert!((r.constraint.unwrap() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn rosenbrock() {
        let mut f = |mu: &[f64]| -> Result<Evaluation> {
            let (x, y) = (mu[0], mu[1]);
            Ok(Evaluation {
                objective: (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2),
                objective_grad: vec![-2.0 * (1.0 - x) - 400.0 * x * (y - x * x), 200.0 * (y - x * x)],
                constraint: None,
            })
        };
        let opts = OptOptions { grad_tol: 1e-12, ..Default::default() };
        let r = minimize(&OptProblem::unbounded(vec![-1.2, 1.0]), &mut f, &opts).unwrap();
        assert!((r.mu[0] - 1.0).abs() < 1e-6 && (r.mu[1] - 1.0).abs() < 1e-6, "{r:?}");
        for w in r.trace.windows(2).skip(1) {
            assert!(w[1].merit <= w[0].merit);
        }
    }

    #[test]
    fn evaluator_failures_shrink_the_step() {
        let mut calls = 0;
        let mut f = |mu: &[f64]| -> Result<Evaluation> {
            calls += 1;
            if mu[0] > 1.0 {
                return Err(Error::Evaluation("outside the valid region".into()));
            }
            quadratic(&[mu[0] + 1.5])
        };
        let r = minimize(&OptProblem::unbounded(vec![-2.0]), &mut f, &OptOptions::default()).unwrap();
        assert!((r.mu[0] - 0.5).abs() < 1e-8, "{r:?}");
        assert_eq!(r.evaluations, calls);
    }

    #[test]
    fn persistent_failure_aborts() {
        let mut first = true;
        let mut f = |mu: &[f64]| -> Result<Evaluation> {
            if first {
                first = false;
                return quadratic(mu);
            }
            Err(Error::Evaluation("solver diverged".into()))
        };
        assert!(minimize(&OptProblem::unbounded(vec![0.0]), &mut f, &OptOptions::default()).is_err());
    }
}
