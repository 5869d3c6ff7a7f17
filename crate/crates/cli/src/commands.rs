use rayon::prelude::*;
use serde::Serialize;

use adjflow::adjoint::{adjoint_sweep, lagrangian_residuals, Gradient, LagrangianReport};
use adjflow::config::{OrderStudySpec, Problem, RunConfig};
use adjflow::optimize::OptResult;
use adjflow::store::CheckpointWriter;
use adjflow::studies::{self, GradCheckReport, StudyPoint};
use adjflow::tableau::TableauKind;

use crate::artifacts::{num, RunDir};
use crate::CliError;

fn selected(problem: &Problem, names: &[String]) -> Result<Vec<usize>, CliError> {
    if names.is_empty() {
        return Ok((0..problem.qois.len()).collect());
    }
    names.iter().map(|n| problem.qoi_index(n).map_err(CliError::from)).collect()
}

#[derive(Serialize)]
struct SimulateSummary {
    mu: Vec<f64>,
    qois: Vec<(String, f64)>,
    newton_iterations: usize,
    steps: usize,
    tableau: TableauKind,
}

pub fn simulate(cfg: &RunConfig, run: &mut RunDir) -> Result<(), CliError> {
    let problem = Problem::build(cfg)?;
    let mu = cfg.initial_parameters();
    let mut writer = CheckpointWriter::create(run.path("primal.ckpt")).map_err(adjflow::Error::from)?;
    let out = problem.primal(&mu, &mut writer)?;
    drop(writer);
    run.note("primal.ckpt");

    let names = problem.qoi_names();
    let mut header = vec!["step".to_string(), "t".to_string()];
    for n in &names {
        header.push(format!("{n}_integrand"));
        header.push(format!("{n}_running"));
    }
    let h = &out.history;
    let rows = (0..h.t.len()).map(|n| {
        let mut row = vec![n.to_string(), num(h.t[n])];
        for q in 0..names.len() {
            row.push(num(h.f[q][n]));
            row.push(num(h.running[q][n]));
        }
        row
    });
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    run.csv("qoi_history.csv", &header_ref, rows)?;

    if let (Some(sys), true) = (problem.dg1d(), cfg.output.snapshots.unwrap_or(true)) {
        let (traj, _) = problem.primal_in_memory(&mu)?;
        let reference = sys.mesh().reference_nodes(sys.element());
        let mut rows = Vec::new();
        for (n, u) in traj.states.iter().enumerate() {
            let tp = problem.grid.grid_point(n);
            let (x, w) = sys.snapshot(u, &mu, tp)?;
            for j in 0..x.len() {
                rows.push(vec![n.to_string(), num(tp.t), num(reference[j]), num(x[j]), num(w[j])]);
            }
        }
        run.csv("snapshots.csv", &["step", "t", "X", "x", "u"], rows)?;
    }

    let summary = SimulateSummary {
        mu,
        qois: names.into_iter().zip(out.values.iter().copied()).collect(),
        newton_iterations: out.newton_iterations,
        steps: problem.grid.n_steps(),
        tableau: cfg.time.tableau,
    };
    for (name, value) in &summary.qois {
        println!("{name} = {value:e}");
    }
    run.json("summary.json", "simulate", &summary)
}

#[derive(Serialize)]
struct QoiGradient {
    name: String,
    value: f64,
    gradient: Gradient,
}

#[derive(Serialize)]
struct DualResidual {
    qoi: String,
    #[serde(flatten)]
    report: LagrangianReport,
    passes: bool,
}

#[derive(Serialize)]
struct AdjointReport {
    mu: Vec<f64>,
    qois: Vec<QoiGradient>,
    dual_residuals: Vec<DualResidual>,
}

/// Tolerance of the dual residual report, relative to `1 + ||lambda||`.
const DUAL_RESIDUAL_TOL: f64 = 1e-10;

pub fn adjoint(cfg: &RunConfig, run: &mut RunDir) -> Result<(), CliError> {
    let problem = Problem::build(cfg)?;
    let mu = cfg.initial_parameters();
    let which: Vec<usize> = (0..problem.qois.len()).collect();
    let (out, _, grads) = problem.gradients_on_disk(&mu, &which, &run.path("primal.ckpt"))?;
    run.note("primal.ckpt");

    // residuals are evaluated against an independent in-memory pair
    let (traj, _) = problem.primal_in_memory(&mu)?;
    let duals = adjoint_sweep(problem.system(), &problem.tab, &problem.grid, &mu, &problem.qois, &mut traj.clone())?;
    let mut dual_residuals = Vec::with_capacity(duals.len());
    for (q, dual) in problem.qois.iter().zip(&duals) {
        let report = lagrangian_residuals(problem.system(), &problem.tab, &problem.grid, &mu, q, &traj, dual)?;
        dual_residuals.push(DualResidual { qoi: q.name().to_string(), report, passes: report.passes(DUAL_RESIDUAL_TOL) });
    }

    let qois: Vec<QoiGradient> = which
        .iter()
        .zip(grads)
        .map(|(&q, gradient)| QoiGradient { name: problem.qois[q].name().to_string(), value: out.values[q], gradient })
        .collect();
    for q in &qois {
        println!("{} = {:e}, gradient {:?}", q.name, q.value, q.gradient.value);
    }
    for d in &dual_residuals {
        println!("{}: dual residual {:.2e} ({})", d.qoi, d.report.max(), if d.passes { "ok" } else { "FAIL" });
    }
    let report = AdjointReport { mu, qois, dual_residuals };
    run.json("gradient.json", "adjoint", &report)
}

pub fn grad_check(cfg: &RunConfig, run: &mut RunDir) -> Result<(), CliError> {
    let problem = Problem::build(cfg)?;
    let which = selected(&problem, &cfg.grad_check.qois)?;
    let report: GradCheckReport = studies::grad_check(&problem, &cfg.initial_parameters(), &which, &cfg.grad_check.taus)?;
    let mut rows = Vec::new();
    for row in &report.rows {
        for (q, name) in report.qois.iter().enumerate() {
            rows.push(vec![name.clone(), num(row.tau), num(row.rel_error[q])]);
        }
    }
    run.csv("grad_check.csv", &["qoi", "tau", "rel_error"], rows)?;
    for (name, e) in report.qois.iter().zip(&report.min_error) {
        println!("{name}: min relative error {e:.3e}");
    }
    run.json("grad_check.json", "grad-check", &report)
}

#[derive(Serialize)]
struct Slope {
    label: String,
    slope: f64,
}

#[derive(Serialize)]
struct OrderReport {
    kind: &'static str,
    points: Vec<(String, StudyPoint)>,
    slopes: Vec<Slope>,
}

pub fn order_study(cfg: &RunConfig, run: &mut RunDir) -> Result<(), CliError> {
    let spec = cfg
        .order_study
        .as_ref()
        .ok_or_else(|| adjflow::Error::Config("missing [order_study] block".into()))?;
    let (kind, groups): (&'static str, Vec<(String, Vec<StudyPoint>)>) = match spec {
        OrderStudySpec::Temporal { tableaus, steps } => {
            let finest = steps.iter().copied().max().unwrap_or(1);
            let reference = studies::temporal_reference(cfg, finest)?;
            let cases: Vec<(TableauKind, usize)> =
                tableaus.iter().flat_map(|&t| steps.iter().map(move |&n| (t, n))).collect();
            let points = cases
                .par_iter()
                .map(|&(t, n)| studies::temporal_case(cfg, t, n, &reference))
                .collect::<Result<Vec<_>, _>>()?;
            let groups = tableaus
                .iter()
                .enumerate()
                .map(|(i, t)| (t.to_string(), points[i * steps.len()..(i + 1) * steps.len()].to_vec()))
                .collect();
            ("temporal", groups)
        }
        OrderStudySpec::Spatial { orders, elements, exact } => {
            let cases: Vec<(usize, usize)> = orders.iter().flat_map(|&p| elements.iter().map(move |&k| (p, k))).collect();
            let points = cases
                .par_iter()
                .map(|&(p, k)| studies::spatial_case(cfg, p, k, exact))
                .collect::<Result<Vec<_>, _>>()?;
            let groups = orders
                .iter()
                .enumerate()
                .map(|(i, p)| (format!("p{p}"), points[i * elements.len()..(i + 1) * elements.len()].to_vec()))
                .collect();
            ("spatial", groups)
        }
    };

    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    let mut points = Vec::new();
    for (label, pts) in &groups {
        let slope = studies::fitted_slope(pts);
        for p in pts {
            rows.push(vec![label.clone(), p.count.to_string(), num(p.size), num(p.error), num(slope)]);
            points.push((label.clone(), *p));
        }
        println!("{label}: fitted slope {slope:.3}");
        slopes.push(Slope { label: label.clone(), slope });
    }
    let size = if kind == "temporal" { "dt" } else { "h" };
    run.csv("order_study.csv", &["scheme", "count", size, "error", "fitted_slope"], rows)?;
    run.json("order_study.json", "order-study", &OrderReport { kind, points, slopes })
}

#[derive(Serialize)]
struct GclReport {
    value: f64,
    newton_tol: f64,
    with_gcl: f64,
    without_gcl: f64,
}

pub fn gcl_check(cfg: &RunConfig, run: &mut RunDir) -> Result<(), CliError> {
    let value = cfg.gcl_check.map_or(1.0, |g| g.value);
    let c = studies::gcl_check(cfg, value)?;
    println!("freestream defect: gcl on {:.3e}, gcl off {:.3e}", c.with_gcl, c.without_gcl);
    let newton_tol = cfg.solver.newton_tol.min(studies::GCL_CHECK_NEWTON_TOL * value.abs().max(1.0));
    run.json("gcl_check.json", "gcl-check", &GclReport { value, newton_tol, with_gcl: c.with_gcl, without_gcl: c.without_gcl })
}

#[derive(Serialize)]
struct FinalMu<'a> {
    mu: &'a [f64],
    objective: f64,
    constraint: Option<f64>,
    evaluations: usize,
}

pub fn optimize(cfg: &RunConfig, run: &mut RunDir) -> Result<(), CliError> {
    let keep = cfg.optimize.as_ref().is_some_and(|o| o.keep_checkpoints);
    let ckpt = run.path("evaluation.ckpt");
    let result: OptResult = studies::optimize(cfg, keep.then_some(ckpt.as_path()))?;
    if keep {
        run.note("evaluation.ckpt");
    }

    let n_mu = result.mu.len();
    let mut header: Vec<String> = ["outer", "iter", "evaluations", "objective", "constraint", "constraint_violation"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(["grad_norm", "merit", "step_length", "backtracks", "multiplier", "penalty"].iter().map(|s| s.to_string()));
    header.extend((0..n_mu).map(|i| format!("mu{i}")));
    let rows = result.trace.iter().map(|r| {
        let mut row = vec![
            r.outer.to_string(),
            r.iter.to_string(),
            r.evaluations.to_string(),
            num(r.objective),
            r.constraint.map(num).unwrap_or_default(),
            num(r.constraint_violation),
            num(r.grad_norm),
            num(r.merit),
            num(r.step_length),
            r.backtracks.to_string(),
            num(r.multiplier),
            num(r.penalty),
        ];
        row.extend(r.mu.iter().map(|v| num(*v)));
        row
    });
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    run.csv("opt_trace.csv", &header_ref, rows)?;
    run.json("opt_trace.json", "optimize", &result)?;

    let start = result.trace.first().map_or(f64::NAN, |r| r.objective);
    println!(
        "objective {start:e} -> {:e} after {} evaluations ({:?})",
        result.objective, result.evaluations, result.termination
    );
    if let Some(c) = result.constraint {
        println!("constraint {c:e}");
    }
    println!("mu = {:?}", result.mu);
    let fin = FinalMu { mu: &result.mu, objective: result.objective, constraint: result.constraint, evaluations: result.evaluations };
    run.json("final_mu.json", "optimize", &fin)
}
