//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use adjflow::adjoint::{adjoint_sweep, forward_sensitivity, lagrangian_residuals};
use adjflow::config::{OrderStudySpec, Problem, RunConfig};
use adjflow::store::{CheckpointReader, CheckpointWriter, ReverseItem, Slot};
use adjflow::studies::{self, StudyPoint};
use adjflow::system::{relative_error, Vector};
use adjflow::tableau::{ButcherTableau, Condition, TableauKind, DIRK3_ALPHA};

type Outcome = Result<(bool, String), String>;

fn config(name: &str) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::from_path(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn shipped() -> Vec<(String, RunConfig)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut names: Vec<String> = std::fs::read_dir(&dir)
        .expect("configs directory")
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".toml"))
        .collect();
    names.sort();
    names.into_iter().map(|n| (n.clone(), config(&n))).collect()
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn gradient_consistency() -> Outcome {
    let cfg = config("control.toml");
    let start = Instant::now();
    let problem = Problem::build(&cfg).map_err(err)?;
    let which: Vec<usize> = (0..problem.qois.len()).collect();
    let report = studies::grad_check(&problem, &cfg.initial_parameters(), &which, &cfg.grad_check.taus).map_err(err)?;
    let elapsed = start.elapsed();
    let worst = report.worst_min_error();
    let per: Vec<String> = report.qois.iter().zip(&report.min_error).map(|(q, e)| format!("{q}={e:.1e}")).collect();
    Ok((
        worst <= 1e-6 && elapsed <= Duration::from_secs(120),
        format!("min-over-tau rel error {} (worst {worst:.2e}), {:.1}s", per.join(" "), secs(elapsed)),
    ))
}

fn dual_consistency() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0_f64;
    let mut worst_at = String::new();
    let mut count = 0;
    for (name, cfg) in shipped() {
        if cfg.parameters.count == 0 || cfg.parameters.count > 8 || cfg.qois.is_empty() {
            continue;
        }
        let problem = Problem::build(&cfg).map_err(err)?;
        let mu = cfg.initial_parameters();
        let which: Vec<usize> = (0..problem.qois.len()).collect();
        let (_, _, adj) = problem.gradients(&mu, &which).map_err(err)?;
        let fwd = forward_sensitivity(problem.system(), &problem.tab, &problem.grid, &mu, &problem.qois, &problem.newton)
            .map_err(err)?;
        for ((g, f), q) in adj.iter().zip(&fwd).zip(&problem.qois) {
            let e = relative_error(&g.value, f.as_slice());
            if e >= worst {
                worst = e;
                worst_at = format!("{name}:{}", q.name());
            }
        }
        count += 1;
    }
    let elapsed = start.elapsed();
    Ok((
        count > 0 && worst <= 1e-12 && elapsed <= Duration::from_secs(60),
        format!("{count} systems, worst adjoint/forward rel diff {worst:.2e} at {worst_at}, {:.1}s", secs(elapsed)),
    ))
}

fn lagrangian_stationarity() -> Outcome {
    let mut ok = true;
    let mut worst = 0.0_f64;
    let mut count = 0;
    for (_, cfg) in shipped() {
        if cfg.qois.is_empty() {
            continue;
        }
        let problem = Problem::build(&cfg).map_err(err)?;
        let mu = cfg.initial_parameters();
        let (traj, _) = problem.primal_in_memory(&mu).map_err(err)?;
        let sys = problem.system();
        let duals = adjoint_sweep(sys, &problem.tab, &problem.grid, &mu, &problem.qois, &mut traj.clone()).map_err(err)?;
        for (q, dual) in problem.qois.iter().zip(&duals) {
            let r = lagrangian_residuals(sys, &problem.tab, &problem.grid, &mu, q, &traj, dual).map_err(err)?;
            ok &= r.passes(1e-10);
            worst = worst.max(r.max() / (1.0 + r.lambda_max));
            count += 1;
        }
    }
    Ok((ok && count > 0, format!("{count} primal/dual pairs, worst |dL|/(1+|lambda|) {worst:.2e}")))
}

fn gcl_preservation() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["gcl_freestream.toml", "control.toml"] {
        let cfg = config(name);
        let value = cfg.gcl_check.map_or(1.0, |g| g.value);
        let c = studies::gcl_check(&cfg, value).map_err(err)?;
        ok &= c.with_gcl <= 1e-12 && c.without_gcl >= 1e-8;
        parts.push(format!("{name}: on {:.1e} off {:.1e}", c.with_gcl, c.without_gcl));
    }
    Ok((ok, parts.join("; ")))
}

/// `R(z) = 1 + z b^T (I - z A)^-1 1` by forward substitution.
fn amplification(tab: &ButcherTableau, z: f64) -> f64 {
    let s = tab.stages();
    let mut y = vec![0.0; s];
    for i in 0..s {
        let mut acc = 1.0;
        for (j, yj) in y.iter().enumerate().take(i) {
            acc += z * tab.a(i, j) * yj;
        }
        y[i] = acc / (1.0 - z * tab.a(i, i));
    }
    1.0 + z * (0..s).map(|i| tab.b(i) * y[i]).sum::<f64>()
}

fn temporal_order() -> Outcome {
    let cfg = config("scalar_decay.toml");
    let Some(OrderStudySpec::Temporal { steps, .. }) = &cfg.order_study else {
        return Err("scalar_decay.toml has no temporal study".into());
    };
    let reference = studies::temporal_reference(&cfg, *steps.iter().max().unwrap()).map_err(err)?;
    let mut ok = steps.len() >= 5;
    let mut parts = Vec::new();
    for (kind, need) in [(TableauKind::Dirk1, 0.9), (TableauKind::Dirk2, 1.8), (TableauKind::Dirk3, 2.7)] {
        let pts: Vec<StudyPoint> = steps
            .iter()
            .map(|&n| studies::temporal_case(&cfg, kind, n, &reference))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let min_rate = pts
            .windows(2)
            .map(|w| (w[0].error / w[1].error).ln() / (w[0].size / w[1].size).ln())
            .fold(f64::INFINITY, f64::min);
        ok &= min_rate >= need;
        parts.push(format!("{kind} min rate {min_rate:.3} fit {:.3}", studies::fitted_slope(&pts)));
    }

    let mut closed = 0.0_f64;
    for kind in TableauKind::ALL {
        let tab = ButcherTableau::new(kind);
        for rate in [0.3, 1.0, 2.5] {
            let mut c = cfg.clone();
            c.parameters.initial = vec![rate];
            c.time.tableau = kind;
            let problem = Problem::build(&c).map_err(err)?;
            let (traj, _) = problem.primal_in_memory(&[rate]).map_err(err)?;
            let r = amplification(&tab, -rate * problem.grid.dt(1));
            let mut exact = 1.0;
            for u in &traj.states {
                closed = closed.max((u[0] - exact).abs());
                exact *= r;
            }
        }
    }
    ok &= closed <= 1e-13;
    parts.push(format!("closed form max diff {closed:.1e}"));
    Ok((ok, parts.join(", ")))
}

fn spatial_order() -> Outcome {
    let cfg = config("spatial_order.toml");
    let Some(OrderStudySpec::Spatial { orders, elements, exact }) = &cfg.order_study else {
        return Err("spatial_order.toml has no spatial study".into());
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for &p in orders {
        let pts: Vec<StudyPoint> = elements
            .iter()
            .map(|&k| studies::spatial_case(&cfg, p, k, exact))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let slope = studies::fitted_slope(&pts);
        ok &= slope >= p as f64 + 0.5;
        parts.push(format!("p={p} slope {slope:.2}"));
    }
    Ok((ok && orders.len() == 3, parts.join(", ")))
}

fn solver_consistent_qoi() -> Outcome {
    let base = config("scalar_decay.toml");
    let horizon = base.time.horizon;
    let mut worst_one = 0.0_f64;
    let mut t2 = f64::NAN;
    for kind in TableauKind::ALL {
        let mut cfg = base.clone();
        cfg.time.tableau = kind;
        let problem = Problem::build(&cfg).map_err(err)?;
        let values = problem.values(&cfg.initial_parameters()).map_err(err)?;
        worst_one = worst_one.max((values[problem.qoi_index("horizon").map_err(err)?] - horizon).abs());
        if kind == TableauKind::Dirk3 {
            t2 = (values[problem.qoi_index("t_squared").map_err(err)?] - horizon.powi(3) / 3.0).abs();
        }
    }
    Ok((worst_one <= 1e-13 && t2 <= 1e-13, format!("|F[1] - T| {worst_one:.1e}, |F[t^2] - T^3/3| (dirk3) {t2:.1e}")))
}

fn tableau_identities() -> Outcome {
    let tab = ButcherTableau::new(TableauKind::Dirk3);
    let report = tab.validate();
    let conds = [
        Condition::LowerTriangular,
        Condition::RowSum,
        Condition::WeightSum,
        Condition::Order2,
        Condition::Order3Bushy,
        Condition::Order3Tall,
    ];
    let worst = conds.iter().map(|&c| report.check(c).defect).fold(0.0_f64, f64::max);
    let (gamma, omega, alpha) = (tab.b(0), tab.b(1), tab.b(2));
    let sum = (gamma + omega + alpha - 1.0).abs();
    let diag = (0..3).map(|i| (tab.a(i, i) - DIRK3_ALPHA).abs()).fold(0.0_f64, f64::max);
    let last_row = (0..3).map(|j| (tab.a(2, j) - tab.b(j)).abs()).fold(0.0_f64, f64::max);
    Ok((
        worst <= 1e-13 && sum <= 1e-13 && diag == 0.0 && last_row == 0.0 && report.order() == 3,
        format!("order {} worst condition defect {worst:.1e}, |gamma+omega+alpha-1| {sum:.1e}", report.order()),
    ))
}

fn optimization() -> Outcome {
    let start = Instant::now();
    let cfg = config("control.toml");
    let free = studies::optimize(&cfg, None).map_err(err)?;
    let f0 = free.trace.first().map(|r| r.objective).ok_or("empty trace")?;
    let reduction = 1.0 - free.objective / f0;

    let cfg = config("control_constrained.toml");
    let target = cfg.optimize.as_ref().and_then(|o| o.constraint.as_ref()).map(|c| c.target).ok_or("no constraint")?;
    let con = studies::optimize(&cfg, None).map_err(err)?;
    let violation = (con.constraint.ok_or("no constraint value")? - target).abs();
    let elapsed = start.elapsed();
    Ok((
        reduction >= 0.5 && violation <= 1e-8 && elapsed <= Duration::from_secs(1800),
        format!(
            "work {f0:.4} -> {:.4} ({:.1}% reduction, {} evals); constrained |C-q| {violation:.1e} ({} evals); {:.1}s",
            free.objective,
            100.0 * reduction,
            free.evaluations,
            con.evaluations,
            secs(elapsed)
        ),
    ))
}

fn same_bits(a: &Vector, b: &Vector) -> bool {
    a.len() == b.len() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn checkpoint_integrity() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut ok = true;
    let mut count = 0;
    for (name, cfg) in shipped() {
        let problem = Problem::build(&cfg).map_err(err)?;
        let mu = cfg.initial_parameters();
        let path = dir.path().join(format!("{name}.ckpt"));
        let mut writer = CheckpointWriter::create(&path).map_err(err)?;
        problem.primal(&mu, &mut writer).map_err(err)?;
        let (traj, _) = problem.primal_in_memory(&mu).map_err(err)?;

        let mut reader = CheckpointReader::open(&path).map_err(err)?;
        for (n, u) in traj.states.iter().enumerate() {
            ok &= same_bits(&reader.read_slot(Slot::state(n)).map_err(err)?, u);
        }
        for (n, stages) in traj.stages.iter().enumerate() {
            for (i, k) in stages.iter().enumerate() {
                ok &= same_bits(&reader.read_slot(Slot::Stage { step: n + 1, stage: i }).map_err(err)?, k);
            }
        }
        for item in reader.read_reverse() {
            match item.map_err(err)? {
                ReverseItem::Final(u) => ok &= same_bits(&u, traj.states.last().unwrap()),
                ReverseItem::Step { n, record } => {
                    ok &= same_bits(&record.u_prev, &traj.states[n - 1]);
                    ok &= record.stages.iter().zip(&traj.stages[n - 1]).all(|(a, b)| same_bits(a, b));
                }
            }
        }

        if !problem.qois.is_empty() && cfg.parameters.count > 0 {
            let which: Vec<usize> = (0..problem.qois.len()).collect();
            let (_, _, mem) = problem.gradients(&mu, &which).map_err(err)?;
            let (_, _, disk) = problem.gradients_on_disk(&mu, &which, &dir.path().join("grad.ckpt")).map_err(err)?;
            for (a, b) in mem.iter().zip(&disk) {
                ok &= a.value.len() == b.value.len()
                    && a.value.iter().zip(&b.value).all(|(x, y)| x.to_bits() == y.to_bits());
            }
        }
        count += 1;
    }
    Ok((ok && count > 0, format!("{count} configs: slot reads, reverse reads and disk gradients bit-identical")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient consistency", gradient_consistency),
        ("dual consistency", dual_consistency),
        ("lagrangian stationarity", lagrangian_stationarity),
        ("gcl freestream preservation", gcl_preservation),
        ("temporal order", temporal_order),
        ("spatial order", spatial_order),
        ("solver-consistent qoi", solver_consistent_qoi),
        ("tableau identities", tableau_identities),
        ("optimization", optimization),
        ("checkpoint integrity", checkpoint_integrity),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let (pass, detail) = match std::panic::catch_unwind(run) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".to_string()),
        };
        if !pass {
            failed += 1;
        }
        println!("{} {:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" }, i + 1);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
