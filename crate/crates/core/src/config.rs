//! Run configuration (TOML) and the [`Problem`] it describes: a system, a
//! tableau, a time grid and registered QoIs, with helpers for the primal,
//! adjoint and design evaluations every front end needs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adjoint::{adjoint_gradients, DualTrajectory, Gradient};
use crate::dg1d::{Dg1dSpec, Dg1dSystem};
use crate::error::{Error, Result};
use crate::optimize::{Evaluation, OptOptions, OptProblem};
use crate::primal::{integrate, integrate_in_memory, PrimalOutput, PrimalTrajectory, TimeGrid};
use crate::qoi::{register, QoiSpec, QoiWeight, RegisteredQoi};
use crate::store::{CheckpointReader, CheckpointWriter, TrajectorySink};
use crate::system::{NewtonOptions, SemiDiscreteSystem};
use crate::systems::{Rate, ScalarDecay, ScalarIc, ScalarIntegrand};
use crate::tableau::{ButcherTableau, TableauKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub time: TimeSpec,
    #[serde(default)]
    pub parameters: ParameterSpec,
    #[serde(default, rename = "qoi")]
    pub qois: Vec<QoiConfig>,
    #[serde(default)]
    pub solver: SolverSpec,
    pub optimize: Option<OptimizeSpec>,
    #[serde(default)]
    pub grad_check: GradCheckSpec,
    pub order_study: Option<OrderStudySpec>,
    pub gcl_check: Option<GclCheckSpec>,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ProblemSpec {
    Dg1d(Dg1dSpec),
    ScalarDecay(ScalarSpec),
}

/// `du/dt = -rate u` with a scalar state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarSpec {
    pub rate: ScalarRateSpec,
    pub initial: ScalarIcSpec,
    pub integrands: Vec<ScalarIntegrandSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarRateSpec {
    Param { index: usize },
    Fixed { value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarIcSpec {
    Constant { value: f64 },
    Param { index: usize },
    SteadySquare { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarIntegrandSpec {
    State,
    One,
    TimeSquared,
    Weighted { index: usize },
    StateSquared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    pub horizon: f64,
    pub steps: usize,
    pub tableau: TableauKind,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterSpec {
    #[serde(default)]
    pub count: usize,
    /// Defaults to zeros.
    #[serde(default)]
    pub initial: Vec<f64>,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QoiConfig {
    pub name: String,
    /// Name of a system integrand.
    pub integrand: String,
    #[serde(default = "uniform_weight")]
    pub weight: QoiWeight,
}

fn uniform_weight() -> QoiWeight {
    QoiWeight::Uniform
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSpec {
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub reuse_jacobian: bool,
}

impl Default for SolverSpec {
    fn default() -> Self {
        let d = NewtonOptions::default();
        Self { newton_tol: d.tol, newton_max_iter: d.max_iter, reuse_jacobian: d.reuse_jacobian }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeSpec {
    pub objective: String,
    pub constraint: Option<ConstraintSpec>,
    #[serde(default)]
    pub options: OptOptions,
    /// Write a checkpoint per evaluation into the run directory.
    #[serde(default)]
    pub keep_checkpoints: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    pub qoi: String,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSpec {
    /// QoI names to check; all when empty.
    pub qois: Vec<String>,
    pub taus: Vec<f64>,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        Self { qois: Vec::new(), taus: vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OrderStudySpec {
    /// Final-state error against a fine dirk3 reference (or the closed form of
    /// the scalar decay problem) for each tableau and step count.
    Temporal { tableaus: Vec<TableauKind>, steps: Vec<usize> },
    /// L2 error at the final time against a profile, for each order and mesh.
    Spatial { orders: Vec<usize>, elements: Vec<usize>, exact: crate::dg1d::Profile },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GclCheckSpec {
    /// Freestream value imposed initially and on both boundaries.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: Option<PathBuf>,
    /// Write nodal solution snapshots from `simulate` (dg1d only).
    pub snapshots: Option<bool>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.time.horizon > 0.0) || self.time.steps == 0 {
            return Err(Error::Config(format!("need T > 0 and N_t >= 1 (got {}, {})", self.time.horizon, self.time.steps)));
        }
        let p = &self.parameters;
        let n = p.count;
        if !p.initial.is_empty() && p.initial.len() != n {
            return Err(Error::Config(format!("{} initial values for {n} parameters", p.initial.len())));
        }
        for (what, b) in [("lower", &p.lower), ("upper", &p.upper)] {
            if let Some(b) = b {
                if b.len() != n {
                    return Err(Error::Config(format!("{} {what} bounds for {n} parameters", b.len())));
                }
            }
        }
        if self.solver.newton_tol <= 0.0 || self.solver.newton_max_iter == 0 {
            return Err(Error::Config("invalid Newton settings".into()));
        }
        let mut names: Vec<&str> = self.qois.iter().map(|q| q.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate QoI names".into()));
        }
        let known = |n: &str| self.qois.iter().any(|q| q.name == n);
        if let Some(o) = &self.optimize {
            if !known(&o.objective) {
                return Err(Error::Config(format!("unknown objective QoI '{}'", o.objective)));
            }
            if let Some(c) = &o.constraint {
                if !known(&c.qoi) {
                    return Err(Error::Config(format!("unknown constraint QoI '{}'", c.qoi)));
                }
            }
            if n == 0 {
                return Err(Error::Config("optimization needs at least one parameter".into()));
            }
        }
        if let Some(q) = self.grad_check.qois.iter().find(|q| !known(q)) {
            return Err(Error::Config(format!("unknown grad-check QoI '{q}'")));
        }
        if self.grad_check.taus.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config("grad-check steps must be positive".into()));
        }
        Ok(())
    }

    pub fn initial_parameters(&self) -> Vec<f64> {
        if self.parameters.initial.is_empty() {
            vec![0.0; self.parameters.count]
        } else {
            self.parameters.initial.clone()
        }
    }

    pub fn newton(&self) -> NewtonOptions {
        NewtonOptions {
            tol: self.solver.newton_tol,
            max_iter: self.solver.newton_max_iter,
            reuse_jacobian: self.solver.reuse_jacobian,
        }
    }

    pub fn opt_problem(&self) -> Result<OptProblem> {
        let o = self.optimize.as_ref().ok_or_else(|| Error::Config("missing [optimize] block".into()))?;
        let n = self.parameters.count;
        Ok(OptProblem {
            initial: self.initial_parameters(),
            lower: self.parameters.lower.clone().unwrap_or_else(|| vec![f64::NEG_INFINITY; n]),
            upper: self.parameters.upper.clone().unwrap_or_else(|| vec![f64::INFINITY; n]),
            constraint_target: o.constraint.as_ref().map(|c| c.target),
        })
    }
}

/// The concrete system behind a [`Problem`].
pub enum Model {
    Dg1d(Box<Dg1dSystem>),
    Scalar(ScalarDecay),
}

impl Model {
    pub fn system(&self) -> &dyn SemiDiscreteSystem {
        match self {
            Model::Dg1d(s) => s.as_ref(),
            Model::Scalar(s) => s,
        }
    }
}

fn scalar_system(spec: &ScalarSpec, n_params: usize) -> Result<ScalarDecay> {
    let rate = match spec.rate {
        ScalarRateSpec::Param { index } => Rate::Param(index),
        ScalarRateSpec::Fixed { value } => Rate::Fixed(value),
    };
    let ic = match spec.initial {
        ScalarIcSpec::Constant { value } => ScalarIc::Constant(value),
        ScalarIcSpec::Param { index } => ScalarIc::Param(index),
        ScalarIcSpec::SteadySquare { index } => ScalarIc::SteadySquare(index),
    };
    let integrands = spec
        .integrands
        .iter()
        .map(|f| match *f {
            ScalarIntegrandSpec::State => ScalarIntegrand::State,
            ScalarIntegrandSpec::One => ScalarIntegrand::One,
            ScalarIntegrandSpec::TimeSquared => ScalarIntegrand::TimeSquared,
            ScalarIntegrandSpec::Weighted { index } => ScalarIntegrand::Weighted(index),
            ScalarIntegrandSpec::StateSquared => ScalarIntegrand::StateSquared,
        })
        .collect();
    ScalarDecay::new(rate, ic, integrands, n_params)
}

/// A fully specified discrete problem.
pub struct Problem {
    pub model: Model,
    pub tab: ButcherTableau,
    pub grid: TimeGrid,
    pub qois: Vec<RegisteredQoi>,
    pub newton: NewtonOptions,
    pub n_params: usize,
}

impl Problem {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        Self::build_with(&cfg.problem, &cfg.time, cfg, cfg.parameters.count)
    }

    /// Same configuration with a different problem block or time block.
    pub fn build_with(problem: &ProblemSpec, time: &TimeSpec, cfg: &RunConfig, n_params: usize) -> Result<Self> {
        let tab = ButcherTableau::new(time.tableau);
        let grid = TimeGrid::uniform(time.horizon, time.steps)?;
        let model = match problem {
            ProblemSpec::Dg1d(spec) => Model::Dg1d(Box::new(Dg1dSystem::new(spec.clone(), n_params, &tab, &grid)?)),
            ProblemSpec::ScalarDecay(spec) => Model::Scalar(scalar_system(spec, n_params)?),
        };
        let sys = model.system();
        let names = sys.qoi_names();
        let mut qois = Vec::with_capacity(cfg.qois.len());
        for q in &cfg.qois {
            let which = names.iter().position(|n| *n == q.integrand).ok_or_else(|| {
                Error::Config(format!("QoI '{}': unknown integrand '{}' (available: {names:?})", q.name, q.integrand))
            })?;
            let spec = QoiSpec { name: q.name.clone(), integrand: which, weight: q.weight };
            qois.push(register(spec, names.len(), &grid, &tab)?);
        }
        Ok(Self { model, tab, grid, qois, newton: cfg.newton(), n_params })
    }

    pub fn system(&self) -> &dyn SemiDiscreteSystem {
        self.model.system()
    }

    pub fn dg1d(&self) -> Option<&Dg1dSystem> {
        match &self.model {
            Model::Dg1d(s) => Some(s),
            Model::Scalar(_) => None,
        }
    }

    pub fn qoi_index(&self, name: &str) -> Result<usize> {
        self.qois
            .iter()
            .position(|q| q.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown QoI '{name}'")))
    }

    pub fn qoi_names(&self) -> Vec<String> {
        self.qois.iter().map(|q| q.name().to_string()).collect()
    }

    fn check_mu(&self, mu: &[f64]) -> Result<()> {
        if mu.len() != self.n_params {
            return Err(Error::Contract(format!("expected {} parameters, got {}", self.n_params, mu.len())));
        }
        Ok(())
    }

    pub fn primal(&self, mu: &[f64], sink: &mut dyn TrajectorySink) -> Result<PrimalOutput> {
        self.check_mu(mu)?;
        integrate(self.system(), &self.tab, &self.grid, mu, &self.qois, sink, &self.newton)
    }

    pub fn primal_in_memory(&self, mu: &[f64]) -> Result<(PrimalTrajectory, PrimalOutput)> {
        self.check_mu(mu)?;
        integrate_in_memory(self.system(), &self.tab, &self.grid, mu, &self.qois, &self.newton)
    }

    /// QoI values only, for finite differences.
    pub fn values(&self, mu: &[f64]) -> Result<Vec<f64>> {
        Ok(self.primal(mu, &mut crate::store::NullSink)?.values)
    }

    /// Primal solve and adjoint gradients of the selected QoIs, in memory.
    pub fn gradients(&self, mu: &[f64], which: &[usize]) -> Result<(PrimalOutput, Vec<DualTrajectory>, Vec<Gradient>)> {
        let (mut traj, out) = self.primal_in_memory(mu)?;
        let qois: Vec<RegisteredQoi> = which.iter().map(|&q| self.qois[q].clone()).collect();
        let (duals, grads) = adjoint_gradients(self.system(), &self.tab, &self.grid, mu, &qois, &mut traj)?;
        Ok((out, duals, grads))
    }

    /// As [`Problem::gradients`], but the trajectory goes through a checkpoint
    /// file at `path` that the reverse sweep reads back.
    pub fn gradients_on_disk(
        &self,
        mu: &[f64],
        which: &[usize],
        path: &Path,
    ) -> Result<(PrimalOutput, Vec<DualTrajectory>, Vec<Gradient>)> {
        let mut writer = CheckpointWriter::create(path)?;
        let out = self.primal(mu, &mut writer)?;
        let layout = self.grid.layout(self.system().dim(), self.tab.stages());
        let mut reader = CheckpointReader::open_expecting(path, &layout)?;
        let qois: Vec<RegisteredQoi> = which.iter().map(|&q| self.qois[q].clone()).collect();
        let (duals, grads) = adjoint_gradients(self.system(), &self.tab, &self.grid, mu, &qois, &mut reader)?;
        Ok((out, duals, grads))
    }

    /// Objective and optional constraint with gradients from one primal solve
    /// and one adjoint batch.
    pub fn evaluate(&self, mu: &[f64], objective: usize, constraint: Option<usize>, checkpoint: Option<&Path>) -> Result<Evaluation> {
        let mut which = vec![objective];
        which.extend(constraint);
        let (out, _, grads) = match checkpoint {
            Some(p) => self.gradients_on_disk(mu, &which, p)?,
            None => self.gradients(mu, &which)?,
        };
        Ok(Evaluation {
            objective: out.values[objective],
            objective_grad: grads[0].value.clone(),
            constraint: constraint.map(|c| (out.values[c], grads[1].value.clone())),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCALAR: &str = r#"
[problem]
model = "scalar_decay"
rate = { kind = "param", index = 0 }
initial = { kind = "constant", value = 1.0 }
integrands = [{ kind = "state" }, { kind = "one" }]

[time]
horizon = 1.0
steps = 10
tableau = "dirk2"

[parameters]
count = 1
initial = [0.5]

[[qoi]]
name = "u_int"
integrand = "state"

[[qoi]]
name = "u_end"
integrand = "state"
weight = { kind = "time_impulse", t = 1.0 }
"#;

    #[test]
    fn scalar_config_round_trip() {
        let cfg = RunConfig::from_toml_str(SCALAR).unwrap();
        let p = Problem::build(&cfg).unwrap();
        let v = p.values(&[0.5]).unwrap();
        assert!((v[1] - (-0.5f64).exp()).abs() < 1e-3);
        let again = RunConfig::from_toml_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = SCALAR.replace("steps = 10", "steps = 10\nstepz = 3");
        assert!(matches!(RunConfig::from_toml_str(&bad), Err(Error::Config(_))));
        let bad = SCALAR.replace("kind = \"constant\", value", "kind = \"constant\", valu");
        assert!(RunConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn dangling_references_are_rejected() {
        let bad = format!("{SCALAR}\n[optimize]\nobjective = \"nope\"\n");
        assert!(RunConfig::from_toml_str(&bad).is_err());
        let bad = SCALAR.replace("integrand = \"state\"\nweight", "integrand = \"missing\"\nweight");
        let cfg = RunConfig::from_toml_str(&bad).unwrap();
        assert!(Problem::build(&cfg).is_err());
    }
}
