//! Butcher tableaus for diagonally implicit Runge-Kutta schemes.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Diagonal coefficient of the three-stage, third-order L-stable DIRK scheme.
pub const DIRK3_ALPHA: f64 = 0.435866521508459;

/// Structural tolerance for row sums and weight sums.
const STRUCTURE_TOL: f64 = 1e-14;
/// Tolerance for the classical order conditions.
const ORDER_TOL: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableauKind {
    /// Backward Euler.
    Dirk1,
    /// Two-stage, second-order, L-stable SDIRK with diagonal 1 - sqrt(2)/2.
    Dirk2,
    /// Three-stage, third-order, L-stable SDIRK.
    Dirk3,
}

impl TableauKind {
    pub const ALL: [TableauKind; 3] = [TableauKind::Dirk1, TableauKind::Dirk2, TableauKind::Dirk3];

    /// Classical order of the scheme.
    pub fn order(self) -> usize {
        match self {
            TableauKind::Dirk1 => 1,
            TableauKind::Dirk2 => 2,
            TableauKind::Dirk3 => 3,
        }
    }
}

impl fmt::Display for TableauKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            TableauKind::Dirk1 => "dirk1",
            TableauKind::Dirk2 => "dirk2",
            TableauKind::Dirk3 => "dirk3",
        };
        f.write_str(name)
    }
}

/// Lower-triangular Butcher tableau `(A, b, c)`.
///
/// Rows of `a` are stored densely; entries above the diagonal are expected to be
/// zero, which [`ButcherTableau::validate`] checks.
#[derive(Debug, Clone, PartialEq)]
pub struct ButcherTableau {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    c: Vec<f64>,
}

impl ButcherTableau {
    /// Builds a tableau from raw coefficients without validating it.
    ///
    /// Panics if the shapes are inconsistent, since no meaningful scheme can be
    /// formed from them.
    pub fn from_parts(a: Vec<Vec<f64>>, b: Vec<f64>, c: Vec<f64>) -> Self {
        let s = b.len();
        assert!(s > 0, "a tableau needs at least one stage");
        assert_eq!(c.len(), s, "c must have one entry per stage");
        assert_eq!(a.len(), s, "A must have one row per stage");
        for row in &a {
            assert_eq!(row.len(), s, "A must be square");
        }
        Self { a, b, c }
    }

    pub fn new(kind: TableauKind) -> Self {
        match kind {
            TableauKind::Dirk1 => Self::from_parts(vec![vec![1.0]], vec![1.0], vec![1.0]),
            TableauKind::Dirk2 => {
                let alpha = 1.0 - std::f64::consts::SQRT_2 / 2.0;
                let b = vec![1.0 - alpha, alpha];
                // Stiffly accurate: the last row of A is b.
                let a = vec![vec![alpha, 0.0], b.clone()];
                Self::from_parts(a, b, vec![alpha, 1.0])
            }
            TableauKind::Dirk3 => {
                let alpha = DIRK3_ALPHA;
                let gamma = -(6.0 * alpha * alpha - 16.0 * alpha + 1.0) / 4.0;
                let omega = (6.0 * alpha * alpha - 20.0 * alpha + 5.0) / 4.0;
                let c2 = (1.0 + alpha) / 2.0;
                let b = vec![gamma, omega, alpha];
                let a = vec![
                    vec![alpha, 0.0, 0.0],
                    vec![c2 - alpha, alpha, 0.0],
                    b.clone(),
                ];
                Self::from_parts(a, b, vec![alpha, c2, 1.0])
            }
        }
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }

    /// Coefficient `a_ij` with zero-based stage indices.
    #[inline]
    pub fn a(&self, i: usize, j: usize) -> f64 {
        self.a[i][j]
    }

    #[inline]
    pub fn b(&self, i: usize) -> f64 {
        self.b[i]
    }

    #[inline]
    pub fn c(&self, i: usize) -> f64 {
        self.c[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.b
    }

    pub fn abscissae(&self) -> &[f64] {
        &self.c
    }

    /// Checks the structural invariants and the order conditions up to order three.
    pub fn validate(&self) -> ValidationReport {
        let s = self.stages();
        let mut checks = Vec::new();

        let mut upper = 0.0_f64;
        for i in 0..s {
            for j in (i + 1)..s {
                upper = upper.max(self.a[i][j].abs());
            }
        }
        checks.push(Check::new(Condition::LowerTriangular, upper, 0.0));

        let mut row_sum = 0.0_f64;
        for i in 0..s {
            let sum: f64 = self.a[i].iter().sum();
            row_sum = row_sum.max((sum - self.c[i]).abs());
        }
        checks.push(Check::new(Condition::RowSum, row_sum, STRUCTURE_TOL));

        let weight_sum: f64 = self.b.iter().sum();
        checks.push(Check::new(Condition::WeightSum, (weight_sum - 1.0).abs(), STRUCTURE_TOL));

        let bc: f64 = (0..s).map(|i| self.b[i] * self.c[i]).sum();
        checks.push(Check::new(Condition::Order2, (bc - 0.5).abs(), ORDER_TOL));

        let bcc: f64 = (0..s).map(|i| self.b[i] * self.c[i] * self.c[i]).sum();
        checks.push(Check::new(Condition::Order3Bushy, (bcc - 1.0 / 3.0).abs(), ORDER_TOL));

        let mut bac = 0.0;
        for i in 0..s {
            for j in 0..s {
                bac += self.b[i] * self.a[i][j] * self.c[j];
            }
        }
        checks.push(Check::new(Condition::Order3Tall, (bac - 1.0 / 6.0).abs(), ORDER_TOL));

        ValidationReport { checks }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    LowerTriangular,
    RowSum,
    WeightSum,
    /// sum b_i c_i = 1/2
    Order2,
    /// sum b_i c_i^2 = 1/3
    Order3Bushy,
    /// sum b_i a_ij c_j = 1/6
    Order3Tall,
}

impl Condition {
    pub fn is_structural(self) -> bool {
        matches!(self, Condition::LowerTriangular | Condition::RowSum | Condition::WeightSum)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Check {
    pub condition: Condition,
    pub defect: f64,
    pub tolerance: f64,
}

impl Check {
    fn new(condition: Condition, defect: f64, tolerance: f64) -> Self {
        Self { condition, defect, tolerance }
    }

    pub fn passed(&self) -> bool {
        self.defect <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn check(&self, condition: Condition) -> &Check {
        self.checks
            .iter()
            .find(|c| c.condition == condition)
            .expect("every condition is always evaluated")
    }

    pub fn failures(&self) -> Vec<Condition> {
        self.checks.iter().filter(|c| !c.passed()).map(|c| c.condition).collect()
    }

    pub fn structure_ok(&self) -> bool {
        self.checks.iter().filter(|c| c.condition.is_structural()).all(Check::passed)
    }

    /// Highest order whose conditions (and all lower ones) pass.
    pub fn order(&self) -> usize {
        if !self.check(Condition::WeightSum).passed() {
            return 0;
        }
        if !self.check(Condition::Order2).passed() {
            return 1;
        }
        if !(self.check(Condition::Order3Bushy).passed() && self.check(Condition::Order3Tall).passed()) {
            return 2;
        }
        3
    }
}
