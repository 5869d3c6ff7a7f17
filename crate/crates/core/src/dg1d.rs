//! Nodal discontinuous Galerkin discretization of 1D viscous conservation laws
//! on a deforming domain, written on the fixed reference domain through the
//! mapping of [`crate::ale`].
//!
//! The state is the nodal vector of `U_X = s u`, where the scaling `s` is the
//! isoparametric `g_h` (plain ALE) or the GCL field `gbar`. Fluxes are formed in
//! terms of the physical state `w = U_X / s`: the transformed inviscid flux
//! reduces to `F(w) - v_G w` and the viscous flux to `nu (dw/dX) / G` in 1D. The
//! viscous term uses LDG with alternating traces and a boundary penalty,
//! convection an exact Riemann solver of `F(w) - v w` (upwind for advection,
//! Godunov for Burgers).

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::ale::{self, DomainMapping, GclField, GclSensitivity, MappingSpec};
use crate::error::{Error, Result};
use crate::primal::TimeGrid;
use crate::system::{newton, InitialCondition, Matrix, NewtonFailure, NewtonOptions, SemiDiscreteSystem, TimePoint, TimeSlot, Vector};
use crate::tableau::ButcherTableau;

/// Uniform partition of the reference interval into `k` elements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mesh1d {
    pub k: usize,
    pub x_left: f64,
    pub x_right: f64,
}

impl Mesh1d {
    pub fn new(k: usize, x_left: f64, x_right: f64) -> Result<Self> {
        if k == 0 || !(x_right > x_left) {
            return Err(Error::Config(format!("invalid mesh: {k} elements on [{x_left}, {x_right}]")));
        }
        Ok(Self { k, x_left, x_right })
    }

    pub fn h(&self) -> f64 {
        (self.x_right - self.x_left) / self.k as f64
    }

    /// `dX/dr` of the affine element map.
    pub fn jacobian(&self) -> f64 {
        0.5 * self.h()
    }

    pub fn element_left(&self, e: usize) -> f64 {
        self.x_left + e as f64 * self.h()
    }

    /// Reference coordinates of all nodes, element by element.
    pub fn reference_nodes(&self, elem: &ReferenceElement) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.k * elem.n_nodes());
        for e in 0..self.k {
            let xl = self.element_left(e);
            for &r in &elem.nodes {
                out.push(xl + (r + 1.0) * self.jacobian());
            }
        }
        out
    }

    /// Element containing `x` and the local coordinate `r` of `x` in it.
    pub fn locate(&self, x: f64) -> Result<(usize, f64)> {
        let slack = 1e-12 * (self.x_right - self.x_left);
        if !(x >= self.x_left - slack && x <= self.x_right + slack) {
            return Err(Error::Domain(format!("X = {x} outside [{}, {}]", self.x_left, self.x_right)));
        }
        let e = (((x - self.x_left) / self.h()).floor().max(0.0) as usize).min(self.k - 1);
        let r = (x - self.element_left(e)) / self.jacobian() - 1.0;
        Ok((e, r.clamp(-1.0, 1.0)))
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    // (P_n, P_{n-1})
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    (p1, p0)
}

/// Gauss-Lobatto-Legendre nodes on `[-1, 1]`, ascending.
pub fn gll_nodes(p: usize) -> Vec<f64> {
    assert!(p >= 1);
    let mut nodes: Vec<f64> = (0..=p).map(|i| -(std::f64::consts::PI * i as f64 / p as f64).cos()).collect();
    for x in nodes.iter_mut().take(p).skip(1) {
        for _ in 0..100 {
            let (pn, pm) = legendre(p, *x);
            let dx = (*x * pn - pm) / ((p + 1) as f64 * pn);
            *x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
    }
    nodes[0] = -1.0;
    nodes[p] = 1.0;
    nodes
}

/// Gauss-Legendre points and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    for i in 0..n {
        let mut z = -(std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (pn, pm) = legendre(n, z);
            dp = n as f64 * (z * pn - pm) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (pn, pm) = legendre(n, z);
        dp = if n > 0 { n as f64 * (z * pn - pm) / (z * z - 1.0) } else { dp };
        x.push(z);
        w.push(2.0 / ((1.0 - z * z) * dp * dp));
    }
    (x, w)
}

/// Lagrange basis values and derivatives at `r`.
pub fn lagrange(nodes: &[f64], r: f64) -> (Vec<f64>, Vec<f64>) {
    let n = nodes.len();
    let mut val = vec![0.0; n];
    let mut der = vec![0.0; n];
    for j in 0..n {
        let mut v = 1.0;
        let mut d = 0.0;
        for m in 0..n {
            if m == j {
                continue;
            }
            let den = nodes[j] - nodes[m];
            let mut term = 1.0 / den;
            for l in 0..n {
                if l != j && l != m {
                    term *= (r - nodes[l]) / (nodes[j] - nodes[l]);
                }
            }
            d += term;
            v *= (r - nodes[m]) / den;
        }
        val[j] = v;
        der[j] = d;
    }
    (val, der)
}

/// Nodal reference element of degree `p` on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct ReferenceElement {
    pub p: usize,
    pub nodes: Vec<f64>,
    pub quad_points: Vec<f64>,
    pub quad_weights: Vec<f64>,
    /// Basis values at quadrature points (`n_q x n_p`).
    pub interp: Matrix,
    /// Basis `d/dr` at quadrature points.
    pub interp_deriv: Matrix,
    /// Nodal differentiation matrix `d/dr`.
    pub dn: Matrix,
    pub mass_ref: Matrix,
    pub mass_inv: Matrix,
    /// Element operator of `d gbar/dt = d v_G/dX` acting on nodal `v_G`.
    pub gcl_operator: Matrix,
}

impl ReferenceElement {
    pub fn new(p: usize) -> Self {
        let nodes = gll_nodes(p);
        let nq = (3 * p + 3) / 2;
        let (quad_points, quad_weights) = gauss_legendre(nq);
        let np = p + 1;
        let mut interp = Matrix::zeros(nq, np);
        let mut interp_deriv = Matrix::zeros(nq, np);
        for (q, &r) in quad_points.iter().enumerate() {
            let (v, d) = lagrange(&nodes, r);
            for j in 0..np {
                interp[(q, j)] = v[j];
                interp_deriv[(q, j)] = d[j];
            }
        }
        let mut dn = Matrix::zeros(np, np);
        for (i, &r) in nodes.iter().enumerate() {
            let (_, d) = lagrange(&nodes, r);
            for j in 0..np {
                dn[(i, j)] = d[j];
            }
        }
        let wmat = Matrix::from_diagonal(&Vector::from_vec(quad_weights.clone()));
        let mass_ref = interp.transpose() * &wmat * &interp;
        let mass_inv = mass_ref.clone().try_inverse().expect("reference mass matrix is SPD");
        let mut gcl_operator = -(interp_deriv.transpose() * &wmat * &interp);
        gcl_operator[(np - 1, np - 1)] += 1.0;
        gcl_operator[(0, 0)] -= 1.0;
        Self { p, nodes, quad_points, quad_weights, interp, interp_deriv, dn, mass_ref, mass_inv, gcl_operator }
    }

    pub fn n_nodes(&self) -> usize {
        self.p + 1
    }

    pub fn n_quad(&self) -> usize {
        self.quad_points.len()
    }
}

/// Physical flux model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FluxModel {
    /// `F(u) = u^2 / 2 - nu u_x`.
    Burgers { nu: f64 },
    /// `F(u) = a u - nu u_x`.
    Advection { speed: f64, nu: f64 },
}

impl FluxModel {
    pub fn nu(&self) -> f64 {
        match *self {
            FluxModel::Burgers { nu } | FluxModel::Advection { nu, .. } => nu,
        }
    }

    pub fn inviscid(&self, w: f64) -> f64 {
        match *self {
            FluxModel::Burgers { .. } => 0.5 * w * w,
            FluxModel::Advection { speed, .. } => speed * w,
        }
    }

    fn inviscid_deriv(&self, w: f64) -> f64 {
        match *self {
            FluxModel::Burgers { .. } => w,
            FluxModel::Advection { speed, .. } => speed,
        }
    }

    /// Exact Riemann flux of `F(w) - v w` with left state `wl`, right state `wr`,
    /// and its partials `(f, df/dwl, df/dwr, df/dv)`.
    pub fn riemann(&self, wl: f64, wr: f64, v: f64) -> (f64, f64, f64, f64) {
        match *self {
            FluxModel::Advection { speed, .. } => {
                let a = speed - v;
                if a >= 0.0 {
                    (a * wl, a, 0.0, -wl)
                } else {
                    (a * wr, 0.0, a, -wr)
                }
            }
            FluxModel::Burgers { .. } => {
                let f = |w: f64| 0.5 * w * w - v * w;
                if wl <= wr {
                    if v < wl {
                        (f(wl), wl - v, 0.0, -wl)
                    } else if v > wr {
                        (f(wr), 0.0, wr - v, -wr)
                    } else {
                        (-0.5 * v * v, 0.0, 0.0, -v)
                    }
                } else if f(wl) >= f(wr) {
                    (f(wl), wl - v, 0.0, -wl)
                } else {
                    (f(wr), 0.0, wr - v, -wr)
                }
            }
        }
    }
}

/// Space-time profile in physical coordinates, used for boundary data and
/// initial states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile {
    Constant { value: f64 },
    /// `offset + amplitude sin(wavenumber (x - speed t))`.
    Wave { offset: f64, amplitude: f64, wavenumber: f64, speed: f64 },
    /// `amplitude sin(wavenumber x) exp(-rate t)`.
    Decaying { amplitude: f64, wavenumber: f64, rate: f64 },
}

impl Profile {
    pub fn eval(&self, x: f64, t: f64) -> f64 {
        match *self {
            Profile::Constant { value } => value,
            Profile::Wave { offset, amplitude, wavenumber, speed } => offset + amplitude * (wavenumber * (x - speed * t)).sin(),
            Profile::Decaying { amplitude, wavenumber, rate } => amplitude * (wavenumber * x).sin() * (-rate * t).exp(),
        }
    }

    pub fn dx(&self, x: f64, t: f64) -> f64 {
        match *self {
            Profile::Constant { .. } => 0.0,
            Profile::Wave { amplitude, wavenumber, speed, .. } => amplitude * wavenumber * (wavenumber * (x - speed * t)).cos(),
            Profile::Decaying { amplitude, wavenumber, rate } => {
                amplitude * wavenumber * (wavenumber * x).cos() * (-rate * t).exp()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    /// `u(x, 0)` given by a profile.
    Profile { profile: Profile },
    /// Steady solution of the semi-discrete equations at `t = 0`, found by Newton
    /// from the profile.
    Steady { guess: Profile },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// Spatial integrands `f_h(u, mu, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Integrand {
    /// `xdot_b` times the numerical flux trace at a boundary: the power
    /// exchanged with a moving boundary.
    BoundaryWork { side: Side },
    /// The numerical flux trace at a boundary.
    BoundaryImpulse { side: Side },
    /// `int u^2 dx`.
    DomainEnergy,
    /// Trace of `u` at reference point `x`.
    PointValue { x: f64 },
}

impl Integrand {
    pub fn name(&self) -> String {
        let side = |s: &Side| match s {
            Side::Left => "left",
            Side::Right => "right",
        };
        match self {
            Integrand::BoundaryWork { side: s } => format!("work_{}", side(s)),
            Integrand::BoundaryImpulse { side: s } => format!("impulse_{}", side(s)),
            Integrand::DomainEnergy => "energy".into(),
            Integrand::PointValue { x } => format!("point_{x}"),
        }
    }
}

/// Serializable description of a DG model problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dg1dSpec {
    pub elements: usize,
    pub order: usize,
    #[serde(default = "unit_domain")]
    pub domain: [f64; 2],
    pub flux: FluxModel,
    #[serde(default = "static_mapping")]
    pub mapping: MappingSpec,
    pub left: Profile,
    pub right: Profile,
    pub initial: InitialSpec,
    #[serde(default)]
    pub gcl: bool,
    pub integrands: Vec<Integrand>,
}

fn unit_domain() -> [f64; 2] {
    [0.0, 1.0]
}

fn static_mapping() -> MappingSpec {
    MappingSpec::Static
}

type GclEntry = (Vec<u64>, Arc<(GclField, GclSensitivity)>);

struct GclCache {
    tab: ButcherTableau,
    grid: TimeGrid,
    entries: Mutex<Vec<GclEntry>>,
}

const GCL_CACHE_SIZE: usize = 6;

/// Geometry and boundary data at one time, independent of the state.
struct Frame {
    x: Vec<f64>,
    xdot: Vec<f64>,
    dx_dmu: Matrix,
    dxdot_dmu: Matrix,
    /// Isoparametric `g_h` at the nodes.
    gn: Vec<f64>,
    /// `G_h` at quadrature points, element-major.
    gq: Vec<f64>,
    scale: Vector,
    dscale_dmu: Option<Matrix>,
    wd: [(f64, f64); 2],
}

/// Partial derivatives of `m` outputs with respect to the intermediate
/// variables: physical nodal state `w`, its gradient `q`, node positions `x`,
/// node velocities, and the two boundary data values.
struct Partials {
    w: Matrix,
    q: Matrix,
    x: Matrix,
    xdot: Matrix,
    wd: [Vector; 2],
}

impl Partials {
    fn zeros(m: usize, n: usize) -> Self {
        Self {
            w: Matrix::zeros(m, n),
            q: Matrix::zeros(m, n),
            x: Matrix::zeros(m, n),
            xdot: Matrix::zeros(m, n),
            wd: [Vector::zeros(m), Vector::zeros(m)],
        }
    }
}

/// A numerical flux trace and its sparse partials.
#[derive(Debug, Clone, Default)]
struct Trace {
    value: f64,
    w: Vec<(usize, f64)>,
    q: Vec<(usize, f64)>,
    x: Vec<(usize, f64)>,
    xdot: Vec<(usize, f64)>,
    wd: Option<(usize, f64)>,
}

impl Trace {
    fn scatter(&self, p: &mut Partials, row: usize, sign: f64) {
        for &(j, v) in &self.w {
            p.w[(row, j)] += sign * v;
        }
        for &(j, v) in &self.q {
            p.q[(row, j)] += sign * v;
        }
        for &(j, v) in &self.x {
            p.x[(row, j)] += sign * v;
        }
        for &(j, v) in &self.xdot {
            p.xdot[(row, j)] += sign * v;
        }
        if let Some((s, v)) = self.wd {
            p.wd[s][row] += sign * v;
        }
    }
}

/// DG semi-discretization of a viscous conservation law on a moving domain.
pub struct Dg1dSystem {
    spec: Dg1dSpec,
    mesh: Mesh1d,
    elem: ReferenceElement,
    mapping: Box<dyn DomainMapping>,
    n_params: usize,
    mass: Matrix,
    ref_nodes: Vec<f64>,
    /// Nodal `d/dX` per element (block diagonal): `g_h = det_op x`.
    det_op: Matrix,
    /// `q = grad_w w + grad_wd[0] w_D,left + grad_wd[1] w_D,right`.
    grad_w: Matrix,
    grad_wd: [Vector; 2],
    sigma: f64,
    gcl: Option<GclCache>,
}

impl std::fmt::Debug for Dg1dSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dg1dSystem").field("spec", &self.spec).field("n_params", &self.n_params).finish()
    }
}

impl Dg1dSystem {
    /// Builds the system. The tableau and grid are needed by the GCL field,
    /// which lives on the discrete time slots of the primal solve.
    pub fn new(spec: Dg1dSpec, n_params: usize, tab: &ButcherTableau, grid: &TimeGrid) -> Result<Self> {
        if spec.order == 0 {
            return Err(Error::Config("polynomial order must be at least 1".into()));
        }
        if spec.flux.nu() < 0.0 {
            return Err(Error::Config(format!("negative viscosity {}", spec.flux.nu())));
        }
        let mesh = Mesh1d::new(spec.elements, spec.domain[0], spec.domain[1])?;
        let elem = ReferenceElement::new(spec.order);
        let mapping = spec.mapping.build(grid.end())?;
        if mapping.params_needed() > n_params {
            return Err(Error::Config(format!(
                "mapping uses {} parameters but N_mu = {n_params}",
                mapping.params_needed()
            )));
        }
        for f in &spec.integrands {
            if let Integrand::PointValue { x } = f {
                mesh.locate(*x)?;
            }
        }
        let np = elem.n_nodes();
        let n = mesh.k * np;
        let jac = mesh.jacobian();
        let mut mass = Matrix::zeros(n, n);
        let mut det_op = Matrix::zeros(n, n);
        let mut grad_w = Matrix::zeros(n, n);
        let mut grad_wd = [Vector::zeros(n), Vector::zeros(n)];
        let last = np - 1;
        for e in 0..mesh.k {
            let o = e * np;
            mass.view_mut((o, o), (np, np)).copy_from(&(&elem.mass_ref * jac));
            det_op.view_mut((o, o), (np, np)).copy_from(&(&elem.dn / jac));
            grad_w.view_mut((o, o), (np, np)).copy_from(&(&elem.dn / jac));
            for i in 0..np {
                let l_first = elem.mass_inv[(i, 0)] / jac;
                let l_last = elem.mass_inv[(i, last)] / jac;
                // left trace: -(w_hat_L - w_first) L_first
                grad_w[(o + i, o)] += l_first;
                if e == 0 {
                    grad_wd[0][o + i] -= l_first;
                } else {
                    grad_w[(o + i, o - 1)] -= l_first;
                }
                // right trace: (w_hat_R - w_last) L_last, zero in the interior
                if e + 1 == mesh.k {
                    grad_wd[1][o + i] += l_last;
                    grad_w[(o + i, o + last)] -= l_last;
                }
            }
        }
        let sigma = ((spec.order + 1) * (spec.order + 1)) as f64 / mesh.h();
        let gcl = spec.gcl.then(|| GclCache { tab: tab.clone(), grid: grid.clone(), entries: Mutex::new(Vec::new()) });
        let ref_nodes = mesh.reference_nodes(&elem);
        Ok(Self { spec, mesh, elem, mapping, n_params, mass, ref_nodes, det_op, grad_w, grad_wd, sigma, gcl })
    }

    pub fn spec(&self) -> &Dg1dSpec {
        &self.spec
    }

    pub fn mesh(&self) -> &Mesh1d {
        &self.mesh
    }

    pub fn element(&self) -> &ReferenceElement {
        &self.elem
    }

    pub fn mapping(&self) -> &dyn DomainMapping {
        self.mapping.as_ref()
    }

    pub fn uses_gcl(&self) -> bool {
        self.gcl.is_some()
    }

    fn gcl_field(&self, mu: &[f64]) -> Result<Arc<(GclField, GclSensitivity)>> {
        let cache = self.gcl.as_ref().expect("GCL enabled");
        let key: Vec<u64> = mu.iter().map(|v| v.to_bits()).collect();
        if let Some((_, f)) = cache.entries.lock().expect("GCL cache lock").iter().find(|(k, _)| *k == key) {
            return Ok(f.clone());
        }
        let m = self.mapping.as_ref();
        let field = ale::gcl_integrate(m, &self.mesh, &self.elem, &cache.tab, &cache.grid, mu)?;
        let sens = ale::gcl_sensitivity(m, &self.mesh, &self.elem, &cache.tab, &cache.grid, mu)?;
        let entry = Arc::new((field, sens));
        let mut entries = cache.entries.lock().expect("GCL cache lock");
        if entries.len() >= GCL_CACHE_SIZE {
            entries.remove(0);
        }
        entries.push((key, entry.clone()));
        Ok(entry)
    }

    /// `gbar` at a time slot; `None` without GCL.
    pub fn gbar(&self, mu: &[f64], slot: TimeSlot) -> Result<Option<Vector>> {
        if self.gcl.is_none() {
            return Ok(None);
        }
        let f = self.gcl_field(mu)?;
        f.0.gbar.get(slot).cloned().map(Some).ok_or_else(|| slot_error(slot))
    }

    fn frame(&self, mu: &[f64], tp: TimePoint) -> Result<Frame> {
        if mu.len() != self.n_params {
            return Err(Error::Contract(format!("expected {} parameters, got {}", self.n_params, mu.len())));
        }
        let n = self.dim();
        let b = self.mapping.bundle_many(&self.ref_nodes, mu, tp.t)?;
        let x: Vec<f64> = b.iter().map(|b| b.x).collect();
        let xdot: Vec<f64> = b.iter().map(|b| b.velocity).collect();
        let dx_dmu = Matrix::from_fn(n, self.n_params, |j, p| b[j].dx_dmu[p]);
        let dxdot_dmu = Matrix::from_fn(n, self.n_params, |j, p| b[j].dv_dmu[p]);
        let xv = Vector::from_column_slice(&x);
        let gn: Vec<f64> = (&self.det_op * &xv).iter().copied().collect();
        let np = self.elem.n_nodes();
        let jac = self.mesh.jacobian();
        let mut gq = Vec::with_capacity(self.mesh.k * self.elem.n_quad());
        for e in 0..self.mesh.k {
            for q in 0..self.elem.n_quad() {
                let mut g = 0.0;
                for j in 0..np {
                    g += self.elem.interp_deriv[(q, j)] * x[e * np + j];
                }
                gq.push(g / jac);
            }
        }
        if let Some(bad) = gn.iter().chain(&gq).find(|g| !(**g > 0.0)) {
            return Err(Error::DegenerateMapping(format!("G_h = {bad} at t = {}", tp.t)));
        }
        let (scale, dscale_dmu) = match &self.gcl {
            None => (Vector::from_vec(gn.clone()), None),
            Some(_) => {
                let f = self.gcl_field(mu)?;
                let s = f.0.gbar.get(tp.slot).ok_or_else(|| slot_error(tp.slot))?.clone();
                let ds = f.1.dgbar_dmu.get(tp.slot).ok_or_else(|| slot_error(tp.slot))?.clone();
                if !(s.min() > 0.0) {
                    return Err(Error::DegenerateMapping(format!("gbar = {} at t = {}", s.min(), tp.t)));
                }
                (s, Some(ds))
            }
        };
        let (xl, xr) = (x[0], x[n - 1]);
        let wd = [
            (self.spec.left.eval(xl, tp.t), self.spec.left.dx(xl, tp.t)),
            (self.spec.right.eval(xr, tp.t), self.spec.right.dx(xr, tp.t)),
        ];
        Ok(Frame { x, xdot, dx_dmu, dxdot_dmu, gn, gq, scale, dscale_dmu, wd })
    }

    fn physical(&self, fr: &Frame, u: &Vector) -> Result<(Vector, Vector)> {
        if u.len() != self.dim() {
            return Err(Error::Contract(format!("state has length {}, expected {}", u.len(), self.dim())));
        }
        let w = u.component_div(&fr.scale);
        let q = &self.grad_w * &w + &self.grad_wd[0] * fr.wd[0].0 + &self.grad_wd[1] * fr.wd[1].0;
        Ok((w, q))
    }

    /// Flux trace at the interface to the right of element `e` (`e + 1 < K`) or
    /// at a domain boundary.
    fn interface_trace(&self, fr: &Frame, w: &Vector, q: &Vector, e: usize) -> Trace {
        let np = self.elem.n_nodes();
        let il = e * np + np - 1;
        let ir = il + 1;
        let nu = self.spec.flux.nu();
        let (f, dl, dr, dv) = self.spec.flux.riemann(w[il], w[ir], fr.xdot[ir]);
        let g = fr.gn[ir];
        let qh = q[ir] / g;
        let mut t = Trace {
            value: f - nu * qh,
            w: vec![(il, dl), (ir, dr)],
            q: vec![(ir, -nu / g)],
            xdot: vec![(ir, dv)],
            ..Default::default()
        };
        for j in 0..np {
            t.x.push((ir + j, nu * qh / g * self.elem.dn[(0, j)] / self.mesh.jacobian()));
        }
        t
    }

    fn boundary_trace(&self, fr: &Frame, w: &Vector, q: &Vector, side: Side) -> Trace {
        let np = self.elem.n_nodes();
        let n = self.dim();
        let nu = self.spec.flux.nu();
        let sigma = self.sigma;
        let (ib, s, local, first_node) = match side {
            Side::Left => (0, 0, 0, 0),
            Side::Right => (n - 1, 1, np - 1, n - np),
        };
        let wd = fr.wd[s].0;
        let g = fr.gn[ib];
        let (f, dl, dr, dv, qh, dqw, dqwd) = match side {
            Side::Left => {
                let (f, dl, dr, dv) = self.spec.flux.riemann(wd, w[ib], fr.xdot[ib]);
                let qh = (q[ib] + sigma * (w[ib] - wd)) / g;
                // partials of F_hat w.r.t. (w_b, w_D)
                (f, dr, dl, dv, qh, -nu * sigma / g, nu * sigma / g)
            }
            Side::Right => {
                let (f, dl, dr, dv) = self.spec.flux.riemann(w[ib], wd, fr.xdot[ib]);
                let qh = (q[ib] - sigma * (w[ib] - wd)) / g;
                (f, dl, dr, dv, qh, nu * sigma / g, -nu * sigma / g)
            }
        };
        let mut t = Trace {
            value: f - nu * qh,
            w: vec![(ib, dl + dqw)],
            q: vec![(ib, -nu / g)],
            xdot: vec![(ib, dv)],
            wd: Some((s, dr + dqwd)),
            ..Default::default()
        };
        for j in 0..np {
            t.x.push((first_node + j, nu * qh / g * self.elem.dn[(local, j)] / self.mesh.jacobian()));
        }
        t
    }

    /// Residual and, on request, its partials with respect to the intermediate
    /// variables.
    fn assemble(&self, fr: &Frame, w: &Vector, q: &Vector, derivs: bool) -> (Vector, Option<Partials>) {
        let n = self.dim();
        let np = self.elem.n_nodes();
        let nq = self.elem.n_quad();
        let flux = self.spec.flux;
        let nu = flux.nu();
        let jac = self.mesh.jacobian();
        let b = &self.elem.interp;
        let d = &self.elem.interp_deriv;
        let mut r = Vector::zeros(n);
        let mut p = derivs.then(|| Partials::zeros(n, n));
        for e in 0..self.mesh.k {
            let o = e * np;
            for k in 0..nq {
                let (mut wq, mut qq, mut vq) = (0.0, 0.0, 0.0);
                for j in 0..np {
                    wq += b[(k, j)] * w[o + j];
                    qq += b[(k, j)] * q[o + j];
                    vq += b[(k, j)] * fr.xdot[o + j];
                }
                let gq = fr.gq[e * nq + k];
                let fl = flux.inviscid(wq) - vq * wq - nu * qq / gq;
                let wk = self.elem.quad_weights[k];
                for i in 0..np {
                    r[o + i] += wk * d[(k, i)] * fl;
                }
                if let Some(p) = p.as_mut() {
                    let dfw = flux.inviscid_deriv(wq) - vq;
                    let dfq = -nu / gq;
                    let dfv = -wq;
                    let dfg = nu * qq / (gq * gq);
                    for i in 0..np {
                        let c = wk * d[(k, i)];
                        for j in 0..np {
                            p.w[(o + i, o + j)] += c * dfw * b[(k, j)];
                            p.q[(o + i, o + j)] += c * dfq * b[(k, j)];
                            p.xdot[(o + i, o + j)] += c * dfv * b[(k, j)];
                            p.x[(o + i, o + j)] += c * dfg * d[(k, j)] / jac;
                        }
                    }
                }
            }
        }
        for e in 0..self.mesh.k - 1 {
            let t = self.interface_trace(fr, w, q, e);
            let il = e * np + np - 1;
            r[il] -= t.value;
            r[il + 1] += t.value;
            if let Some(p) = p.as_mut() {
                t.scatter(p, il, -1.0);
                t.scatter(p, il + 1, 1.0);
            }
        }
        let tl = self.boundary_trace(fr, w, q, Side::Left);
        let tr = self.boundary_trace(fr, w, q, Side::Right);
        r[0] += tl.value;
        r[n - 1] -= tr.value;
        if let Some(p) = p.as_mut() {
            tl.scatter(p, 0, 1.0);
            tr.scatter(p, n - 1, -1.0);
        }
        (r, p)
    }

    /// Chains partials with respect to `(w, q, x, xdot, w_D)` into the state
    /// Jacobian and, when requested, the total parameter Jacobian.
    fn reduce(&self, fr: &Frame, w: &Vector, p: &Partials, want_param: bool) -> (Matrix, Option<Matrix>) {
        let n = self.dim();
        let mut dw = &p.w + &p.q * &self.grad_w;
        let dwd: Vec<Vector> = (0..2).map(|s| &p.wd[s] + &p.q * &self.grad_wd[s]).collect();
        let mut du = dw.clone();
        for j in 0..n {
            du.column_mut(j).scale_mut(1.0 / fr.scale[j]);
        }
        if !want_param {
            return (du, None);
        }
        let mut dx = p.x.clone();
        dx.column_mut(0).axpy(fr.wd[0].1, &dwd[0], 1.0);
        dx.column_mut(n - 1).axpy(fr.wd[1].1, &dwd[1], 1.0);
        // w = U / s: dw/ds = -w / s
        for j in 0..n {
            dw.column_mut(j).scale_mut(-w[j] / fr.scale[j]);
        }
        let mut dmu = match &fr.dscale_dmu {
            None => {
                dx += &dw * &self.det_op;
                Matrix::zeros(dx.nrows(), self.n_params)
            }
            Some(ds) => &dw * ds,
        };
        dmu += &dx * &fr.dx_dmu + &p.xdot * &fr.dxdot_dmu;
        (du, Some(dmu))
    }

    fn integrand_partials(&self, which: usize, fr: &Frame, w: &Vector, q: &Vector, derivs: bool) -> Result<(f64, Option<Partials>)> {
        let n = self.dim();
        let integrand = *self
            .spec
            .integrands
            .get(which)
            .ok_or_else(|| Error::Contract(format!("no integrand {which}")))?;
        let np = self.elem.n_nodes();
        let mut p = derivs.then(|| Partials::zeros(1, n));
        let value = match integrand {
            Integrand::BoundaryWork { side } | Integrand::BoundaryImpulse { side } => {
                let t = self.boundary_trace(fr, w, q, side);
                let ib = match side {
                    Side::Left => 0,
                    Side::Right => n - 1,
                };
                if let Integrand::BoundaryWork { .. } = integrand {
                    let v = fr.xdot[ib];
                    if let Some(p) = p.as_mut() {
                        t.scatter(p, 0, v);
                        p.xdot[(0, ib)] += t.value;
                    }
                    v * t.value
                } else {
                    if let Some(p) = p.as_mut() {
                        t.scatter(p, 0, 1.0);
                    }
                    t.value
                }
            }
            Integrand::DomainEnergy => {
                let nq = self.elem.n_quad();
                let jac = self.mesh.jacobian();
                let b = &self.elem.interp;
                let d = &self.elem.interp_deriv;
                let mut f = 0.0;
                for e in 0..self.mesh.k {
                    let o = e * np;
                    for k in 0..nq {
                        let mut wq = 0.0;
                        for j in 0..np {
                            wq += b[(k, j)] * w[o + j];
                        }
                        let gq = fr.gq[e * nq + k];
                        let wk = self.elem.quad_weights[k];
                        f += wk * jac * wq * wq * gq;
                        if let Some(p) = p.as_mut() {
                            for j in 0..np {
                                p.w[(0, o + j)] += 2.0 * wk * jac * wq * gq * b[(k, j)];
                                p.x[(0, o + j)] += wk * wq * wq * d[(k, j)];
                            }
                        }
                    }
                }
                f
            }
            Integrand::PointValue { x } => {
                let (e, r) = self.mesh.locate(x)?;
                let (l, _) = lagrange(&self.elem.nodes, r);
                let mut f = 0.0;
                for j in 0..np {
                    f += l[j] * w[e * np + j];
                    if let Some(p) = p.as_mut() {
                        p.w[(0, e * np + j)] += l[j];
                    }
                }
                f
            }
        };
        Ok((value, p))
    }

    fn prepare(&self, u: &Vector, mu: &[f64], tp: TimePoint) -> Result<(Frame, Vector, Vector)> {
        let fr = self.frame(mu, tp)?;
        let (w, q) = self.physical(&fr, u)?;
        Ok((fr, w, q))
    }

    /// Physical node positions and physical state `u` at the nodes.
    pub fn snapshot(&self, u: &Vector, mu: &[f64], tp: TimePoint) -> Result<(Vec<f64>, Vec<f64>)> {
        let (fr, w, _) = self.prepare(u, mu, tp)?;
        Ok((fr.x, w.iter().copied().collect()))
    }

    /// `U_X` for a physical profile at time `tp`.
    pub fn project(&self, profile: &Profile, mu: &[f64], tp: TimePoint) -> Result<Vector> {
        let fr = self.frame(mu, tp)?;
        Ok(Vector::from_fn(self.dim(), |j, _| fr.scale[j] * profile.eval(fr.x[j], tp.t)))
    }

    /// `L2` error of the physical state against `exact(x, t)` over the deformed
    /// domain, using the element quadrature.
    pub fn l2_error<F: Fn(f64, f64) -> f64>(&self, u: &Vector, mu: &[f64], tp: TimePoint, exact: F) -> Result<f64> {
        let (fr, w, _) = self.prepare(u, mu, tp)?;
        let np = self.elem.n_nodes();
        let nq = self.elem.n_quad();
        let b = &self.elem.interp;
        let mut sum = 0.0;
        for e in 0..self.mesh.k {
            for k in 0..nq {
                let (mut wq, mut xq) = (0.0, 0.0);
                for j in 0..np {
                    wq += b[(k, j)] * w[e * np + j];
                    xq += b[(k, j)] * fr.x[e * np + j];
                }
                let err = wq - exact(xq, tp.t);
                sum += self.elem.quad_weights[k] * self.mesh.jacobian() * fr.gq[e * nq + k] * err * err;
            }
        }
        Ok(sum.sqrt())
    }

    /// Max deviation of the physical state from a constant.
    pub fn freestream_defect(&self, u: &Vector, mu: &[f64], tp: TimePoint, value: f64) -> Result<f64> {
        let (_, w, _) = self.prepare(u, mu, tp)?;
        Ok(w.iter().fold(0.0_f64, |m, v| m.max((v - value).abs())))
    }

    /// Sum of the residual over all nodes: the net boundary flux
    /// `F_hat_left - F_hat_right`.
    pub fn boundary_flux_balance(&self, u: &Vector, mu: &[f64], tp: TimePoint) -> Result<(f64, f64)> {
        let (fr, w, q) = self.prepare(u, mu, tp)?;
        let (r, _) = self.assemble(&fr, &w, &q, false);
        let tl = self.boundary_trace(&fr, &w, &q, Side::Left);
        let tr = self.boundary_trace(&fr, &w, &q, Side::Right);
        Ok((r.sum(), tl.value - tr.value))
    }

    fn steady_initial(&self, guess: &Profile, mu: &[f64]) -> Result<InitialCondition> {
        let tp = TimePoint::grid(self.gcl.as_ref().map_or(0.0, |c| c.grid.t(0)), 0);
        let u0 = self.project(guess, mu, tp)?;
        let opts = NewtonOptions { tol: 1e-12, max_iter: 50, reuse_jacobian: false };
        let out = newton(u0, &opts, |u, need| {
            if need {
                let (r, j) = self.residual_and_jac(u, mu, tp)?;
                Ok((r, Some(j)))
            } else {
                Ok((self.residual(u, mu, tp)?, None))
            }
        });
        let u = match out {
            Ok(o) => o.x,
            Err(NewtonFailure::Eval(e, _)) => return Err(e),
            Err(f) => {
                return Err(Error::Contract(format!("steady initial state did not converge: {:?}", f.history())));
            }
        };
        let r = self.residual(&u, mu, tp)?;
        let (fr, w, q) = self.prepare(&u, mu, tp)?;
        let (_, p) = self.assemble(&fr, &w, &q, true);
        let (du, dmu) = self.reduce(&fr, &w, &p.expect("partials"), true);
        InitialCondition::steady(u, &r, du, dmu.expect("parameter partials"), 1e-10)
    }
}

fn slot_error(slot: TimeSlot) -> Error {
    Error::Contract(format!("the GCL field is only defined on grid points and stages of its schedule (got {slot:?})"))
}

impl SemiDiscreteSystem for Dg1dSystem {
    fn dim(&self) -> usize {
        self.mesh.k * self.elem.n_nodes()
    }

    fn n_params(&self) -> usize {
        self.n_params
    }

    fn mass(&self) -> &Matrix {
        &self.mass
    }

    fn residual(&self, u: &Vector, mu: &[f64], tp: TimePoint) -> Result<Vector> {
        let (fr, w, q) = self.prepare(u, mu, tp)?;
        Ok(self.assemble(&fr, &w, &q, false).0)
    }

    fn jac_state(&self, u: &Vector, mu: &[f64], tp: TimePoint) -> Result<Matrix> {
        Ok(self.residual_and_jac(u, mu, tp)?.1)
    }

    fn residual_and_jac(&self, u: &Vector, mu: &[f64], tp: TimePoint) -> Result<(Vector, Matrix)> {
        let (fr, w, q) = self.prepare(u, mu, tp)?;
        let (r, p) = self.assemble(&fr, &w, &q, true);
        let (du, _) = self.reduce(&fr, &w, &p.expect("partials"), false);
        Ok((r, du))
    }

    fn jac_param(&self, u: &Vector, mu: &[f64], tp: TimePoint) -> Result<Matrix> {
        let (fr, w, q) = self.prepare(u, mu, tp)?;
        let (_, p) = self.assemble(&fr, &w, &q, true);
        Ok(self.reduce(&fr, &w, &p.expect("partials"), true).1.expect("parameter partials"))
    }

    fn qoi_names(&self) -> Vec<String> {
        self.spec.integrands.iter().map(Integrand::name).collect()
    }

    fn qoi(&self, which: usize, u: &Vector, mu: &[f64], tp: TimePoint) -> Result<f64> {
        let (fr, w, q) = self.prepare(u, mu, tp)?;
        Ok(self.integrand_partials(which, &fr, &w, &q, false)?.0)
    }

    fn qoi_jac_state(&self, which: usize, u: &Vector, mu: &[f64], tp: TimePoint) -> Result<Vector> {
        let (fr, w, q) = self.prepare(u, mu, tp)?;
        let (_, p) = self.integrand_partials(which, &fr, &w, &q, true)?;
        let (du, _) = self.reduce(&fr, &w, &p.expect("partials"), false);
        Ok(du.row(0).transpose())
    }

    fn qoi_jac_param(&self, which: usize, u: &Vector, mu: &[f64], tp: TimePoint) -> Result<Vector> {
        let (fr, w, q) = self.prepare(u, mu, tp)?;
        let (_, p) = self.integrand_partials(which, &fr, &w, &q, true)?;
        let (_, dmu) = self.reduce(&fr, &w, &p.expect("partials"), true);
        Ok(dmu.expect("parameter partials").row(0).transpose())
    }

    fn initial(&self, mu: &[f64]) -> Result<InitialCondition> {
        match self.spec.initial {
            InitialSpec::Profile { profile } => {
                let t0 = self.gcl.as_ref().map_or(0.0, |c| c.grid.t(0));
                let fr = self.frame(mu, TimePoint::grid(t0, 0))?;
                let n = self.dim();
                let value = Vector::from_fn(n, |j, _| fr.scale[j] * profile.eval(fr.x[j], t0));
                // gbar(0) = g_h(0) in both formulations
                let ds = &self.det_op * &fr.dx_dmu;
                let du0 = Matrix::from_fn(n, self.n_params, |j, p| {
                    ds[(j, p)] * profile.eval(fr.x[j], t0) + fr.scale[j] * profile.dx(fr.x[j], t0) * fr.dx_dmu[(j, p)]
                });
                Ok(InitialCondition::analytic(value, du0))
            }
            InitialSpec::Steady { guess } => self.steady_initial(&guess, mu),
        }
    }
}
