//! Time-dependent domain mappings `x = G(X, mu, t)`, the ALE state and flux
//! transformations, and the auxiliary GCL field `gbar` with its parameter
//! sensitivity.
//!
//! The model problem is one dimensional, so the deformation gradient `G` and its
//! determinant `g` coincide and the rotation of the rigid motion is the identity.

use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::dg1d::{Mesh1d, ReferenceElement};
use crate::error::{Error, Result};
use crate::params::{Signal, SignalSample, SignalSpec};
use crate::primal::{stage_state, state_update, TimeGrid};
use crate::system::{Matrix, TimeSlot, Vector};
use crate::tableau::ButcherTableau;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlendKind {
    Cubic,
    Quintic,
}

/// Blending polynomial `r(s)` on `[0, 1]` and its derivative.
fn blend_poly(s: f64, kind: BlendKind) -> (f64, f64) {
    match kind {
        BlendKind::Cubic => (3.0 * s * s - 2.0 * s * s * s, 6.0 * s - 6.0 * s * s),
        BlendKind::Quintic => {
            let s2 = s * s;
            let s3 = s2 * s;
            (10.0 * s3 - 15.0 * s3 * s + 6.0 * s3 * s2, 30.0 * s2 - 60.0 * s3 + 30.0 * s2 * s2)
        }
    }
}

/// Blend `b(d)` and `db/dd`: 0 for `d < 0`, 1 for `d > r1`, `r(d / r1)` between.
pub fn blend_with_derivative(d: f64, r1: f64, kind: BlendKind) -> (f64, f64) {
    if d <= 0.0 {
        (0.0, 0.0)
    } else if d >= r1 {
        (1.0, 0.0)
    } else {
        let (r, dr) = blend_poly(d / r1, kind);
        (r, dr / r1)
    }
}

pub fn blend(d: f64, r1: f64, kind: BlendKind) -> f64 {
    blend_with_derivative(d, r1, kind).0
}

/// Everything the discretization needs from a mapping at one reference point.
#[derive(Debug, Clone, PartialEq)]
pub struct MapBundle {
    pub x: f64,
    /// Deformation gradient `G = dx/dX`.
    pub grad: f64,
    /// `g = det G`.
    pub det: f64,
    /// Mesh velocity `v_G = dx/dt`.
    pub velocity: f64,
    pub dx_dmu: Vec<f64>,
    pub dv_dmu: Vec<f64>,
}

pub trait DomainMapping: Debug + Send + Sync {
    /// Number of parameters the mapping reads (it may be shorter than `N_mu`).
    fn params_needed(&self) -> usize;

    fn bundle(&self, x_ref: f64, mu: &[f64], t: f64) -> Result<MapBundle>;

    /// Bundles at many points; implementations may share per-time work.
    fn bundle_many(&self, x_ref: &[f64], mu: &[f64], t: f64) -> Result<Vec<MapBundle>> {
        x_ref.iter().map(|&x| self.bundle(x, mu, t)).collect()
    }

    fn map(&self, x_ref: f64, mu: &[f64], t: f64) -> Result<f64> {
        Ok(self.bundle(x_ref, mu, t)?.x)
    }

    fn velocity(&self, x_ref: f64, mu: &[f64], t: f64) -> Result<f64> {
        Ok(self.bundle(x_ref, mu, t)?.velocity)
    }
}

/// `map_bundle` with the diffeomorphism check `g > 0`.
pub fn map_bundle(m: &dyn DomainMapping, x_ref: f64, mu: &[f64], t: f64) -> Result<MapBundle> {
    let b = m.bundle(x_ref, mu, t)?;
    if !(b.det > 0.0) {
        return Err(Error::DegenerateMapping(format!("g = {} at X = {x_ref}, t = {t}", b.det)));
    }
    Ok(b)
}

/// Identity mapping.
#[derive(Debug, Clone, Copy, Default)]
pub struct StaticMapping;

impl DomainMapping for StaticMapping {
    fn params_needed(&self) -> usize {
        0
    }

    fn bundle(&self, x_ref: f64, mu: &[f64], _: f64) -> Result<MapBundle> {
        let n = mu.len();
        Ok(MapBundle { x: x_ref, grad: 1.0, det: 1.0, velocity: 0.0, dx_dmu: vec![0.0; n], dv_dmu: vec![0.0; n] })
    }
}

/// Rigid translation `v(t)` plus dilation `c(t)` about `X0`, blended to the
/// identity over the annulus `R0 <= |X - X0| <= R0 + R1`:
/// `x = (1 - b(d)) X' + b(d) X` with `X' = X + v + c (X - X0)` and
/// `d = |X - X0| - R0`.
#[derive(Debug, Clone)]
pub struct BlendedRigidMotion {
    pub center: f64,
    pub r0: f64,
    pub r1: f64,
    pub kind: BlendKind,
    pub translation: Signal,
    pub dilation: Signal,
}

impl BlendedRigidMotion {
    fn apply(&self, x_ref: f64, v: &SignalSample, c: &SignalSample) -> MapBundle {
        let rel = x_ref - self.center;
        let d = rel.abs() - self.r0;
        let (b, db) = blend_with_derivative(d, self.r1, self.kind);
        let w = 1.0 - b;
        let disp = v.value + c.value * rel;
        let sign = if rel >= 0.0 { 1.0 } else { -1.0 };
        let grad = 1.0 + w * c.value - db * sign * disp;
        let dx_dmu = v.d_value.iter().zip(&c.d_value).map(|(dv, dc)| w * (dv + dc * rel)).collect();
        let dv_dmu = v.d_rate.iter().zip(&c.d_rate).map(|(dv, dc)| w * (dv + dc * rel)).collect();
        MapBundle {
            x: x_ref + w * disp,
            grad,
            det: grad,
            velocity: w * (v.rate + c.rate * rel),
            dx_dmu,
            dv_dmu,
        }
    }
}

impl DomainMapping for BlendedRigidMotion {
    fn params_needed(&self) -> usize {
        self.translation.params_needed().max(self.dilation.params_needed())
    }

    fn bundle(&self, x_ref: f64, mu: &[f64], t: f64) -> Result<MapBundle> {
        let v = self.translation.eval(t, mu)?;
        let c = self.dilation.eval(t, mu)?;
        Ok(self.apply(x_ref, &v, &c))
    }

    fn bundle_many(&self, x_ref: &[f64], mu: &[f64], t: f64) -> Result<Vec<MapBundle>> {
        let v = self.translation.eval(t, mu)?;
        let c = self.dilation.eval(t, mu)?;
        Ok(x_ref.iter().map(|&x| self.apply(x, &v, &c)).collect())
    }
}

/// Serializable mapping description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MappingSpec {
    Static,
    BlendedRigid {
        center: f64,
        r0: f64,
        r1: f64,
        blend: BlendKind,
        translation: SignalSpec,
        #[serde(default = "zero_signal")]
        dilation: SignalSpec,
    },
}

fn zero_signal() -> SignalSpec {
    SignalSpec::Zero
}

impl MappingSpec {
    pub fn build(&self, horizon: f64) -> Result<Box<dyn DomainMapping>> {
        Ok(match self {
            MappingSpec::Static => Box::new(StaticMapping),
            MappingSpec::BlendedRigid { center, r0, r1, blend, translation, dilation } => {
                if !(*r0 > 0.0 && *r1 > 0.0) {
                    return Err(Error::Config(format!("blend radii must be positive (R0 = {r0}, R1 = {r1})")));
                }
                Box::new(BlendedRigidMotion {
                    center: *center,
                    r0: *r0,
                    r1: *r1,
                    kind: *blend,
                    translation: Signal::build(translation, horizon)?,
                    dilation: Signal::build(dilation, horizon)?,
                })
            }
        })
    }
}

/// `U_X = g U` (or `gbar U`).
pub fn transform_state(u: f64, scale: f64) -> Result<f64> {
    if !(scale > 0.0) {
        return Err(Error::DegenerateMapping(format!("nonpositive scaling {scale}")));
    }
    Ok(scale * u)
}

/// `U = U_X / g`.
pub fn inverse_transform_state(u_x: f64, scale: f64) -> Result<f64> {
    if !(scale > 0.0) {
        return Err(Error::DegenerateMapping(format!("nonpositive scaling {scale}")));
    }
    Ok(u_x / scale)
}

/// Inputs of the 1D flux transformation at one point.
#[derive(Debug, Clone, Copy)]
pub struct FluxPoint {
    /// Transformed state `U_X` (or `U_Xbar`).
    pub state: f64,
    /// Its reference gradient.
    pub state_grad: f64,
    /// Deformation gradient `G`.
    pub grad: f64,
    /// `g = det G`.
    pub det: f64,
    pub velocity: f64,
    /// `gbar` and its reference gradient when the GCL formulation is used.
    pub gcl: Option<(f64, f64)>,
    /// Reference gradient of `g` (needed without GCL).
    pub det_grad: f64,
}

/// Transformed inviscid and viscous fluxes in 1D.
///
/// Without GCL: `F_X^inv = g F(U_X/g) / G - U_X v / G` and
/// `F_X^vis = g F^vis(U_X/g, g^-1 [dU_X/dX - U_X/g dg/dX] / G) / G`.
/// With GCL the state scaling uses `gbar`, and the mesh-motion term is
/// `(g / gbar) U_Xbar v / G`, the form under which a constant state is preserved
/// exactly when `gbar` obeys its own conservation law.
pub fn transform_fluxes<Fi, Fv>(p: &FluxPoint, inviscid: Fi, viscous: Fv) -> Result<(f64, f64)>
where
    Fi: Fn(f64) -> f64,
    Fv: Fn(f64, f64) -> f64,
{
    if !(p.det > 0.0) || p.grad == 0.0 {
        return Err(Error::DegenerateMapping(format!("g = {}, G = {}", p.det, p.grad)));
    }
    let (s, ds) = p.gcl.unwrap_or((p.det, p.det_grad));
    let u = inverse_transform_state(p.state, s)?;
    let du = (p.state_grad - p.state * ds / s) / s / p.grad;
    let inv = p.det * inviscid(u) / p.grad - (p.det / s) * p.state * p.velocity / p.grad;
    let vis = p.det * viscous(u, du) / p.grad;
    Ok((inv, vis))
}

/// Values indexed by discrete time slot: grid points and stages.
#[derive(Debug, Clone)]
pub struct SlotSeries<T> {
    pub grid: Vec<T>,
    /// `stages[n - 1][i]`.
    pub stages: Vec<Vec<T>>,
}

impl<T> SlotSeries<T> {
    pub fn get(&self, slot: TimeSlot) -> Option<&T> {
        match slot {
            TimeSlot::Grid(n) => self.grid.get(n),
            TimeSlot::Stage { step, stage } => self.stages.get(step.wrapping_sub(1)).and_then(|s| s.get(stage)),
            TimeSlot::Free => None,
        }
    }
}

/// Nodal `gbar` at every grid point and stage.
#[derive(Debug, Clone)]
pub struct GclField {
    pub gbar: SlotSeries<Vector>,
}

/// Nodal `dgbar/dmu` at every grid point and stage.
#[derive(Debug, Clone)]
pub struct GclSensitivity {
    pub dgbar_dmu: SlotSeries<Matrix>,
}

/// Nodal isoparametric determinant `g_h = d x_h / dX` at the element nodes.
pub fn nodal_det(mesh: &Mesh1d, elem: &ReferenceElement, x: &[f64]) -> Vector {
    let np = elem.n_nodes();
    let mut g = Vector::zeros(mesh.k * np);
    for e in 0..mesh.k {
        for i in 0..np {
            let mut s = 0.0;
            for j in 0..np {
                s += elem.dn[(i, j)] * x[e * np + j];
            }
            g[e * np + i] = s / mesh.jacobian();
        }
    }
    g
}

/// Element-local right-hand side of `d gbar/dt = d v_G / dX` for nodal mesh
/// velocities `vel` (any number of columns).
fn gcl_rhs(mesh: &Mesh1d, elem: &ReferenceElement, vel: &Matrix) -> Matrix {
    let np = elem.n_nodes();
    let mut out = Matrix::zeros(vel.nrows(), vel.ncols());
    for e in 0..mesh.k {
        let block = vel.rows(e * np, np);
        let r = &elem.gcl_operator * block;
        let sol = &elem.mass_inv * r / mesh.jacobian();
        out.rows_mut(e * np, np).copy_from(&sol);
    }
    out
}

/// Integrates `gbar` (one column) or its sensitivities (one column per
/// parameter) with the primal DIRK scheme; the right-hand side does not depend
/// on `gbar`, so every stage is a mass solve.
fn gcl_series<F>(
    tab: &ButcherTableau,
    grid: &TimeGrid,
    initial: Matrix,
    mut rhs_at: F,
) -> Result<SlotSeries<Matrix>>
where
    F: FnMut(f64) -> Result<Matrix>,
{
    let s = tab.stages();
    let cols = initial.ncols();
    let mut series = SlotSeries { grid: vec![initial], stages: Vec::with_capacity(grid.n_steps()) };
    for n in 1..=grid.n_steps() {
        let dt = grid.dt(n);
        let prev = series.grid[n - 1].clone();
        let prev_flat = Vector::from_column_slice(prev.as_slice());
        let mut ks: Vec<Vector> = Vec::with_capacity(s);
        for i in 0..s {
            let k = rhs_at(grid.stage_time(tab, n, i))? * dt;
            ks.push(Vector::from_column_slice(k.as_slice()));
        }
        let rows = prev.nrows();
        let stage_vals = (0..s)
            .map(|i| Matrix::from_column_slice(rows, cols, stage_state(tab, &prev_flat, &ks, i).as_slice()))
            .collect();
        series.stages.push(stage_vals);
        let next = state_update(tab, &prev_flat, &ks);
        series.grid.push(Matrix::from_column_slice(rows, cols, next.as_slice()));
    }
    Ok(series)
}

fn nodes_bundle(mapping: &dyn DomainMapping, mesh: &Mesh1d, elem: &ReferenceElement, mu: &[f64], t: f64) -> Result<Vec<MapBundle>> {
    mapping.bundle_many(&mesh.reference_nodes(elem), mu, t)
}

/// `gbar` at every grid point and stage, initialized to the isoparametric `g_h(0)`.
pub fn gcl_integrate(
    mapping: &dyn DomainMapping,
    mesh: &Mesh1d,
    elem: &ReferenceElement,
    tab: &ButcherTableau,
    grid: &TimeGrid,
    mu: &[f64],
) -> Result<GclField> {
    let n = mesh.k * elem.n_nodes();
    let b0 = nodes_bundle(mapping, mesh, elem, mu, grid.t(0))?;
    let x0: Vec<f64> = b0.iter().map(|b| b.x).collect();
    let g0 = nodal_det(mesh, elem, &x0);
    let series = gcl_series(tab, grid, Matrix::from_column_slice(n, 1, g0.as_slice()), |t| {
        let b = nodes_bundle(mapping, mesh, elem, mu, t)?;
        let v = Matrix::from_iterator(n, 1, b.iter().map(|b| b.velocity));
        Ok(gcl_rhs(mesh, elem, &v))
    })?;
    let to_vec = |m: Matrix| Vector::from_column_slice(m.as_slice());
    let gbar = SlotSeries {
        grid: series.grid.into_iter().map(to_vec).collect(),
        stages: series.stages.into_iter().map(|st| st.into_iter().map(to_vec).collect()).collect(),
    };
    for (n, g) in gbar.grid.iter().enumerate() {
        if !(g.min() > 0.0) {
            return Err(Error::DegenerateMapping(format!("gbar nonpositive at t_{n}")));
        }
    }
    Ok(GclField { gbar })
}

/// `dgbar/dmu` at every grid point and stage.
pub fn gcl_sensitivity(
    mapping: &dyn DomainMapping,
    mesh: &Mesh1d,
    elem: &ReferenceElement,
    tab: &ButcherTableau,
    grid: &TimeGrid,
    mu: &[f64],
) -> Result<GclSensitivity> {
    let n = mesh.k * elem.n_nodes();
    let np = mu.len();
    let b0 = nodes_bundle(mapping, mesh, elem, mu, grid.t(0))?;
    let mut init = Matrix::zeros(n, np);
    for p in 0..np {
        let dx: Vec<f64> = b0.iter().map(|b| b.dx_dmu[p]).collect();
        init.set_column(p, &nodal_det(mesh, elem, &dx));
    }
    let dgbar_dmu = gcl_series(tab, grid, init, |t| {
        let b = nodes_bundle(mapping, mesh, elem, mu, t)?;
        let dv = Matrix::from_fn(n, np, |j, p| b[j].dv_dmu[p]);
        Ok(gcl_rhs(mesh, elem, &dv))
    })?;
    Ok(GclSensitivity { dgbar_dmu })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tableau::TableauKind;

    fn translation_only(param: usize, r0: f64, r1: f64, kind: BlendKind) -> BlendedRigidMotion {
        BlendedRigidMotion {
            center: 0.0,
            r0,
            r1,
            kind,
            translation: Signal::Linear { param },
            dilation: Signal::Zero,
        }
    }

    #[test]
    fn blend_reference_values() {
        assert_eq!(blend(-0.3, 0.8, BlendKind::Cubic), 0.0);
        assert_eq!(blend(0.8 + 0.3, 0.8, BlendKind::Quintic), 1.0);
        assert!((blend(0.4, 0.8, BlendKind::Cubic) - 0.5).abs() < 1e-15);
        assert!((blend(0.4, 0.8, BlendKind::Quintic) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn blend_derivative_matches_fd_and_endpoints_are_smooth() {
        for kind in [BlendKind::Cubic, BlendKind::Quintic] {
            for d in [0.05, 0.3, 0.61, 0.77] {
                let h = 1e-6;
                let fd = (blend(d + h, 0.8, kind) - blend(d - h, 0.8, kind)) / (2.0 * h);
                assert!((fd - blend_with_derivative(d, 0.8, kind).1).abs() < 1e-8);
            }
            assert!(blend_with_derivative(1e-12, 0.8, kind).1.abs() < 1e-9);
            assert!(blend_with_derivative(0.8 - 1e-12, 0.8, kind).1.abs() < 1e-9);
        }
    }

    #[test]
    fn rigid_translation_inside_body() {
        let m = translation_only(0, 0.5, 0.5, BlendKind::Cubic);
        let b = map_bundle(&m, 0.2, &[0.7], 2.0).unwrap();
        assert!((b.x - (0.2 + 1.4)).abs() < 1e-15);
        assert_eq!((b.grad, b.det, b.velocity), (1.0, 1.0, 0.7));
        assert_eq!(b.dx_dmu, vec![2.0]);
        assert_eq!(b.dv_dmu, vec![1.0]);
    }

    #[test]
    fn far_field_is_identity() {
        let m = translation_only(0, 0.5, 0.5, BlendKind::Quintic);
        let b = map_bundle(&m, 1.3, &[0.7], 2.0).unwrap();
        assert_eq!(b.x, 1.3);
        assert_eq!((b.velocity, b.dx_dmu[0], b.dv_dmu[0]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn half_blend_moves_half_way() {
        let m = translation_only(0, 0.5, 0.4, BlendKind::Cubic);
        let b = m.bundle(0.7, &[0.3], 1.5).unwrap();
        assert!((b.x - (0.7 + 0.5 * 0.3 * 1.5)).abs() < 1e-15);
    }

    #[test]
    fn transform_examples() {
        assert_eq!(transform_state(3.0, 2.0).unwrap(), 6.0);
        assert_eq!(transform_state(3.0, 1.0).unwrap(), 3.0);
        assert!(transform_state(1.0, 0.0).is_err());
        let u = 0.37;
        assert!((inverse_transform_state(transform_state(u, 1.9).unwrap(), 1.9).unwrap() - u).abs() < 1e-15);

        let burgers = |u: f64| 0.5 * u * u;
        let none = |_: f64, _: f64| 0.0;
        let mut p = FluxPoint { state: 2.0, state_grad: 0.0, grad: 2.0, det: 2.0, velocity: 0.0, gcl: None, det_grad: 0.0 };
        assert_eq!(transform_fluxes(&p, burgers, none).unwrap().0, 0.5);
        p.velocity = 3.0;
        assert_eq!(transform_fluxes(&p, burgers, none).unwrap().0, -2.5);
        let stat = FluxPoint { state: 0.8, state_grad: 0.3, grad: 1.0, det: 1.0, velocity: 0.0, gcl: None, det_grad: 0.0 };
        let (inv, vis) = transform_fluxes(&stat, burgers, |_, du| 0.1 * du).unwrap();
        assert_eq!((inv, vis), (0.32000000000000006, 0.03));
    }

    #[test]
    fn uniform_dilation_gcl_is_exact() {
        // x = (1 + mu t) X on one element: gbar = 1 + mu t, dgbar/dmu = t
        let m = BlendedRigidMotion {
            center: 0.0,
            r0: 10.0,
            r1: 1.0,
            kind: BlendKind::Cubic,
            translation: Signal::Zero,
            dilation: Signal::Linear { param: 0 },
        };
        let mesh = Mesh1d::new(1, 0.0, 1.0).unwrap();
        let elem = ReferenceElement::new(2);
        let grid = TimeGrid::uniform(1.0, 5).unwrap();
        let tab = ButcherTableau::new(TableauKind::Dirk3);
        let mu = [0.4];
        let f = gcl_integrate(&m, &mesh, &elem, &tab, &grid, &mu).unwrap();
        let s = gcl_sensitivity(&m, &mesh, &elem, &tab, &grid, &mu).unwrap();
        for n in 0..=5 {
            let t = grid.t(n);
            for v in f.gbar.grid[n].iter() {
                assert!((v - (1.0 + 0.4 * t)).abs() < 1e-13);
            }
            for v in s.dgbar_dmu.grid[n].iter() {
                assert!((v - t).abs() < 1e-13);
            }
        }
        let st = f.gbar.get(TimeSlot::Stage { step: 2, stage: 1 }).unwrap();
        let t = grid.stage_time(&tab, 2, 1);
        assert!((st[0] - (1.0 + 0.4 * t)).abs() < 1e-13);
    }

    #[test]
    fn static_mesh_gbar_is_one() {
        let mesh = Mesh1d::new(3, 0.0, 2.0).unwrap();
        let elem = ReferenceElement::new(3);
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let tab = ButcherTableau::new(TableauKind::Dirk2);
        let f = gcl_integrate(&StaticMapping, &mesh, &elem, &tab, &grid, &[]).unwrap();
        for g in &f.gbar.grid {
            assert!(g.iter().all(|v| (v - 1.0).abs() < 1e-14));
        }
    }
}
