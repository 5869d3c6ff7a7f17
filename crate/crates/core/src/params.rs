//! Time signals driving the domain motion: clamped and mirrored-periodic cubic
//! splines whose knot values are design parameters, plus a few closed-form
//! signals.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value and time derivative of a signal together with their parameter
/// derivatives (dense, one entry per parameter).
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSample {
    pub value: f64,
    pub rate: f64,
    pub d_value: Vec<f64>,
    pub d_rate: Vec<f64>,
}

impl SignalSample {
    pub fn zero(n_params: usize) -> Self {
        Self { value: 0.0, rate: 0.0, d_value: vec![0.0; n_params], d_rate: vec![0.0; n_params] }
    }
}

/// Cubic spline on uniform knots expressed as a linear map of its inputs.
///
/// Inputs are the knot values followed, for clamped splines, by the two end
/// slopes. The second-derivative moments are precomputed as a dense matrix
/// acting on the inputs, so evaluation returns weights rather than numbers.
#[derive(Debug, Clone)]
struct SplineBasis {
    h: f64,
    n_intervals: usize,
    periodic: bool,
    n_inputs: usize,
    /// `moments[(j, k)]`: second derivative at knot `j` per unit of input `k`.
    moments: DMatrix<f64>,
}

impl SplineBasis {
    /// Clamped spline through `n_intervals + 1` knots on `[0, span]`; inputs are
    /// `y_0 .. y_m, slope_0, slope_m`.
    fn clamped(span: f64, n_intervals: usize) -> Self {
        let m = n_intervals;
        let h = span / m as f64;
        let n_inputs = m + 3;
        let mut a = DMatrix::zeros(m + 1, m + 1);
        let mut rhs = DMatrix::zeros(m + 1, n_inputs);
        let (d0, dm) = (m + 1, m + 2);
        a[(0, 0)] = 2.0;
        a[(0, 1)] = 1.0;
        rhs[(0, 1)] = 6.0 / (h * h);
        rhs[(0, 0)] = -6.0 / (h * h);
        rhs[(0, d0)] = -6.0 / h;
        for j in 1..m {
            a[(j, j - 1)] = 1.0;
            a[(j, j)] = 4.0;
            a[(j, j + 1)] = 1.0;
            rhs[(j, j - 1)] = 6.0 / (h * h);
            rhs[(j, j)] = -12.0 / (h * h);
            rhs[(j, j + 1)] = 6.0 / (h * h);
        }
        a[(m, m - 1)] = 1.0;
        a[(m, m)] = 2.0;
        rhs[(m, dm)] = 6.0 / h;
        rhs[(m, m)] = -6.0 / (h * h);
        rhs[(m, m - 1)] = 6.0 / (h * h);
        let moments = a.lu().solve(&rhs).expect("clamped spline system is diagonally dominant");
        Self { h, n_intervals: m, periodic: false, n_inputs, moments }
    }

    /// Periodic spline with `n_intervals` knot values `y_0 .. y_(N-1)` on a period
    /// of length `span` (`y_N = y_0`).
    fn periodic(span: f64, n_intervals: usize) -> Self {
        let n = n_intervals;
        let h = span / n as f64;
        let mut a = DMatrix::zeros(n, n);
        let mut rhs = DMatrix::zeros(n, n);
        for j in 0..n {
            let prev = (j + n - 1) % n;
            let next = (j + 1) % n;
            a[(j, j)] += 4.0;
            a[(j, prev)] += 1.0;
            a[(j, next)] += 1.0;
            rhs[(j, prev)] += 6.0 / (h * h);
            rhs[(j, j)] -= 12.0 / (h * h);
            rhs[(j, next)] += 6.0 / (h * h);
        }
        let moments = a.lu().solve(&rhs).expect("cyclic spline system is diagonally dominant");
        Self { h, n_intervals: n, periodic: true, n_inputs: n, moments }
    }

    fn knot_input(&self, j: usize) -> usize {
        if self.periodic {
            j % self.n_intervals
        } else {
            j
        }
    }

    /// Weights of the value and the time derivative at `t` (already inside the
    /// domain) with respect to every input.
    fn weights(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let h = self.h;
        let j = ((t / h).floor() as usize).min(self.n_intervals - 1);
        let tau = t - j as f64 * h;
        let r = h - tau;
        let mut w = vec![0.0; self.n_inputs];
        let mut dw = vec![0.0; self.n_inputs];
        // s = M_j r^3/(6h) + M_j1 tau^3/(6h) + (y_j - M_j h^2/6) r/h + (y_j1 - M_j1 h^2/6) tau/h
        let cm0 = r * r * r / (6.0 * h) - h * r / 6.0;
        let cm1 = tau * tau * tau / (6.0 * h) - h * tau / 6.0;
        let dcm0 = -r * r / (2.0 * h) + h / 6.0;
        let dcm1 = tau * tau / (2.0 * h) - h / 6.0;
        let (y0, y1) = (self.knot_input(j), self.knot_input(j + 1));
        w[y0] += r / h;
        w[y1] += tau / h;
        dw[y0] -= 1.0 / h;
        dw[y1] += 1.0 / h;
        let (k0, k1) = (j, self.knot_input(j + 1));
        for k in 0..self.n_inputs {
            let m0 = self.moments[(k0, k)];
            let m1 = self.moments[(k1, k)];
            w[k] += cm0 * m0 + cm1 * m1;
            dw[k] += dcm0 * m0 + dcm1 * m1;
        }
        (w, dw)
    }

    /// Second derivative weights at `t` approached from the interval on the left
    /// (`left = true`) or right.
    fn second_derivative_weights(&self, t: f64, left: bool) -> Vec<f64> {
        let h = self.h;
        let mut j = (t / h).round() as usize;
        let at_knot = ((t / h) - j as f64).abs() < 1e-12;
        if !at_knot {
            j = (t / h).floor() as usize;
        } else if left {
            j = j.saturating_sub(1);
        }
        j = j.min(self.n_intervals - 1);
        let tau = t - j as f64 * h;
        let k1 = self.knot_input(j + 1);
        (0..self.n_inputs)
            .map(|k| self.moments[(j, k)] * (h - tau) / h + self.moments[(k1, k)] * tau / h)
            .collect()
    }
}

/// One contribution to a spline input: a constant or a signed parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
enum InputSource {
    Fixed(f64),
    Param { index: usize, sign: f64 },
}

/// Spline boundary treatment.
#[derive(Debug, Clone, PartialEq)]
pub enum SplineKind {
    /// End values and slopes pinned; interior knot values are parameters.
    Clamped { start: f64, end: f64, start_slope: f64, end_slope: f64 },
    /// `s(t + T/2) = -s(t)`; knot values of the first half period are parameters.
    MirroredPeriodic,
}

/// Cubic spline time signal whose free knot values are taken from the
/// parameter vector starting at `first_param`.
#[derive(Debug, Clone)]
pub struct SplineSignal {
    kind: SplineKind,
    /// Length of the time domain (`T`); for mirrored splines, the period.
    horizon: f64,
    basis: SplineBasis,
    inputs: Vec<InputSource>,
    first_param: usize,
    n_free: usize,
}

impl SplineSignal {
    /// Clamped spline with `n_knots` uniform knots on `[0, horizon]`; the
    /// `n_knots - 2` interior values are parameters.
    pub fn clamped(
        horizon: f64,
        n_knots: usize,
        start: f64,
        end: f64,
        start_slope: f64,
        end_slope: f64,
        first_param: usize,
    ) -> Result<Self> {
        if n_knots < 2 || !(horizon > 0.0) {
            return Err(Error::Config(format!("clamped spline needs >= 2 knots and T > 0 (got {n_knots}, {horizon})")));
        }
        let m = n_knots - 1;
        let basis = SplineBasis::clamped(horizon, m);
        let mut inputs = Vec::with_capacity(m + 3);
        inputs.push(InputSource::Fixed(start));
        for j in 1..m {
            inputs.push(InputSource::Param { index: first_param + j - 1, sign: 1.0 });
        }
        inputs.push(InputSource::Fixed(end));
        inputs.push(InputSource::Fixed(start_slope));
        inputs.push(InputSource::Fixed(end_slope));
        Ok(Self {
            kind: SplineKind::Clamped { start, end, start_slope, end_slope },
            horizon,
            basis,
            inputs,
            first_param,
            n_free: m - 1,
        })
    }

    /// Mirrored-periodic spline with period `period` and `n_knots` uniform knots on
    /// the half period `[0, period/2]`. The last knot value is the negated first
    /// one, leaving `n_knots - 1` free values.
    pub fn mirrored(period: f64, n_knots: usize, first_param: usize) -> Result<Self> {
        if n_knots < 2 || !(period > 0.0) {
            return Err(Error::Config(format!("mirrored spline needs >= 2 knots and period > 0 (got {n_knots}, {period})")));
        }
        let m = n_knots - 1;
        let basis = SplineBasis::periodic(period, 2 * m);
        let mut inputs = Vec::with_capacity(2 * m);
        for sign in [1.0, -1.0] {
            for j in 0..m {
                inputs.push(InputSource::Param { index: first_param + j, sign });
            }
        }
        Ok(Self { kind: SplineKind::MirroredPeriodic, horizon: period, basis, inputs, first_param, n_free: m })
    }

    pub fn kind(&self) -> &SplineKind {
        &self.kind
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Parameter indices `first_param .. first_param + n_free`.
    pub fn param_range(&self) -> std::ops::Range<usize> {
        self.first_param..self.first_param + self.n_free
    }

    fn local_time(&self, t: f64) -> Result<f64> {
        if !t.is_finite() {
            return Err(Error::Domain(format!("spline evaluated at t = {t}")));
        }
        if self.basis.periodic {
            return Ok(t.rem_euclid(self.horizon));
        }
        let slack = 1e-12 * self.horizon;
        if t < -slack || t > self.horizon + slack {
            return Err(Error::Domain(format!("t = {t} outside [0, {}]", self.horizon)));
        }
        Ok(t.clamp(0.0, self.horizon))
    }

    fn input_values(&self, mu: &[f64]) -> Result<Vec<f64>> {
        self.inputs
            .iter()
            .map(|src| match *src {
                InputSource::Fixed(v) => Ok(v),
                InputSource::Param { index, sign } => mu
                    .get(index)
                    .map(|v| sign * v)
                    .ok_or_else(|| Error::Config(format!("spline parameter {index} missing (N_mu = {})", mu.len()))),
            })
            .collect()
    }

    pub fn eval(&self, t: f64, mu: &[f64]) -> Result<SignalSample> {
        let tl = self.local_time(t)?;
        let z = self.input_values(mu)?;
        let (w, dw) = self.basis.weights(tl);
        let mut out = SignalSample::zero(mu.len());
        for (k, src) in self.inputs.iter().enumerate() {
            out.value += w[k] * z[k];
            out.rate += dw[k] * z[k];
            if let InputSource::Param { index, sign } = *src {
                out.d_value[index] += sign * w[k];
                out.d_rate[index] += sign * dw[k];
            }
        }
        Ok(out)
    }

    /// Second derivative from the left and right of `t`; equal for a C² spline.
    pub fn second_derivative_jump(&self, t: f64, mu: &[f64]) -> Result<(f64, f64)> {
        let tl = self.local_time(t)?;
        let z = self.input_values(mu)?;
        let dot = |w: Vec<f64>| w.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
        Ok((dot(self.basis.second_derivative_weights(tl, true)), dot(self.basis.second_derivative_weights(tl, false))))
    }

    pub fn knot_times(&self) -> Vec<f64> {
        let n = match self.kind {
            SplineKind::Clamped { .. } => self.basis.n_intervals + 1,
            SplineKind::MirroredPeriodic => self.basis.n_intervals / 2 + 1,
        };
        (0..n).map(|j| j as f64 * self.basis.h).collect()
    }
}

/// `b(t) = 1 - exp(-t^2)` and its derivative.
pub fn blend_factor(t: f64) -> (f64, f64) {
    let e = (-t * t).exp();
    (1.0 - e, 2.0 * t * e)
}

/// Applies the temporal blend `b(t) s(t)` with chain-rule derivatives.
pub fn temporal_blend(sample: &SignalSample, t: f64) -> SignalSample {
    let (b, db) = blend_factor(t);
    SignalSample {
        value: b * sample.value,
        rate: db * sample.value + b * sample.rate,
        d_value: sample.d_value.iter().map(|d| b * d).collect(),
        d_rate: sample.d_value.iter().zip(&sample.d_rate).map(|(dv, dr)| db * dv + b * dr).collect(),
    }
}

/// Serializable description of a time signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SignalSpec {
    Zero,
    /// `mu_param * t`.
    Linear { param: usize },
    /// `amplitude * sin(omega t)`, parameter independent.
    Harmonic { amplitude: f64, omega: f64 },
    Clamped {
        knots: usize,
        first_param: usize,
        #[serde(default)]
        start: f64,
        #[serde(default)]
        end: f64,
        #[serde(default)]
        start_slope: f64,
        #[serde(default)]
        end_slope: f64,
        /// Defaults to the simulation horizon.
        horizon: Option<f64>,
        #[serde(default)]
        blend: bool,
    },
    Mirrored {
        knots: usize,
        first_param: usize,
        /// Defaults to the simulation horizon.
        period: Option<f64>,
        #[serde(default)]
        blend: bool,
    },
}

/// A built signal ready for evaluation.
#[derive(Debug, Clone)]
pub enum Signal {
    Zero,
    Linear { param: usize },
    Harmonic { amplitude: f64, omega: f64 },
    Spline { spline: SplineSignal, blend: bool },
}

impl Signal {
    pub fn build(spec: &SignalSpec, horizon: f64) -> Result<Self> {
        Ok(match spec {
            SignalSpec::Zero => Signal::Zero,
            SignalSpec::Linear { param } => Signal::Linear { param: *param },
            SignalSpec::Harmonic { amplitude, omega } => Signal::Harmonic { amplitude: *amplitude, omega: *omega },
            SignalSpec::Clamped { knots, first_param, start, end, start_slope, end_slope, horizon: h, blend } => {
                let spline =
                    SplineSignal::clamped(h.unwrap_or(horizon), *knots, *start, *end, *start_slope, *end_slope, *first_param)?;
                Signal::Spline { spline, blend: *blend }
            }
            SignalSpec::Mirrored { knots, first_param, period, blend } => {
                let spline = SplineSignal::mirrored(period.unwrap_or(horizon), *knots, *first_param)?;
                Signal::Spline { spline, blend: *blend }
            }
        })
    }

    /// Highest parameter index used plus one.
    pub fn params_needed(&self) -> usize {
        match self {
            Signal::Zero | Signal::Harmonic { .. } => 0,
            Signal::Linear { param } => param + 1,
            Signal::Spline { spline, .. } => spline.param_range().end,
        }
    }

    pub fn eval(&self, t: f64, mu: &[f64]) -> Result<SignalSample> {
        let np = mu.len();
        Ok(match self {
            Signal::Zero => SignalSample::zero(np),
            Signal::Linear { param } => {
                let mut s = SignalSample::zero(np);
                s.value = mu[*param] * t;
                s.rate = mu[*param];
                s.d_value[*param] = t;
                s.d_rate[*param] = 1.0;
                s
            }
            Signal::Harmonic { amplitude, omega } => {
                let mut s = SignalSample::zero(np);
                s.value = amplitude * (omega * t).sin();
                s.rate = amplitude * omega * (omega * t).cos();
                s
            }
            Signal::Spline { spline, blend } => {
                let raw = spline.eval(t, mu)?;
                if *blend {
                    temporal_blend(&raw, t)
                } else {
                    raw
                }
            }
        })
    }
}
