//! Pseudospectral transcription of the tracking OCP onto LGL nodes.
//!
//! Decision vector `z = [X, Y, Psi, U_R, U_L]`, each block holding one value
//! per node. Dynamics are enforced as `D X - s f(X, U) = 0` at every node with
//! `s = T / 2`, plus the three initial-state pins.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x2, SymmetricEigen};

use super::reference::{ReferencePoint, ReferenceSignal};
use super::sqp::{LinearRows, NlpProblem};
use crate::dynamics::{step_truth, ControlInput, RobotParams, RobotState, OMEGA_MAX};
use crate::error::{FtcError, Result};
use crate::pseudospectral::{time_map, CollocationBasis};

#[derive(Clone, Debug, PartialEq)]
pub struct OcpWeights {
    /// Diagonal of the position weight.
    pub q_x: [f64; 2],
    pub q_v: f64,
    pub q_psi: f64,
}

impl Default for OcpWeights {
    fn default() -> Self {
        Self {
            q_x: [10.0, 10.0],
            q_v: 1.0,
            q_psi: 1.0,
        }
    }
}

impl OcpWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.q_x[0], self.q_x[1], self.q_v, self.q_psi].iter().all(|w| *w > 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(FtcError::InvalidArgument(format!("OCP weights must be positive, got {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcBounds {
    /// Symmetric wheel-rate bound (rad/s).
    pub omega_max: f64,
    /// Largest wheel acceleration (rad/s^2) between nodes and from the applied control.
    pub rate_limit: f64,
    /// Controller period (s); bounds the change from the previously applied control.
    pub control_period: f64,
    /// Bounds on `[x, y, psi]` at every node.
    pub state_lower: [f64; 3],
    pub state_upper: [f64; 3],
}

impl Default for MpcBounds {
    fn default() -> Self {
        let control_period = 0.1;
        Self {
            omega_max: OMEGA_MAX,
            // 500 deg/s of change per controller period.
            rate_limit: 500.0_f64.to_radians() / control_period,
            control_period,
            state_lower: [f64::NEG_INFINITY; 3],
            state_upper: [f64::INFINITY; 3],
        }
    }
}

impl MpcBounds {
    pub fn validate(&self) -> Result<()> {
        let states_ok = (0..3).all(|i| self.state_lower[i] <= self.state_upper[i]);
        if self.omega_max > 0.0 && self.rate_limit > 0.0 && self.control_period > 0.0 && states_ok {
            Ok(())
        } else {
            Err(FtcError::InvalidArgument(format!("inconsistent MPC bounds {self:?}")))
        }
    }
}

/// Dynamics used in the collocation constraints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ModelForm {
    Nonlinear,
    /// First-order expansion about a fixed state and control.
    Linearized { state: RobotState, control: ControlInput },
}

/// Index map of the decision vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecisionLayout {
    pub n_nodes: usize,
}

impl DecisionLayout {
    pub fn dim(&self) -> usize {
        5 * self.n_nodes
    }

    pub fn n_constraints(&self) -> usize {
        3 * self.n_nodes + 3
    }

    pub fn x(&self, i: usize) -> usize {
        i
    }

    pub fn y(&self, i: usize) -> usize {
        self.n_nodes + i
    }

    pub fn psi(&self, i: usize) -> usize {
        2 * self.n_nodes + i
    }

    pub fn omega_right(&self, i: usize) -> usize {
        3 * self.n_nodes + i
    }

    pub fn omega_left(&self, i: usize) -> usize {
        4 * self.n_nodes + i
    }
}

/// Time, measured pose, model parameters and last applied control for one solve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OcpInstance {
    pub t: f64,
    pub x_now: RobotState,
    pub params: RobotParams,
    pub u_prev: Option<ControlInput>,
}

/// State and input Jacobians of the kinematics at `(state, u)`.
pub fn linearize(state: &RobotState, u: &ControlInput, params: &RobotParams) -> (Matrix3<f64>, Matrix3x2<f64>) {
    let v = params.speed(u);
    let (s, c) = state.psi.sin_cos();
    let a = Matrix3::new(0.0, 0.0, -v * s, 0.0, 0.0, v * c, 0.0, 0.0, 0.0);
    let (hr, hl) = (0.5 * params.r_right, 0.5 * params.r_left);
    let b = Matrix3x2::new(
        c * hr,
        c * hl,
        s * hr,
        s * hl,
        hr / params.b,
        -hl / params.b,
    );
    (a, b)
}

/// Node rates `f` and their partials with respect to `psi`, `omega_right` and `omega_left`.
struct NodeRates {
    f: [f64; 3],
    d_psi: [f64; 2],
    d_ur: [f64; 3],
    d_ul: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct Transcription {
    pub layout: DecisionLayout,
    pub basis: Arc<CollocationBasis>,
    /// `T / 2`, the derivative and quadrature scale.
    pub scale: f64,
    pub node_times: Vec<f64>,
    pub reference: Vec<ReferencePoint>,
    pub instance: OcpInstance,
    pub weights: OcpWeights,
    pub form: ModelForm,
    omega_max: f64,
    lower: DVector<f64>,
    upper: DVector<f64>,
    rows: LinearRows,
    hessian: DMatrix<f64>,
}

pub fn transcribe(
    basis: &Arc<CollocationBasis>,
    weights: &OcpWeights,
    bounds: &MpcBounds,
    horizon: f64,
    reference: &ReferenceSignal,
    instance: &OcpInstance,
    form: ModelForm,
) -> Result<Transcription> {
    weights.validate()?;
    bounds.validate()?;
    instance.params.validate()?;
    if !instance.x_now.is_finite() {
        return Err(FtcError::InvalidArgument(format!("non-finite pose {:?}", instance.x_now)));
    }
    let m = basis.n_nodes;
    if basis.nodes.len() != m || basis.weights.len() != m || basis.d.nrows() != m || basis.d.ncols() != m {
        return Err(FtcError::Dimension(format!("collocation basis with {m} nodes has inconsistent arrays")));
    }
    let layout = DecisionLayout { n_nodes: m };
    let (node_times, scale) = time_map(basis, instance.t, instance.t + horizon)?;
    let reference: Vec<ReferencePoint> = node_times.iter().map(|&t| reference.sample(t)).collect();

    let n = layout.dim();
    let mut lower = DVector::from_element(n, f64::NEG_INFINITY);
    let mut upper = DVector::from_element(n, f64::INFINITY);
    for i in 0..m {
        for (k, idx) in [layout.x(i), layout.y(i), layout.psi(i)].into_iter().enumerate() {
            lower[idx] = bounds.state_lower[k];
            upper[idx] = bounds.state_upper[k];
        }
        for idx in [layout.omega_right(i), layout.omega_left(i)] {
            lower[idx] = -bounds.omega_max;
            upper[idx] = bounds.omega_max;
        }
    }
    if let Some(u) = instance.u_prev {
        let step = bounds.rate_limit * bounds.control_period;
        for (idx, prev) in [(layout.omega_right(0), u.omega_right), (layout.omega_left(0), u.omega_left)] {
            lower[idx] = lower[idx].max(prev - step);
            upper[idx] = upper[idx].min(prev + step);
            if lower[idx] > upper[idx] {
                return Err(FtcError::InvalidArgument(format!(
                    "previous control {prev} is outside the wheel-rate bounds"
                )));
            }
        }
    }

    let n_rows = 2 * (m - 1);
    let mut matrix = DMatrix::zeros(n_rows, n);
    let mut row_lower = DVector::zeros(n_rows);
    let mut row_upper = DVector::zeros(n_rows);
    for i in 0..m - 1 {
        let limit = bounds.rate_limit * (node_times[i + 1] - node_times[i]);
        for (w, col) in [(0, layout.omega_right(i)), (1, layout.omega_left(i))] {
            let r = 2 * i + w;
            matrix[(r, col + 1)] = 1.0;
            matrix[(r, col)] = -1.0;
            row_lower[r] = -limit;
            row_upper[r] = limit;
        }
    }

    let mut t = Transcription {
        layout,
        basis: Arc::clone(basis),
        scale,
        node_times,
        reference,
        instance: *instance,
        weights: weights.clone(),
        form,
        omega_max: bounds.omega_max,
        lower,
        upper,
        rows: LinearRows {
            matrix,
            lower: row_lower,
            upper: row_upper,
        },
        hessian: DMatrix::zeros(0, 0),
    };
    t.hessian = t.build_hessian();
    Ok(t)
}

impl Transcription {
    fn speed_gains(&self) -> ([f64; 2], [f64; 2]) {
        let p = &self.instance.params;
        (
            [0.5 * p.r_right, 0.5 * p.r_left],
            [0.5 * p.r_right / p.b, -0.5 * p.r_left / p.b],
        )
    }

    fn rates(&self, psi: f64, ur: f64, ul: f64) -> NodeRates {
        let (a, c) = self.speed_gains();
        let v = a[0] * ur + a[1] * ul;
        let omega = c[0] * ur + c[1] * ul;
        match self.form {
            ModelForm::Nonlinear => {
                let (s, co) = psi.sin_cos();
                NodeRates {
                    f: [v * co, v * s, omega],
                    d_psi: [-v * s, v * co],
                    d_ur: [co * a[0], s * a[0], c[0]],
                    d_ul: [co * a[1], s * a[1], c[1]],
                }
            }
            ModelForm::Linearized { state, control } => {
                let vbar = self.instance.params.speed(&control);
                let (s, co) = state.psi.sin_cos();
                let dpsi = psi - state.psi;
                NodeRates {
                    f: [v * co - vbar * s * dpsi, v * s + vbar * co * dpsi, omega],
                    d_psi: [-vbar * s, vbar * co],
                    d_ur: [co * a[0], s * a[0], c[0]],
                    d_ul: [co * a[1], s * a[1], c[1]],
                }
            }
        }
    }

    fn build_hessian(&self) -> DMatrix<f64> {
        let l = self.layout;
        let (a, c) = self.speed_gains();
        let q = &self.weights;
        let mut h = DMatrix::zeros(l.dim(), l.dim());
        for i in 0..l.n_nodes {
            let sw = 2.0 * self.scale * self.basis.weights[i];
            h[(l.x(i), l.x(i))] = sw * q.q_x[0];
            h[(l.y(i), l.y(i))] = sw * q.q_x[1];
            let cols = [l.omega_right(i), l.omega_left(i)];
            for r in 0..2 {
                for k in 0..2 {
                    h[(cols[r], cols[k])] = sw * (q.q_v * a[r] * a[k] + q.q_psi * c[r] * c[k]);
                }
            }
        }
        h
    }

    /// Node states and controls of `z`.
    pub fn unpack(&self, z: &DVector<f64>) -> (Vec<RobotState>, Vec<ControlInput>) {
        let l = self.layout;
        let states = (0..l.n_nodes)
            .map(|i| RobotState::new(z[l.x(i)], z[l.y(i)], z[l.psi(i)]))
            .collect();
        let controls = (0..l.n_nodes)
            .map(|i| ControlInput::new(z[l.omega_right(i)], z[l.omega_left(i)]))
            .collect();
        (states, controls)
    }

    pub fn pack(&self, states: &[RobotState], controls: &[ControlInput]) -> Result<DVector<f64>> {
        let l = self.layout;
        if states.len() != l.n_nodes || controls.len() != l.n_nodes {
            return Err(FtcError::Dimension(format!(
                "{} states and {} controls for {} nodes",
                states.len(),
                controls.len(),
                l.n_nodes
            )));
        }
        let mut z = DVector::zeros(l.dim());
        for i in 0..l.n_nodes {
            z[l.x(i)] = states[i].x;
            z[l.y(i)] = states[i].y;
            z[l.psi(i)] = states[i].psi;
            z[l.omega_right(i)] = controls[i].omega_right;
            z[l.omega_left(i)] = controls[i].omega_left;
        }
        Ok(z)
    }

    /// Lower bounds on the first-node controls.
    pub fn lower_bounds_first(&self) -> ControlInput {
        ControlInput::new(self.lower[self.layout.omega_right(0)], self.lower[self.layout.omega_left(0)])
    }

    /// Upper bounds on the first-node controls.
    pub fn upper_bounds_first(&self) -> ControlInput {
        ControlInput::new(self.upper[self.layout.omega_right(0)], self.upper[self.layout.omega_left(0)])
    }

    /// Wheel rates that realise the reference speed and turn rate at each node.
    pub fn reference_controls(&self) -> Vec<ControlInput> {
        self.reference
            .iter()
            .map(|r| self.instance.params.inverse(r.v, r.psi_dot).clamped(self.omega_max))
            .collect()
    }

    /// Reference controls with states propagated from `x_now` through the truth model.
    pub fn reference_guess(&self) -> DVector<f64> {
        let controls = self.reference_controls();
        let mut states = Vec::with_capacity(self.layout.n_nodes);
        let mut x = self.instance.x_now;
        states.push(x);
        for i in 1..self.layout.n_nodes {
            let span = self.node_times[i] - self.node_times[i - 1];
            let steps = (span / 0.01).ceil().max(1.0) as usize;
            let dt = span / steps as f64;
            for _ in 0..steps {
                x = step_truth(&x, &controls[i - 1], &self.instance.params, dt).unwrap_or(x);
            }
            states.push(x);
        }
        self.pack(&states, &controls).expect("node counts match the layout")
    }

    /// Previous solution re-sampled on this problem's node times, pinned to `x_now`.
    ///
    /// Each channel is interpolated linearly between the previous nodes and
    /// held constant past the end of the previous horizon.
    pub fn shifted_guess(&self, previous: &DVector<f64>, previous_times: &[f64]) -> Result<DVector<f64>> {
        let l = self.layout;
        if previous.len() % 5 != 0 || previous.len() / 5 != previous_times.len() || previous_times.is_empty() {
            return Err(FtcError::Dimension(format!(
                "previous solution of length {} over {} node times",
                previous.len(),
                previous_times.len()
            )));
        }
        let pm = previous_times.len();
        let mut z = DVector::zeros(l.dim());
        for (i, &t) in self.node_times.iter().enumerate() {
            let k = previous_times.partition_point(|&pt| pt <= t);
            for channel in 0..5 {
                let at = |j: usize| previous[channel * pm + j];
                let value = if k == 0 {
                    at(0)
                } else if k >= pm {
                    at(pm - 1)
                } else {
                    let (t0, t1) = (previous_times[k - 1], previous_times[k]);
                    let w = (t - t0) / (t1 - t0);
                    at(k - 1) * (1.0 - w) + at(k) * w
                };
                z[channel * l.n_nodes + i] = value;
            }
        }
        let x0 = self.instance.x_now;
        z[l.x(0)] = x0.x;
        z[l.y(0)] = x0.y;
        z[l.psi(0)] = x0.psi;
        Ok(z)
    }

    fn lagrange_weights(&self, t: f64) -> Vec<f64> {
        let tau = (t - self.node_times[0]) / self.scale - 1.0;
        let nodes = &self.basis.nodes;
        let m = self.layout.n_nodes;
        (0..m)
            .map(|j| {
                (0..m)
                    .filter(|&k| k != j)
                    .map(|k| (tau - nodes[k]) / (nodes[j] - nodes[k]))
                    .product()
            })
            .collect()
    }

    /// State at time `t` from the Lagrange interpolant of the node states.
    pub fn interpolate_state(&self, z: &DVector<f64>, t: f64) -> RobotState {
        let l = self.layout;
        let w = self.lagrange_weights(t);
        let at = |idx: fn(&DecisionLayout, usize) -> usize| (0..l.n_nodes).map(|j| w[j] * z[idx(&l, j)]).sum();
        RobotState::new(at(DecisionLayout::x), at(DecisionLayout::y), at(DecisionLayout::psi))
    }

    /// Control at time `t` from the Lagrange interpolant of the node controls.
    pub fn interpolate_control(&self, z: &DVector<f64>, t: f64) -> ControlInput {
        let l = self.layout;
        let w = self.lagrange_weights(t);
        let at = |idx: fn(&DecisionLayout, usize) -> usize| (0..l.n_nodes).map(|j| w[j] * z[idx(&l, j)]).sum();
        ControlInput::new(at(DecisionLayout::omega_right), at(DecisionLayout::omega_left))
    }
}

impl NlpProblem for Transcription {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn objective(&self, z: &DVector<f64>) -> f64 {
        let l = self.layout;
        let (a, c) = self.speed_gains();
        let q = &self.weights;
        (0..l.n_nodes)
            .map(|i| {
                let r = &self.reference[i];
                let (ur, ul) = (z[l.omega_right(i)], z[l.omega_left(i)]);
                let ex = z[l.x(i)] - r.x;
                let ey = z[l.y(i)] - r.y;
                let ev = a[0] * ur + a[1] * ul - r.v;
                let ew = c[0] * ur + c[1] * ul - r.psi_dot;
                self.basis.weights[i] * (q.q_x[0] * ex * ex + q.q_x[1] * ey * ey + q.q_v * ev * ev + q.q_psi * ew * ew)
            })
            .sum::<f64>()
            * self.scale
    }

    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let l = self.layout;
        let (a, c) = self.speed_gains();
        let q = &self.weights;
        let mut g = DVector::zeros(l.dim());
        for i in 0..l.n_nodes {
            let r = &self.reference[i];
            let sw = 2.0 * self.scale * self.basis.weights[i];
            let (ur, ul) = (z[l.omega_right(i)], z[l.omega_left(i)]);
            let ev = a[0] * ur + a[1] * ul - r.v;
            let ew = c[0] * ur + c[1] * ul - r.psi_dot;
            g[l.x(i)] = sw * q.q_x[0] * (z[l.x(i)] - r.x);
            g[l.y(i)] = sw * q.q_x[1] * (z[l.y(i)] - r.y);
            g[l.omega_right(i)] = sw * (q.q_v * ev * a[0] + q.q_psi * ew * c[0]);
            g[l.omega_left(i)] = sw * (q.q_v * ev * a[1] + q.q_psi * ew * c[1]);
        }
        g
    }

    fn hessian(&self, _z: &DVector<f64>) -> DMatrix<f64> {
        self.hessian.clone()
    }

    fn constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        let l = self.layout;
        let m = l.n_nodes;
        let d = &self.basis.d;
        let mut c = DVector::zeros(l.n_constraints());
        let xs = z.rows(0, m);
        let ys = z.rows(m, m);
        let ps = z.rows(2 * m, m);
        let dx = d * xs;
        let dy = d * ys;
        let dp = d * ps;
        for i in 0..m {
            let f = self.rates(z[l.psi(i)], z[l.omega_right(i)], z[l.omega_left(i)]).f;
            c[i] = dx[i] - self.scale * f[0];
            c[m + i] = dy[i] - self.scale * f[1];
            c[2 * m + i] = dp[i] - self.scale * f[2];
        }
        let x0 = self.instance.x_now;
        c[3 * m] = z[l.x(0)] - x0.x;
        c[3 * m + 1] = z[l.y(0)] - x0.y;
        c[3 * m + 2] = z[l.psi(0)] - x0.psi;
        c
    }

    fn jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let l = self.layout;
        let m = l.n_nodes;
        let s = self.scale;
        let d = &self.basis.d;
        let mut jac = DMatrix::zeros(l.n_constraints(), l.dim());
        for i in 0..m {
            for k in 0..m {
                jac[(i, l.x(k))] = d[(i, k)];
                jac[(m + i, l.y(k))] = d[(i, k)];
                jac[(2 * m + i, l.psi(k))] = d[(i, k)];
            }
            let r = self.rates(z[l.psi(i)], z[l.omega_right(i)], z[l.omega_left(i)]);
            jac[(i, l.psi(i))] -= s * r.d_psi[0];
            jac[(m + i, l.psi(i))] -= s * r.d_psi[1];
            for row in 0..3 {
                jac[(row * m + i, l.omega_right(i))] = -s * r.d_ur[row];
                jac[(row * m + i, l.omega_left(i))] = -s * r.d_ul[row];
            }
        }
        jac[(3 * m, l.x(0))] = 1.0;
        jac[(3 * m + 1, l.y(0))] = 1.0;
        jac[(3 * m + 2, l.psi(0))] = 1.0;
        jac
    }

    fn lower_bounds(&self) -> &DVector<f64> {
        &self.lower
    }

    fn upper_bounds(&self) -> &DVector<f64> {
        &self.upper
    }

    fn linear_rows(&self) -> &LinearRows {
        &self.rows
    }

    /// Per-node curvature of the position rows in `(psi, U_R, U_L)`, with
    /// negative eigenvalues dropped.
    fn constraint_curvature(&self, z: &DVector<f64>, multipliers: &DVector<f64>) -> Option<DMatrix<f64>> {
        if !matches!(self.form, ModelForm::Nonlinear) || multipliers.len() != self.layout.n_constraints() {
            return None;
        }
        let l = self.layout;
        let m = l.n_nodes;
        let (a, _) = self.speed_gains();
        let mut h = DMatrix::zeros(l.dim(), l.dim());
        for i in 0..m {
            let (lx, ly) = (multipliers[i], multipliers[m + i]);
            if lx == 0.0 && ly == 0.0 {
                continue;
            }
            let psi = z[l.psi(i)];
            let v = a[0] * z[l.omega_right(i)] + a[1] * z[l.omega_left(i)];
            let (sn, cs) = psi.sin_cos();
            let pp = -self.scale * v * (lx * cs + ly * sn);
            let cross = -self.scale * (lx * sn - ly * cs);
            let block = Matrix3::new(pp, cross * a[0], cross * a[1], cross * a[0], 0.0, 0.0, cross * a[1], 0.0, 0.0);
            let eig = SymmetricEigen::new(block);
            let clipped = eig.eigenvalues.map(|e| e.max(0.0));
            let psd = eig.eigenvectors * Matrix3::from_diagonal(&clipped) * eig.eigenvectors.transpose();
            let idx = [l.psi(i), l.omega_right(i), l.omega_left(i)];
            for (r, &ri) in idx.iter().enumerate() {
                for (c, &ci) in idx.iter().enumerate() {
                    h[(ri, ci)] += psd[(r, c)];
                }
            }
        }
        Some(h)
    }
}
