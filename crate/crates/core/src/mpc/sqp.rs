//! Line-search SQP for problems with smooth equality constraints and linear
//! inequality constraints.
//!
//! Each iteration solves a convex QP built from the problem's positive
//! semi-definite Hessian approximation plus a small proximal term, then
//! backtracks on the l1 merit function `f + nu * |c|_1`.

use nalgebra::{DMatrix, DVector};

use super::qp::{solve_qp, QpProblem};
use crate::error::{FtcError, Result};

/// Linear rows `lower <= A z <= upper`; either side may be infinite.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearRows {
    pub matrix: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl LinearRows {
    pub fn empty(n: usize) -> Self {
        Self {
            matrix: DMatrix::zeros(0, n),
            lower: DVector::zeros(0),
            upper: DVector::zeros(0),
        }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }
}

/// Smooth NLP: minimise `f(z)` subject to `c(z) = 0`, simple bounds and linear rows.
pub trait NlpProblem {
    fn dim(&self) -> usize;
    fn objective(&self, z: &DVector<f64>) -> f64;
    fn gradient(&self, z: &DVector<f64>) -> DVector<f64>;
    /// Positive semi-definite Hessian model of the objective.
    fn hessian(&self, z: &DVector<f64>) -> DMatrix<f64>;
    fn constraints(&self, z: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, z: &DVector<f64>) -> DMatrix<f64>;
    fn lower_bounds(&self) -> &DVector<f64>;
    fn upper_bounds(&self) -> &DVector<f64>;
    fn linear_rows(&self) -> &LinearRows;

    /// Positive semi-definite model of the curvature of `-sum_i lambda_i c_i(z)`,
    /// added to the objective Hessian. `None` means the constraints are treated as linear.
    fn constraint_curvature(&self, _z: &DVector<f64>, _multipliers: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverStatus {
    Converged,
    MaxIter,
    Infeasible,
}

impl SolverStatus {
    pub fn token(self) -> &'static str {
        match self {
            SolverStatus::Converged => "converged",
            SolverStatus::MaxIter => "max_iter",
            SolverStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SqpOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Proximal term added to the Hessian model, relative to its largest diagonal entry.
    pub regularization: f64,
    pub armijo: f64,
    pub min_step: f64,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 200,
            regularization: 1e-8,
            armijo: 1e-4,
            min_step: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NlpSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    pub status: SolverStatus,
    pub iterations: usize,
    /// Largest equality, bound or linear-row violation.
    pub violation: f64,
    /// Infinity norm of the Lagrangian gradient.
    pub stationarity: f64,
    pub eq_multipliers: DVector<f64>,
}

/// Largest violation of the equality constraints, bounds and linear rows at `z`.
pub fn constraint_violation<P: NlpProblem + ?Sized>(problem: &P, z: &DVector<f64>) -> f64 {
    let eq = problem.constraints(z).amax();
    let (lo, hi) = (problem.lower_bounds(), problem.upper_bounds());
    let bounds = (0..z.len())
        .map(|i| (lo[i] - z[i]).max(z[i] - hi[i]).max(0.0))
        .fold(0.0, f64::max);
    let rows = problem.linear_rows();
    let linear = if rows.is_empty() {
        0.0
    } else {
        let az = &rows.matrix * z;
        (0..rows.len())
            .map(|i| (rows.lower[i] - az[i]).max(az[i] - rows.upper[i]).max(0.0))
            .fold(0.0, f64::max)
    };
    eq.max(bounds).max(linear)
}

/// QP subproblem in the step `d` at `z`, with inequality rows `C d >= e`.
fn subproblem<P: NlpProblem + ?Sized>(
    problem: &P,
    z: &DVector<f64>,
    multipliers: &DVector<f64>,
    opts: &SqpOptions,
) -> QpProblem {
    let n = problem.dim();
    let mut hessian = problem.hessian(z);
    if let Some(curvature) = problem.constraint_curvature(z, multipliers) {
        hessian += curvature;
    }
    let max_diag = hessian.diagonal().amax().max(1.0);
    for i in 0..n {
        hessian[(i, i)] += opts.regularization * max_diag;
    }
    let c = problem.constraints(z);

    let (lo, hi) = (problem.lower_bounds(), problem.upper_bounds());
    let rows = problem.linear_rows();
    let az = if rows.is_empty() { DVector::zeros(0) } else { &rows.matrix * z };
    let mut ineq: Vec<(DVector<f64>, f64)> = Vec::new();
    for i in 0..n {
        if lo[i].is_finite() {
            ineq.push((unit(n, i, 1.0), lo[i] - z[i]));
        }
        if hi[i].is_finite() {
            ineq.push((unit(n, i, -1.0), z[i] - hi[i]));
        }
    }
    for i in 0..rows.len() {
        let a = rows.matrix.row(i).transpose();
        if rows.lower[i].is_finite() {
            ineq.push((a.clone(), rows.lower[i] - az[i]));
        }
        if rows.upper[i].is_finite() {
            ineq.push((-a, az[i] - rows.upper[i]));
        }
    }
    let ineq_matrix = DMatrix::from_fn(ineq.len(), n, |r, k| ineq[r].0[k]);
    let ineq_rhs = DVector::from_iterator(ineq.len(), ineq.iter().map(|(_, b)| *b));

    QpProblem {
        hessian,
        gradient: problem.gradient(z),
        eq_matrix: problem.jacobian(z),
        eq_rhs: -c,
        ineq_matrix,
        ineq_rhs,
    }
}

fn unit(n: usize, i: usize, v: f64) -> DVector<f64> {
    let mut e = DVector::zeros(n);
    e[i] = v;
    e
}

fn project<P: NlpProblem + ?Sized>(problem: &P, z: &DVector<f64>) -> DVector<f64> {
    let (lo, hi) = (problem.lower_bounds(), problem.upper_bounds());
    DVector::from_fn(z.len(), |i, _| z[i].max(lo[i]).min(hi[i]))
}

struct Iterate {
    z: DVector<f64>,
    objective: f64,
    violation: f64,
}

impl Iterate {
    fn better_than(&self, other: &Iterate, tol: f64) -> bool {
        if self.violation <= tol && other.violation <= tol {
            self.objective < other.objective
        } else {
            self.violation < other.violation
        }
    }
}

/// Solve from `guess` (projected onto the simple bounds first).
pub fn solve_nlp<P: NlpProblem + ?Sized>(problem: &P, guess: &DVector<f64>, opts: &SqpOptions) -> Result<NlpSolution> {
    let n = problem.dim();
    if guess.len() != n {
        return Err(FtcError::Dimension(format!("guess of length {} for {n} variables", guess.len())));
    }
    if guess.iter().any(|v| !v.is_finite()) {
        return Err(FtcError::InvalidArgument("initial guess has non-finite entries".into()));
    }
    let mut z = project(problem, guess);
    let mut f = problem.objective(&z);
    let mut c = problem.constraints(&z);
    let mut nu = 0.0_f64;
    let mut best = Iterate {
        z: z.clone(),
        objective: f,
        violation: constraint_violation(problem, &z),
    };
    let mut eq_multipliers = DVector::zeros(c.len());
    let mut stationarity = f64::INFINITY;

    for iteration in 1..=opts.max_iter {
        let qp = subproblem(problem, &z, &eq_multipliers, opts);
        let sol = match solve_qp(&qp) {
            Ok(sol) => sol,
            Err(FtcError::QpInfeasible(_)) => {
                return Ok(NlpSolution {
                    objective: best.objective,
                    violation: best.violation,
                    z: best.z,
                    status: SolverStatus::Infeasible,
                    iterations: iteration,
                    stationarity,
                    eq_multipliers,
                });
            }
            Err(e) => return Err(e),
        };
        let d = &sol.x;
        let g = &qp.gradient;

        nu = nu.max(1.1 * sol.eq_multipliers.amax() + 1e-6);
        let c_l1 = c.iter().map(|v| v.abs()).sum::<f64>();
        let phi0 = f + nu * c_l1;
        let slope = g.dot(d) - nu * c_l1;
        let mut alpha = 1.0;
        let (z_next, f_next, c_next) = loop {
            let trial = &z + d * alpha;
            let f_trial = problem.objective(&trial);
            let c_trial = problem.constraints(&trial);
            let phi = f_trial + nu * c_trial.iter().map(|v| v.abs()).sum::<f64>();
            if phi <= phi0 + opts.armijo * alpha * slope.min(0.0) || alpha <= opts.min_step {
                break (trial, f_trial, c_trial);
            }
            alpha *= 0.5;
        };
        z = z_next;
        f = f_next;
        c = c_next;

        let lagrangian = problem.gradient(&z)
            - problem.jacobian(&z).transpose() * &sol.eq_multipliers
            - qp.ineq_matrix.transpose() * &sol.ineq_multipliers;
        stationarity = lagrangian.amax();
        eq_multipliers = sol.eq_multipliers;
        let violation = constraint_violation(problem, &z);
        let current = Iterate {
            z: z.clone(),
            objective: f,
            violation,
        };
        if current.better_than(&best, opts.tol) {
            best = current;
        }
        if violation <= opts.tol && stationarity <= opts.tol {
            return Ok(NlpSolution {
                z,
                objective: f,
                status: SolverStatus::Converged,
                iterations: iteration,
                violation,
                stationarity,
                eq_multipliers,
            });
        }
    }

    Ok(NlpSolution {
        objective: best.objective,
        violation: best.violation,
        z: best.z,
        status: SolverStatus::MaxIter,
        iterations: opts.max_iter,
        stationarity,
        eq_multipliers,
    })
}
