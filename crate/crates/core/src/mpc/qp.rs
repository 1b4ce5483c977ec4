//! Dense strictly convex QP solver (Goldfarb-Idnani dual active set).
//!
//! ```text
//! minimise    1/2 x' G x + g' x
//! subject to  A_eq x  = b_eq
//!             A_in x >= b_in
//! ```
//!
//! Equalities are added first; inequalities are then activated one at a
//! time, most violated first, keeping the factorisation `J = L^-T Q` and the
//! triangular `R` up to date with Givens rotations.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{FtcError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
}

impl QpProblem {
    pub fn unconstrained(hessian: DMatrix<f64>, gradient: DVector<f64>) -> Self {
        let n = gradient.len();
        Self {
            hessian,
            gradient,
            eq_matrix: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            ineq_matrix: DMatrix::zeros(0, n),
            ineq_rhs: DVector::zeros(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.dim();
        let ok = self.hessian.nrows() == n
            && self.hessian.ncols() == n
            && self.eq_matrix.ncols() == n
            && self.eq_matrix.nrows() == self.eq_rhs.len()
            && self.ineq_matrix.ncols() == n
            && self.ineq_matrix.nrows() == self.ineq_rhs.len();
        if ok {
            Ok(())
        } else {
            Err(FtcError::Dimension(format!(
                "QP with {n} variables: hessian {}x{}, {}x{} equalities for {} rhs, {}x{} inequalities for {} rhs",
                self.hessian.nrows(),
                self.hessian.ncols(),
                self.eq_matrix.nrows(),
                self.eq_matrix.ncols(),
                self.eq_rhs.len(),
                self.ineq_matrix.nrows(),
                self.ineq_matrix.ncols(),
                self.ineq_rhs.len()
            )))
        }
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.gradient.dot(x)
    }
}

/// Optimal point with multipliers such that
/// `G x + g = A_eq' lambda_eq + A_in' lambda_in`, `lambda_in >= 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub eq_multipliers: DVector<f64>,
    pub ineq_multipliers: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Row {
    Eq(usize),
    Ineq(usize),
}

struct Factor {
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    r_norm: f64,
}

impl Factor {
    fn new(j0: &DMatrix<f64>) -> Self {
        let n = j0.nrows();
        Self {
            j: j0.clone(),
            r: DMatrix::zeros(n, n),
            r_norm: 1.0,
        }
    }

    /// Null-space component of `d = J' n_p` is too small to add the row.
    fn is_dependent(&self, d: &DVector<f64>, iq: usize) -> bool {
        let tail = d.rows(iq, d.len() - iq).norm();
        tail <= f64::EPSILON * self.r_norm
    }

    /// `z = J2 d2` (primal step direction) and `r = R^-1 d1` (dual step direction).
    fn directions(&self, d: &DVector<f64>, iq: usize) -> (DVector<f64>, DVector<f64>) {
        let n = d.len();
        let z = self.j.columns(iq, n - iq) * d.rows(iq, n - iq);
        let mut r = DVector::zeros(iq);
        for i in (0..iq).rev() {
            let mut sum = d[i];
            for k in i + 1..iq {
                sum -= self.r[(i, k)] * r[k];
            }
            r[i] = sum / self.r[(i, i)];
        }
        (z, r)
    }

    /// Rotate `d[iq..]` onto `d[iq]` and store `d[..=iq]` as the new column of `R`.
    fn add(&mut self, d: &mut DVector<f64>, iq: usize) {
        let n = d.len();
        for jj in (iq + 1..n).rev() {
            let h = d[jj - 1].hypot(d[jj]);
            if h == 0.0 {
                continue;
            }
            let (mut cc, mut ss) = (d[jj - 1] / h, d[jj] / h);
            d[jj] = 0.0;
            if cc < 0.0 {
                cc = -cc;
                ss = -ss;
                d[jj - 1] = -h;
            } else {
                d[jj - 1] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in 0..n {
                let t1 = self.j[(k, jj - 1)];
                let t2 = self.j[(k, jj)];
                self.j[(k, jj - 1)] = t1 * cc + t2 * ss;
                self.j[(k, jj)] = xny * (t1 + self.j[(k, jj - 1)]) - t2;
            }
        }
        for i in 0..=iq {
            self.r[(i, iq)] = d[i];
        }
        self.r_norm = self.r_norm.max(d[iq].abs());
    }

    /// Remove active column `qq` of `iq` and restore the triangular structure.
    fn delete(&mut self, qq: usize, iq: usize) {
        let n = self.j.nrows();
        for i in qq..iq - 1 {
            for k in 0..n {
                self.r[(k, i)] = self.r[(k, i + 1)];
            }
        }
        for k in 0..n {
            self.r[(k, iq - 1)] = 0.0;
        }
        let iq = iq - 1;
        for jj in qq..iq {
            let h = self.r[(jj, jj)].hypot(self.r[(jj + 1, jj)]);
            if h == 0.0 {
                continue;
            }
            let (mut cc, mut ss) = (self.r[(jj, jj)] / h, self.r[(jj + 1, jj)] / h);
            self.r[(jj + 1, jj)] = 0.0;
            if cc < 0.0 {
                self.r[(jj, jj)] = -h;
                cc = -cc;
                ss = -ss;
            } else {
                self.r[(jj, jj)] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in jj + 1..iq {
                let t1 = self.r[(jj, k)];
                let t2 = self.r[(jj + 1, k)];
                self.r[(jj, k)] = t1 * cc + t2 * ss;
                self.r[(jj + 1, k)] = xny * (t1 + self.r[(jj, k)]) - t2;
            }
            for k in 0..n {
                let t1 = self.j[(k, jj)];
                let t2 = self.j[(k, jj + 1)];
                self.j[(k, jj)] = t1 * cc + t2 * ss;
                self.j[(k, jj + 1)] = xny * (self.j[(k, jj)] + t1) - t2;
            }
        }
    }
}

const EQ_RESIDUAL_TOL: f64 = 1e-8;

pub fn solve_qp(problem: &QpProblem) -> Result<QpSolution> {
    problem.validate()?;
    let n = problem.dim();
    let me = problem.eq_rhs.len();
    let mi = problem.ineq_rhs.len();

    let chol = Cholesky::new(problem.hessian.clone())
        .ok_or_else(|| FtcError::InvalidArgument("QP hessian is not positive definite".into()))?;
    let linv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| FtcError::InvalidArgument("QP hessian factor is singular".into()))?;
    let j0 = linv.transpose();
    let c1 = problem.hessian.trace();
    let c2 = j0.trace();

    let eq_cols = problem.eq_matrix.transpose();
    let in_cols = problem.ineq_matrix.transpose();
    let normal = |row: Row| -> DVector<f64> {
        match row {
            Row::Eq(i) => eq_cols.column(i).into_owned(),
            Row::Ineq(i) => in_cols.column(i).into_owned(),
        }
    };
    let rebuild = |active: &[Row]| -> Factor {
        let mut f = Factor::new(&j0);
        for (iq, &row) in active.iter().enumerate() {
            let mut d = f.j.transpose() * normal(row);
            f.add(&mut d, iq);
        }
        f
    };

    let mut x = -chol.solve(&problem.gradient);
    let mut fac = Factor::new(&j0);
    let mut active: Vec<Row> = Vec::with_capacity(n);
    let mut u: Vec<f64> = Vec::with_capacity(n);

    for i in 0..me {
        let np = normal(Row::Eq(i));
        let iq = active.len();
        let mut d = fac.j.transpose() * &np;
        if fac.is_dependent(&d, iq) {
            let residual = np.dot(&x) - problem.eq_rhs[i];
            if residual.abs() > EQ_RESIDUAL_TOL * (1.0 + problem.eq_rhs[i].abs()) {
                return Err(FtcError::QpInfeasible(format!("equality row {i} is inconsistent with earlier rows")));
            }
            continue;
        }
        let (z, r) = fac.directions(&d, iq);
        let t2 = (problem.eq_rhs[i] - np.dot(&x)) / z.dot(&np);
        x += &z * t2;
        for k in 0..iq {
            u[k] -= t2 * r[k];
        }
        fac.add(&mut d, iq);
        active.push(Row::Eq(i));
        u.push(t2);
    }
    let p_eq = active.len();

    let psi_tol = mi as f64 * f64::EPSILON * c1 * c2 * 100.0;
    let max_iter = 50 * (n + mi) + 100;
    let mut iterations = 0;
    let mut excluded = vec![false; mi];

    'outer: loop {
        iterations += 1;
        if iterations > max_iter {
            return Err(FtcError::QpInfeasible(format!("no convergence in {max_iter} active-set changes")));
        }
        let s = &problem.ineq_matrix * &x - &problem.ineq_rhs;
        let psi: f64 = s.iter().map(|v| v.min(0.0)).sum();
        if psi.abs() <= psi_tol {
            break;
        }
        let active_old = active.clone();
        let u_old = u.clone();
        let x_old = x.clone();
        excluded.iter_mut().for_each(|e| *e = false);

        'select: loop {
            let is_active = |i: usize, active: &[Row]| active[p_eq..].contains(&Row::Ineq(i));
            let mut ip = None;
            let mut most = 0.0;
            for i in 0..mi {
                if s[i] < most && !excluded[i] && !is_active(i, &active) {
                    most = s[i];
                    ip = Some(i);
                }
            }
            let Some(ip) = ip else {
                break 'outer;
            };
            let np = normal(Row::Ineq(ip));
            let mut s_ip = s[ip];
            let mut u_new = 0.0;

            loop {
                let iq = active.len();
                let mut d = fac.j.transpose() * &np;
                let (z, r) = fac.directions(&d, iq);

                let mut t1 = f64::INFINITY;
                let mut drop = None;
                for k in p_eq..iq {
                    if r[k] > 0.0 && u[k] / r[k] < t1 {
                        t1 = u[k] / r[k];
                        drop = Some(k);
                    }
                }
                let t2 = if z.dot(&z) > f64::EPSILON { -s_ip / z.dot(&np) } else { f64::INFINITY };
                let t = t1.min(t2);
                if !t.is_finite() {
                    return Err(FtcError::QpInfeasible(format!("inequality row {ip} cannot be satisfied")));
                }

                if !t2.is_finite() {
                    for k in 0..iq {
                        u[k] -= t * r[k];
                    }
                    u_new += t;
                    let qq = drop.expect("finite dual step has a blocking constraint");
                    fac.delete(qq, iq);
                    active.remove(qq);
                    u.remove(qq);
                    continue;
                }

                x += &z * t;
                for k in 0..iq {
                    u[k] -= t * r[k];
                }
                u_new += t;

                if t2 <= t1 {
                    if fac.is_dependent(&d, iq) {
                        excluded[ip] = true;
                        active = active_old.clone();
                        u = u_old.clone();
                        x = x_old.clone();
                        fac = rebuild(&active);
                        continue 'select;
                    }
                    fac.add(&mut d, iq);
                    active.push(Row::Ineq(ip));
                    u.push(u_new);
                    continue 'outer;
                }

                let qq = drop.expect("partial step has a blocking constraint");
                fac.delete(qq, iq);
                active.remove(qq);
                u.remove(qq);
                s_ip = np.dot(&x) - problem.ineq_rhs[ip];
            }
        }
    }

    let mut eq_multipliers = DVector::zeros(me);
    let mut ineq_multipliers = DVector::zeros(mi);
    for (row, lambda) in active.iter().zip(&u) {
        match *row {
            Row::Eq(i) => eq_multipliers[i] = *lambda,
            Row::Ineq(i) => ineq_multipliers[i] = *lambda,
        }
    }
    Ok(QpSolution {
        objective: problem.objective(&x),
        x,
        eq_multipliers,
        ineq_multipliers,
        iterations,
    })
}
