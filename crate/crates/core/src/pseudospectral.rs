//! Legendre-Gauss-Lobatto collocation: nodes, quadrature weights and the
//! differentiation matrix on `[-1, 1]`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{FtcError, Result};

const NEWTON_TOL: f64 = 1e-14;
const NEWTON_MAX_ITER: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct CollocationBasis {
    /// Number of nodes, `N + 1`.
    pub n_nodes: usize,
    /// Strictly increasing nodes, `-1` and `1` included.
    pub nodes: DVector<f64>,
    pub weights: DVector<f64>,
    /// `(d * f)[i]` approximates `f'(nodes[i])`.
    pub d: DMatrix<f64>,
}

impl CollocationBasis {
    /// Polynomial degree `N`.
    pub fn degree(&self) -> usize {
        self.n_nodes - 1
    }

    /// `sum_j w_j f(tau_j)`.
    pub fn integrate(&self, values: &DVector<f64>) -> f64 {
        self.weights.dot(values)
    }
}

/// Legendre polynomials `(P_{n-1}(x), P_n(x))` by the three-term recurrence.
fn legendre_pair(n: usize, x: f64) -> (f64, f64) {
    let (mut prev, mut cur) = (1.0, x);
    if n == 0 {
        return (0.0, 1.0);
    }
    for k in 1..n {
        let k = k as f64;
        let next = ((2.0 * k + 1.0) * x * cur - k * prev) / (k + 1.0);
        prev = cur;
        cur = next;
    }
    (prev, cur)
}

/// Basis of polynomial degree `n` (`n + 1` nodes).
pub fn lgl_basis(n: usize) -> Result<CollocationBasis> {
    if n == 0 {
        return Err(FtcError::InvalidArgument("LGL basis needs degree >= 1".into()));
    }
    let nf = n as f64;
    let np = n + 1;

    // Newton on (1 - x^2) P_N'(x) written through the recurrence, starting from
    // the Chebyshev-Gauss-Lobatto points.
    let mut nodes: Vec<f64> = (0..np).map(|i| -(std::f64::consts::PI * i as f64 / nf).cos()).collect();
    for (i, x) in nodes.iter_mut().enumerate() {
        if i == 0 || i == n {
            continue;
        }
        let mut converged = false;
        for _ in 0..NEWTON_MAX_ITER {
            let (pm1, p) = legendre_pair(n, *x);
            let step = (*x * p - pm1) / (np as f64 * p);
            *x -= step;
            if step.abs() <= NEWTON_TOL {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(FtcError::BasisConstruction(format!(
                "Newton iteration for LGL node {i} of degree {n} did not converge"
            )));
        }
    }
    nodes[0] = -1.0;
    nodes[n] = 1.0;
    // Enforce the symmetry of the node set exactly.
    for i in 0..np / 2 {
        let half = 0.5 * (nodes[n - i] - nodes[i]);
        nodes[i] = -half;
        nodes[n - i] = half;
    }
    if np % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    if nodes.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(FtcError::BasisConstruction(format!("LGL nodes of degree {n} are not strictly increasing")));
    }

    let pn: Vec<f64> = nodes.iter().map(|&x| legendre_pair(n, x).1).collect();
    let weights = DVector::from_iterator(np, pn.iter().map(|p| 2.0 / (nf * (nf + 1.0) * p * p)));

    let mut d = DMatrix::from_fn(np, np, |i, j| {
        if i == j {
            0.0
        } else {
            pn[i] / (pn[j] * (nodes[i] - nodes[j]))
        }
    });
    // Diagonal from the zero row-sum identity; this reproduces the corner
    // values -N(N+1)/4 and N(N+1)/4 and the zero interior diagonal while
    // keeping constants in the null space to rounding.
    for i in 0..np {
        let off: f64 = d.row(i).sum();
        d[(i, i)] = -off;
    }

    Ok(CollocationBasis {
        n_nodes: np,
        nodes: DVector::from_vec(nodes),
        weights,
        d,
    })
}

/// Shared basis of degree `n`, built on first use.
pub fn cached_basis(n: usize) -> Result<Arc<CollocationBasis>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<CollocationBasis>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(b) = cache.lock().unwrap_or_else(|e| e.into_inner()).get(&n) {
        return Ok(Arc::clone(b));
    }
    let basis = Arc::new(lgl_basis(n)?);
    cache
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .entry(n)
        .or_insert_with(|| Arc::clone(&basis));
    Ok(basis)
}

/// Physical node times on `[t0, tf]` and the derivative/quadrature scale `(tf - t0) / 2`.
pub fn time_map(basis: &CollocationBasis, t0: f64, tf: f64) -> Result<(Vec<f64>, f64)> {
    if !(tf > t0) {
        return Err(FtcError::InvalidArgument(format!("time_map needs tf > t0, got [{t0}, {tf}]")));
    }
    let scale = 0.5 * (tf - t0);
    let mid = 0.5 * (tf + t0);
    let times = basis
        .nodes
        .iter()
        .enumerate()
        .map(|(i, &tau)| {
            if i == 0 {
                t0
            } else if i + 1 == basis.n_nodes {
                tf
            } else {
                mid + scale * tau
            }
        })
        .collect();
    Ok((times, scale))
}
