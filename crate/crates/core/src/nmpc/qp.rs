//! Primal active-set solver for convex quadratic programs with box bounds.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bound {
    Free,
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxQpResult {
    pub x: DVector<f64>,
    pub iterations: usize,
    /// Gradient `H x + g` at the solution (bound multipliers on the active set).
    pub gradient: DVector<f64>,
}

fn cholesky_solve(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let scale = h.diagonal().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut shift = 0.0;
    for _ in 0..8 {
        let mut m = h.clone();
        if shift > 0.0 {
            for i in 0..m.nrows() {
                m[(i, i)] += shift;
            }
        }
        if let Some(chol) = m.cholesky() {
            let p = chol.solve(rhs);
            if p.iter().all(|v| v.is_finite()) {
                return Some(p);
            }
        }
        shift = if shift == 0.0 {
            1e-12 * scale
        } else {
            shift * 100.0
        };
    }
    None
}

/// Minimises `0.5 x'Hx + g'x` subject to `lower <= x <= upper`.
///
/// `h` must be symmetric positive semidefinite; free subproblems that are
/// numerically singular are regularised by a small diagonal shift. The
/// starting point is clipped into the box; the initial working set holds the
/// bounds that the gradient pushes against.
pub fn solve_box_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    start: Option<&DVector<f64>>,
) -> Result<BoxQpResult> {
    let n = g.len();
    if h.nrows() != n || h.ncols() != n || lower.len() != n || upper.len() != n {
        return Err(Error::Solver("QP dimensions disagree".into()));
    }
    if lower.iter().zip(upper.iter()).any(|(l, u)| !(l <= u)) {
        return Err(Error::Solver("QP bounds are inconsistent".into()));
    }
    let mut x = match start {
        Some(s) => s.clone(),
        None => DVector::zeros(n),
    };
    for i in 0..n {
        x[i] = x[i].clamp(lower[i], upper[i]);
    }
    let mut grad = h * &x + g;
    let gscale = grad.amax().max(1.0);
    let tol = 1e-11 * gscale;

    let mut state: Vec<Bound> = (0..n)
        .map(|i| {
            if lower[i] == upper[i] || (x[i] <= lower[i] && grad[i] >= 0.0) {
                Bound::Lower
            } else if x[i] >= upper[i] && grad[i] <= 0.0 {
                Bound::Upper
            } else {
                Bound::Free
            }
        })
        .collect();
    for i in 0..n {
        match state[i] {
            Bound::Lower => x[i] = lower[i],
            Bound::Upper => x[i] = upper[i],
            Bound::Free => {}
        }
    }
    grad = h * &x + g;

    let max_iterations = 10 * n + 50;
    let mut iterations = 0;
    loop {
        iterations += 1;
        if iterations > max_iterations {
            return Err(Error::Solver("QP active-set iteration limit".into()));
        }
        {
            let free: Vec<usize> = (0..n).filter(|&i| state[i] == Bound::Free).collect();
            if !free.is_empty() {
                let hff = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
                let rhs = DVector::from_fn(free.len(), |a, _| -grad[free[a]]);
                let p = cholesky_solve(&hff, &rhs)
                    .ok_or_else(|| Error::Solver("QP factorization failed".into()))?;
                let mut alpha = 1.0f64;
                let mut blocking = None;
                for (a, &i) in free.iter().enumerate() {
                    let limit = if p[a] < 0.0 {
                        (lower[i] - x[i]) / p[a]
                    } else if p[a] > 0.0 {
                        (upper[i] - x[i]) / p[a]
                    } else {
                        f64::INFINITY
                    };
                    if limit < alpha {
                        alpha = limit.max(0.0);
                        blocking = Some((
                            i,
                            if p[a] < 0.0 {
                                Bound::Lower
                            } else {
                                Bound::Upper
                            },
                        ));
                    }
                }
                for (a, &i) in free.iter().enumerate() {
                    x[i] = (x[i] + alpha * p[a]).clamp(lower[i], upper[i]);
                }
                if let Some((i, side)) = blocking {
                    state[i] = side;
                    x[i] = if side == Bound::Lower {
                        lower[i]
                    } else {
                        upper[i]
                    };
                }
                grad = h * &x + g;
                if blocking.is_some() {
                    continue;
                }
            }
        }
        let mut worst: Option<(usize, f64)> = None;
        for i in 0..n {
            if lower[i] == upper[i] {
                continue;
            }
            let violation = match state[i] {
                Bound::Lower => -grad[i],
                Bound::Upper => grad[i],
                Bound::Free => continue,
            };
            if violation > tol && worst.is_none_or(|(_, v)| violation > v) {
                worst = Some((i, violation));
            }
        }
        match worst {
            Some((i, _)) => state[i] = Bound::Free,
            None => break,
        }
    }
    Ok(BoxQpResult {
        x,
        iterations,
        gradient: grad,
    })
}
