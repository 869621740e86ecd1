//! Small dense least-squares helpers.

use nalgebra::{DMatrix, DVector};

/// Sign restriction on one unknown of a bounded least-squares problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    Free,
    NonNegative,
    NonPositive,
    Zero,
}

/// Minimum-norm least-squares solution through the SVD.
pub fn lstsq_min_norm(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if a.ncols() == 0 {
        return DVector::zeros(0);
    }
    if a.nrows() == 0 {
        return DVector::zeros(a.ncols());
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return DVector::zeros(a.ncols());
    }
    let eps = smax * 1e-12 * (a.nrows().max(a.ncols()) as f64);
    svd.solve(b, eps).unwrap_or_else(|_| DVector::zeros(a.ncols()))
}

fn sub_columns(a: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), cols.len(), |i, j| a[(i, cols[j])])
}

/// Solves `min ||A x - b||` subject to per-variable sign bounds.
///
/// Lawson-Hanson active-set iteration in which free variables never leave
/// the passive set. Each passive subproblem is solved in the minimum-norm
/// sense, so degenerate data give the smallest solution on that face.
pub fn bounded_lstsq(a: &DMatrix<f64>, b: &DVector<f64>, bounds: &[Bound]) -> DVector<f64> {
    let n = a.ncols();
    assert_eq!(bounds.len(), n, "one bound per column");
    // flip non-positive columns so every constrained variable is >= 0
    let sign: Vec<f64> = bounds.iter().map(|b| if *b == Bound::NonPositive { -1.0 } else { 1.0 }).collect();
    let mut af = a.clone();
    for (j, s) in sign.iter().enumerate() {
        if *s < 0.0 {
            af.column_mut(j).neg_mut();
        }
    }
    let free: Vec<usize> = (0..n).filter(|&j| bounds[j] == Bound::Free).collect();
    let constrained: Vec<usize> =
        (0..n).filter(|&j| matches!(bounds[j], Bound::NonNegative | Bound::NonPositive)).collect();

    let scale = 1.0 + af.iter().fold(0.0f64, |m, v| m.max(v.abs())) * (1.0 + b.amax());
    let tol = 1e-13 * scale;

    let mut x = DVector::zeros(n);
    let mut passive: Vec<usize> = free.clone();
    let solve_passive = |passive: &[usize]| -> DVector<f64> {
        let mut full = DVector::zeros(n);
        if passive.is_empty() {
            return full;
        }
        let s = lstsq_min_norm(&sub_columns(&af, passive), b);
        for (k, &j) in passive.iter().enumerate() {
            full[j] = s[k];
        }
        full
    };
    if !passive.is_empty() {
        x = solve_passive(&passive);
    }

    let max_outer = 3 * n + 10;
    for _ in 0..max_outer {
        let r = b - &af * &x;
        let w = af.transpose() * &r;
        let candidate = constrained
            .iter()
            .copied()
            .filter(|j| !passive.contains(j))
            .filter(|&j| w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(t) = candidate else { break };
        passive.push(t);
        passive.sort_unstable();

        let mut inner = 0;
        loop {
            inner += 1;
            let s = solve_passive(&passive);
            let bad: Vec<usize> =
                passive.iter().copied().filter(|&j| bounds[j] != Bound::Free && s[j] <= 0.0).collect();
            if bad.is_empty() || inner > 3 * n + 10 {
                x = s;
                break;
            }
            let mut alpha = 1.0f64;
            for &j in &bad {
                let denom = x[j] - s[j];
                if denom > 0.0 {
                    alpha = alpha.min(x[j] / denom);
                }
            }
            x = &x + (&s - &x) * alpha;
            passive.retain(|&j| bounds[j] == Bound::Free || x[j] > tol);
            for j in 0..n {
                if !passive.contains(&j) {
                    x[j] = 0.0;
                }
            }
        }
    }
    for j in 0..n {
        if bounds[j] == Bound::Zero {
            x[j] = 0.0;
        } else if bounds[j] != Bound::Free {
            x[j] = x[j].max(0.0);
        }
        x[j] *= sign[j];
    }
    x
}

/// Nonnegative least squares `min_{x >= 0} ||A x - b||`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    bounded_lstsq(a, b, &vec![Bound::NonNegative; a.ncols()])
}

/// Spectral norm of a symmetric matrix.
pub fn sym_spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone().symmetric_eigenvalues().iter().fold(0.0f64, |acc, e| acc.max(e.abs()))
}
