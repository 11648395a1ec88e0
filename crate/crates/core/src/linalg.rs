//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Largest absolute difference between `m[(i, j)]` and `m[(j, i)]`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn trace(m: &DMatrix<f64>) -> f64 {
    m.diagonal().sum()
}

/// `x' A x` for a symmetric `A`.
pub fn quad_form(a: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += a[(i, j)] * x[j];
        }
        acc += x[i] * row;
    }
    acc
}

/// `d' A d`.
pub fn sandwich_scalar(d: &DVector<f64>, a: &DMatrix<f64>) -> f64 {
    (d.transpose() * a * d)[(0, 0)]
}

/// Adds the ridge floor `1e-8 * scale * I` when the smallest eigenvalue of a
/// symmetric matrix falls below `1e-10 * scale`, with
/// `scale = max(trace / p, min_scale)`. Returns whether the floor was applied.
pub fn apply_ridge_floor(m: &mut DMatrix<f64>, min_scale: f64) -> bool {
    let p = m.nrows();
    if p == 0 {
        return false;
    }
    let scale = (trace(m) / p as f64).max(min_scale);
    if !(scale.is_finite() && scale > 0.0) {
        return false;
    }
    if min_eigenvalue(m) < 1e-10 * scale {
        for i in 0..p {
            m[(i, i)] += 1e-8 * scale;
        }
        true
    } else {
        false
    }
}
