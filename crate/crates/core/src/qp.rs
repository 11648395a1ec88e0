//! Dense convex QP over the unit simplex: `min x'Qx  s.t.  x >= 0, sum x = 1`.
//!
//! Two independent routes are available. For `m <= 3` every face of the
//! simplex is enumerated and the best feasible face minimizer is taken. For
//! larger problems spectral projected gradient (Barzilai-Borwein steps with
//! Armijo backtracking along the projection) runs until the projected
//! gradient vanishes. Every few steps a primal active-set refinement is
//! started from the current iterate, which usually finishes the job in a few
//! dozen steps.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const MAX_ITERATIONS: usize = 100_000;
const EXACT_MAX_DIM: usize = 3;
const POLISH_EVERY: usize = 25;
const ARMIJO: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpMethod {
    FaceEnumeration,
    ProjectedGradient,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// `max_i |x - P(x - grad)|_i` with `P` the simplex projection.
    pub kkt_residual: f64,
    pub iterations: usize,
    pub method: QpMethod,
}

#[derive(Debug, Clone, Copy)]
pub struct SimplexQp {
    pub tol: f64,
    pub max_iterations: usize,
    /// Use face enumeration for `m <= 3`.
    pub exact_small: bool,
}

impl Default for SimplexQp {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iterations: MAX_ITERATIONS,
            exact_small: true,
        }
    }
}

/// Euclidean projection onto the unit simplex (sort-based).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (k as f64 + 1.0);
        if u - candidate > 0.0 {
            tau = candidate;
        }
    }
    v.iter().map(|&x| (x - tau).max(0.0)).collect()
}

fn gradient(q: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let m = x.len();
    (0..m)
        .map(|i| 2.0 * (0..m).map(|j| q[(i, j)] * x[j]).sum::<f64>())
        .collect()
}

pub fn kkt_residual(q: &DMatrix<f64>, x: &[f64]) -> f64 {
    let g = gradient(q, x);
    let shifted: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - b).collect();
    project_simplex(&shifted)
        .iter()
        .zip(x)
        .map(|(p, a)| (a - p).abs())
        .fold(0.0, f64::max)
}

/// Minimizer of `x'Qx` on the affine hull of `support` (entries may be
/// negative). Singular faces get the minimum-norm solution.
fn affine_minimizer(q: &DMatrix<f64>, support: &[usize]) -> Option<Vec<f64>> {
    let k = support.len();
    let mut kkt = DMatrix::zeros(k + 1, k + 1);
    for (a, &i) in support.iter().enumerate() {
        for (b, &j) in support.iter().enumerate() {
            kkt[(a, b)] = 2.0 * q[(i, j)];
        }
        kkt[(a, k)] = 1.0;
        kkt[(k, a)] = 1.0;
    }
    let mut rhs = DVector::zeros(k + 1);
    rhs[k] = 1.0;
    let scale = kkt.amax().max(1.0);
    let sol = match kkt.clone().full_piv_lu().solve(&rhs) {
        Some(sol) if (&kkt * &sol - &rhs).amax() <= 1e-12 * scale => sol,
        _ => {
            // singular face: minimum-norm solution, refined once
            let svd = kkt.clone().svd(true, true);
            let mut sol = svd.solve(&rhs, 1e-13 * scale).ok()?;
            sol += svd.solve(&(&rhs - &kkt * &sol), 1e-13 * scale).ok()?;
            sol
        }
    };
    if (&kkt * &sol - &rhs).amax() > 1e-9 * scale || sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut x = vec![0.0; q.nrows()];
    for (a, &i) in support.iter().enumerate() {
        x[i] = sol[a];
    }
    Some(x)
}

/// Face minimizer restricted to the simplex, or `None` if it leaves the face.
fn face_minimizer(q: &DMatrix<f64>, support: &[usize]) -> Option<Vec<f64>> {
    let mut x = affine_minimizer(q, support)?;
    if x.iter().any(|&v| v < -1e-12) {
        return None;
    }
    x.iter_mut().for_each(|v| *v = v.max(0.0));
    let total: f64 = x.iter().sum();
    if total <= 0.0 {
        return None;
    }
    x.iter_mut().for_each(|v| *v /= total);
    Some(x)
}

/// Primal active-set refinement started from a feasible point. Each step
/// either moves to the affine minimizer of the current face, or walks towards
/// it until a coordinate hits zero and drops that coordinate. At a face
/// minimizer the most negative reduced gradient outside the face is added.
fn active_set(q: &DMatrix<f64>, x0: &[f64], threshold: f64) -> Option<Vec<f64>> {
    let m = q.nrows();
    let mut x = x0.to_vec();
    let peak = x.iter().cloned().fold(0.0, f64::max);
    let mut support: Vec<usize> = (0..m).filter(|&i| x[i] > 1e-12 * peak).collect();
    for i in 0..m {
        if !support.contains(&i) {
            x[i] = 0.0;
        }
    }
    let total: f64 = x.iter().sum();
    x.iter_mut().for_each(|v| *v /= total);

    for _ in 0..(10 * m + 100) {
        let z = affine_minimizer(q, &support)?;
        if support.iter().all(|&i| z[i] >= 0.0) {
            x = z;
            let g = gradient(q, &x);
            let level = support.iter().map(|&i| g[i]).sum::<f64>() / support.len() as f64;
            let entering = (0..m)
                .filter(|i| !support.contains(i))
                .min_by(|&a, &b| g[a].total_cmp(&g[b]));
            match entering {
                Some(j) if g[j] < level - threshold => {
                    support.push(j);
                    support.sort_unstable();
                }
                _ => return Some(x),
            }
        } else {
            let mut alpha = 1.0;
            for &i in &support {
                let d = z[i] - x[i];
                if z[i] < 0.0 && d < 0.0 {
                    alpha = f64::min(alpha, x[i] / -d);
                }
            }
            for &i in &support {
                x[i] += alpha * (z[i] - x[i]);
            }
            let blocking = support
                .iter()
                .copied()
                .min_by(|&a, &b| x[a].total_cmp(&x[b]))?;
            x[blocking] = 0.0;
            support.retain(|&i| i != blocking && x[i] > 0.0);
            for i in 0..m {
                if !support.contains(&i) {
                    x[i] = 0.0;
                }
            }
            if support.is_empty() {
                return None;
            }
            let total: f64 = x.iter().sum();
            x.iter_mut().for_each(|v| *v /= total);
        }
    }
    None
}

fn enumerate_faces(q: &DMatrix<f64>) -> Option<Vec<f64>> {
    let m = q.nrows();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << m) {
        let support: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        if let Some(x) = face_minimizer(q, &support) {
            let f = linalg::quad_form(q, &x);
            if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                best = Some((f, x));
            }
        }
    }
    best.map(|(_, x)| x)
}

impl SimplexQp {
    fn threshold(&self, q: &DMatrix<f64>) -> f64 {
        self.tol * q.amax().max(1.0)
    }

    pub fn solve(&self, q: &DMatrix<f64>) -> Result<QpSolution> {
        let m = q.nrows();
        if m == 0 || q.ncols() != m {
            return Err(Error::invalid(format!(
                "QP matrix must be square and non-empty, got {}x{}",
                q.nrows(),
                q.ncols()
            )));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("QP matrix has non-finite entries"));
        }
        let asym = linalg::asymmetry(q);
        if asym > 1e-12 * q.amax().max(1.0) {
            return Err(Error::NonSymmetric(asym));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tolerance must be positive"));
        }
        if m == 1 {
            return Ok(self.finish(q, vec![1.0], 0, QpMethod::FaceEnumeration));
        }
        if self.exact_small && m <= EXACT_MAX_DIM {
            if let Some(x) = enumerate_faces(q) {
                let sol = self.finish(q, x, 0, QpMethod::FaceEnumeration);
                if sol.kkt_residual <= self.threshold(q) {
                    return Ok(sol);
                }
                return self.projected_gradient(q, sol.x);
            }
        }
        self.projected_gradient(q, vec![1.0 / m as f64; m])
    }

    fn finish(&self, q: &DMatrix<f64>, mut x: Vec<f64>, iterations: usize, method: QpMethod) -> QpSolution {
        x.iter_mut().for_each(|v| *v = v.max(0.0));
        let total: f64 = x.iter().sum();
        x.iter_mut().for_each(|v| *v /= total);
        QpSolution {
            objective: linalg::quad_form(q, &x),
            kkt_residual: kkt_residual(q, &x),
            x,
            iterations,
            method,
        }
    }

    fn projected_gradient(&self, q: &DMatrix<f64>, x0: Vec<f64>) -> Result<QpSolution> {
        let threshold = self.threshold(q);
        let lmax = linalg::max_eigenvalue(q).max(f64::MIN_POSITIVE);
        let step_max = 1e12 / lmax.max(1e-12);
        let step_min = 1e-12 / lmax.max(1e-12);
        let mut x = project_simplex(&x0);
        let mut f = linalg::quad_form(q, &x);
        let mut g = gradient(q, &x);
        let mut step = 1.0 / (2.0 * lmax);
        let mut best = (kkt_residual(q, &x), x.clone());

        for iter in 0..self.max_iterations {
            let residual = kkt_residual(q, &x);
            if residual < best.0 {
                best = (residual, x.clone());
            }
            if residual <= threshold {
                // The residual scales with Q, so finish with an exact face
                // solve to make the argmin independent of the scale of Q.
                if let Some(cand) = active_set(q, &x, threshold) {
                    let sol = self.finish(q, cand, iter, QpMethod::ProjectedGradient);
                    if sol.kkt_residual <= threshold && sol.objective <= f + threshold {
                        return Ok(sol);
                    }
                }
                return Ok(self.finish(q, x, iter, QpMethod::ProjectedGradient));
            }
            if iter % POLISH_EVERY == POLISH_EVERY - 1 {
                if let Some(cand) = active_set(q, &x, threshold) {
                    let sol = self.finish(q, cand, iter, QpMethod::ProjectedGradient);
                    if sol.kkt_residual <= threshold && sol.objective <= f + threshold {
                        return Ok(sol);
                    }
                }
            }

            let trial: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            let dir: Vec<f64> = project_simplex(&trial)
                .iter()
                .zip(&x)
                .map(|(p, a)| p - a)
                .collect();
            let slope: f64 = dir.iter().zip(&g).map(|(d, gi)| d * gi).sum();
            let mut t = 1.0;
            let mut next: Vec<f64>;
            let mut f_next;
            loop {
                next = x.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
                f_next = linalg::quad_form(q, &next);
                if f_next <= f + ARMIJO * t * slope || t < 1e-20 {
                    break;
                }
                t *= 0.5;
            }
            let s: Vec<f64> = next.iter().zip(&x).map(|(a, b)| a - b).collect();
            let g_next = gradient(q, &next);
            let sy: f64 = s
                .iter()
                .zip(g_next.iter().zip(&g))
                .map(|(si, (gn, go))| si * (gn - go))
                .sum();
            let ss: f64 = s.iter().map(|v| v * v).sum();
            step = if sy > 0.0 { (ss / sy).clamp(step_min, step_max) } else { step_max };
            if ss == 0.0 {
                step = 1.0 / (2.0 * lmax);
            }
            x = next;
            f = f_next;
            g = g_next;
        }
        Err(Error::NonConvergence {
            iterations: self.max_iterations,
            residual: best.0,
            best: best.1,
        })
    }
}

/// Minimizes `x'Qx` over the unit simplex with the default solver settings
/// and the given tolerance.
pub fn solve_simplex_qp(q: &DMatrix<f64>, tol: f64) -> Result<QpSolution> {
    SimplexQp {
        tol,
        ..SimplexQp::default()
    }
    .solve(q)
}
