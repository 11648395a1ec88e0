//! Quadratic LA-MSE criteria built from per-unit fits.
//!
//! Unit 1 (the target) is always `fits[0]`. With `d = grad mu(theta_1)` and
//! `delta_i = theta_i - theta_1`, the fixed-N matrix is
//!
//! ```text
//! Psi[i][j] = T (d'delta_i)(d'delta_j) + [i == j] d'V_i d
//! ```
//!
//! i.e. `b b' + diag(v)` with `b_i = sqrt(T) d'delta_i` and `v_i = d'V_i d`.
//! The large-N criterion over the sub-simplex `{w >= 0, sum w <= 1}` is the
//! quadratic form `x'Qx` at `x = (w, 1 - sum w)` where
//!
//! ```text
//! Q = [ Psi      -b B ]      B = sqrt(T) d'(theta_1 - mean_i theta_i)
//!     [ -B b'    B^2  ]
//! ```

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::focus::Focus;
use crate::linalg;
use crate::panel::{is_permutation, UnitFit};

/// Tolerance on weight feasibility.
pub const FEASIBILITY_TOL: f64 = 1e-10;

/// Common interface of the two criteria.
pub trait LamseCriterion {
    /// Matrix of the quadratic form the weight solver minimizes.
    fn matrix(&self) -> &DMatrix<f64>;

    /// Criterion value at `w`, after checking `w` lies in the feasible set.
    fn evaluate(&self, w: &[f64]) -> Result<f64>;
}

#[derive(Debug, Clone)]
pub struct LamseFixedN {
    pub psi: DMatrix<f64>,
    /// `sqrt(T) d'(theta_i - theta_1)`.
    pub bias: DVector<f64>,
    /// `d'V_i d`.
    pub var: DVector<f64>,
    pub grad: DVector<f64>,
    pub t: usize,
}

#[derive(Debug, Clone)]
pub struct LamseUnbiased {
    pub psi_tilde: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct LamseLargeN {
    /// `(nbar + 1) x (nbar + 1)`.
    pub q: DMatrix<f64>,
    /// Fixed-N part over the unrestricted units, in `ordering` order.
    pub fixed: LamseFixedN,
    /// `sqrt(T) d'(theta_1 - mean theta)`.
    pub tail_bias: f64,
    pub n: usize,
    pub nbar: usize,
    /// Permutation of fit indices; the first `nbar` are unrestricted.
    pub ordering: Vec<usize>,
}

fn check_fits(fits: &[&UnitFit], t: usize) -> Result<usize> {
    let first = fits
        .first()
        .ok_or_else(|| Error::invalid("at least one unit fit is required"))?;
    if t == 0 {
        return Err(Error::invalid("T must be at least 1"));
    }
    let p = first.theta_hat.len();
    for f in fits {
        if f.theta_hat.len() != p || f.v_hat.nrows() != p || f.v_hat.ncols() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: f.theta_hat.len(),
            });
        }
    }
    Ok(p)
}

fn target_gradient(target: &UnitFit, focus: &Focus) -> Result<DVector<f64>> {
    focus
        .gradient(&target.theta_hat)
        .map_err(|e| e.for_unit(&target.unit_id))
}

/// `d'(theta_i - theta_1)` for each unit.
fn projected_gaps(target: &UnitFit, units: &[&UnitFit], grad: &DVector<f64>) -> Vec<f64> {
    units
        .iter()
        .map(|f| grad.dot(&(&f.theta_hat - &target.theta_hat)))
        .collect()
}

fn fixed_from_units(
    target: &UnitFit,
    units: &[&UnitFit],
    focus: &Focus,
    t: usize,
) -> Result<LamseFixedN> {
    let grad = target_gradient(target, focus)?;
    let gaps = projected_gaps(target, units, &grad);
    let tf = t as f64;
    let m = units.len();
    let var = DVector::from_iterator(
        m,
        units.iter().map(|f| linalg::sandwich_scalar(&grad, &f.v_hat)),
    );
    let mut psi = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let mut entry = tf * gaps[i] * gaps[j];
            if i == j {
                entry += var[i];
            }
            psi[(i, j)] = entry;
            psi[(j, i)] = entry;
        }
    }
    let bias = DVector::from_iterator(m, gaps.iter().map(|g| tf.sqrt() * g));
    Ok(LamseFixedN {
        psi,
        bias,
        var,
        grad,
        t,
    })
}

/// Fixed-N criterion matrix over all supplied fits (target first).
pub fn build_psi_hat(fits: &[UnitFit], focus: &Focus, t: usize) -> Result<LamseFixedN> {
    let refs: Vec<&UnitFit> = fits.iter().collect();
    check_fits(&refs, t)?;
    fixed_from_units(refs[0], &refs, focus, t)
}

/// The asymptotically unbiased but possibly indefinite variant. Diagnostic
/// only: it is never handed to the weight solver.
pub fn build_psi_tilde(fits: &[UnitFit], focus: &Focus, t: usize) -> Result<LamseUnbiased> {
    let refs: Vec<&UnitFit> = fits.iter().collect();
    check_fits(&refs, t)?;
    let target = refs[0];
    let grad = target_gradient(target, focus)?;
    let gaps = projected_gaps(target, &refs, &grad);
    let tf = t as f64;
    let v1 = linalg::sandwich_scalar(&grad, &target.v_hat);
    let m = refs.len();
    let mut psi_tilde = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let entry = if i == j {
                tf * gaps[i] * gaps[i] - (linalg::sandwich_scalar(&grad, &refs[i].v_hat) + v1)
            } else {
                tf * gaps[i] * gaps[j] - v1
            };
            psi_tilde[(i, j)] = entry;
            psi_tilde[(j, i)] = entry;
        }
    }
    Ok(LamseUnbiased { psi_tilde })
}

/// Borders `psi` with the tail column `-bias * tail` and corner `tail^2`.
pub fn tail_augmented(psi: &DMatrix<f64>, bias: &DVector<f64>, tail: f64) -> DMatrix<f64> {
    let m = psi.nrows();
    let mut q = DMatrix::zeros(m + 1, m + 1);
    q.view_mut((0, 0), (m, m)).copy_from(psi);
    for i in 0..m {
        let border = -bias[i] * tail;
        q[(i, m)] = border;
        q[(m, i)] = border;
    }
    q[(m, m)] = tail * tail;
    q
}

/// Large-N criterion. `fits` holds all `N` units with the target first;
/// `ordering[..nbar]` are the unrestricted units and must include the target
/// when `nbar >= 1`. With `nbar = 0` the problem degenerates to `[tail^2]`
/// and all mass goes to the tail.
pub fn build_large_n_objective(
    fits: &[UnitFit],
    focus: &Focus,
    t: usize,
    nbar: usize,
    ordering: &[usize],
) -> Result<LamseLargeN> {
    let refs: Vec<&UnitFit> = fits.iter().collect();
    check_fits(&refs, t)?;
    let n = fits.len();
    if nbar >= n {
        return Err(Error::UseFixedRegime { nbar, n });
    }
    if ordering.len() != n || !is_permutation(ordering) {
        return Err(Error::invalid("ordering must be a permutation of the unit indices"));
    }
    if nbar >= 1 && !ordering[..nbar].contains(&0) {
        return Err(Error::invalid(
            "the target unit must be among the unrestricted units",
        ));
    }
    let target = refs[0];
    let unrestricted: Vec<&UnitFit> = ordering[..nbar].iter().map(|&i| refs[i]).collect();
    let fixed = fixed_from_units(target, &unrestricted, focus, t)?;
    let grad = target_gradient(target, focus)?;
    let p = target.theta_hat.len();
    let mean = refs
        .iter()
        .fold(DVector::zeros(p), |acc, f| acc + &f.theta_hat)
        / n as f64;
    let tail_bias = (t as f64).sqrt() * grad.dot(&(&target.theta_hat - mean));
    let q = tail_augmented(&fixed.psi, &fixed.bias, tail_bias);
    Ok(LamseLargeN {
        q,
        fixed,
        tail_bias,
        n,
        nbar,
        ordering: ordering.to_vec(),
    })
}

fn check_nonnegative(w: &[f64]) -> Result<()> {
    if let Some((i, v)) = w
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v < -FEASIBILITY_TOL)
    {
        return Err(Error::InfeasibleWeights(format!("w[{i}] = {v}")));
    }
    Ok(())
}

impl LamseCriterion for LamseFixedN {
    fn matrix(&self) -> &DMatrix<f64> {
        &self.psi
    }

    fn evaluate(&self, w: &[f64]) -> Result<f64> {
        if w.len() != self.psi.nrows() {
            return Err(Error::DimensionMismatch {
                expected: self.psi.nrows(),
                found: w.len(),
            });
        }
        check_nonnegative(w)?;
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > FEASIBILITY_TOL {
            return Err(Error::InfeasibleWeights(format!("weights sum to {total}")));
        }
        Ok(linalg::quad_form(&self.psi, w))
    }
}

impl LamseCriterion for LamseLargeN {
    fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// `w` holds the `nbar` unrestricted weights; the tail receives the rest.
    fn evaluate(&self, w: &[f64]) -> Result<f64> {
        if w.len() != self.nbar {
            return Err(Error::DimensionMismatch {
                expected: self.nbar,
                found: w.len(),
            });
        }
        check_nonnegative(w)?;
        let total: f64 = w.iter().sum();
        if total > 1.0 + FEASIBILITY_TOL {
            return Err(Error::InfeasibleWeights(format!("weights sum to {total} > 1")));
        }
        let mut x = w.to_vec();
        x.push(1.0 - total);
        Ok(linalg::quad_form(&self.q, &x))
    }
}

pub fn evaluate_lamse<C: LamseCriterion + ?Sized>(criterion: &C, w: &[f64]) -> Result<f64> {
    criterion.evaluate(w)
}

/// Row-major CSV, full symmetric storage, no header.
pub fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, mut out: W) -> Result<()> {
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:?}", m[(i, j)])).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
    use rand::Rng;

    pub(crate) fn fit(id: &str, theta: &[f64], v: DMatrix<f64>) -> UnitFit {
        UnitFit {
            unit_id: id.into(),
            theta_hat: DVector::from_column_slice(theta),
            v_hat: v,
            t_eff: 10,
            ssr: 1.0,
            sigma2_hat: 0.1,
            design_floored: false,
            variance_floored: false,
        }
    }

    fn fixture() -> Vec<UnitFit> {
        vec![
            fit("1", &[1.0, 0.0], DMatrix::identity(2, 2)),
            fit("2", &[1.5, 0.0], DMatrix::identity(2, 2)),
        ]
    }

    fn scalar_fits(thetas: &[f64]) -> Vec<UnitFit> {
        thetas
            .iter()
            .enumerate()
            .map(|(i, &t)| fit(&i.to_string(), &[t], DMatrix::from_element(1, 1, 1.0)))
            .collect()
    }

    #[test]
    fn psi_hat_fixture() {
        let l = build_psi_hat(&fixture(), &Focus::Coordinate(0), 4).unwrap();
        assert_eq!(l.psi, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]));
        assert_eq!(l.bias[0], 0.0);
    }

    #[test]
    fn psi_tilde_fixture_is_indefinite() {
        let l = build_psi_tilde(&fixture(), &Focus::Coordinate(0), 4).unwrap();
        assert_eq!(
            l.psi_tilde,
            DMatrix::from_row_slice(2, 2, &[-2.0, -1.0, -1.0, -1.0])
        );
        assert!(linalg::min_eigenvalue(&l.psi_tilde) < 0.0);
    }

    #[test]
    fn psi_difference_is_variance_terms() {
        let fits = vec![
            fit("1", &[0.3, -0.2], DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])),
            fit("2", &[0.1, 0.4], DMatrix::from_row_slice(2, 2, &[1.0, -0.2, -0.2, 0.5])),
            fit("3", &[-0.5, 0.2], DMatrix::from_row_slice(2, 2, &[0.7, 0.0, 0.0, 0.9])),
        ];
        let focus = Focus::ConditionalMean {
            weights: vec![1.0, 2.0],
            offset: 0.0,
        };
        let hat = build_psi_hat(&fits, &focus, 9).unwrap();
        let tilde = build_psi_tilde(&fits, &focus, 9).unwrap();
        let d = &hat.grad;
        let v1 = linalg::sandwich_scalar(d, &fits[0].v_hat);
        for i in 0..3 {
            for j in 0..3 {
                // Psi-hat adds v_i on the diagonal, Psi-tilde subtracts v_i + v_1
                let expected = if i == j {
                    2.0 * linalg::sandwich_scalar(d, &fits[i].v_hat) + v1
                } else {
                    v1
                };
                assert_abs_diff_eq!(
                    hat.psi[(i, j)] - tilde.psi_tilde[(i, j)],
                    expected,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn single_unit_is_variance() {
        let fits = vec![fit("1", &[0.4, 0.1], DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 3.0]))];
        let l = build_psi_hat(&fits, &Focus::Coordinate(1), 50).unwrap();
        assert_eq!(l.psi.shape(), (1, 1));
        assert_eq!(l.psi[(0, 0)], 3.0);
        assert_eq!(l.evaluate(&[1.0]).unwrap(), 3.0);
    }

    #[test]
    fn scaled_focus_scales_by_square() {
        let fits = vec![
            fit("1", &[0.3, -0.2], DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])),
            fit("2", &[0.1, 0.4], DMatrix::identity(2, 2)),
        ];
        let base = build_psi_hat(&fits, &Focus::Coordinate(0), 16).unwrap();
        let scaled = build_psi_hat(
            &fits,
            &Focus::ConditionalMean {
                weights: vec![3.0, 0.0],
                offset: 0.0,
            },
            16,
        )
        .unwrap();
        for (a, b) in base.psi.iter().zip(scaled.psi.iter()) {
            assert_abs_diff_eq!(9.0 * a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn large_n_fixture() {
        let l = build_large_n_objective(&scalar_fits(&[0.0, 1.0, 2.0]), &Focus::Coordinate(0), 1, 1, &[0, 1, 2])
            .unwrap();
        assert_eq!(l.q, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        assert_eq!(l.tail_bias, -1.0);
        assert_eq!(l.evaluate(&[0.5]).unwrap(), 0.5);
    }

    #[test]
    fn large_n_rejects_bad_arguments() {
        let fits = scalar_fits(&[0.0, 1.0, 2.0]);
        let f = Focus::Coordinate(0);
        assert!(matches!(
            build_large_n_objective(&fits, &f, 1, 3, &[0, 1, 2]),
            Err(Error::UseFixedRegime { nbar: 3, n: 3 })
        ));
        assert!(build_large_n_objective(&fits, &f, 1, 1, &[1, 0, 2]).is_err());
        assert!(build_large_n_objective(&fits, &f, 1, 1, &[0, 0, 2]).is_err());
        // target need not be first, only unrestricted
        assert!(build_large_n_objective(&fits, &f, 1, 2, &[1, 0, 2]).is_ok());
    }

    #[test]
    fn nbar_zero_is_tail_only() {
        let l = build_large_n_objective(&scalar_fits(&[0.0, 1.0, 2.0]), &Focus::Coordinate(0), 4, 0, &[0, 1, 2])
            .unwrap();
        assert_eq!(l.q.shape(), (1, 1));
        assert_abs_diff_eq!(l.q[(0, 0)], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l.evaluate(&[]).unwrap(), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn evaluate_checks_feasibility() {
        let l = build_psi_hat(&fixture(), &Focus::Coordinate(0), 4).unwrap();
        assert_abs_diff_eq!(l.evaluate(&[2.0 / 3.0, 1.0 / 3.0]).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        assert!(matches!(l.evaluate(&[0.6, 0.6]), Err(Error::InfeasibleWeights(_))));
        assert!(matches!(l.evaluate(&[1.1, -0.1]), Err(Error::InfeasibleWeights(_))));
        assert!(l.evaluate(&[1.0]).is_err());
        let large = build_large_n_objective(&scalar_fits(&[0.0, 1.0, 2.0]), &Focus::Coordinate(0), 1, 1, &[0, 1, 2])
            .unwrap();
        assert!(large.evaluate(&[1.2]).is_err());
        assert!(large.evaluate(&[0.0]).is_ok());
    }

    #[test]
    fn focus_singularity_names_target() {
        let fits = vec![fit("home", &[1.0, 1.0], DMatrix::identity(2, 2))];
        let err = build_psi_hat(&fits, &Focus::LongRunEffect { beta: 0, lambda: 1 }, 5).unwrap_err();
        assert!(err.to_string().contains("home"), "{err}");
    }

    #[test]
    fn matrix_csv_layout() {
        let mut buf = Vec::new();
        write_matrix_csv(&DMatrix::from_row_slice(2, 2, &[1.0, -0.5, -0.5, 2.0]), &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "1.0,-0.5\n-0.5,2.0\n");
    }

    fn random_fit_set(seed: u64, n: usize, p: usize) -> (Vec<UnitFit>, Focus) {
        let mut rng = crate::rng::stream(seed, &[]);
        let fits = (0..n)
            .map(|i| {
                let theta: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
                let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
                fit(&i.to_string(), &theta, &a * a.transpose() + DMatrix::identity(p, p) * 0.01)
            })
            .collect();
        let focus = Focus::ConditionalMean {
            weights: (0..p).map(|_| rng.random_range(-2.0..2.0)).collect(),
            offset: rng.random_range(-1.0..1.0),
        };
        (fits, focus)
    }

    fn simplex_point(raw: &[f64]) -> Vec<f64> {
        let total: f64 = raw.iter().sum();
        raw.iter().map(|r| r / total).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn psi_hat_structure(seed in any::<u64>(), n in 1..7usize, p in 1..4usize, t in 1..500usize) {
            let (fits, focus) = random_fit_set(seed, n, p);
            let l = build_psi_hat(&fits, &focus, t).unwrap();
            let rebuilt = &l.bias * l.bias.transpose() + DMatrix::from_diagonal(&l.var);
            prop_assert!((&l.psi - rebuilt).amax() <= 1e-12 * (1.0 + l.psi.amax()));
            prop_assert!(l.var.iter().all(|&v| v > 0.0));
            prop_assert!(l.psi.clone().cholesky().is_some());
        }

        #[test]
        fn criteria_are_nonnegative(seed in any::<u64>(), n in 2..7usize, raw in proptest::collection::vec(1e-6..1.0f64, 7)) {
            let (fits, focus) = random_fit_set(seed, n, 2);
            let fixed = build_psi_hat(&fits, &focus, 50).unwrap();
            prop_assert!(fixed.evaluate(&simplex_point(&raw[..n])).unwrap() >= 0.0);
            let nbar = 1 + (seed as usize) % (n - 1);
            let ordering: Vec<usize> = (0..n).collect();
            let large = build_large_n_objective(&fits, &focus, 50, nbar, &ordering).unwrap();
            let x = simplex_point(&raw[..=nbar]);
            prop_assert!(large.evaluate(&x[..nbar]).unwrap() >= 0.0);
            prop_assert!(large.q.clone().symmetric_eigenvalues().min() >= -1e-9 * large.q.amax());
        }

        #[test]
        fn large_regime_embeds_fixed(seed in any::<u64>(), n in 2..7usize, raw in proptest::collection::vec(1e-6..1.0f64, 6)) {
            let (fits, focus) = random_fit_set(seed, n, 2);
            let nbar = n - 1;
            let ordering: Vec<usize> = (0..n).collect();
            let fixed = build_psi_hat(&fits, &focus, 30).unwrap();
            let large = build_large_n_objective(&fits, &focus, 30, nbar, &ordering).unwrap();
            let shared = fixed.psi.view((0, 0), (nbar, nbar)).into_owned();
            prop_assert!((large.q.view((0, 0), (nbar, nbar)) - shared).amax() <= 1e-12 * (1.0 + fixed.psi.amax()));
            prop_assert!((large.q[(nbar, nbar)] - large.tail_bias.powi(2)).abs() <= 1e-12 * (1.0 + large.q.amax()));
            let x = simplex_point(&raw[..nbar]);
            let mut w = x.clone();
            w.push(0.0);
            let a = large.evaluate(&x).unwrap();
            let b = fixed.evaluate(&w).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }

        #[test]
        fn psi_hat_permutes_with_donors(seed in any::<u64>(), n in 3..7usize, shuffle in any::<u64>()) {
            let (fits, focus) = random_fit_set(seed, n, 2);
            let mut order: Vec<usize> = (1..n).collect();
            let mut rng = crate::rng::stream(shuffle, &[]);
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            order.insert(0, 0);
            let permuted: Vec<UnitFit> = order.iter().map(|&i| fits[i].clone()).collect();
            let a = build_psi_hat(&fits, &focus, 40).unwrap().psi;
            let b = build_psi_hat(&permuted, &focus, 40).unwrap().psi;
            for (r, &i) in order.iter().enumerate() {
                for (c, &j) in order.iter().enumerate() {
                    prop_assert!((b[(r, c)] - a[(i, j)]).abs() <= 1e-14 * (1.0 + a.amax()));
                }
            }
        }
    }
}
