//! The local-asymptotic limit experiment.
//!
//! Given the drifts `eta_i`, the limit variances `V_i` and the focus gradient
//! `d0` at the common parameter, unit `i`'s scaled estimation error converges
//! to `Z_i ~ N(eta_i - eta_1, V_i)` (independent across units) and the focus
//! error to `Lambda_i = d0'Z_i`. Everything here conditions on a fixed `eta`
//! and never estimates anything.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lamse::{tail_augmented, FEASIBILITY_TOL};
use crate::linalg;
use crate::qp::SimplexQp;
use crate::rng;

/// Drifts, limit variances and focus gradient. Unit 1 comes first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitSpec {
    pub etas: Vec<Vec<f64>>,
    pub variances: Vec<Vec<Vec<f64>>>,
    pub d0: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitRegime {
    /// Weights on the simplex over all `N̄` units.
    Fixed,
    /// The `N̄` units are unrestricted; the remaining mass goes to an
    /// infinite tail centred at the common parameter.
    Large,
}

/// How the weights of each draw are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum LimitWeights {
    /// Minimize the draw's limit criterion.
    MinMse,
    /// Use the same weights in every draw (`N̄` entries; in the large regime
    /// the tail gets `1 - sum`).
    Given(Vec<f64>),
}

/// One joint draw of the `Z_i`.
#[derive(Debug, Clone)]
pub struct LimitDraw {
    pub z: Vec<DVector<f64>>,
    pub lambdas: Vec<f64>,
}

impl LimitDraw {
    /// Builds a draw from `Z` and fills in `Lambda_i = d0'Z_i`.
    pub fn from_z(z: Vec<DVector<f64>>, spec: &LimitSpec) -> Self {
        let d0 = spec.gradient();
        let lambdas = z.iter().map(|zi| d0.dot(zi)).collect();
        Self { z, lambdas }
    }
}

/// Weights and estimator error of one draw.
#[derive(Debug, Clone)]
pub struct LimitOutcome {
    /// `N̄` weights; in the large regime `1 - sum` is the tail mass.
    pub weights: Vec<f64>,
    pub estimate: f64,
}

impl LimitSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: LimitSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_units(&self) -> usize {
        self.etas.len()
    }

    pub fn dim(&self) -> usize {
        self.d0.len()
    }

    fn gradient(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.d0)
    }

    fn eta(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.etas[i])
    }

    fn variance(&self, i: usize) -> DMatrix<f64> {
        let p = self.dim();
        DMatrix::from_fn(p, p, |r, c| self.variances[i][r][c])
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.dim();
        if p == 0 {
            return Err(Error::invalid("d0 must not be empty"));
        }
        if self.d0.iter().any(|v| !v.is_finite()) || self.d0.iter().all(|&v| v == 0.0) {
            return Err(Error::invalid("d0 must be finite and nonzero"));
        }
        if self.etas.is_empty() {
            return Err(Error::invalid("at least one unit is required"));
        }
        if self.variances.len() != self.etas.len() {
            return Err(Error::DimensionMismatch {
                expected: self.etas.len(),
                found: self.variances.len(),
            });
        }
        for (i, eta) in self.etas.iter().enumerate() {
            if eta.len() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    found: eta.len(),
                });
            }
            if eta.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("eta of unit {} is not finite", i + 1)));
            }
            let rows = &self.variances[i];
            if rows.len() != p || rows.iter().any(|r| r.len() != p) {
                return Err(Error::invalid(format!(
                    "variance of unit {} must be {p}x{p}",
                    i + 1
                )));
            }
            let v = self.variance(i);
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("variance of unit {} is not finite", i + 1)));
            }
            if linalg::asymmetry(&v) > 1e-12 * v.amax().max(1.0) {
                return Err(Error::invalid(format!("variance of unit {} is not symmetric", i + 1)));
            }
            if v.cholesky().is_none() {
                return Err(Error::invalid(format!(
                    "variance of unit {} is not positive definite",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// `d0'(eta_i - eta_1)` and `d0'V_i d0` for every unit.
    fn projected(&self) -> (DVector<f64>, DVector<f64>) {
        let d0 = self.gradient();
        let eta1 = self.eta(0);
        let n = self.n_units();
        let bias = DVector::from_fn(n, |i, _| d0.dot(&(self.eta(i) - &eta1)));
        let var = DVector::from_fn(n, |i, _| linalg::sandwich_scalar(&d0, &self.variance(i)));
        (bias, var)
    }

    /// `d0'eta_1`, the bias of the tail.
    fn tail_bias(&self) -> f64 {
        self.gradient().dot(&self.eta(0))
    }
}

fn bias_variance_matrix(bias: &DVector<f64>, var: &DVector<f64>) -> DMatrix<f64> {
    let mut psi = bias * bias.transpose();
    for i in 0..var.len() {
        psi[(i, i)] += var[i];
    }
    psi
}

/// The population matrix `Psi` of the fixed-N regime.
pub fn population_psi(spec: &LimitSpec) -> DMatrix<f64> {
    let (bias, var) = spec.projected();
    bias_variance_matrix(&bias, &var)
}

fn check_weights(spec: &LimitSpec, w: &[f64], full: bool) -> Result<f64> {
    if w.len() != spec.n_units() {
        return Err(Error::DimensionMismatch {
            expected: spec.n_units(),
            found: w.len(),
        });
    }
    if let Some((i, v)) = w
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v < -FEASIBILITY_TOL)
    {
        return Err(Error::InfeasibleWeights(format!("w[{i}] = {v}")));
    }
    let total: f64 = w.iter().sum();
    let ok = if full {
        (total - 1.0).abs() <= FEASIBILITY_TOL
    } else {
        total <= 1.0 + FEASIBILITY_TOL
    };
    if !ok {
        return Err(Error::InfeasibleWeights(format!("weights sum to {total}")));
    }
    Ok(total)
}

/// Population LA-MSE `w'Psi w` of fixed weights on the simplex.
pub fn population_lamse_fixed(spec: &LimitSpec, w: &[f64]) -> Result<f64> {
    spec.validate()?;
    check_weights(spec, w, true)?;
    Ok(linalg::quad_form(&population_psi(spec), w))
}

/// Population LA-MSE in the large-N regime; `w` holds the unrestricted
/// weights with `sum w <= 1` and the tail gets the rest.
pub fn population_lamse_large(spec: &LimitSpec, w: &[f64]) -> Result<f64> {
    spec.validate()?;
    let total = check_weights(spec, w, false)?;
    let (bias, _) = spec.projected();
    let tail = 1.0 - total;
    let b1 = spec.tail_bias();
    let cross: f64 = w.iter().zip(bias.iter()).map(|(wi, bi)| wi * bi).sum();
    Ok(linalg::quad_form(&population_psi(spec), w) + (tail * b1 - 2.0 * cross) * tail * b1)
}

/// One joint draw of `Z_i ~ N(eta_i - eta_1, V_i)`.
pub fn draw_limit<R: Rng + ?Sized>(spec: &LimitSpec, rng: &mut R) -> LimitDraw {
    let factors: Vec<DMatrix<f64>> = (0..spec.n_units())
        .map(|i| {
            spec.variance(i)
                .cholesky()
                .expect("validated variances are positive definite")
                .l()
        })
        .collect();
    draw_with(spec, &factors, rng)
}

fn draw_with<R: Rng + ?Sized>(spec: &LimitSpec, factors: &[DMatrix<f64>], rng: &mut R) -> LimitDraw {
    let p = spec.dim();
    let eta1 = spec.eta(0);
    let z = factors
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let e = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            spec.eta(i) - &eta1 + l * e
        })
        .collect();
    LimitDraw::from_z(z, spec)
}

/// The random limit matrix `Psi-bar` of one draw.
pub fn build_psi_bar(draw: &LimitDraw, spec: &LimitSpec) -> DMatrix<f64> {
    let (bias, var) = draw_terms(draw, spec);
    bias_variance_matrix(&bias, &var)
}

/// `d0'(Z_i - Z_1)` and `d0'V_i d0`.
fn draw_terms(draw: &LimitDraw, spec: &LimitSpec) -> (DVector<f64>, DVector<f64>) {
    let n = spec.n_units();
    let bias = DVector::from_fn(n, |i, _| draw.lambdas[i] - draw.lambdas[0]);
    let (_, var) = spec.projected();
    (bias, var)
}

/// Criterion matrix of one draw: `Psi-bar`, or in the large regime
/// `Psi-bar` bordered with the tail whose bias is `d0'(eta_1 + Z_1)`.
pub fn limit_objective(draw: &LimitDraw, spec: &LimitSpec, regime: LimitRegime) -> DMatrix<f64> {
    let (bias, var) = draw_terms(draw, spec);
    let psi = bias_variance_matrix(&bias, &var);
    match regime {
        LimitRegime::Fixed => psi,
        LimitRegime::Large => tail_augmented(&psi, &bias, spec.tail_bias() + draw.lambdas[0]),
    }
}

/// Weights and limit estimator error for one draw. The estimator is
/// `sum w_i Lambda_i`, minus `(1 - sum w) d0'eta_1` in the large regime.
pub fn limit_outcome(
    draw: &LimitDraw,
    spec: &LimitSpec,
    regime: LimitRegime,
    rule: &LimitWeights,
) -> Result<LimitOutcome> {
    let n = spec.n_units();
    let weights = match rule {
        LimitWeights::Given(w) => {
            check_weights(spec, w, regime == LimitRegime::Fixed)?;
            w.clone()
        }
        LimitWeights::MinMse => {
            let q = limit_objective(draw, spec, regime);
            let mut x = SimplexQp::default().solve(&q)?.x;
            x.truncate(n);
            x
        }
    };
    let mut estimate: f64 = weights.iter().zip(&draw.lambdas).map(|(w, l)| w * l).sum();
    if regime == LimitRegime::Large {
        estimate -= (1.0 - weights.iter().sum::<f64>()) * spec.tail_bias();
    }
    Ok(LimitOutcome { weights, estimate })
}

/// `reps` independent draws; draw `k` uses the stream `(seed, [k])`, so the
/// sample does not depend on the number of worker threads.
pub fn simulate_limit(
    spec: &LimitSpec,
    regime: LimitRegime,
    rule: &LimitWeights,
    reps: usize,
    seed: u64,
) -> Result<Vec<LimitOutcome>> {
    spec.validate()?;
    if reps == 0 {
        return Err(Error::invalid("reps must be at least 1"));
    }
    let factors: Vec<DMatrix<f64>> = (0..spec.n_units())
        .map(|i| spec.variance(i).cholesky().map(|c| c.l()))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::invalid("variance is not positive definite"))?;
    (0..reps)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng::stream(seed, &[k as u64]);
            let draw = draw_with(spec, &factors, &mut rng);
            limit_outcome(&draw, spec, regime, rule).map_err(|e| Error::Draw {
                index: k,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Sample of minimum-MSE limit weights.
pub fn simulate_limit_weights(
    spec: &LimitSpec,
    regime: LimitRegime,
    reps: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    Ok(simulate_limit(spec, regime, &LimitWeights::MinMse, reps, seed)?
        .into_iter()
        .map(|o| o.weights)
        .collect())
}

/// Sample of the limit estimator error under `rule`.
pub fn simulate_limit_estimator(
    spec: &LimitSpec,
    regime: LimitRegime,
    rule: &LimitWeights,
    reps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    Ok(simulate_limit(spec, regime, rule, reps, seed)?
        .into_iter()
        .map(|o| o.estimate)
        .collect())
}

/// CSV with columns `draw,estimate,w1..wN` (and `tail` in the large regime).
pub fn write_limit_csv<W: Write>(outcomes: &[LimitOutcome], regime: LimitRegime, out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    let n = outcomes.first().map_or(0, |o| o.weights.len());
    let mut header = vec!["draw".to_string(), "estimate".to_string()];
    header.extend((1..=n).map(|i| format!("w{i}")));
    if regime == LimitRegime::Large {
        header.push("tail".to_string());
    }
    writer.write_record(&header)?;
    for (k, o) in outcomes.iter().enumerate() {
        let mut row = vec![k.to_string(), format!("{:?}", o.estimate)];
        row.extend(o.weights.iter().map(|w| format!("{w:?}")));
        if regime == LimitRegime::Large {
            row.push(format!("{:?}", 1.0 - o.weights.iter().sum::<f64>()));
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}
