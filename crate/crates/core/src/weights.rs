//! Averaging weights: minimum-MSE weights for both regimes, the benchmark
//! schemes, and the averaged focus estimate.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::focus::Focus;
use crate::lamse::{LamseFixedN, LamseLargeN};
use crate::panel::{PanelData, UnitEstimator, UnitFit};
use crate::qp::{SimplexQp, DEFAULT_TOL};

const NEGATIVE_TOL: f64 = 1e-12;
const SUM_TOL: f64 = 1e-10;

/// Which rule produced a weight vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Scheme {
    MinMseFixed,
    MinMseLarge(usize),
    Individual,
    MeanGroup,
    Stein(f64),
    Aic,
    Bic,
    Mma,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::MinMseFixed => write!(f, "minmse-fixed"),
            Scheme::MinMseLarge(nbar) => write!(f, "minmse-large:{nbar}"),
            Scheme::Individual => write!(f, "individual"),
            Scheme::MeanGroup => write!(f, "mean-group"),
            Scheme::Stein(l) => write!(f, "stein:{l}"),
            Scheme::Aic => write!(f, "aic"),
            Scheme::Bic => write!(f, "bic"),
            Scheme::Mma => write!(f, "mma"),
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown scheme `{s}`"));
        Ok(match s {
            "minmse-fixed" => Scheme::MinMseFixed,
            "individual" => Scheme::Individual,
            "mean-group" => Scheme::MeanGroup,
            "aic" => Scheme::Aic,
            "bic" => Scheme::Bic,
            "mma" => Scheme::Mma,
            _ => {
                if let Some(k) = s.strip_prefix("minmse-large:") {
                    Scheme::MinMseLarge(k.parse().map_err(|_| bad())?)
                } else if let Some(l) = s.strip_prefix("stein:") {
                    let l: f64 = l.parse().map_err(|_| bad())?;
                    if !(0.0..=1.0).contains(&l) {
                        return Err(Error::invalid(format!("stein lambda {l} outside [0, 1]")));
                    }
                    Scheme::Stein(l)
                } else {
                    return Err(bad());
                }
            }
        })
    }
}

impl TryFrom<String> for Scheme {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Scheme> for String {
    fn from(s: Scheme) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub scheme: Scheme,
    pub criterion_value: Option<f64>,
}

/// JSON layout of exported weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsReport {
    pub scheme: Scheme,
    pub unit_ids: Vec<String>,
    pub weights: Vec<f64>,
    pub criterion_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nbar: Option<usize>,
}

impl WeightVector {
    /// Validates nonnegativity (up to `1e-12`) and the unit sum (up to
    /// `1e-10`); slightly negative entries are clamped to zero.
    pub fn new(mut weights: Vec<f64>, scheme: Scheme, criterion_value: Option<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InfeasibleWeights("empty weight vector".into()));
        }
        if let Some((i, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !w.is_finite() || **w < -NEGATIVE_TOL)
        {
            return Err(Error::InfeasibleWeights(format!("w[{i}] = {w}")));
        }
        weights.iter_mut().for_each(|w| *w = w.max(0.0));
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::InfeasibleWeights(format!("weights sum to {total}")));
        }
        Ok(Self {
            weights,
            scheme,
            criterion_value,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn report(&self, unit_ids: &[String]) -> WeightsReport {
        WeightsReport {
            scheme: self.scheme,
            unit_ids: unit_ids.to_vec(),
            weights: self.weights.clone(),
            criterion_value: self.criterion_value,
            nbar: match self.scheme {
                Scheme::MinMseLarge(k) => Some(k),
                _ => None,
            },
        }
    }
}

/// Fixed-N minimum-MSE weights.
pub fn min_mse_fixed(lamse: &LamseFixedN) -> Result<WeightVector> {
    let sol = SimplexQp::default().solve(&lamse.psi)?;
    WeightVector::new(sol.x, Scheme::MinMseFixed, Some(sol.objective))
}

/// Large-N minimum-MSE weights as a full `N`-vector in fit order. The tail
/// mass left by the unrestricted units is spread equally over the rest.
pub fn min_mse_large(lamse: &LamseLargeN) -> Result<WeightVector> {
    let sol = SimplexQp::default().solve(&lamse.q)?;
    let nbar = lamse.nbar;
    let tail = sol.x[nbar];
    let share = tail / (lamse.n - nbar) as f64;
    let mut weights = vec![share; lamse.n];
    for (k, &unit) in lamse.ordering[..nbar].iter().enumerate() {
        weights[unit] = sol.x[k];
    }
    WeightVector::new(weights, Scheme::MinMseLarge(nbar), Some(sol.objective))
}

fn check_count(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::invalid("need at least one unit"))
    } else {
        Ok(())
    }
}

pub fn mean_group_weights(n: usize) -> Result<WeightVector> {
    check_count(n)?;
    WeightVector::new(vec![1.0 / n as f64; n], Scheme::MeanGroup, None)
}

/// All weight on the target (index 0).
pub fn individual_weights(n: usize) -> Result<WeightVector> {
    check_count(n)?;
    let mut w = vec![0.0; n];
    w[0] = 1.0;
    WeightVector::new(w, Scheme::Individual, None)
}

/// `lambda * individual + (1 - lambda) * mean group`.
pub fn stein_weights(n: usize, lambda: f64) -> Result<WeightVector> {
    check_count(n)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("stein lambda {lambda} outside [0, 1]")));
    }
    let base = (1.0 - lambda) / n as f64;
    let mut w = vec![base; n];
    w[0] = lambda + base;
    WeightVector::new(w, Scheme::Stein(lambda), None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfoCriterion {
    Aic,
    Bic,
}

fn target_fit<'a>(fits: &'a [UnitFit], target_unit: &str) -> Result<&'a UnitFit> {
    fits.iter()
        .find(|f| f.unit_id == target_unit)
        .ok_or_else(|| Error::UnknownUnit(target_unit.to_string()))
}

/// Smooth information-criterion weights. Every donor `i` is scored on the
/// target unit's sample at `(theta_i, sigma2_i)`:
/// `IC_i = -2 loglik + penalty(p)`, `w_i ∝ exp(-(IC_i - min IC) / 2)`.
pub fn ic_weights<E: UnitEstimator + ?Sized>(
    fits: &[UnitFit],
    panel: &PanelData,
    target_unit: &str,
    estimator: &E,
    criterion: InfoCriterion,
) -> Result<WeightVector> {
    let target = target_fit(fits, target_unit)?;
    let scores = fits
        .iter()
        .map(|f| {
            let ll = estimator
                .loglik_on_unit(panel, target_unit, &f.theta_hat, f.sigma2_hat)
                .map_err(|e| e.for_unit(&f.unit_id))?;
            let p = f.theta_hat.len() as f64;
            let penalty = match criterion {
                InfoCriterion::Aic => 2.0 * p,
                InfoCriterion::Bic => p * (target.t_eff as f64).ln(),
            };
            Ok(-2.0 * ll + penalty)
        })
        .collect::<Result<Vec<f64>>>()?;
    let best = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = scores.iter().map(|s| (-(s - best) / 2.0).exp()).collect();
    let total: f64 = raw.iter().sum();
    let scheme = match criterion {
        InfoCriterion::Aic => Scheme::Aic,
        InfoCriterion::Bic => Scheme::Bic,
    };
    WeightVector::new(raw.iter().map(|r| r / total).collect(), scheme, None)
}

pub fn aic_weights<E: UnitEstimator + ?Sized>(
    fits: &[UnitFit],
    panel: &PanelData,
    target_unit: &str,
    estimator: &E,
) -> Result<WeightVector> {
    ic_weights(fits, panel, target_unit, estimator, InfoCriterion::Aic)
}

/// Mallows-type selection: picks the donor minimizing
/// `SSR_target(theta_j) + 2 sigma2_target p_j`. Ties go to the lower index.
pub fn mma_select<E: UnitEstimator + ?Sized>(
    fits: &[UnitFit],
    panel: &PanelData,
    target_unit: &str,
    estimator: &E,
) -> Result<WeightVector> {
    let target = target_fit(fits, target_unit)?;
    let mut best: Option<(usize, f64)> = None;
    for (j, f) in fits.iter().enumerate() {
        let ssr = estimator
            .ssr_on_unit(panel, target_unit, &f.theta_hat)
            .map_err(|e| e.for_unit(&f.unit_id))?;
        let crit = ssr + 2.0 * target.sigma2_hat * f.theta_hat.len() as f64;
        if best.is_none_or(|(_, b)| crit < b) {
            best = Some((j, crit));
        }
    }
    let (j, crit) = best.ok_or_else(|| Error::invalid("no fits"))?;
    let mut w = vec![0.0; fits.len()];
    w[j] = 1.0;
    WeightVector::new(w, Scheme::Mma, Some(crit))
}

/// `sum_i w_i mu(theta_i)`; units with zero weight are not evaluated.
pub fn unit_average(fits: &[UnitFit], focus: &Focus, w: &WeightVector) -> Result<f64> {
    if fits.len() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: fits.len(),
            found: w.len(),
        });
    }
    let mut acc = 0.0;
    for (f, &wi) in fits.iter().zip(&w.weights) {
        if wi > 0.0 {
            acc += wi * focus.value(&f.theta_hat).map_err(|e| e.for_unit(&f.unit_id))?;
        }
    }
    Ok(acc)
}

/// Tolerance used by the minimum-MSE solvers.
pub const SOLVER_TOL: f64 = DEFAULT_TOL;
