//! Scalar focus parameters `mu(theta)` with analytic gradients.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distance from `lambda = 1` below which the long-run effect is refused.
pub const LONG_RUN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Focus {
    /// `theta[k]`.
    Coordinate(usize),
    /// `a'theta + b`, e.g. the one-step forecast `lambda y_T + beta x_{T+1}`.
    ConditionalMean { weights: Vec<f64>, offset: f64 },
    /// `theta[beta] / (1 - theta[lambda])`.
    LongRunEffect { beta: usize, lambda: usize },
}

impl Focus {
    fn check_dim(&self, dim: usize) -> Result<()> {
        let idx = |index: usize| {
            if index < dim {
                Ok(())
            } else {
                Err(Error::FocusIndex { index, dim })
            }
        };
        match self {
            Focus::Coordinate(k) => idx(*k),
            Focus::ConditionalMean { weights, .. } => {
                if weights.len() == dim {
                    Ok(())
                } else {
                    Err(Error::DimensionMismatch {
                        expected: dim,
                        found: weights.len(),
                    })
                }
            }
            Focus::LongRunEffect { beta, lambda } => {
                idx(*beta)?;
                idx(*lambda)
            }
        }
    }

    fn long_run_denominator(theta: &DVector<f64>, lambda: usize) -> Result<f64> {
        let denom = 1.0 - theta[lambda];
        if denom.abs() <= LONG_RUN_EPS {
            return Err(Error::FocusSingular {
                unit: None,
                lambda: theta[lambda],
            });
        }
        Ok(denom)
    }

    pub fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        self.check_dim(theta.len())?;
        match self {
            Focus::Coordinate(k) => Ok(theta[*k]),
            Focus::ConditionalMean { weights, offset } => {
                Ok(weights.iter().zip(theta.iter()).map(|(a, t)| a * t).sum::<f64>() + offset)
            }
            Focus::LongRunEffect { beta, lambda } => {
                let denom = Self::long_run_denominator(theta, *lambda)?;
                Ok(theta[*beta] / denom)
            }
        }
    }

    pub fn gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(theta.len())?;
        let mut g = DVector::zeros(theta.len());
        match self {
            Focus::Coordinate(k) => g[*k] = 1.0,
            Focus::ConditionalMean { weights, .. } => {
                g.copy_from_slice(weights);
            }
            Focus::LongRunEffect { beta, lambda } => {
                let denom = Self::long_run_denominator(theta, *lambda)?;
                if beta == lambda {
                    // lambda / (1 - lambda)
                    g[*lambda] = 1.0 / (denom * denom);
                } else {
                    g[*beta] = 1.0 / denom;
                    g[*lambda] = theta[*beta] / (denom * denom);
                }
            }
        }
        Ok(g)
    }
}

pub fn focus_value(spec: &Focus, theta: &DVector<f64>) -> Result<f64> {
    spec.value(theta)
}

pub fn focus_gradient(spec: &Focus, theta: &DVector<f64>) -> Result<DVector<f64>> {
    spec.gradient(theta)
}

/// Parses `coordinate:<k>`, `condmean:<a1,...,ap>:<b>` or
/// `longrun:<i_beta>:<i_lambda>`.
impl FromStr for Focus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("cannot parse focus `{s}`"));
        let parts: Vec<&str> = s.split(':').collect();
        let index = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        let number = |t: &str| match t.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(bad()),
        };
        match parts.as_slice() {
            ["coordinate", k] => Ok(Focus::Coordinate(index(k)?)),
            ["condmean", a, b] => Ok(Focus::ConditionalMean {
                weights: a.split(',').map(number).collect::<Result<_>>()?,
                offset: number(b)?,
            }),
            ["longrun", beta, lambda] => Ok(Focus::LongRunEffect {
                beta: index(beta)?,
                lambda: index(lambda)?,
            }),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Focus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Focus::Coordinate(k) => write!(f, "coordinate:{k}"),
            Focus::ConditionalMean { weights, offset } => {
                let a: Vec<String> = weights.iter().map(f64::to_string).collect();
                write!(f, "condmean:{}:{offset}", a.join(","))
            }
            Focus::LongRunEffect { beta, lambda } => write!(f, "longrun:{beta}:{lambda}"),
        }
    }
}
