//! Panel container and per-unit least-squares estimation.
//!
//! Each unit is fit separately on its own time series. The regressor order is
//! `[intercept?, x1..xd, y_{t-1}?]`, so for the dynamic model without an
//! intercept the coefficient vector is `(beta_1..beta_d, lambda)`.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Time series of one cross-sectional unit, sorted by time.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitSeries {
    pub id: String,
    pub times: Vec<i64>,
    pub y: Vec<f64>,
    /// One covariate row per period, each of length `d`.
    pub x: Vec<Vec<f64>>,
}

impl UnitSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    units: Vec<UnitSeries>,
    dim: usize,
    balanced: bool,
}

impl PanelData {
    /// Builds a panel from per-unit series. Rows inside each unit are sorted
    /// by time; units keep the order they are given in.
    pub fn from_units(mut units: Vec<UnitSeries>) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::invalid("panel has no units"));
        }
        let dim = units[0].x.first().map_or(0, Vec::len);
        let mut seen = HashMap::new();
        for u in &mut units {
            if seen.insert(u.id.clone(), ()).is_some() {
                return Err(Error::invalid(format!("unit `{}` appears twice", u.id)));
            }
            if u.times.len() != u.y.len() || u.times.len() != u.x.len() {
                return Err(Error::invalid(format!(
                    "unit `{}`: times, y and x have different lengths",
                    u.id
                )));
            }
            if let Some(row) = u.x.iter().find(|r| r.len() != dim) {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            let mut order: Vec<usize> = (0..u.times.len()).collect();
            order.sort_by_key(|&i| u.times[i]);
            if let Some(w) = order.windows(2).find(|w| u.times[w[0]] == u.times[w[1]]) {
                return Err(Error::invalid(format!(
                    "duplicate observation for unit `{}` at time {}",
                    u.id, u.times[w[0]]
                )));
            }
            u.times = order.iter().map(|&i| u.times[i]).collect();
            u.y = order.iter().map(|&i| u.y[i]).collect();
            u.x = order.iter().map(|&i| u.x[i].clone()).collect();
        }
        let balanced = units.windows(2).all(|w| w[0].times == w[1].times);
        Ok(Self {
            units,
            dim,
            balanced,
        })
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    /// Covariate dimension `d`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_balanced(&self) -> bool {
        self.balanced
    }

    pub fn units(&self) -> &[UnitSeries] {
        &self.units
    }

    pub fn unit_ids(&self) -> Vec<&str> {
        self.units.iter().map(|u| u.id.as_str()).collect()
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.units
            .iter()
            .position(|u| u.id == id)
            .ok_or_else(|| Error::UnknownUnit(id.to_string()))
    }

    pub fn unit(&self, id: &str) -> Result<&UnitSeries> {
        self.index_of(id).map(|i| &self.units[i])
    }

    /// Same panel with units reordered; `order[k]` is the old index of the
    /// unit placed at position `k`.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.units.len() || !is_permutation(order) {
            return Err(Error::invalid("reordering is not a permutation of the units"));
        }
        Ok(Self {
            units: order.iter().map(|&i| self.units[i].clone()).collect(),
            dim: self.dim,
            balanced: self.balanced,
        })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["unit".to_string(), "time".into(), "y".into()];
        header.extend((1..=self.dim).map(|k| format!("x{k}")));
        w.write_record(&header)?;
        for u in &self.units {
            for t in 0..u.len() {
                let mut rec = vec![u.id.clone(), u.times[t].to_string(), u.y[t].to_string()];
                rec.extend(u.x[t].iter().map(f64::to_string));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn is_permutation(order: &[usize]) -> bool {
    let mut seen = vec![false; order.len()];
    for &i in order {
        if i >= seen.len() || seen[i] {
            return false;
        }
        seen[i] = true;
    }
    true
}

/// Reads a panel in `unit,time,y,x1,...,xd` CSV format (header required).
/// Units keep their order of first appearance.
pub fn load_panel<R: Read>(source: R) -> Result<PanelData> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(source);
    let header = reader.headers()?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names.len() < 3 || names[0] != "unit" || names[1] != "time" || names[2] != "y" {
        return Err(Error::Parse {
            line: 1,
            message: "header must start with `unit,time,y`".into(),
        });
    }
    let dim = names.len() - 3;

    struct Row {
        time: i64,
        y: f64,
        x: Vec<f64>,
        line: usize,
    }
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<Row>> = HashMap::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != dim + 3 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", dim + 3, rec.len()),
            });
        }
        let unit = rec[0].to_string();
        if unit.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty unit identifier".into(),
            });
        }
        let time = rec[1].parse::<i64>().map_err(|_| Error::Parse {
            line,
            message: format!("time `{}` is not an integer", &rec[1]),
        })?;
        let num = |field: &str, name: &str| -> Result<f64> {
            match field.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Parse {
                    line,
                    message: format!("{name} value `{field}` is not a finite number"),
                }),
            }
        };
        let y = num(&rec[2], "y")?;
        let x = (0..dim)
            .map(|k| num(&rec[3 + k], names[3 + k]))
            .collect::<Result<Vec<_>>>()?;
        let entry = rows.entry(unit.clone()).or_insert_with(|| {
            order.push(unit.clone());
            Vec::new()
        });
        entry.push(Row { time, y, x, line });
    }

    let mut units = Vec::with_capacity(order.len());
    for id in order {
        let mut list = rows.remove(&id).unwrap_or_default();
        list.sort_by_key(|r| (r.time, r.line));
        if let Some(w) = list.windows(2).find(|w| w[0].time == w[1].time) {
            return Err(Error::DuplicateKey {
                line: w[1].line.max(w[0].line),
                unit: id,
                time: w[1].time,
            });
        }
        units.push(UnitSeries {
            id,
            times: list.iter().map(|r| r.time).collect(),
            y: list.iter().map(|r| r.y).collect(),
            x: list.into_iter().map(|r| r.x).collect(),
        });
    }
    if units.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "panel contains no observations".into(),
        });
    }
    PanelData::from_units(units)
}

/// Residual covariance estimator used in the sandwich.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Vcov {
    #[default]
    Hc0,
    /// Bartlett-weighted autocovariances up to the given lag.
    NeweyWest(usize),
}

impl FromStr for Vcov {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hc0" => Ok(Vcov::Hc0),
            _ => s
                .strip_prefix("nw:")
                .and_then(|l| l.parse().ok())
                .map(Vcov::NeweyWest)
                .ok_or_else(|| Error::invalid(format!("unknown vcov `{s}` (use hc0 or nw:L)"))),
        }
    }
}

impl fmt::Display for Vcov {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Vcov::Hc0 => write!(f, "hc0"),
            Vcov::NeweyWest(l) => write!(f, "nw:{l}"),
        }
    }
}

/// Linear (optionally dynamic) unit-level model estimated by least squares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub include_intercept: bool,
    /// 0 for a static model, 1 to add `y_{t-1}` as the last regressor.
    pub lag_order: usize,
    pub vcov: Vcov,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            include_intercept: false,
            lag_order: 0,
            vcov: Vcov::Hc0,
        }
    }
}

impl ModelSpec {
    /// The dynamic model `y_t = beta'x_t + lambda y_{t-1} + e_t`.
    pub fn dynamic() -> Self {
        Self {
            lag_order: 1,
            ..Self::default()
        }
    }

    pub fn intercept_only() -> Self {
        Self {
            include_intercept: true,
            ..Self::default()
        }
    }

    pub fn n_params(&self, dim: usize) -> usize {
        dim + self.lag_order + usize::from(self.include_intercept)
    }

    fn validate(&self) -> Result<()> {
        if self.lag_order > 1 {
            return Err(Error::invalid("lag order must be 0 or 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitFit {
    pub unit_id: String,
    pub theta_hat: DVector<f64>,
    /// Estimated asymptotic variance of `sqrt(T) * theta_hat`.
    pub v_hat: DMatrix<f64>,
    pub t_eff: usize,
    pub ssr: f64,
    pub sigma2_hat: f64,
    /// The ridge floor was added to `X'X / T_eff`.
    pub design_floored: bool,
    /// The ridge floor was added to the sandwich.
    pub variance_floored: bool,
}

/// Estimation sample of one unit: rows `lag_order..T`.
#[derive(Debug, Clone)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl Design {
    pub fn build(panel: &PanelData, unit: &str, spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let series = panel.unit(unit)?;
        let lag = spec.lag_order;
        if lag == 1 {
            if let Some(w) = series.times.windows(2).find(|w| w[1] - w[0] != 1) {
                return Err(Error::MissingPeriod {
                    unit: unit.to_string(),
                    before: w[0],
                    after: w[1],
                });
            }
        }
        let p = spec.n_params(panel.dim());
        let t_eff = series.len().saturating_sub(lag);
        if t_eff < p + 1 {
            return Err(Error::InsufficientData {
                unit: unit.to_string(),
                available: t_eff,
                required: p + 1,
            });
        }
        let x = DMatrix::from_fn(t_eff, p, |r, c| {
            let t = r + lag;
            let mut c = c;
            if spec.include_intercept {
                if c == 0 {
                    return 1.0;
                }
                c -= 1;
            }
            if c < panel.dim() {
                series.x[t][c]
            } else {
                series.y[t - 1]
            }
        });
        let y = DVector::from_fn(t_eff, |r, _| series.y[r + lag]);
        Ok(Self { x, y })
    }

    pub fn t_eff(&self) -> usize {
        self.y.len()
    }

    pub fn ssr_at(&self, theta: &DVector<f64>) -> Result<f64> {
        if theta.len() != self.x.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.x.ncols(),
                found: theta.len(),
            });
        }
        Ok((&self.y - &self.x * theta).norm_squared())
    }
}

/// `(X'X / T_eff)^{-1}` with the ridge floor; `None` when not repairable.
fn hessian_inverse(x: &DMatrix<f64>) -> Option<(DMatrix<f64>, bool)> {
    let n = x.nrows() as f64;
    let mut h = x.transpose() * x / n;
    linalg::symmetrize(&mut h);
    let scale = linalg::trace(&h) / h.nrows().max(1) as f64;
    if !(scale.is_finite() && scale > 0.0) {
        return None;
    }
    let floored = linalg::apply_ridge_floor(&mut h, 0.0);
    let chol = h.cholesky()?;
    Some((chol.inverse(), floored))
}

/// Sandwich `H^{-1} Sigma H^{-1}` from the design and residuals, with
/// `H = X'X / T_eff`. Returns the matrix and whether the floor was applied.
pub fn estimate_variance(
    x: &DMatrix<f64>,
    residuals: &DVector<f64>,
    vcov: Vcov,
) -> Result<(DMatrix<f64>, bool)> {
    if x.nrows() != residuals.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            found: residuals.len(),
        });
    }
    let (h_inv, _) = hessian_inverse(x).ok_or_else(|| Error::invalid("singular design"))?;
    let n = x.nrows();
    let p = x.ncols();
    // scores s_t = u_t x_t
    let scores = DMatrix::from_fn(n, p, |t, k| residuals[t] * x[(t, k)]);
    let mut sigma = scores.transpose() * &scores;
    if let Vcov::NeweyWest(max_lag) = vcov {
        for l in 1..=max_lag.min(n.saturating_sub(1)) {
            let weight = 1.0 - l as f64 / (max_lag as f64 + 1.0);
            let lead = scores.rows(l, n - l);
            let lagged = scores.rows(0, n - l);
            let gamma = lead.transpose() * lagged;
            sigma += (&gamma + gamma.transpose()) * weight;
        }
    }
    sigma /= n as f64;
    let mut v = &h_inv * sigma * &h_inv;
    linalg::symmetrize(&mut v);
    // exact fits give a zero sandwich; scale the floor off H^{-1} then
    let min_scale = 1e-12 * linalg::trace(&h_inv) / p.max(1) as f64;
    let floored = linalg::apply_ridge_floor(&mut v, min_scale);
    Ok((v, floored))
}

/// Per-unit estimator interface: a fit with its sandwich variance and a
/// log-likelihood usable for information-criterion weights.
pub trait UnitEstimator: Sync {
    fn n_params(&self, panel: &PanelData) -> usize;

    fn fit_unit(&self, panel: &PanelData, unit: &str) -> Result<UnitFit>;

    fn loglik_on_unit(
        &self,
        panel: &PanelData,
        unit: &str,
        theta: &DVector<f64>,
        sigma2: f64,
    ) -> Result<f64>;

    /// Sum of squared residuals of `unit`'s sample at `theta`.
    fn ssr_on_unit(&self, panel: &PanelData, unit: &str, theta: &DVector<f64>) -> Result<f64>;
}

impl UnitEstimator for ModelSpec {
    fn n_params(&self, panel: &PanelData) -> usize {
        ModelSpec::n_params(self, panel.dim())
    }

    fn fit_unit(&self, panel: &PanelData, unit: &str) -> Result<UnitFit> {
        let design = Design::build(panel, unit, self)?;
        let t_eff = design.t_eff();
        let singular = || Error::SingularDesign {
            unit: unit.to_string(),
        };
        let (h_inv, design_floored) = hessian_inverse(&design.x).ok_or_else(singular)?;
        let xty = design.x.transpose() * &design.y / t_eff as f64;
        let theta_hat = &h_inv * xty;
        if theta_hat.iter().any(|v| !v.is_finite()) {
            return Err(singular());
        }
        let residuals = &design.y - &design.x * &theta_hat;
        let ssr = residuals.norm_squared();
        let (v_hat, variance_floored) = estimate_variance(&design.x, &residuals, self.vcov)
            .map_err(|_| singular())?;
        Ok(UnitFit {
            unit_id: unit.to_string(),
            theta_hat,
            v_hat,
            t_eff,
            ssr,
            sigma2_hat: ssr / t_eff as f64,
            design_floored,
            variance_floored,
        })
    }

    fn loglik_on_unit(
        &self,
        panel: &PanelData,
        unit: &str,
        theta: &DVector<f64>,
        sigma2: f64,
    ) -> Result<f64> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::invalid(format!("sigma2 must be positive, got {sigma2}")));
        }
        let design = Design::build(panel, unit, self)?;
        let ssr = design.ssr_at(theta)?;
        let n = design.t_eff() as f64;
        Ok(-0.5 * n * (2.0 * std::f64::consts::PI * sigma2).ln() - ssr / (2.0 * sigma2))
    }

    fn ssr_on_unit(&self, panel: &PanelData, unit: &str, theta: &DVector<f64>) -> Result<f64> {
        Design::build(panel, unit, self)?.ssr_at(theta)
    }
}

pub fn fit_unit(panel: &PanelData, unit: &str, spec: &ModelSpec) -> Result<UnitFit> {
    spec.fit_unit(panel, unit)
}

pub fn loglik_on_unit(
    panel: &PanelData,
    unit: &str,
    theta: &DVector<f64>,
    sigma2: f64,
    spec: &ModelSpec,
) -> Result<f64> {
    spec.loglik_on_unit(panel, unit, theta, sigma2)
}

/// Fits every unit (in parallel), returning fits in panel order. Failures are
/// collected and reported together, each tagged with its unit.
pub fn fit_all<E: UnitEstimator + ?Sized>(panel: &PanelData, estimator: &E) -> Result<Vec<UnitFit>> {
    let results: Vec<Result<UnitFit>> = panel
        .units()
        .par_iter()
        .map(|u| estimator.fit_unit(panel, &u.id).map_err(|e| e.for_unit(&u.id)))
        .collect();
    let mut fits = Vec::with_capacity(results.len());
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(f) => fits.push(f),
            Err(e) => errors.push(e),
        }
    }
    match errors.len() {
        0 => Ok(fits),
        1 => Err(errors.pop().unwrap()),
        _ => Err(Error::UnitFits(errors)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_oneof, proptest, ProptestConfig, Strategy};
    use rand::Rng;

    fn series(id: &str, y: &[f64], x: &[f64]) -> UnitSeries {
        UnitSeries {
            id: id.into(),
            times: (0..y.len() as i64).collect(),
            y: y.to_vec(),
            x: x.iter().map(|&v| vec![v]).collect(),
        }
    }

    const SMALL: &str = "unit,time,y,x1\na,1,1.0,0.5\na,2,2.0,1.5\na,3,3.5,2.0\nb,1,0.1,1.0\nb,2,0.2,2.0\nb,3,0.4,3.0\n";

    #[test]
    fn loads_small_panel() {
        let p = load_panel(SMALL.as_bytes()).unwrap();
        assert_eq!(p.n_units(), 2);
        assert_eq!(p.dim(), 1);
        assert!(p.is_balanced());
        assert_eq!(p.units()[0].len(), 3);
        assert_eq!(p.unit_ids(), vec!["a", "b"]);
    }

    #[test]
    fn duplicate_key_names_offender() {
        let src = "unit,time,y,x1\na,1,1,1\na,2,1,1\na,1,2,2\n";
        let err = load_panel(src.as_bytes()).unwrap_err();
        match &err {
            Error::DuplicateKey { line, unit, time } => {
                assert_eq!(unit, "a");
                assert_eq!(*time, 1);
                assert_eq!(*line, 4);
            }
            e => panic!("unexpected {e:?}"),
        }
        assert!(err.to_string().contains("`a`"));
    }

    #[test]
    fn unsorted_rows_match_sorted_load() {
        let shuffled = "unit,time,y,x1\na,3,3.5,2.0\nb,2,0.2,2.0\na,1,1.0,0.5\nb,3,0.4,3.0\na,2,2.0,1.5\nb,1,0.1,1.0\n";
        assert_eq!(
            load_panel(shuffled.as_bytes()).unwrap(),
            load_panel(SMALL.as_bytes()).unwrap()
        );
    }

    #[test]
    fn malformed_rows_report_line() {
        let bad_count = "unit,time,y,x1\na,1,1,1\na,2,1\n";
        match load_panel(bad_count.as_bytes()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e:?}"),
        }
        let bad_time = "unit,time,y,x1\na,1.5,1,1\n";
        assert!(matches!(
            load_panel(bad_time.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        let bad_header = "id,time,y\n";
        assert!(load_panel(bad_header.as_bytes()).is_err());
    }

    #[test]
    fn exact_fit_recovers_slope() {
        let x = [1.0, 2.0, 3.0, -1.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let panel = PanelData::from_units(vec![series("a", &y, &x)]).unwrap();
        let fit = fit_unit(&panel, "a", &ModelSpec::default()).unwrap();
        assert_abs_diff_eq!(fit.theta_hat[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.ssr, 0.0, epsilon = 1e-20);
        assert!(fit.v_hat[(0, 0)] > 0.0);
        assert!(fit.variance_floored);
    }

    #[test]
    fn intercept_only_mean_and_sandwich() {
        let panel = PanelData::from_units(vec![UnitSeries {
            id: "a".into(),
            times: vec![0, 1],
            y: vec![0.0, 2.0],
            x: vec![vec![], vec![]],
        }])
        .unwrap();
        let fit = fit_unit(&panel, "a", &ModelSpec::intercept_only()).unwrap();
        assert_abs_diff_eq!(fit.theta_hat[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(fit.ssr, 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(fit.sigma2_hat, 1.0, epsilon = 1e-14);
        // H = 1, residuals (-1, 1), Sigma = 1
        assert_abs_diff_eq!(fit.v_hat[(0, 0)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn newey_west_zero_lag_is_hc0() {
        let x = DMatrix::from_row_slice(5, 2, &[1.0, 0.3, 1.0, -1.2, 1.0, 2.2, 1.0, 0.7, 1.0, -0.4]);
        let u = DVector::from_vec(vec![0.5, -0.2, 0.9, -1.1, 0.3]);
        let (a, _) = estimate_variance(&x, &u, Vcov::Hc0).unwrap();
        let (b, _) = estimate_variance(&x, &u, Vcov::NeweyWest(0)).unwrap();
        assert_eq!(a, b);
        let (c, _) = estimate_variance(&x, &u, Vcov::NeweyWest(2)).unwrap();
        assert!(linalg::asymmetry(&c) == 0.0);
        assert!(linalg::min_eigenvalue(&c) > 0.0);
    }

    #[test]
    fn too_short_series_is_insufficient() {
        let panel = PanelData::from_units(vec![series("a", &[1.0, 2.0], &[1.0, 2.0])]).unwrap();
        assert!(matches!(
            fit_unit(&panel, "a", &ModelSpec::dynamic()),
            Err(Error::InsufficientData { available: 1, required: 3, .. })
        ));
    }

    #[test]
    fn all_zero_design_is_singular() {
        let panel = PanelData::from_units(vec![series("a", &[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0])]).unwrap();
        assert!(matches!(
            fit_unit(&panel, "a", &ModelSpec::default()),
            Err(Error::SingularDesign { .. })
        ));
    }

    #[test]
    fn collinear_design_gets_floor() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [1.0, 2.1, 2.9, 4.2, 5.0];
        let units = vec![UnitSeries {
            id: "a".into(),
            times: (0..5).collect(),
            y: y.to_vec(),
            x: x.iter().map(|&v| vec![v, 2.0 * v]).collect(),
        }];
        let panel = PanelData::from_units(units).unwrap();
        let fit = fit_unit(&panel, "a", &ModelSpec::default()).unwrap();
        assert!(fit.design_floored);
        assert!(linalg::min_eigenvalue(&fit.v_hat) > 0.0);
    }

    #[test]
    fn gap_in_lagged_model_is_reported() {
        let mut u = series("a", &[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0, 0.0, 1.0, 0.0, 1.0]);
        u.times = vec![0, 1, 2, 4, 5];
        let panel = PanelData::from_units(vec![u]).unwrap();
        assert!(matches!(
            fit_unit(&panel, "a", &ModelSpec::dynamic()),
            Err(Error::MissingPeriod { before: 2, after: 4, .. })
        ));
        assert!(fit_unit(&panel, "a", &ModelSpec::default()).is_ok());
    }

    #[test]
    fn loglik_zero_residuals() {
        let x = [1.0, 2.0];
        let panel = PanelData::from_units(vec![series("a", &[2.0, 4.0], &x)]).unwrap();
        let spec = ModelSpec::default();
        let theta = DVector::from_element(1, 2.0);
        let l1 = loglik_on_unit(&panel, "a", &theta, 1.0, &spec).unwrap();
        assert_abs_diff_eq!(l1, -(2.0 * std::f64::consts::PI).ln(), epsilon = 1e-14);
        let l2 = loglik_on_unit(&panel, "a", &theta, 2.0, &spec).unwrap();
        assert_abs_diff_eq!(l1 - l2, 2.0f64.ln(), epsilon = 1e-14);
        assert!(loglik_on_unit(&panel, "a", &theta, 0.0, &spec).is_err());
        let wrong = DVector::from_element(2, 1.0);
        assert!(matches!(
            loglik_on_unit(&panel, "a", &wrong, 1.0, &spec),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn fit_all_reports_short_unit() {
        let panel = PanelData::from_units(vec![
            series("a", &[1.0, 2.0, 3.0, 4.0], &[1.0, 0.5, 0.2, 0.1]),
            series("short", &[1.0], &[1.0]),
        ])
        .unwrap();
        let err = fit_all(&panel, &ModelSpec::default()).unwrap_err();
        assert!(err.to_string().contains("short"));
    }

    #[test]
    fn vcov_parse() {
        assert_eq!("hc0".parse::<Vcov>().unwrap(), Vcov::Hc0);
        assert_eq!("nw:4".parse::<Vcov>().unwrap(), Vcov::NeweyWest(4));
        assert!("nw:x".parse::<Vcov>().is_err());
        assert_eq!(Vcov::NeweyWest(3).to_string(), "nw:3");
    }

    fn random_series(seed: u64, t: usize, dim: usize) -> UnitSeries {
        let mut rng = crate::rng::stream(seed, &[]);
        let x: Vec<Vec<f64>> = (0..t).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let mut y = Vec::with_capacity(t);
        let mut prev = 0.0;
        for row in &x {
            prev = 0.4 * prev + row.iter().sum::<f64>() + rng.random_range(-1.0..1.0);
            y.push(prev);
        }
        UnitSeries {
            id: "u".into(),
            times: (0..t as i64).collect(),
            y,
            x,
        }
    }

    fn spec_strategy() -> impl Strategy<Value = ModelSpec> {
        (any::<bool>(), 0..=1usize).prop_map(|(include_intercept, lag_order)| ModelSpec {
            include_intercept,
            lag_order,
            vcov: Vcov::Hc0,
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn normal_equations_hold(seed in any::<u64>(), t in 12..60usize, dim in 1..4usize, spec in spec_strategy()) {
            let panel = PanelData::from_units(vec![random_series(seed, t, dim)]).unwrap();
            let fit = fit_unit(&panel, "u", &spec).unwrap();
            let design = Design::build(&panel, "u", &spec).unwrap();
            let score = design.x.transpose() * (&design.y - &design.x * &fit.theta_hat);
            let scale = design.x.norm() * design.y.norm();
            prop_assert!(score.norm() <= 1e-8 * scale, "score {}", score.norm());
            prop_assert!(fit.v_hat.clone().cholesky().is_some());
            prop_assert_eq!(&fit.v_hat, &fit.v_hat.transpose());
        }

        #[test]
        fn row_order_does_not_matter(seed in any::<u64>(), t in 12..40usize, shuffle in any::<u64>()) {
            let panel = PanelData::from_units(vec![random_series(seed, t, 2)]).unwrap();
            let mut text = Vec::new();
            panel.write_csv(&mut text).unwrap();
            let text = String::from_utf8(text).unwrap();
            let mut lines: Vec<&str> = text.lines().collect();
            let header = lines.remove(0);
            let mut rng = crate::rng::stream(shuffle, &[]);
            for i in (1..lines.len()).rev() {
                lines.swap(i, rng.random_range(0..=i));
            }
            let shuffled = format!("{header}\n{}\n", lines.join("\n"));
            let reloaded = load_panel(shuffled.as_bytes()).unwrap();
            let spec = ModelSpec::dynamic();
            let a = fit_unit(&panel, "u", &spec).unwrap();
            let b = fit_unit(&reloaded, "u", &spec).unwrap();
            prop_assert_eq!(a.theta_hat, b.theta_hat);
            prop_assert_eq!(a.v_hat, b.v_hat);
        }

        #[test]
        fn covariate_rescaling(seed in any::<u64>(), t in 12..60usize, c in prop_oneof![0.01..0.5f64, 2.0..100.0f64], spec in spec_strategy()) {
            let series = random_series(seed, t, 2);
            let mut scaled = series.clone();
            scaled.x.iter_mut().for_each(|row| row[0] *= c);
            let a_panel = PanelData::from_units(vec![series]).unwrap();
            let b_panel = PanelData::from_units(vec![scaled]).unwrap();
            let a = fit_unit(&a_panel, "u", &spec).unwrap();
            let b = fit_unit(&b_panel, "u", &spec).unwrap();
            let k = usize::from(spec.include_intercept);
            prop_assert!((b.theta_hat[k] * c - a.theta_hat[k]).abs() <= 1e-10 * (1.0 + a.theta_hat[k].abs()));
            let fa = Design::build(&a_panel, "u", &spec).unwrap();
            let fb = Design::build(&b_panel, "u", &spec).unwrap();
            let gap = (&fa.x * &a.theta_hat - &fb.x * &b.theta_hat).amax();
            prop_assert!(gap <= 1e-10 * (1.0 + fa.y.amax()), "fitted values moved by {gap}");
        }
    }
}
