//! Simulation study on a linear dynamic heterogeneous panel
//!
//! ```text
//! y_it = beta_i x_it + lambda_i y_{i,t-1} + e_it,   e_it ~ N(0, sigma2_i)
//! beta_i = 1 + eta_beta / sqrt(T),   lambda_i = eta_lambda / sqrt(T)
//! ```
//!
//! with `sigma2_i ~ Exp(1)`, `x_it ~ N(0, 1)`, `eta_beta ~ N(0, 1)`,
//! `eta_lambda ~ U[-4, 4]` and a stationary start. Unit 1's `lambda` is
//! pinned at a grid value. Every replication fits all units without an
//! intercept, computes each scheme's estimate of the focus at unit 1 and
//! records the squared error.
//!
//! Also hosts the scalar location design used to check the limit theory
//! against finite samples.

use std::io::Write;

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::focus::Focus;
use crate::lamse::{build_large_n_objective, build_psi_hat};
use crate::panel::{fit_all, ModelSpec, PanelData, UnitFit, UnitSeries};
use crate::rng::{self, StreamRng};
use crate::weights::{
    aic_weights, ic_weights, individual_weights, mean_group_weights, min_mse_fixed, min_mse_large,
    mma_select, stein_weights, unit_average, InfoCriterion, Scheme, WeightVector,
};

/// Half-width of the support of `eta_lambda`.
pub const ETA_LAMBDA_BOUND: f64 = 4.0;

/// Share of dropped replications above which a grid point is flagged.
pub const DROP_WARNING_SHARE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimFocus {
    /// `lambda_1`.
    Lambda,
    /// `lambda_1 y_{1T} + beta_1`, the forecast at `x = 1`.
    ConditionalMean,
}

/// Switches for degenerate designs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpOverrides {
    /// Set every `eta` to zero (unit 1's `lambda` stays pinned).
    #[serde(default)]
    pub zero_eta: bool,
    /// Use this error variance for every unit instead of drawing it.
    #[serde(default)]
    pub sigma2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_units: usize,
    #[serde(default = "default_t")]
    pub t: usize,
    #[serde(default = "default_replications")]
    pub replications: usize,
    pub lambda1_grid: Vec<f64>,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
    #[serde(default = "default_focus")]
    pub focus: SimFocus,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; `None` uses the ambient pool.
    #[serde(default)]
    pub threads: Option<usize>,
    /// Draw `eta` and `sigma2` once per grid point instead of once per
    /// replication.
    #[serde(default)]
    pub freeze: bool,
    #[serde(default)]
    pub dgp: DgpOverrides,
}

fn default_t() -> usize {
    60
}

fn default_replications() -> usize {
    2500
}

fn default_focus() -> SimFocus {
    SimFocus::Lambda
}

fn default_schemes() -> Vec<Scheme> {
    vec![
        Scheme::MinMseFixed,
        Scheme::MinMseLarge(10),
        Scheme::MinMseLarge(20),
        Scheme::Individual,
        Scheme::MeanGroup,
        Scheme::Aic,
        Scheme::Mma,
    ]
}

impl SimConfig {
    pub fn new(n_units: usize, lambda1_grid: Vec<f64>) -> Self {
        Self {
            n_units,
            t: default_t(),
            replications: default_replications(),
            lambda1_grid,
            schemes: default_schemes(),
            focus: default_focus(),
            seed: 0,
            threads: None,
            freeze: false,
            dgp: DgpOverrides::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: SimConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_units < 2 {
            return Err(Error::invalid("n_units must be at least 2"));
        }
        if self.t < 10 {
            return Err(Error::invalid(format!("T must be at least 10, got {}", self.t)));
        }
        if !self.dgp.zero_eta && ETA_LAMBDA_BOUND / (self.t as f64).sqrt() >= 1.0 {
            return Err(Error::invalid(format!(
                "T = {} lets lambda reach {} and breaks stationarity",
                self.t,
                ETA_LAMBDA_BOUND / (self.t as f64).sqrt()
            )));
        }
        if self.replications == 0 {
            return Err(Error::invalid("replications must be at least 1"));
        }
        if self.lambda1_grid.is_empty() {
            return Err(Error::invalid("lambda1_grid is empty"));
        }
        if let Some(g) = self.lambda1_grid.iter().find(|g| !(g.abs() < 1.0)) {
            return Err(Error::invalid(format!("grid value {g} is outside (-1, 1)")));
        }
        if self.threads == Some(0) {
            return Err(Error::invalid("threads must be at least 1"));
        }
        if let Some(s) = self.dgp.sigma2 {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("sigma2 override must be positive, got {s}")));
            }
        }
        Ok(())
    }

    /// Requested schemes with `individual` guaranteed, duplicates removed.
    fn scheme_list(&self) -> Vec<Scheme> {
        let mut list = vec![Scheme::Individual];
        for s in &self.schemes {
            if !list.contains(s) {
                list.push(*s);
            }
        }
        list
    }
}

/// True `(beta, lambda)` of a unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitTruth {
    pub beta: f64,
    pub lambda: f64,
    pub sigma2: f64,
}

fn draw_truths(config: &SimConfig, grid_value: f64, rng: &mut StreamRng) -> Vec<UnitTruth> {
    let root_t = (config.t as f64).sqrt();
    (0..config.n_units)
        .map(|i| {
            let sigma2: f64 = rng.sample(Exp1);
            let eta_beta: f64 = rng.sample(StandardNormal);
            let eta_lambda = rng.random_range(-ETA_LAMBDA_BOUND..=ETA_LAMBDA_BOUND);
            let (eta_beta, eta_lambda) = if config.dgp.zero_eta {
                (0.0, 0.0)
            } else {
                (eta_beta, eta_lambda)
            };
            UnitTruth {
                beta: 1.0 + eta_beta / root_t,
                lambda: if i == 0 { grid_value } else { eta_lambda / root_t },
                sigma2: config.dgp.sigma2.unwrap_or(sigma2),
            }
        })
        .collect()
}

fn simulate_series(id: String, truth: &UnitTruth, t: usize, rng: &mut StreamRng) -> UnitSeries {
    let sd = truth.sigma2.sqrt();
    let start_sd = ((1.0 + truth.sigma2) / (1.0 - truth.lambda * truth.lambda)).sqrt();
    let mut y = Vec::with_capacity(t + 1);
    let mut x = Vec::with_capacity(t + 1);
    x.push(vec![rng.sample::<f64, _>(StandardNormal)]);
    y.push(start_sd * rng.sample::<f64, _>(StandardNormal));
    for s in 1..=t {
        let xt: f64 = rng.sample(StandardNormal);
        let e: f64 = rng.sample(StandardNormal);
        y.push(truth.beta * xt + truth.lambda * y[s - 1] + sd * e);
        x.push(vec![xt]);
    }
    UnitSeries {
        id,
        times: (0..=t as i64).collect(),
        y,
        x,
    }
}

fn param_path(config: &SimConfig, grid_index: usize, rep_index: usize) -> [u64; 3] {
    let rep = if config.freeze { u64::MAX } else { rep_index as u64 };
    [grid_index as u64, rep, 0]
}

/// Panel of `n_units` series with `T + 1` periods (the first is lost to the
/// lag) and the true parameters. Units are labelled `1..=N`.
pub fn generate_dgp(
    config: &SimConfig,
    grid_index: usize,
    rep_index: usize,
) -> Result<(PanelData, Vec<UnitTruth>)> {
    let grid_value = *config
        .lambda1_grid
        .get(grid_index)
        .ok_or_else(|| Error::invalid(format!("grid index {grid_index} out of range")))?;
    let mut param_rng = rng::stream(config.seed, &param_path(config, grid_index, rep_index));
    let truths = draw_truths(config, grid_value, &mut param_rng);
    let mut noise_rng = rng::stream(config.seed, &[grid_index as u64, rep_index as u64, 1]);
    let units = truths
        .iter()
        .enumerate()
        .map(|(i, truth)| simulate_series((i + 1).to_string(), truth, config.t, &mut noise_rng))
        .collect();
    Ok((PanelData::from_units(units)?, truths))
}

/// Focus and its true value at unit 1 for one panel.
pub fn sim_focus(focus: SimFocus, panel: &PanelData, truth: &UnitTruth) -> (Focus, f64) {
    match focus {
        SimFocus::Lambda => (Focus::Coordinate(1), truth.lambda),
        SimFocus::ConditionalMean => {
            let y_t = *panel.units()[0].y.last().expect("panels are non-empty");
            (
                Focus::ConditionalMean {
                    weights: vec![1.0, y_t],
                    offset: 0.0,
                },
                truth.beta + truth.lambda * y_t,
            )
        }
    }
}

/// Weights of one scheme for fits in panel order (target first).
pub fn scheme_weights(
    scheme: Scheme,
    fits: &[UnitFit],
    panel: &PanelData,
    focus: &Focus,
    spec: &ModelSpec,
) -> Result<WeightVector> {
    let n = fits.len();
    let target = &fits[0];
    match scheme {
        Scheme::MinMseFixed => min_mse_fixed(&build_psi_hat(fits, focus, target.t_eff)?),
        Scheme::MinMseLarge(nbar) if nbar >= n => {
            let w = min_mse_fixed(&build_psi_hat(fits, focus, target.t_eff)?)?;
            WeightVector::new(w.weights, scheme, w.criterion_value)
        }
        Scheme::MinMseLarge(nbar) => {
            let ordering: Vec<usize> = (0..n).collect();
            min_mse_large(&build_large_n_objective(fits, focus, target.t_eff, nbar, &ordering)?)
        }
        Scheme::Individual => individual_weights(n),
        Scheme::MeanGroup => mean_group_weights(n),
        Scheme::Stein(lambda) => stein_weights(n, lambda),
        Scheme::Aic => aic_weights(fits, panel, &target.unit_id, spec),
        Scheme::Bic => ic_weights(fits, panel, &target.unit_id, spec, InfoCriterion::Bic),
        Scheme::Mma => mma_select(fits, panel, &target.unit_id, spec),
    }
}

/// Outcome of one replication, one entry per scheme in `schemes` order.
#[derive(Debug, Clone)]
pub struct Replication {
    pub schemes: Vec<Scheme>,
    pub estimates: Vec<f64>,
    pub squared_errors: Vec<f64>,
    pub weights: Vec<WeightVector>,
    pub truth: f64,
}

fn replicate_panel(
    panel: &PanelData,
    truth: &UnitTruth,
    focus: SimFocus,
    schemes: &[Scheme],
) -> Result<Replication> {
    let spec = ModelSpec::dynamic();
    let fits = fit_all(panel, &spec)?;
    let (focus, truth) = sim_focus(focus, panel, truth);
    let mut out = Replication {
        schemes: schemes.to_vec(),
        estimates: Vec::with_capacity(schemes.len()),
        squared_errors: Vec::with_capacity(schemes.len()),
        weights: Vec::with_capacity(schemes.len()),
        truth,
    };
    for &scheme in schemes {
        let w = scheme_weights(scheme, &fits, panel, &focus, &spec)?;
        let estimate = unit_average(&fits, &focus, &w)?;
        if !estimate.is_finite() {
            return Err(Error::invalid(format!("{scheme} produced a non-finite estimate")));
        }
        out.estimates.push(estimate);
        out.squared_errors.push((estimate - truth).powi(2));
        out.weights.push(w);
    }
    Ok(out)
}

/// One replication at `config.lambda1_grid[grid_index]`. The individual
/// scheme is always included and listed first.
pub fn run_replication(config: &SimConfig, grid_index: usize, rep_index: usize) -> Result<Replication> {
    let (panel, truths) = generate_dgp(config, grid_index, rep_index)?;
    replicate_panel(&panel, &truths[0], config.focus, &config.scheme_list())
}

/// Aggregate of one (grid point, scheme) pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub grid_lambda1: f64,
    pub scheme: Scheme,
    pub mse: f64,
    /// Monte Carlo standard error of `mse`.
    pub mc_se: f64,
    /// `mse / mse(individual)`; `NaN` when the denominator is zero.
    pub rel_mse: f64,
    /// Delta-method standard error of `rel_mse` over paired replications.
    pub rel_se: f64,
    pub n_effective: usize,
    /// Mean weight on unit 1.
    pub mean_target_weight: f64,
    /// The individual MSE is zero, so `rel_mse` is undefined.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSummary {
    pub grid_lambda1: f64,
    pub individual_mse: f64,
    pub completed: usize,
    pub dropped: usize,
    /// First error message among dropped replications.
    pub first_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimResult {
    pub cells: Vec<Cell>,
    pub grid: Vec<GridSummary>,
    pub warnings: Vec<String>,
}

impl SimResult {
    pub fn cell(&self, grid_lambda1: f64, scheme: Scheme) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.grid_lambda1 == grid_lambda1 && c.scheme == scheme)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample covariance.
fn covariance(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let (mx, my) = (mean(xs), mean(ys));
    xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (n - 1) as f64
}

/// Ratio of means `mean(a) / mean(b)` of paired samples and its delta-method
/// standard error. `None` when `mean(b)` is zero.
pub fn ratio_with_se(a: &[f64], b: &[f64]) -> Option<(f64, f64)> {
    let (ma, mb) = (mean(a), mean(b));
    if !(mb != 0.0 && mb.is_finite()) {
        return None;
    }
    let r = ma / mb;
    let n = a.len() as f64;
    let var = (covariance(a, a) - 2.0 * r * covariance(a, b) + r * r * covariance(b, b)) / (mb * mb * n);
    Some((r, var.max(0.0).sqrt()))
}

fn summarize_grid(
    grid_lambda1: f64,
    schemes: &[Scheme],
    outcomes: Vec<Result<Replication>>,
) -> (Vec<Cell>, GridSummary) {
    let total = outcomes.len();
    let mut first_error = None;
    let mut reps = Vec::with_capacity(total);
    for o in outcomes {
        match o {
            Ok(r) => reps.push(r),
            Err(e) => {
                first_error.get_or_insert_with(|| e.to_string());
            }
        }
    }
    let n = reps.len();
    let errors: Vec<Vec<f64>> = (0..schemes.len())
        .map(|k| reps.iter().map(|r| r.squared_errors[k]).collect())
        .collect();
    let individual = &errors[0];
    let individual_mse = if n > 0 { mean(individual) } else { f64::NAN };
    let cells = schemes
        .iter()
        .enumerate()
        .map(|(k, &scheme)| {
            let e = &errors[k];
            let (mse, mc_se, ratio) = if n > 0 {
                (mean(e), (covariance(e, e) / n as f64).sqrt(), ratio_with_se(e, individual))
            } else {
                (f64::NAN, f64::NAN, None)
            };
            let target_weights: Vec<f64> = reps.iter().map(|r| r.weights[k].weights[0]).collect();
            Cell {
                grid_lambda1,
                scheme,
                mse,
                mc_se,
                rel_mse: ratio.map_or(f64::NAN, |r| r.0),
                rel_se: ratio.map_or(f64::NAN, |r| r.1),
                n_effective: n,
                mean_target_weight: if n > 0 { mean(&target_weights) } else { f64::NAN },
                flagged: ratio.is_none(),
            }
        })
        .collect();
    let summary = GridSummary {
        grid_lambda1,
        individual_mse,
        completed: n,
        dropped: total - n,
        first_error,
    };
    (cells, summary)
}

fn study(config: &SimConfig) -> SimResult {
    let schemes = config.scheme_list();
    let mut result = SimResult {
        cells: Vec::new(),
        grid: Vec::new(),
        warnings: Vec::new(),
    };
    for (g, &grid_value) in config.lambda1_grid.iter().enumerate() {
        let outcomes: Vec<Result<Replication>> = (0..config.replications)
            .into_par_iter()
            .map(|r| run_replication(config, g, r))
            .collect();
        let (cells, summary) = summarize_grid(grid_value, &schemes, outcomes);
        let share = summary.dropped as f64 / config.replications as f64;
        if share > DROP_WARNING_SHARE {
            result.warnings.push(format!(
                "lambda1 = {grid_value}: dropped {} of {} replications ({})",
                summary.dropped,
                config.replications,
                summary.first_error.as_deref().unwrap_or("unknown error")
            ));
        }
        if cells.iter().any(|c| c.flagged) {
            result.warnings.push(format!(
                "lambda1 = {grid_value}: individual MSE is zero, relative MSE undefined"
            ));
        }
        result.cells.extend(cells);
        result.grid.push(summary);
    }
    result
}

/// Runs every replication at every grid point. Results depend only on the
/// configuration, not on the number of threads.
pub fn run_study(config: &SimConfig) -> Result<SimResult> {
    config.validate()?;
    match config.threads {
        Some(threads) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::invalid(format!("cannot start thread pool: {e}")))?;
            Ok(pool.install(|| study(config)))
        }
        None => Ok(study(config)),
    }
}

/// Relative MSE table `(grid_lambda1, scheme, rel_mse, rel_se, flagged)`.
pub fn relative_mse(result: &SimResult) -> Result<Vec<(f64, Scheme, f64, f64, bool)>> {
    if !result.cells.iter().any(|c| c.scheme == Scheme::Individual) {
        return Err(Error::invalid("relative MSE needs the individual scheme"));
    }
    Ok(result
        .cells
        .iter()
        .map(|c| (c.grid_lambda1, c.scheme, c.rel_mse, c.rel_se, c.flagged))
        .collect())
}

/// Tidy CSV `grid_lambda1,scheme,mse,rel_mse,mc_se,n_effective`.
pub fn write_results_csv<W: Write>(result: &SimResult, out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["grid_lambda1", "scheme", "mse", "rel_mse", "mc_se", "n_effective"])?;
    for c in &result.cells {
        writer.write_record([
            format!("{:?}", c.grid_lambda1),
            c.scheme.to_string(),
            format!("{:?}", c.mse),
            format!("{:?}", c.rel_mse),
            format!("{:?}", c.mc_se),
            c.n_effective.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Scalar location design `y_it = theta_0 + eta_i / sqrt(T) + e_it` with
/// `e_it ~ N(0, sigma2_i)`, fit by the intercept-only model.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationDesign {
    pub theta0: f64,
    pub etas: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub t: usize,
}

impl LocationDesign {
    pub fn truths(&self) -> Vec<f64> {
        let root_t = (self.t as f64).sqrt();
        self.etas.iter().map(|e| self.theta0 + e / root_t).collect()
    }

    /// Panel for replication `rep` of the stream `seed`.
    pub fn panel(&self, seed: u64, rep: usize) -> Result<PanelData> {
        self.build_panel(seed, rep, None)
    }

    /// Panel whose unit `i` has standardized error mean `sqrt(T) e_bar_i / sigma_i`
    /// equal to `shocks[i]`. With standard normal shocks the errors are still iid
    /// Gaussian, which couples the panel to a draw of the limit experiment.
    pub fn coupled_panel(&self, seed: u64, rep: usize, shocks: &[f64]) -> Result<PanelData> {
        if shocks.len() != self.etas.len() {
            return Err(Error::DimensionMismatch {
                expected: self.etas.len(),
                found: shocks.len(),
            });
        }
        self.build_panel(seed, rep, Some(shocks))
    }

    fn build_panel(&self, seed: u64, rep: usize, shocks: Option<&[f64]>) -> Result<PanelData> {
        if self.etas.len() != self.sigma2.len() || self.etas.is_empty() {
            return Err(Error::invalid("location design needs one variance per unit"));
        }
        let mut rng = rng::stream(seed, &[rep as u64]);
        let root_t = (self.t as f64).sqrt();
        let units = self
            .truths()
            .iter()
            .zip(&self.sigma2)
            .enumerate()
            .map(|(i, (&mu, &s2))| {
                let sd = s2.sqrt();
                let mut e: Vec<f64> = (0..self.t).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                if let Some(shocks) = shocks {
                    let shift = shocks[i] / root_t - e.iter().sum::<f64>() / self.t as f64;
                    e.iter_mut().for_each(|x| *x += shift);
                }
                UnitSeries {
                    id: (i + 1).to_string(),
                    times: (0..self.t as i64).collect(),
                    y: e.iter().map(|x| mu + sd * x).collect(),
                    x: vec![Vec::new(); self.t],
                }
            })
            .collect();
        PanelData::from_units(units)
    }

    /// Intercept-only fits of replication `rep`.
    pub fn fits(&self, seed: u64, rep: usize) -> Result<Vec<UnitFit>> {
        fit_all(&self.panel(seed, rep)?, &ModelSpec::intercept_only())
    }
}

/// `sqrt(T) (theta_i - theta_1)` for each unit and `sqrt(T) (theta_1 - mean)`.
pub fn scaled_gaps(fits: &[UnitFit], t: usize) -> (Vec<f64>, f64) {
    let root_t = (t as f64).sqrt();
    let theta: Vec<f64> = fits.iter().map(|f| f.theta_hat[0]).collect();
    let mean = theta.iter().sum::<f64>() / theta.len() as f64;
    (
        theta.iter().map(|x| root_t * (x - theta[0])).collect(),
        root_t * (theta[0] - mean),
    )
}
