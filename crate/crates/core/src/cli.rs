//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 for usage errors (bad flags, unreadable
//! inputs, unwritable outputs, malformed configuration), 1 when the
//! computation itself fails. Output files are written to a temporary file in
//! the target directory and renamed into place, so a failed run never leaves
//! a partial file behind.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tempfile::NamedTempFile;

use crate::error::{Error, Result};
use crate::focus::Focus;
use crate::lamse::{build_large_n_objective, build_psi_hat, build_psi_tilde, write_matrix_csv};
use crate::montecarlo::{run_study, scheme_weights, write_results_csv, SimConfig};
use crate::oracle::{simulate_limit, write_limit_csv, LimitRegime, LimitSpec, LimitWeights};
use crate::panel::{fit_all, load_panel, ModelSpec, PanelData, UnitFit, Vcov};
use crate::weights::{min_mse_fixed, min_mse_large, unit_average, Scheme, WeightsReport};

#[derive(Debug, Parser)]
#[command(name = "unitavg", version, about = "Minimum-MSE unit averaging for heterogeneous panels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Regime {
    Fixed,
    Large,
}

#[derive(Debug, clap::Args)]
struct ModelArgs {
    /// Panel CSV with header `unit,time,y[,x1,...]`.
    #[arg(long)]
    panel: PathBuf,
    /// Target unit id.
    #[arg(long)]
    unit: String,
    /// `coordinate:k`, `condmean:a1,...,ap:b` or `longrun:i_beta:i_lambda`.
    #[arg(long)]
    focus: Focus,
    #[arg(long, value_enum, default_value = "fixed")]
    regime: Regime,
    /// Number of unrestricted units in the large regime.
    #[arg(long)]
    nbar: Option<usize>,
    /// Comma-separated unit ids placed first in the large-regime ordering;
    /// the rest follow in input order. Defaults to the target followed by
    /// the other units in input order.
    #[arg(long, value_delimiter = ',')]
    order: Option<Vec<String>>,
    /// `hc0` or `nw:L`.
    #[arg(long, default_value = "hc0")]
    vcov: Vcov,
    /// Include an intercept.
    #[arg(long)]
    intercept: bool,
    /// Autoregressive lag order (0 or 1).
    #[arg(long, default_value_t = 1)]
    lag: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the focus parameter of one unit by unit averaging.
    Estimate {
        #[command(flatten)]
        model: ModelArgs,
        /// `minmse` (regime-dependent), or any of minmse-fixed,
        /// minmse-large:K, individual, mean-group, stein:L, aic, bic, mma.
        #[arg(long, default_value = "minmse")]
        scheme: String,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the dynamic-panel simulation study.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Sample the limit experiment.
    Limit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        reps: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "fixed")]
        regime: Regime,
        /// Fixed comma-separated weights instead of minimum-MSE weights.
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Dump the criterion matrices of a panel.
    Psi {
        #[command(flatten)]
        model: ModelArgs,
        /// Output directory for psi_hat.csv, psi_tilde.csv and q_hat.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Compute(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::UnknownUnit(_) => Failure::Usage(e.to_string()),
            e => Failure::Compute(e),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Runs the command line `argv` (program name first) and returns the exit
/// code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Compute(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Estimate { model, scheme, out } => estimate(model, &scheme, out.as_deref()),
        Command::Simulate {
            config,
            seed,
            out,
            threads,
        } => simulate(&config, seed, &out, threads),
        Command::Limit {
            config,
            reps,
            seed,
            out,
            regime,
            weights,
            threads,
        } => limit(&config, reps, seed, &out, regime, weights, threads),
        Command::Psi { model, out } => psi(model, &out),
    }
}

fn check_input(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("input file `{}` does not exist", path.display())))
    }
}

fn check_output_file(path: &Path) -> Result<(), Failure> {
    if path.is_dir() {
        return Err(usage(format!("output `{}` is a directory", path.display())));
    }
    let parent = parent_dir(path);
    if parent.is_dir() {
        Ok(())
    } else {
        Err(usage(format!(
            "output directory `{}` does not exist",
            parent.display()
        )))
    }
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read `{}`: {e}", path.display())))
}

/// Writes `path` via a temporary file in the same directory and a rename.
fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let mut tmp = NamedTempFile::new_in(parent_dir(path))?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        fill(&mut buf)?;
        buf.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn thread_pool(threads: Option<usize>) -> Result<Option<rayon::ThreadPool>, Failure> {
    match threads {
        None => Ok(None),
        Some(0) => Err(usage("--threads must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(Some)
            .map_err(|e| Failure::Compute(Error::invalid(format!("cannot start thread pool: {e}")))),
    }
}

fn in_pool<T: Send>(pool: Option<rayon::ThreadPool>, f: impl FnOnce() -> T + Send) -> T {
    match pool {
        Some(pool) => pool.install(f),
        None => f(),
    }
}

/// Loaded panel with the target moved to the front, its fits and the
/// large-regime ordering.
struct Prepared {
    panel: PanelData,
    spec: ModelSpec,
    fits: Vec<UnitFit>,
    ordering: Vec<usize>,
}

fn prepare(model: &ModelArgs) -> Result<Prepared, Failure> {
    check_input(&model.panel)?;
    if model.lag > 1 {
        return Err(usage("--lag must be 0 or 1"));
    }
    if model.regime == Regime::Large && model.nbar.is_none() {
        return Err(usage("--regime large needs --nbar"));
    }
    if model.regime == Regime::Fixed && (model.nbar.is_some() || model.order.is_some()) {
        return Err(usage("--nbar and --order only apply to --regime large"));
    }
    let file = fs::File::open(&model.panel)
        .map_err(|e| usage(format!("cannot read `{}`: {e}", model.panel.display())))?;
    let loaded = load_panel(std::io::BufReader::new(file))?;
    let target = loaded.index_of(&model.unit)?;
    let n = loaded.n_units();
    let mut order: Vec<usize> = std::iter::once(target).chain((0..n).filter(|&i| i != target)).collect();
    let panel = loaded.reordered(&order)?;
    if let Some(ids) = &model.order {
        let mut front = Vec::with_capacity(ids.len());
        for id in ids {
            let i = panel.index_of(id)?;
            if front.contains(&i) {
                return Err(usage(format!("unit `{id}` appears twice in --order")));
            }
            front.push(i);
        }
        order = front.clone();
        order.extend((0..n).filter(|i| !front.contains(i)));
    } else {
        order = (0..n).collect();
    }
    let spec = ModelSpec {
        include_intercept: model.intercept,
        lag_order: model.lag,
        vcov: model.vcov,
    };
    let fits = fit_all(&panel, &spec)?;
    Ok(Prepared {
        panel,
        spec,
        fits,
        ordering: order,
    })
}

#[derive(Serialize)]
struct EstimateReport {
    #[serde(flatten)]
    weights: WeightsReport,
    focus: String,
    target: String,
    estimate: f64,
}

fn resolve_scheme(name: &str, model: &ModelArgs, n: usize) -> Result<Scheme, Failure> {
    let scheme = match name {
        "minmse" => match model.regime {
            Regime::Fixed => Scheme::MinMseFixed,
            Regime::Large => Scheme::MinMseLarge(model.nbar.unwrap_or(0)),
        },
        other => other.parse().map_err(|e: Error| usage(e.to_string()))?,
    };
    if let Scheme::MinMseLarge(nbar) = scheme {
        if nbar >= n {
            return Err(usage(format!(
                "nbar = {nbar} must be smaller than N = {n}; use --regime fixed"
            )));
        }
    }
    Ok(scheme)
}

fn estimate(model: ModelArgs, scheme: &str, out: Option<&Path>) -> Result<(), Failure> {
    if let Some(out) = out {
        check_output_file(out)?;
    }
    let prepared = prepare(&model)?;
    let fits = &prepared.fits;
    let scheme = resolve_scheme(scheme, &model, fits.len())?;
    let w = match scheme {
        Scheme::MinMseFixed => min_mse_fixed(&build_psi_hat(fits, &model.focus, fits[0].t_eff)?)?,
        Scheme::MinMseLarge(nbar) => min_mse_large(&build_large_n_objective(
            fits,
            &model.focus,
            fits[0].t_eff,
            nbar,
            &prepared.ordering,
        )?)?,
        other => scheme_weights(other, fits, &prepared.panel, &model.focus, &prepared.spec)?,
    };
    let estimate = unit_average(fits, &model.focus, &w)?;
    let ids: Vec<String> = fits.iter().map(|f| f.unit_id.clone()).collect();
    let report = EstimateReport {
        weights: w.report(&ids),
        focus: model.focus.to_string(),
        target: model.unit.clone(),
        estimate,
    };
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    if let Some(out) = out {
        write_atomic(out, |w| Ok(writeln!(w, "{text}")?))?;
    }
    println!("{text}");
    Ok(())
}

fn simulate(config: &Path, seed: u64, out: &Path, threads: Option<usize>) -> Result<(), Failure> {
    check_input(config)?;
    check_output_file(out)?;
    let mut config = SimConfig::from_json(&read_text(config)?)
        .map_err(|e| usage(format!("invalid simulation config: {e}")))?;
    config.seed = seed;
    if threads.is_some() {
        config.threads = threads;
    }
    let pool = thread_pool(config.threads.take())?;
    let result = in_pool(pool, || run_study(&config))?;
    for warning in &result.warnings {
        eprintln!("warning: {warning}");
    }
    write_atomic(out, |w| write_results_csv(&result, w))?;
    Ok(())
}

fn limit(
    config: &Path,
    reps: usize,
    seed: u64,
    out: &Path,
    regime: Regime,
    weights: Option<Vec<f64>>,
    threads: Option<usize>,
) -> Result<(), Failure> {
    check_input(config)?;
    check_output_file(out)?;
    if reps == 0 {
        return Err(usage("--reps must be at least 1"));
    }
    let spec = LimitSpec::from_json(&read_text(config)?)
        .map_err(|e| usage(format!("invalid limit spec: {e}")))?;
    let regime = match regime {
        Regime::Fixed => LimitRegime::Fixed,
        Regime::Large => LimitRegime::Large,
    };
    let rule = match weights {
        Some(w) => LimitWeights::Given(w),
        None => LimitWeights::MinMse,
    };
    let pool = thread_pool(threads)?;
    let outcomes = in_pool(pool, || simulate_limit(&spec, regime, &rule, reps, seed))?;
    write_atomic(out, |w| write_limit_csv(&outcomes, regime, w))?;
    Ok(())
}

fn psi(model: ModelArgs, out: &Path) -> Result<(), Failure> {
    if !out.is_dir() {
        return Err(usage(format!("output directory `{}` does not exist", out.display())));
    }
    let prepared = prepare(&model)?;
    let fits = &prepared.fits;
    let t = fits[0].t_eff;
    let psi_hat = build_psi_hat(fits, &model.focus, t)?;
    let psi_tilde = build_psi_tilde(fits, &model.focus, t)?;
    let q_hat = match model.nbar {
        Some(nbar) => Some(build_large_n_objective(
            fits,
            &model.focus,
            t,
            nbar,
            &prepared.ordering,
        )?),
        None => None,
    };
    write_atomic(&out.join("psi_hat.csv"), |w| write_matrix_csv(&psi_hat.psi, w))?;
    write_atomic(&out.join("psi_tilde.csv"), |w| write_matrix_csv(&psi_tilde.psi_tilde, w))?;
    if let Some(q) = q_hat {
        write_atomic(&out.join("q_hat.csv"), |w| write_matrix_csv(&q.q, w))?;
    }
    Ok(())
}
