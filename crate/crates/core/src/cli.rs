//! The `fpw` command line. Every numeric option can also come from a
//! `key=value` file passed with `--config`; flags win over the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, CommandFactory, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::basis::{KnotPlacement, SieveLayout};
use crate::error::{FpwError, Result};
use crate::estimator::fit_fpw;
use crate::inference::{default_grid, equispaced, uniform_band, Multiplier, DEFAULT_BOOTSTRAP_DRAWS};
use crate::io::{
    load_csv, read_config, write_band, write_curves, write_fit, write_linear_table, write_rate, ColumnMap,
};
use crate::selection::{MdConfig, Optimizer};
use crate::simulation::{
    rate_experiment, run_linear_study, run_nonlinear_study, DgpConfig, RateConfig, Regression,
};

#[derive(Parser, Debug)]
#[command(name = "fpw", version, about = "Series regression with selectively missing covariates")]
struct Cli {
    /// key=value file supplying defaults for any long option
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Monte Carlo study of the FPW and listwise-deletion series estimators
    SimulateNonlinear(NonlinearArgs),
    /// Monte Carlo study of the FPW, IPW, MAR and full-data linear estimators
    SimulateLinear(SimArgs),
    /// Empirical convergence rate of the FPW series estimator
    Rate(RateArgs),
    /// Fit the FPW series estimator to a CSV file
    Fit(FitArgs),
    /// Fit and compute a multiplier-bootstrap uniform confidence band
    Band(BandArgs),
}

#[derive(Args, Debug, Clone)]
struct FirstStageArgs {
    /// First-stage optimizer: active-set, projected-gradient or nelder-mead
    #[arg(long)]
    optimizer: Option<String>,
    /// Lower bound on the selection probability
    #[arg(long)]
    floor: Option<f64>,
    /// Ridge penalty towards the constant selection model
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct SimArgs {
    #[arg(long)]
    n: Option<usize>,
    /// Instrument strength
    #[arg(long)]
    rho: Option<f64>,
    /// Variance of the regression error
    #[arg(long)]
    sigma_u2: Option<f64>,
    /// Divisor on the error in the selection index
    #[arg(long)]
    selection_scale: Option<f64>,
    #[arg(long)]
    reps: Option<usize>,
    /// Master seed (required)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to all cores
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    first_stage: FirstStageArgs,
}

#[derive(Args, Debug, Clone)]
struct NonlinearArgs {
    #[command(flatten)]
    sim: SimArgs,
    /// Steepness of g(x) = Φ(c_g (x - 0.5))
    #[arg(long)]
    c_g: Option<f64>,
    #[arg(long)]
    degree: Option<usize>,
    /// Interior knots of the series basis
    #[arg(long)]
    knots: Option<usize>,
    #[arg(long)]
    grid_points: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct RateArgs {
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long)]
    c_g: Option<f64>,
    /// Comma-separated sample sizes
    #[arg(long)]
    ns: Option<String>,
    #[arg(long)]
    degree: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct FitArgs {
    /// Input CSV with a header row
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    outcome: Option<String>,
    /// Column whose missing cells mark unselected units
    #[arg(long)]
    covariate: Option<String>,
    #[arg(long)]
    instrument: Option<String>,
    /// Comma-separated linear control columns
    #[arg(long)]
    controls: Option<String>,
    #[arg(long)]
    degree: Option<usize>,
    #[arg(long)]
    knots: Option<usize>,
    /// Knot placement: quantile or uniform
    #[arg(long)]
    placement: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    first_stage: FirstStageArgs,
}

#[derive(Args, Debug, Clone)]
struct BandArgs {
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    n_boot: Option<usize>,
    /// Multiplier distribution: normal, rademacher or mammen
    #[arg(long)]
    multiplier: Option<String>,
    #[arg(long)]
    grid_points: Option<usize>,
    /// Bootstrap seed
    #[arg(long)]
    seed: Option<u64>,
}

/// Flag values layered over config-file values.
struct Settings {
    file: BTreeMap<String, String>,
}

impl Settings {
    fn get<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| FpwError::InvalidArgument(format!("config key '{key}': cannot parse '{v}'"))),
        }
    }

    fn or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(self.get(flag, key)?.unwrap_or(default))
    }

    fn require<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T> {
        self.get(flag, key)?
            .ok_or_else(|| FpwError::InvalidArgument(format!("--{key} is required")))
    }

    fn md_config(&self, a: &FirstStageArgs) -> Result<MdConfig> {
        let d = MdConfig::default();
        let optimizer: String = self.or(a.optimizer.clone(), "optimizer", "active-set".into())?;
        let cfg = MdConfig {
            optimizer: Optimizer::from_str(&optimizer)?,
            floor: self.or(a.floor, "floor", d.floor)?,
            ridge: self.or(a.ridge, "ridge", d.ridge)?,
            max_iter: self.or(a.max_iter, "max-iter", d.max_iter)?,
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn dgp(&self, a: &SimArgs, regression: Regression) -> Result<DgpConfig> {
        let d = DgpConfig::default();
        let cfg = DgpConfig {
            n: self.or(a.n, "n", d.n)?,
            rho: self.or(a.rho, "rho", d.rho)?,
            sigma_u2: self.or(a.sigma_u2, "sigma-u2", d.sigma_u2)?,
            selection_scale: self.or(a.selection_scale, "selection-scale", d.selection_scale)?,
            seed: self.require(a.seed, "seed")?,
            regression,
            always_observed: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, flag: Option<PathBuf>) -> Result<PathBuf> {
        let dir = self.or(flag, "out", PathBuf::from("."))?;
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn columns(&self, a: &FitArgs) -> Result<ColumnMap> {
        let controls: String = self.or(a.controls.clone(), "controls", String::new())?;
        let controls: Vec<&str> = controls.split(',').map(str::trim).filter(|c| !c.is_empty()).collect();
        Ok(ColumnMap::new(
            &self.require(a.outcome.clone(), "outcome")?,
            &self.require(a.covariate.clone(), "covariate")?,
            &self.require(a.instrument.clone(), "instrument")?,
        )
        .with_controls(&controls))
    }

    fn layout(&self, degree: Option<usize>, knots: Option<usize>, placement: Option<String>) -> Result<SieveLayout> {
        let placement: String = self.or(placement, "placement", "quantile".into())?;
        Ok(SieveLayout {
            degree: self.or(degree, "degree", 2)?,
            n_interior: self.or(knots, "knots", 2)?,
            placement: KnotPlacement::from_str(&placement)?,
        })
    }
}

fn with_threads<T>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T>
where
    T: Send,
{
    match threads {
        None => f(),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| FpwError::InvalidArgument(e.to_string()))?
            .install(f),
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => read_config(p)?,
        None => BTreeMap::new(),
    };
    let s = Settings { file };
    let Some(command) = cli.command else {
        unreachable!("checked by run_command");
    };
    match command {
        Command::SimulateNonlinear(a) => {
            let c_g = s.or(a.c_g, "c-g", 5.0)?;
            let cfg = s.dgp(&a.sim, Regression::Probit { c_g })?;
            let md = s.md_config(&a.sim.first_stage)?;
            let reps = s.or(a.sim.reps, "reps", 200)?;
            let layout = s.layout(a.degree, a.knots, None)?;
            let grid = equispaced(0.1, 0.9, s.or(a.grid_points, "grid-points", 81)?);
            let threads = s.get(a.sim.threads, "threads")?;
            let out = s.out_dir(a.sim.out)?;
            let study = with_threads(threads, || run_nonlinear_study(&cfg, reps, &layout, &md, &grid))?;
            let path = out.join("curves.csv");
            write_curves(&path, &study)?;
            println!(
                "simulate-nonlinear: {} replications ({} failed), sup|FPW-g| = {:.4}, sup|MAR-g| = {:.4}, wrote {}",
                study.replications,
                study.failures,
                study.fpw.sup_deviation(&study.truth),
                study.mar.sup_deviation(&study.truth),
                path.display()
            );
        }
        Command::SimulateLinear(a) => {
            let cfg = s.dgp(&a, Regression::Linear { intercept: 1.0, slope: 3.0 })?;
            let md = s.md_config(&a.first_stage)?;
            let reps = s.or(a.reps, "reps", 200)?;
            let threads = s.get(a.threads, "threads")?;
            let out = s.out_dir(a.out)?;
            let study = with_threads(threads, || run_linear_study(&cfg, reps, &md))?;
            let path = out.join("table.csv");
            write_linear_table(&path, &study)?;
            let bias = |e: &str| study.row(e, "beta1").map_or(f64::NAN, |r| r.abs_median_bias);
            println!(
                "simulate-linear: {} replications ({} failed), beta1 bias FPW {:.3} IPW {:.3} MAR {:.3} FULL {:.3}, wrote {}",
                study.replications,
                study.failures,
                bias("FPW"),
                bias("IPW"),
                bias("MAR"),
                bias("FULL"),
                path.display()
            );
        }
        Command::Rate(a) => {
            let c_g = s.or(a.c_g, "c-g", 5.0)?;
            let cfg = s.dgp(&a.sim, Regression::Probit { c_g })?;
            let md = s.md_config(&a.sim.first_stage)?;
            let d = RateConfig::default();
            let ns: String = s.or(a.ns, "ns", "500,1000,2000,4000".into())?;
            let ns = ns
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| FpwError::InvalidArgument(format!("bad sample size '{v}'")))
                })
                .collect::<Result<Vec<usize>>>()?;
            let rate = RateConfig {
                ns,
                reps: s.or(a.sim.reps, "reps", d.reps)?,
                degree: s.or(a.degree, "degree", d.degree)?,
                ..d
            };
            let threads = s.get(a.sim.threads, "threads")?;
            let out = s.out_dir(a.sim.out)?;
            let result = with_threads(threads, || rate_experiment(&cfg, &rate, &md))?;
            let path = out.join("rate.csv");
            write_rate(&path, &result)?;
            println!("rate: slope {:.4} over n = {:?}, wrote {}", result.slope, result.ns, path.display());
        }
        Command::Fit(a) => {
            let (sample, fit) = fit_from_args(&s, &a)?;
            let out = s.out_dir(a.out)?;
            let path = out.join("fit.csv");
            write_fit(&path, &fit, sample.control_names())?;
            println!(
                "fit: n = {}, selected = {}, K = {}, clamped weights = {}, wrote {}",
                sample.n(),
                sample.n_selected(),
                fit.k(),
                fit.clamped_weights,
                path.display()
            );
        }
        Command::Band(a) => {
            let (sample, fit) = fit_from_args(&s, &a.fit)?;
            let alpha = s.or(a.alpha, "alpha", 0.05)?;
            let n_boot = s.or(a.n_boot, "n-boot", DEFAULT_BOOTSTRAP_DRAWS)?;
            let multiplier: String = s.or(a.multiplier, "multiplier", "mammen".into())?;
            let multiplier = Multiplier::from_str(&multiplier)?;
            let grid = default_grid(&fit, s.or(a.grid_points, "grid-points", 101)?);
            let mut rng = ChaCha8Rng::seed_from_u64(s.or(a.seed, "seed", 0)?);
            let band = uniform_band(&fit, &grid, alpha, n_boot, multiplier, &mut rng)?;
            let out = s.out_dir(a.fit.out)?;
            write_fit(&out.join("fit.csv"), &fit, sample.control_names())?;
            let path = out.join("band.csv");
            write_band(&path, &band)?;
            println!(
                "band: critical value {:.4} at alpha {} over {} points, wrote {}",
                band.critical_value,
                alpha,
                band.grid.len(),
                path.display()
            );
        }
    }
    Ok(())
}

fn fit_from_args(s: &Settings, a: &FitArgs) -> Result<(crate::Sample, crate::FpwFit)> {
    let data: PathBuf = s.require(a.data.clone(), "data")?;
    let map = s.columns(a)?;
    let sample = load_csv(Path::new(&data), &map)?;
    let layout = s.layout(a.degree, a.knots, a.placement.clone())?;
    let md = s.md_config(&a.first_stage)?;
    let fit = fit_fpw(&sample, &layout, &md)?;
    Ok((sample, fit))
}

/// Parse `argv` (including the program name), run, and return the process
/// exit code: 0 on success, 1 on usage errors, 2 on numerical failures.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if cli.command.is_none() {
        let _ = Cli::command().print_help();
        return 1;
    }
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}
