//! Data generating process and Monte Carlo studies.
//!
//! ```text
//! χ = ρξ + √(1-ρ²)ν,   (ξ, ν) ~ N(0, I₂)
//! W = Φ(ξ),  X* = Φ(χ),  Y = g(X*) + U,  U ~ N(0, σ_U²)
//! Δ ~ Bernoulli(Φ(1 + χ + U/s))
//! ```
//!
//! Replication `r` of a study draws from `ChaCha8Rng::seed_from_u64(seed)`
//! switched to stream `r`, so results do not depend on how replications are
//! scheduled across threads.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::basis::SieveLayout;
use crate::error::{FpwError, Result};
use crate::estimator::{fit_fpw_series, fit_linear, fit_mar_series, FpwFit, LinearWeighting};
use crate::inference::{equispaced, uniform_band, Multiplier};
use crate::sample::Sample;
use crate::selection::{estimate_selection_probability, MdConfig};
use crate::stats::{median, normal_cdf, normal_quantile, ols_slope, order_quantile};

/// Studies abort when more than this fraction of replications fail.
pub const MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regression {
    /// `g(x) = Φ(c_g (x - 0.5))`.
    Probit { c_g: f64 },
    /// `g(x) = intercept + slope·x`.
    Linear { intercept: f64, slope: f64 },
}

impl Regression {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Regression::Probit { c_g } => normal_cdf(c_g * (x - 0.5)),
            Regression::Linear { intercept, slope } => intercept + slope * x,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgpConfig {
    pub n: usize,
    pub rho: f64,
    pub sigma_u2: f64,
    pub regression: Regression,
    /// Divisor `s` on `U` in the selection index.
    pub selection_scale: f64,
    pub seed: u64,
    /// Force `Δ ≡ 1`.
    pub always_observed: bool,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            rho: 0.2,
            sigma_u2: 1.0,
            regression: Regression::Probit { c_g: 5.0 },
            selection_scale: 2.0,
            seed: 0,
            always_observed: false,
        }
    }
}

impl DgpConfig {
    /// The linear model `Y = 1 + 3X* + U`.
    pub fn linear() -> Self {
        Self {
            regression: Regression::Linear { intercept: 1.0, slope: 3.0 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(FpwError::InvalidArgument("n must be positive".into()));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(FpwError::InvalidArgument(format!("rho = {} outside (-1, 1)", self.rho)));
        }
        if !(self.sigma_u2 > 0.0 && self.sigma_u2.is_finite()) {
            return Err(FpwError::InvalidArgument(format!("sigma_u2 = {} must be positive", self.sigma_u2)));
        }
        if !(self.selection_scale > 0.0 && self.selection_scale.is_finite()) {
            return Err(FpwError::InvalidArgument("selection_scale must be positive".into()));
        }
        if let Regression::Probit { c_g } = self.regression {
            if !c_g.is_finite() {
                return Err(FpwError::NonFinite("c_g"));
            }
        }
        Ok(())
    }

    /// `P(Δ = 1 | Y = y, X* = x)`.
    pub fn selection_probability(&self, y: f64, x: f64) -> f64 {
        let chi = normal_quantile(x);
        normal_cdf(1.0 + chi + (y - self.regression.eval(x)) / self.selection_scale)
    }

    /// `P(Δ = 1 | X* = x)`, integrating `U` out in closed form.
    pub fn response_probability(&self, x: f64) -> f64 {
        let chi = normal_quantile(x);
        let s2 = self.sigma_u2 / (self.selection_scale * self.selection_scale);
        normal_cdf((1.0 + chi) / (1.0 + s2).sqrt())
    }

    /// Population fractional probability weight.
    pub fn omega(&self, y: f64, x: f64) -> f64 {
        self.response_probability(x) / self.selection_probability(y, x)
    }

    /// `E[Δ]`.
    pub fn response_rate(&self) -> f64 {
        let s2 = self.sigma_u2 / (self.selection_scale * self.selection_scale);
        normal_cdf(1.0 / (2.0 + s2).sqrt())
    }

    fn rep_rng(&self, rep: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(rep as u64);
        rng
    }
}

/// A simulated sample together with its latent quantities.
#[derive(Debug, Clone)]
pub struct SimulatedSample {
    pub sample: Sample,
    /// `X*` for every unit, including the unselected.
    pub x_latent: Vec<f64>,
    pub u: Vec<f64>,
    /// `g(X*_i)`.
    pub g_true: Vec<f64>,
}

pub fn simulate_dgp<R: Rng + ?Sized>(cfg: &DgpConfig, rng: &mut R) -> Result<SimulatedSample> {
    cfg.validate()?;
    let n = cfg.n;
    let sd = cfg.sigma_u2.sqrt();
    let root = (1.0 - cfg.rho * cfg.rho).sqrt();
    let mut delta = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut x_latent = Vec::with_capacity(n);
    let mut u = Vec::with_capacity(n);
    let mut g_true = Vec::with_capacity(n);
    for _ in 0..n {
        let xi: f64 = rng.sample(StandardNormal);
        let nu: f64 = rng.sample(StandardNormal);
        let e: f64 = rng.sample(StandardNormal);
        let v: f64 = rng.random();
        let chi = cfg.rho * xi + root * nu;
        let xs = normal_cdf(chi);
        let ui = sd * e;
        let g = cfg.regression.eval(xs);
        delta.push(cfg.always_observed || v < normal_cdf(1.0 + chi + ui / cfg.selection_scale));
        y.push(g + ui);
        w.push(normal_cdf(xi));
        x_latent.push(xs);
        u.push(ui);
        g_true.push(g);
    }
    let sample = Sample::new(delta, y, x_latent.clone(), w)?;
    Ok(SimulatedSample { sample, x_latent, u, g_true })
}

/// Simulate replication `rep` of a study.
pub fn simulate_replication(cfg: &DgpConfig, rep: usize) -> Result<SimulatedSample> {
    simulate_dgp(cfg, &mut cfg.rep_rng(rep))
}

/// Run `reps` replications in parallel, keeping successes in replication
/// order. Aborts if the failure rate exceeds [`MAX_FAILURE_RATE`].
fn replicate<T, F>(reps: usize, f: F) -> Result<(Vec<T>, usize)>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if reps == 0 {
        return Err(FpwError::InvalidArgument("reps must be at least 1".into()));
    }
    let results: Vec<Result<T>> = (0..reps).into_par_iter().map(&f).collect();
    let mut ok = Vec::with_capacity(reps);
    let mut failed = 0;
    for (rep, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                log::warn!("replication {rep} failed: {e}");
                failed += 1;
            }
        }
    }
    if failed as f64 > MAX_FAILURE_RATE * reps as f64 {
        return Err(FpwError::TooManyFailures { failed, total: reps });
    }
    Ok((ok, failed))
}

/// Pointwise summary of replicated curves.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSummary {
    pub median: Vec<f64>,
    pub q025: Vec<f64>,
    pub q975: Vec<f64>,
}

impl CurveSummary {
    fn from_curves(curves: &[Vec<f64>], points: usize) -> Self {
        let mut median_c = Vec::with_capacity(points);
        let mut q025 = Vec::with_capacity(points);
        let mut q975 = Vec::with_capacity(points);
        for j in 0..points {
            let col: Vec<f64> = curves.iter().map(|c| c[j]).collect();
            median_c.push(median(&col));
            q025.push(order_quantile(&col, 0.025));
            q975.push(order_quantile(&col, 0.975));
        }
        Self { median: median_c, q025, q975 }
    }

    /// `max_j |median_j - truth_j|`.
    pub fn sup_deviation(&self, truth: &[f64]) -> f64 {
        self.median
            .iter()
            .zip(truth)
            .map(|(m, t)| (m - t).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearStudy {
    pub grid: Vec<f64>,
    pub truth: Vec<f64>,
    pub fpw: CurveSummary,
    pub mar: CurveSummary,
    /// Per-replication FPW curves on `grid`.
    pub fpw_curves: Vec<Vec<f64>>,
    pub mar_curves: Vec<Vec<f64>>,
    pub replications: usize,
    pub failures: usize,
    pub runtime_secs: f64,
}

fn curve(fit: &FpwFit, grid: &[f64]) -> Result<Vec<f64>> {
    grid.iter().map(|&x| fit.g_hat(x)).collect()
}

/// FPW and listwise-deletion series estimates of `g` on `grid`.
pub fn run_nonlinear_study(
    cfg: &DgpConfig,
    reps: usize,
    layout: &SieveLayout,
    md_cfg: &MdConfig,
    grid: &[f64],
) -> Result<NonlinearStudy> {
    cfg.validate()?;
    md_cfg.validate()?;
    let start = Instant::now();
    let (curves, failures) = replicate(reps, |rep| {
        let sim = simulate_replication(cfg, rep)?;
        let spec = layout.build(&sim.sample.observed_x())?;
        let model = estimate_selection_probability(&sim.sample, md_cfg)?;
        let fpw = fit_fpw_series(&sim.sample, &model, &spec)?;
        let mar = fit_mar_series(&sim.sample, &spec)?;
        Ok((curve(&fpw, grid)?, curve(&mar, grid)?))
    })?;
    let (fpw_curves, mar_curves): (Vec<_>, Vec<_>) = curves.into_iter().unzip();
    Ok(NonlinearStudy {
        grid: grid.to_vec(),
        truth: grid.iter().map(|&x| cfg.regression.eval(x)).collect(),
        fpw: CurveSummary::from_curves(&fpw_curves, grid.len()),
        mar: CurveSummary::from_curves(&mar_curves, grid.len()),
        replications: fpw_curves.len(),
        fpw_curves,
        mar_curves,
        failures,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

/// One row of the linear-study table.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRow {
    pub estimator: &'static str,
    /// `"beta0"` or `"beta1"`.
    pub coefficient: &'static str,
    pub abs_median_bias: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearStudy {
    pub rows: Vec<LinearRow>,
    pub replications: usize,
    pub failures: usize,
    pub runtime_secs: f64,
}

impl LinearStudy {
    pub fn row(&self, estimator: &str, coefficient: &str) -> Option<&LinearRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.coefficient == coefficient)
    }
}

pub const LINEAR_ESTIMATORS: [&str; 4] = ["FPW", "IPW", "MAR", "FULL"];

/// Series basis used inside `ĥ` for the FPW weights of the linear study.
pub fn linear_study_layout() -> SieveLayout {
    SieveLayout::new(1, 0)
}

/// FPW, IPW, listwise-deletion and full-data OLS of `Y` on `(1, X)`.
pub fn run_linear_study(cfg: &DgpConfig, reps: usize, md_cfg: &MdConfig) -> Result<LinearStudy> {
    cfg.validate()?;
    md_cfg.validate()?;
    let Regression::Linear { intercept, slope } = cfg.regression else {
        return Err(FpwError::InvalidArgument("the linear study needs a linear regression function".into()));
    };
    let truth = [intercept, slope];
    let z = normal_quantile(0.975);
    let start = Instant::now();
    let layout = linear_study_layout();
    let (fits, failures) = replicate(reps, |rep| {
        let sim = simulate_replication(cfg, rep)?;
        let s = &sim.sample;
        let spec = layout.build(&s.observed_x())?;
        let model = estimate_selection_probability(s, md_cfg)?;
        Ok([
            fit_linear(s, LinearWeighting::Fpw { selection: &model, spec_p: &spec })?,
            fit_linear(s, LinearWeighting::Ipw { selection: &model })?,
            fit_linear(s, LinearWeighting::Mar)?,
            fit_linear(s, LinearWeighting::Full { latent_x: &sim.x_latent })?,
        ])
    })?;
    let mut rows = Vec::new();
    for (e, name) in LINEAR_ESTIMATORS.iter().enumerate() {
        for (c, coef) in ["beta0", "beta1"].into_iter().enumerate() {
            let est: Vec<f64> = fits.iter().map(|f| f[e].coefficients[c]).collect();
            let covered = fits.iter().filter(|f| f[e].covers(c, truth[c], z)).count();
            rows.push(LinearRow {
                estimator: name,
                coefficient: coef,
                abs_median_bias: (median(&est) - truth[c]).abs(),
                coverage: covered as f64 / fits.len() as f64,
            });
        }
    }
    Ok(LinearStudy {
        rows,
        replications: fits.len(),
        failures,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

/// Fraction of replications whose uniform band covers `g` on `grid`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandCoverage {
    pub coverage: f64,
    pub replications: usize,
    pub failures: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn run_band_coverage(
    cfg: &DgpConfig,
    reps: usize,
    layout: &SieveLayout,
    md_cfg: &MdConfig,
    grid: &[f64],
    alpha: f64,
    n_boot: usize,
    multiplier: Multiplier,
) -> Result<BandCoverage> {
    cfg.validate()?;
    md_cfg.validate()?;
    let (covered, failures) = replicate(reps, |rep| {
        let mut rng = cfg.rep_rng(rep);
        let sim = simulate_dgp(cfg, &mut rng)?;
        let spec = layout.build(&sim.sample.observed_x())?;
        let model = estimate_selection_probability(&sim.sample, md_cfg)?;
        let fit = fit_fpw_series(&sim.sample, &model, &spec)?;
        let band = uniform_band(&fit, grid, alpha, n_boot, multiplier, &mut rng)?;
        Ok(band.covers(|x| cfg.regression.eval(x)))
    })?;
    Ok(BandCoverage {
        coverage: covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64,
        replications: covered.len(),
        failures,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateConfig {
    pub ns: Vec<usize>,
    pub reps: usize,
    pub degree: usize,
    /// Hold the basis fixed instead of growing it with `n`.
    pub fixed_layout: Option<SieveLayout>,
    /// Evaluation points for the squared error.
    pub grid: Vec<f64>,
}

impl Default for RateConfig {
    fn default() -> Self {
        Self {
            ns: vec![500, 1000, 2000, 4000],
            reps: 100,
            degree: 2,
            fixed_layout: None,
            grid: equispaced(0.1, 0.9, 81),
        }
    }
}

impl RateConfig {
    /// Basis for sample size `n`: `K = round(n^{1/5}) + degree`.
    pub fn layout_for(&self, n: usize) -> SieveLayout {
        if let Some(l) = self.fixed_layout {
            return l;
        }
        let root = (n as f64).powf(0.2).round() as usize;
        SieveLayout::new(self.degree, root.saturating_sub(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateResult {
    pub ns: Vec<usize>,
    /// Median over replications of the mean squared error on the grid.
    pub errors: Vec<f64>,
    pub slope: f64,
    pub failures: usize,
}

/// Empirical rate of the FPW series estimator: OLS slope of log error on
/// log n. With `Δ ≡ 1` in `template` the first stage is skipped.
pub fn rate_experiment(template: &DgpConfig, rate: &RateConfig, md_cfg: &MdConfig) -> Result<RateResult> {
    if rate.ns.len() < 3 {
        return Err(FpwError::InvalidArgument(format!(
            "the rate experiment needs at least 3 sample sizes, got {}",
            rate.ns.len()
        )));
    }
    if rate.grid.is_empty() {
        return Err(FpwError::InvalidArgument("empty evaluation grid".into()));
    }
    md_cfg.validate()?;
    let mut errors = Vec::with_capacity(rate.ns.len());
    let mut failures = 0;
    for (i, &n) in rate.ns.iter().enumerate() {
        // distinct streams per sample size
        let cfg = DgpConfig {
            n,
            seed: template.seed.wrapping_add(i as u64),
            ..template.clone()
        };
        cfg.validate()?;
        let layout = rate.layout_for(n);
        let (mse, failed) = replicate(rate.reps, |rep| {
            let sim = simulate_replication(&cfg, rep)?;
            let spec = layout.build(&sim.sample.observed_x())?;
            let fit = if cfg.always_observed {
                fit_mar_series(&sim.sample, &spec)?
            } else {
                let model = estimate_selection_probability(&sim.sample, md_cfg)?;
                fit_fpw_series(&sim.sample, &model, &spec)?
            };
            let mut sse = 0.0;
            for &x in &rate.grid {
                let d = fit.g_hat(x)? - cfg.regression.eval(x);
                sse += d * d;
            }
            Ok(sse / rate.grid.len() as f64)
        })?;
        failures += failed;
        errors.push(median(&mse));
    }
    let log_n: Vec<f64> = rate.ns.iter().map(|&n| (n as f64).ln()).collect();
    let log_e: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    Ok(RateResult {
        ns: rate.ns.clone(),
        slope: ols_slope(&log_n, &log_e),
        errors,
        failures,
    })
}
