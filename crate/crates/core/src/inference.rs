//! Sieve variance, pointwise normal intervals and multiplier-bootstrap
//! uniform confidence bands for a fitted series estimator.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{FpwError, Result};
use crate::estimator::FpwFit;
use crate::linalg::SymmetricSolver;
use crate::stats::{normal_quantile, order_quantile, order_quantile_sorted};

pub const DEFAULT_BOOTSTRAP_DRAWS: usize = 1000;
pub const MIN_BOOTSTRAP_DRAWS: usize = 100;

/// `√v̂_K` below this multiple of the outcome scale counts as zero.
pub const ZERO_VARIANCE_RELATIVE: f64 = 1e-10;

/// Plug-in sieve variance
/// `v̂_K(x) = a(x)' G⁻¹ Σ̂ G⁻¹ a(x)` with `G = X'X/n` and
/// `Σ̂ = (1/n) Σ_{Δ_i=1} d_i d_i' Û_i² ω̂_i²`.
#[derive(Debug, Clone)]
pub struct SieveVariance {
    gram_inverse: DMatrix<f64>,
    /// Rows `d_i' Û_i ω̂_i / √n`, so that `v = ‖S G⁻¹ a‖²`.
    scores: DMatrix<f64>,
}

impl SieveVariance {
    pub fn new(fit: &FpwFit) -> Result<Self> {
        let solver = SymmetricSolver::new(&fit.gram_unweighted)?;
        if solver.rank() == 0 {
            return Err(FpwError::SingularGram("unweighted series Gram"));
        }
        let scale = 1.0 / (fit.n as f64).sqrt();
        let mut scores = fit.design.clone();
        for (r, mut row) in scores.row_iter_mut().enumerate() {
            row *= fit.residuals[r] * fit.weights[r] * scale;
        }
        Ok(Self {
            gram_inverse: solver.inverse(),
            scores,
        })
    }

    pub fn at(&self, fit: &FpwFit, x: f64) -> Result<f64> {
        let a = fit.evaluation_vector(x)?;
        let b = &self.gram_inverse * a;
        Ok((&self.scores * b).norm_squared())
    }
}

/// `v̂_K(x)`; nonnegative by construction.
pub fn sieve_variance(fit: &FpwFit, x: f64) -> Result<f64> {
    SieveVariance::new(fit)?.at(fit, x)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(FpwError::InvalidArgument(format!("alpha {alpha} outside (0, 1)")))
    }
}

/// `ĝ(x) ± z_{1-α/2} √(v̂_K(x)/n)`.
pub fn pointwise_ci(fit: &FpwFit, x: f64, alpha: f64) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    let z = normal_quantile(1.0 - alpha / 2.0);
    let se = (sieve_variance(fit, x)? / fit.n as f64).sqrt();
    let g = fit.g_hat(x)?;
    Ok((g - z * se, g + z * se))
}

/// Distribution of the bootstrap multipliers; all have mean 0 and variance 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Multiplier {
    Normal,
    Rademacher,
    /// Two-point distribution with third moment 1.
    #[default]
    Mammen,
}

impl Multiplier {
    pub fn name(self) -> &'static str {
        match self {
            Multiplier::Normal => "normal",
            Multiplier::Rademacher => "rademacher",
            Multiplier::Mammen => "mammen",
        }
    }
}

impl std::str::FromStr for Multiplier {
    type Err = FpwError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normal" | "gaussian" => Ok(Multiplier::Normal),
            "rademacher" => Ok(Multiplier::Rademacher),
            "mammen" => Ok(Multiplier::Mammen),
            other => Err(FpwError::InvalidArgument(format!("unknown multiplier '{other}'"))),
        }
    }
}

const SQRT5: f64 = 2.23606797749979;

/// Low value `(1 - √5)/2`, taken with probability `(1 + √5)/(2√5)`.
pub const MAMMEN_LOW: f64 = (1.0 - SQRT5) / 2.0;
pub const MAMMEN_HIGH: f64 = (1.0 + SQRT5) / 2.0;
pub const MAMMEN_P_LOW: f64 = (1.0 + SQRT5) / (2.0 * SQRT5);

/// `n` i.i.d. multiplier draws.
pub fn multiplier_draw<R: Rng + ?Sized>(dist: Multiplier, n: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    fill_multipliers(dist, &mut out, n, rng);
    out
}

fn fill_multipliers<R: Rng + ?Sized>(dist: Multiplier, out: &mut Vec<f64>, n: usize, rng: &mut R) {
    out.clear();
    match dist {
        Multiplier::Normal => out.extend((0..n).map(|_| rng.sample::<f64, _>(StandardNormal))),
        Multiplier::Rademacher => out.extend((0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })),
        Multiplier::Mammen => out.extend((0..n).map(|_| {
            if rng.random::<f64>() < MAMMEN_P_LOW {
                MAMMEN_LOW
            } else {
                MAMMEN_HIGH
            }
        })),
    }
}

/// Sup-statistics `sup_x |Z^B_b(x)|` for each bootstrap draw `b`, in draw
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapSup {
    pub sups: Vec<f64>,
    /// Grid indices left out of the supremum because `v̂_K = 0` there.
    pub dropped: Vec<usize>,
}

impl BootstrapSup {
    /// Empirical `(1 - α)` quantile of the sup-statistics.
    pub fn critical_value(&self, alpha: f64) -> f64 {
        order_quantile(&self.sups, 1.0 - alpha)
    }
}

/// Draw the bootstrap process
/// `Z^B(x) = a(x)' (X'ω̂X/n)⁻¹ Σ_{Δ_i=1} d_i (Y_i ω̂_i - ĝ(X_i)) ε_i / √(n v̂_K(x))`
/// on `grid` and record its supremum per draw. The first stage is not refit.
pub fn bootstrap_sup<R: Rng + ?Sized>(
    fit: &FpwFit,
    grid: &[f64],
    n_boot: usize,
    dist: Multiplier,
    rng: &mut R,
) -> Result<BootstrapSup> {
    if n_boot < MIN_BOOTSTRAP_DRAWS {
        return Err(FpwError::InvalidArgument(format!(
            "n_boot = {n_boot} is below the minimum of {MIN_BOOTSTRAP_DRAWS}"
        )));
    }
    if grid.is_empty() {
        return Err(FpwError::InvalidArgument("empty evaluation grid".into()));
    }
    let variance = SieveVariance::new(fit)?;
    let weighted = SymmetricSolver::new(&fit.gram_weighted)?;
    let n = fit.n as f64;
    let scale = fit.y_selected.iter().fold(1.0_f64, |m, y| m.max(y.abs()));
    let zero = (ZERO_VARIANCE_RELATIVE * scale).powi(2);

    let mut rows = Vec::with_capacity(grid.len());
    let mut dropped = Vec::new();
    for (g, &x) in grid.iter().enumerate() {
        let v = variance.at(fit, x)?;
        if !(v > zero) {
            dropped.push(g);
            continue;
        }
        let a = fit.evaluation_vector(x)?;
        rows.push(weighted.solve(&a) / (n * v).sqrt());
    }
    if !dropped.is_empty() {
        log::warn!("{} grid point(s) with zero sieve variance left out of the sup", dropped.len());
    }
    if rows.is_empty() {
        return Err(FpwError::InvalidArgument("sieve variance is zero on the whole grid".into()));
    }
    let dim = fit.design.ncols();
    let projector = DMatrix::from_fn(rows.len(), dim, |r, c| rows[r][c]);

    let terms: Vec<f64> = fit
        .y_selected
        .iter()
        .zip(&fit.weights)
        .zip(&fit.fitted)
        .map(|((y, w), f)| y * w - f)
        .collect();
    // score_i = d_i * term_i, so the bootstrap sum is scores' ε
    let mut scores = fit.design.clone();
    for (r, mut row) in scores.row_iter_mut().enumerate() {
        row *= terms[r];
    }
    let scores_t = scores.transpose();

    let n_sel = fit.design.nrows();
    let mut eps = Vec::with_capacity(n_sel);
    let mut sups = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        fill_multipliers(dist, &mut eps, n_sel, rng);
        let sum = &scores_t * DVector::from_column_slice(&eps);
        let z = &projector * sum;
        sups.push(z.amax());
    }
    Ok(BootstrapSup { sups, dropped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniformBand {
    pub grid: Vec<f64>,
    pub estimates: Vec<f64>,
    /// `√(v̂_K(x)/n)`.
    pub se: Vec<f64>,
    pub critical_value: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub alpha: f64,
    pub n_boot: usize,
    pub multiplier: Multiplier,
}

impl UniformBand {
    /// Whether `truth` lies inside the band at every grid point.
    pub fn covers<F: Fn(f64) -> f64>(&self, truth: F) -> bool {
        self.grid
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(&x, (&lo, &hi))| {
                let t = truth(x);
                lo <= t && t <= hi
            })
    }
}

/// `100(1-α)%` uniform band `ĝ(x) ± z^B_{1-α} √(v̂_K(x)/n)` over `grid`.
pub fn uniform_band<R: Rng + ?Sized>(
    fit: &FpwFit,
    grid: &[f64],
    alpha: f64,
    n_boot: usize,
    dist: Multiplier,
    rng: &mut R,
) -> Result<UniformBand> {
    check_alpha(alpha)?;
    let boot = bootstrap_sup(fit, grid, n_boot, dist, rng)?;
    let critical_value = boot.critical_value(alpha);
    let variance = SieveVariance::new(fit)?;
    let n = fit.n as f64;
    let mut estimates = Vec::with_capacity(grid.len());
    let mut se = Vec::with_capacity(grid.len());
    for &x in grid {
        estimates.push(fit.g_hat(x)?);
        se.push((variance.at(fit, x)? / n).sqrt());
    }
    let lower = estimates.iter().zip(&se).map(|(g, s)| g - critical_value * s).collect();
    let upper = estimates.iter().zip(&se).map(|(g, s)| g + critical_value * s).collect();
    Ok(UniformBand {
        grid: grid.to_vec(),
        estimates,
        se,
        critical_value,
        lower,
        upper,
        alpha,
        n_boot,
        multiplier: dist,
    })
}

/// `points` equispaced values between the 5% and 95% order statistics of
/// the observed covariate.
pub fn default_grid(fit: &FpwFit, points: usize) -> Vec<f64> {
    let mut xs = fit.x_selected.clone();
    xs.sort_by(f64::total_cmp);
    let lo = order_quantile_sorted(&xs, 0.05);
    let hi = order_quantile_sorted(&xs, 0.95);
    equispaced(lo, hi, points)
}

pub fn equispaced(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..points)
            .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::SieveLayout;
    use crate::estimator::{fit_mar_series, fit_weighted_series};
    use crate::sample::Sample;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(n: usize, seed: u64, noise: f64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = Vec::new();
        let mut y = Vec::new();
        let mut x = Vec::new();
        for _ in 0..n {
            let xi: f64 = rng.random();
            let e: f64 = rng.sample(StandardNormal);
            d.push(true);
            y.push(1.0 + 2.0 * xi + noise * e * (0.5 + xi));
            x.push(xi);
        }
        let w = vec![0.0; n];
        Sample::new(d, y, x, w).unwrap()
    }

    #[test]
    fn exact_fit_has_zero_variance() {
        let s = sample(50, 1, 0.0);
        let spec = SieveLayout::new(2, 1).build(&s.observed_x()).unwrap();
        let fit = fit_mar_series(&s, &spec).unwrap();
        for x in [0.1, 0.5, 0.9] {
            assert!(sieve_variance(&fit, x).unwrap() < 1e-20);
        }
        let (lo, hi) = pointwise_ci(&fit, 0.5, 0.05).unwrap();
        assert_abs_diff_eq!(lo, hi, epsilon = 1e-9);
    }

    #[test]
    fn variance_matches_explicit_sandwich() {
        let s = sample(20, 2, 1.0);
        let spec = SieveLayout::new(2, 1).build(&s.observed_x()).unwrap();
        let fit = fit_mar_series(&s, &spec).unwrap();
        let n = s.n();
        let k = spec.dim();
        // explicit (1/n Σ p p')⁻¹ (1/n Σ p p' e²) (1/n Σ p p')⁻¹
        let mut g = DMatrix::zeros(k, k);
        let mut m = DMatrix::zeros(k, k);
        for i in 0..n {
            let p = DVector::from_vec(crate::basis::eval_basis(s.x()[i], &spec).unwrap());
            let e = s.y()[i] - p.dot(&fit.gamma);
            g += &p * p.transpose() / n as f64;
            m += &p * p.transpose() * (e * e) / n as f64;
        }
        let gi = g.try_inverse().unwrap();
        for x in [0.05, 0.33, 0.8] {
            let a = DVector::from_vec(crate::basis::eval_basis(x, &spec).unwrap());
            let want = (a.transpose() * &gi * &m * &gi * &a)[(0, 0)];
            let got = sieve_variance(&fit, x).unwrap();
            assert!((got - want).abs() <= 1e-10 * want.max(1.0));
        }
    }

    #[test]
    fn normal_half_width() {
        // with v̂/n = 1 the half width is the normal quantile
        let s = sample(40, 3, 1.0);
        let spec = SieveLayout::new(1, 0).build(&s.observed_x()).unwrap();
        let fit = fit_mar_series(&s, &spec).unwrap();
        let v = sieve_variance(&fit, 0.4).unwrap();
        let (lo, hi) = pointwise_ci(&fit, 0.4, 0.05).unwrap();
        let half = 0.5 * (hi - lo) / (v / fit.n as f64).sqrt();
        assert_abs_diff_eq!(half, 1.959964, epsilon = 1e-6);
        assert!(pointwise_ci(&fit, 0.4, 1.5).is_err());
    }

    #[test]
    fn multiplier_support_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = multiplier_draw(Multiplier::Rademacher, 1000, &mut rng);
        assert!(r.iter().all(|&v| v == 1.0 || v == -1.0));
        let a = multiplier_draw(Multiplier::Mammen, 50, &mut ChaCha8Rng::seed_from_u64(9));
        let b = multiplier_draw(Multiplier::Mammen, 50, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn mammen_constants_have_unit_moments() {
        let p = MAMMEN_P_LOW;
        let m1 = p * MAMMEN_LOW + (1.0 - p) * MAMMEN_HIGH;
        let m2 = p * MAMMEN_LOW.powi(2) + (1.0 - p) * MAMMEN_HIGH.powi(2);
        let m3 = p * MAMMEN_LOW.powi(3) + (1.0 - p) * MAMMEN_HIGH.powi(3);
        assert_abs_diff_eq!(m1, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(m2, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(m3, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn band_shape_and_determinism() {
        let s = sample(400, 5, 1.0);
        let spec = SieveLayout::new(2, 2).build(&s.observed_x()).unwrap();
        let fit = fit_mar_series(&s, &spec).unwrap();
        let grid = default_grid(&fit, 101);
        let b1 = uniform_band(&fit, &grid, 0.05, 500, Multiplier::Mammen, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b2 = uniform_band(&fit, &grid, 0.05, 500, Multiplier::Mammen, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(b1, b2);
        for i in 0..grid.len() {
            assert!(b1.lower[i] <= b1.estimates[i] && b1.estimates[i] <= b1.upper[i]);
            assert_abs_diff_eq!(b1.upper[i] - b1.lower[i], 2.0 * b1.critical_value * b1.se[i], epsilon = 1e-12);
        }
        assert!(uniform_band(&fit, &grid, 0.05, 99, Multiplier::Normal, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn critical_values_monotone_in_level() {
        let s = sample(300, 6, 1.0);
        let spec = SieveLayout::new(2, 2).build(&s.observed_x()).unwrap();
        let fit = fit_mar_series(&s, &spec).unwrap();
        let grid = default_grid(&fit, 51);
        let boot = bootstrap_sup(&fit, &grid, 1000, Multiplier::Normal, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(boot.critical_value(0.01) >= boot.critical_value(0.05));
        assert!(boot.critical_value(0.05) >= boot.critical_value(0.10));
        assert!(boot.critical_value(0.05) >= normal_quantile(0.975) - 0.05);
    }

    #[test]
    fn zero_variance_points_are_dropped() {
        // a spline that interpolates the data exactly on part of the domain
        let s = sample(30, 7, 0.0);
        let spec = SieveLayout::new(1, 0).build(&s.observed_x()).unwrap();
        let fit = fit_weighted_series(&s, &spec, &vec![1.0; 30]).unwrap();
        let r = bootstrap_sup(&fit, &[0.5], 200, Multiplier::Normal, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(r.is_err());
    }
}
