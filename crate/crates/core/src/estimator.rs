//! Second stage: fractional probability weights and the weighted series
//! estimator of `g(x) = E[Y | X* = x]`, plus the weighted linear baselines
//! (FPW, IPW, listwise deletion, full data).

use nalgebra::{DMatrix, DVector};

use crate::basis::{BasisSpec, SieveLayout};
use crate::error::{FpwError, Result};
use crate::linalg::{least_squares, weighted_cross, weighted_gram, SymmetricSolver};
use crate::sample::Sample;
use crate::selection::{estimate_selection_probability, MdConfig, SelectionModel, SelectionProbability};

/// Series fit of `1/φ(Y_i, X_i)` on `p^K(X_i)` over the selected units, the
/// estimate of `h(x) = E[1/φ(Y, x) | Δ = 1, X* = x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HHat {
    pub coefficients: DVector<f64>,
    pub used_pseudoinverse: bool,
}

impl HHat {
    pub fn eval(&self, spec_p: &BasisSpec, x: f64) -> Result<f64> {
        let mut p = vec![0.0; spec_p.dim()];
        spec_p.eval_into(x, &mut p)?;
        Ok(p.iter().zip(self.coefficients.iter()).map(|(a, b)| a * b).sum())
    }
}

/// FPW weights for the selected units, in sample order.
#[derive(Debug, Clone, PartialEq)]
pub struct FpwWeights {
    pub values: Vec<f64>,
    /// Number of weights cut back to the cap `1/floor²`.
    pub clamped: usize,
    pub h: HHat,
}

fn selected_design(sample: &Sample, spec_p: &BasisSpec, with_controls: bool) -> Result<DMatrix<f64>> {
    let idx = sample.selected_indices();
    let k = spec_p.dim();
    let c = if with_controls { sample.n_controls() } else { 0 };
    let mut d = DMatrix::zeros(idx.len(), k + c);
    let mut row = vec![0.0; k];
    for (r, &i) in idx.iter().enumerate() {
        spec_p.eval_into(sample.x()[i], &mut row)?;
        for (j, &v) in row.iter().enumerate() {
            d[(r, j)] = v;
        }
        if let Some(ctrl) = sample.controls().filter(|_| with_controls) {
            for j in 0..c {
                d[(r, k + j)] = ctrl[(i, j)];
            }
        }
    }
    Ok(d)
}

fn require_selected(sample: &Sample, needed: usize) -> Result<()> {
    let found = sample.n_selected();
    if found == 0 {
        return Err(FpwError::NoSelected);
    }
    if found < needed {
        return Err(FpwError::TooFewSelected { needed, found });
    }
    Ok(())
}

/// Coefficients of `ĥ(·, φ)`.
pub fn h_hat<P>(sample: &Sample, phi: &P, spec_p: &BasisSpec) -> Result<HHat>
where
    P: SelectionProbability + ?Sized,
{
    require_selected(sample, spec_p.dim())?;
    let design = selected_design(sample, spec_p, false)?;
    let target: Vec<f64> = sample
        .selected_indices()
        .into_iter()
        .map(|i| 1.0 / phi.probability(sample.y()[i], sample.x()[i]))
        .collect();
    if target.iter().any(|t| !t.is_finite()) {
        return Err(FpwError::NonFinite("inverse selection probability"));
    }
    let ls = least_squares(&design, &target)?;
    Ok(HHat {
        coefficients: ls.coefficients,
        used_pseudoinverse: ls.diagnostics.used_pseudoinverse,
    })
}

/// `ω̂(Y_i, X_i; φ) = 1 / (φ(Y_i, X_i) ĥ(X_i, φ))` for every selected unit,
/// capped at `1/floor²`.
pub fn fpw_weights<P>(sample: &Sample, phi: &P, spec_p: &BasisSpec) -> Result<FpwWeights>
where
    P: SelectionProbability + ?Sized,
{
    let h = h_hat(sample, phi, spec_p)?;
    let cap = 1.0 / (phi.floor() * phi.floor());
    let mut clamped = 0;
    let mut values = Vec::with_capacity(sample.n_selected());
    for i in sample.selected_indices() {
        let hx = h.eval(spec_p, sample.x()[i])?;
        if !(hx > 0.0) {
            return Err(FpwError::NonPositiveInverseProbability { index: i, value: hx });
        }
        let w = 1.0 / (phi.probability(sample.y()[i], sample.x()[i]) * hx);
        if w > cap {
            clamped += 1;
            values.push(cap);
        } else {
            values.push(w);
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} FPW weight(s) capped at {cap}");
    }
    Ok(FpwWeights { values, clamped, h })
}

/// A fitted weighted series regression.
///
/// Gram matrices are over the augmented design `[p^K(X_i), C_i]` of the
/// selected units and divided by the full sample size `n`.
#[derive(Debug, Clone)]
pub struct FpwFit {
    pub gamma: DVector<f64>,
    pub control_coefs: DVector<f64>,
    pub spec_p: BasisSpec,
    /// Weights of the selected units.
    pub weights: Vec<f64>,
    pub clamped_weights: usize,
    pub h_coefs: Option<DVector<f64>>,
    pub selection: Option<SelectionModel>,
    pub gram_unweighted: DMatrix<f64>,
    pub gram_weighted: DMatrix<f64>,
    pub used_pseudoinverse: bool,
    /// `Y_i` minus the fitted value, for the selected units.
    pub residuals: Vec<f64>,
    /// Augmented design rows of the selected units.
    pub design: DMatrix<f64>,
    pub x_selected: Vec<f64>,
    pub y_selected: Vec<f64>,
    /// Full fitted values `ĝ(X_i) + C_i'δ` for the selected units.
    pub fitted: Vec<f64>,
    pub n: usize,
}

impl FpwFit {
    pub fn k(&self) -> usize {
        self.spec_p.dim()
    }

    pub fn n_controls(&self) -> usize {
        self.control_coefs.len()
    }

    /// All coefficients `(γ, δ)` stacked.
    pub fn coefficients(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.k() + self.n_controls());
        out.rows_mut(0, self.k()).copy_from(&self.gamma);
        out.rows_mut(self.k(), self.n_controls()).copy_from(&self.control_coefs);
        out
    }

    /// `p^K(x)` padded with zeros for the control columns.
    pub fn evaluation_vector(&self, x: f64) -> Result<DVector<f64>> {
        let mut v = DVector::zeros(self.k() + self.n_controls());
        self.spec_p.eval_into(x, &mut v.as_mut_slice()[..self.k()])?;
        Ok(v)
    }

    /// Nonparametric component `ĝ(x) = p^K(x)'γ`.
    pub fn g_hat(&self, x: f64) -> Result<f64> {
        let mut p = vec![0.0; self.k()];
        self.spec_p.eval_into(x, &mut p)?;
        Ok(p.iter().zip(self.gamma.iter()).map(|(a, b)| a * b).sum())
    }
}

/// Weighted series fit with caller-supplied weights for the selected units.
pub fn fit_weighted_series(sample: &Sample, spec_p: &BasisSpec, weights: &[f64]) -> Result<FpwFit> {
    require_selected(sample, spec_p.dim())?;
    if weights.len() != sample.n_selected() {
        return Err(FpwError::DimensionMismatch {
            context: "series weights",
            expected: sample.n_selected(),
            found: weights.len(),
        });
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(FpwError::NonFinite("series weights"));
    }
    let design = selected_design(sample, spec_p, true)?;
    let n = sample.n();
    let n_sel = design.nrows();
    let rescale = n_sel as f64 / n as f64;
    let y_selected: Vec<f64> = sample.selected_indices().into_iter().map(|i| sample.y()[i]).collect();
    let x_selected = sample.observed_x();

    let ones = vec![1.0; n_sel];
    let gram_unweighted = weighted_gram(&design, &ones)? * rescale;
    let gram_weighted = weighted_gram(&design, weights)? * rescale;
    let rhs = weighted_cross(&design, &y_selected, weights)? * rescale;
    if gram_weighted.iter().all(|&v| v == 0.0) {
        return Err(FpwError::RankZero);
    }
    let solver = SymmetricSolver::new(&gram_weighted)?;
    if solver.rank() == 0 {
        return Err(FpwError::SingularGram("weighted series Gram"));
    }
    let coefs = solver.solve(&rhs);
    let k = spec_p.dim();
    let gamma = coefs.rows(0, k).into_owned();
    let control_coefs = coefs.rows(k, design.ncols() - k).into_owned();
    let fitted: Vec<f64> = (&design * &coefs).iter().copied().collect();
    let residuals = y_selected.iter().zip(&fitted).map(|(y, f)| y - f).collect();

    Ok(FpwFit {
        gamma,
        control_coefs,
        spec_p: spec_p.clone(),
        weights: weights.to_vec(),
        clamped_weights: 0,
        h_coefs: None,
        selection: None,
        gram_unweighted,
        gram_weighted,
        used_pseudoinverse: solver.used_pseudoinverse(),
        residuals,
        design,
        x_selected,
        y_selected,
        fitted,
        n,
    })
}

/// The FPW series estimator with weights built from `selection`.
pub fn fit_fpw_series(sample: &Sample, selection: &SelectionModel, spec_p: &BasisSpec) -> Result<FpwFit> {
    let w = fpw_weights(sample, selection, spec_p)?;
    let mut fit = fit_weighted_series(sample, spec_p, &w.values)?;
    fit.clamped_weights = w.clamped;
    fit.h_coefs = Some(w.h.coefficients);
    fit.selection = Some(selection.clone());
    Ok(fit)
}

/// Both stages: the selection model from `md_cfg`, then the FPW series
/// estimator on `layout` with knots placed on the observed covariate.
pub fn fit_fpw(sample: &Sample, layout: &SieveLayout, md_cfg: &MdConfig) -> Result<FpwFit> {
    let spec_p = layout.build(&sample.observed_x())?;
    let model = estimate_selection_probability(sample, md_cfg)?;
    fit_fpw_series(sample, &model, &spec_p)
}

/// Listwise-deletion series estimator (all selected weights equal to one).
pub fn fit_mar_series(sample: &Sample, spec_p: &BasisSpec) -> Result<FpwFit> {
    let ones = vec![1.0; sample.n_selected()];
    fit_weighted_series(sample, spec_p, &ones)
}

/// `p^K(x)'γ + controls'δ`. Without controls only the nonparametric
/// component is returned.
pub fn predict(fit: &FpwFit, x: f64, controls: Option<&[f64]>) -> Result<f64> {
    let g = fit.g_hat(x)?;
    match controls {
        None => Ok(g),
        Some(c) if c.len() == fit.n_controls() => {
            Ok(g + c.iter().zip(fit.control_coefs.iter()).map(|(a, b)| a * b).sum::<f64>())
        }
        Some(c) => Err(FpwError::DimensionMismatch {
            context: "prediction controls",
            expected: fit.n_controls(),
            found: c.len(),
        }),
    }
}

/// Weighting scheme for the linear regression of `Y` on `(1, X, controls)`.
#[derive(Clone, Copy)]
pub enum LinearWeighting<'a> {
    /// FPW weights `ω̂` computed with `ĥ` on the series basis `spec_p`.
    Fpw {
        selection: &'a dyn SelectionProbability,
        spec_p: &'a BasisSpec,
    },
    /// Inverse probability weights `1/φ(Y_i, X_i)`.
    Ipw { selection: &'a dyn SelectionProbability },
    /// Listwise deletion.
    Mar,
    /// Every unit with its latent covariate. Only available in simulations.
    Full { latent_x: &'a [f64] },
}

impl LinearWeighting<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            LinearWeighting::Fpw { .. } => "FPW",
            LinearWeighting::Ipw { .. } => "IPW",
            LinearWeighting::Mar => "MAR",
            LinearWeighting::Full { .. } => "FULL",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub estimator: &'static str,
    /// Intercept, slope on `X`, then control coefficients.
    pub coefficients: Vec<f64>,
    /// Heteroskedasticity-robust (HC0) standard errors treating the weights
    /// as known.
    pub std_errors: Vec<f64>,
    pub n_used: usize,
}

impl LinearFit {
    /// Whether the normal interval with critical value `z` around coefficient
    /// `index` contains `value`.
    pub fn covers(&self, index: usize, value: f64, z: f64) -> bool {
        (self.coefficients[index] - value).abs() <= z * self.std_errors[index]
    }
}

/// Weighted least squares of `Y` on `(1, X, controls)`.
pub fn fit_linear(sample: &Sample, weighting: LinearWeighting<'_>) -> Result<LinearFit> {
    let c = sample.n_controls();
    let (rows, xs, weights): (Vec<usize>, Vec<f64>, Vec<f64>) = match weighting {
        LinearWeighting::Full { latent_x } => {
            if latent_x.len() != sample.n() {
                return Err(FpwError::DimensionMismatch {
                    context: "latent covariate",
                    expected: sample.n(),
                    found: latent_x.len(),
                });
            }
            ((0..sample.n()).collect(), latent_x.to_vec(), vec![1.0; sample.n()])
        }
        _ => {
            let idx = sample.selected_indices();
            if idx.len() < 2 {
                return Err(FpwError::TooFewSelected { needed: 2, found: idx.len() });
            }
            let xs: Vec<f64> = idx.iter().map(|&i| sample.x()[i]).collect();
            let weights = match weighting {
                LinearWeighting::Fpw { selection, spec_p } => fpw_weights(sample, selection, spec_p)?.values,
                LinearWeighting::Ipw { selection } => idx
                    .iter()
                    .map(|&i| 1.0 / selection.probability(sample.y()[i], sample.x()[i]))
                    .collect(),
                _ => vec![1.0; idx.len()],
            };
            (idx, xs, weights)
        }
    };
    if rows.len() < 2 {
        return Err(FpwError::TooFewSelected { needed: 2, found: rows.len() });
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(FpwError::NonFinite("linear weights"));
    }

    let p = 2 + c;
    let mut design = DMatrix::zeros(rows.len(), p);
    for (r, &i) in rows.iter().enumerate() {
        design[(r, 0)] = 1.0;
        design[(r, 1)] = xs[r];
        if let Some(ctrl) = sample.controls() {
            for j in 0..c {
                design[(r, 2 + j)] = ctrl[(i, j)];
            }
        }
    }
    let y: Vec<f64> = rows.iter().map(|&i| sample.y()[i]).collect();

    let bread_inv = weighted_gram(&design, &weights)?;
    let solver = SymmetricSolver::new(&bread_inv)?;
    if solver.used_pseudoinverse() {
        return Err(FpwError::SingularGram("linear design"));
    }
    let beta = solver.solve(&weighted_cross(&design, &y, &weights)?);
    let resid: Vec<f64> = y
        .iter()
        .enumerate()
        .map(|(r, yi)| yi - design.row(r).transpose().dot(&beta))
        .collect();
    let score_weights: Vec<f64> = weights.iter().zip(&resid).map(|(w, e)| (w * e).powi(2)).collect();
    let meat = weighted_gram(&design, &score_weights)?;
    let bread = solver.inverse();
    let cov = &bread * meat * &bread / rows.len() as f64;
    let std_errors = (0..p).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();

    Ok(LinearFit {
        estimator: weighting.label(),
        coefficients: beta.iter().copied().collect(),
        std_errors,
        n_used: rows.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{make_knots, KnotPlacement, SieveLayout, TensorSpec};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_basis() -> BasisSpec {
        make_knots(&[], &BasisSpec::new(1, 0, KnotPlacement::Uniform, 0.0, 1.0).unwrap()).unwrap()
    }

    fn quad_basis() -> BasisSpec {
        make_knots(&[], &BasisSpec::new(2, 0, KnotPlacement::Uniform, 0.0, 1.0).unwrap()).unwrap()
    }

    fn three_point() -> Sample {
        Sample::new(
            vec![true, true, true],
            vec![1.0, 2.0, 4.0],
            vec![0.0, 0.5, 1.0],
            vec![0.1, 0.2, 0.3],
        )
        .unwrap()
    }

    fn noisy_sample(n: usize, all_selected: bool, seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = Vec::new();
        let mut y = Vec::new();
        let mut x = Vec::new();
        let mut w = Vec::new();
        for _ in 0..n {
            let xi: f64 = rng.random();
            d.push(all_selected || rng.random::<f64>() < 0.3 + 0.6 * xi);
            y.push((3.0 * xi).sin() + 0.3 * rng.random::<f64>());
            x.push(xi);
            w.push(rng.random());
        }
        Sample::new(d, y, x, w).unwrap()
    }

    #[test]
    fn h_hat_constant_cases() {
        let s = noisy_sample(100, false, 1);
        let spec = SieveLayout::new(2, 2).build(&s.observed_x()).unwrap();
        let h = h_hat(&s, &|_: f64, _: f64| 1.0, &spec).unwrap();
        assert!(h.coefficients.iter().all(|c| (c - 1.0).abs() < 1e-10));
        let h = h_hat(&s, &|_: f64, _: f64| 0.5, &spec).unwrap();
        assert!(h.coefficients.iter().all(|c| (c - 2.0).abs() < 1e-10));
    }

    #[test]
    fn h_hat_three_point_hand_solution() {
        // K = 3 quadratic Bernstein basis at x = 0, 0.5, 1 is interpolatory:
        // rows (1,0,0), (.25,.5,.25), (0,0,1); targets 1/φ = (2, 4, 5)
        let s = three_point();
        let phis = [0.5, 0.25, 0.2];
        let phi = move |_y: f64, x: f64| phis[(x * 2.0).round() as usize];
        let h = h_hat(&s, &phi, &quad_basis()).unwrap();
        // middle: .25*2 + .5*c + .25*5 = 4  =>  c = 4.5
        assert_abs_diff_eq!(h.coefficients.as_slice(), &[2.0, 4.5, 5.0][..], epsilon = 1e-12);
    }

    #[test]
    fn constant_probability_gives_unit_weights() {
        let s = noisy_sample(300, false, 2);
        let spec = SieveLayout::new(2, 2).build(&s.observed_x()).unwrap();
        let w = fpw_weights(&s, &|_: f64, _: f64| 0.37, &spec).unwrap();
        assert!(w.values.iter().all(|v| (v - 1.0).abs() < 1e-10));
    }

    #[test]
    fn weights_project_to_one() {
        // series LS of ω̂ on p^K returns the constant 1 exactly when the
        // design is saturated (K distinct covariate values)
        let support = [0.05, 0.3, 0.5, 0.7, 0.95];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 400;
        let x: Vec<f64> = (0..n).map(|i| support[i % 5]).collect();
        let y: Vec<f64> = x.iter().map(|xi| xi + rng.random::<f64>()).collect();
        let s = Sample::new(vec![true; n], y, x, vec![0.0; n]).unwrap();
        let spec = make_knots(&[], &BasisSpec::new(2, 2, KnotPlacement::Uniform, 0.0, 1.0).unwrap()).unwrap();
        let phi = |y: f64, x: f64| 0.2 + 0.5 / (1.0 + (y - x).exp());
        let w = fpw_weights(&s, &phi, &spec).unwrap();
        let design = selected_design(&s, &spec, false).unwrap();
        let ls = least_squares(&design, &w.values).unwrap();
        for c in ls.coefficients.iter() {
            assert!((c - 1.0).abs() < 1e-8, "{c}");
        }

        // with a continuous covariate the identity holds only approximately
        let s = noisy_sample(400, true, 3);
        let spec = SieveLayout::new(2, 2).build(&s.observed_x()).unwrap();
        let w = fpw_weights(&s, &phi, &spec).unwrap();
        let design = selected_design(&s, &spec, false).unwrap();
        let ls = least_squares(&design, &w.values).unwrap();
        for c in ls.coefficients.iter() {
            assert!((c - 1.0).abs() < 0.01, "{c}");
        }
    }

    #[test]
    fn all_selected_reduces_to_unweighted_series() {
        let s = noisy_sample(250, true, 4);
        let spec = SieveLayout::new(2, 3).build(&s.observed_x()).unwrap();
        let b = make_knots(&[], &BasisSpec::new(2, 0, KnotPlacement::Uniform, 0.0, 1.0).unwrap()).unwrap();
        let model = SelectionModel::constant(1.0, TensorSpec::new(b.clone(), b).unwrap(), 0.01).unwrap();
        let fpw = fit_fpw_series(&s, &model, &spec).unwrap();
        let design = selected_design(&s, &spec, false).unwrap();
        let ls = least_squares(&design, s.y()).unwrap();
        for (a, b) in fpw.gamma.iter().zip(ls.coefficients.iter()) {
            assert!((a - b).abs() <= 1e-10);
        }
        let mar = fit_mar_series(&s, &spec).unwrap();
        assert_abs_diff_eq!(mar.gamma.as_slice(), fpw.gamma.as_slice(), epsilon = 1e-10);
        assert_abs_diff_eq!(predict(&fpw, 0.3, None).unwrap(), predict(&mar, 0.3, None).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn weighted_three_point_hand_solution() {
        // K = 2 linear basis (1-x, x), weights (2, 1, 1), y = (1, 2, 4)
        // normal equations: [[2.25, .25], [.25, 1.25]] c = [3, 5] / 1 (times 1/3 both sides)
        // => c0 = (3*1.25 - 5*.25)/(2.25*1.25 - .0625) = 2.5/2.75, c1 = (2.25*5 - .25*3)/2.75
        let s = three_point();
        let fit = fit_weighted_series(&s, &linear_basis(), &[2.0, 1.0, 1.0]).unwrap();
        let c0 = 2.5 / 2.75;
        let c1 = 10.5 / 2.75;
        assert_abs_diff_eq!(fit.gamma.as_slice(), &[c0, c1][..], epsilon = 1e-12);
        let fitted = [c0, 0.5 * (c0 + c1), c1];
        for (i, &x) in [0.0, 0.5, 1.0].iter().enumerate() {
            assert_abs_diff_eq!(predict(&fit, x, None).unwrap(), fitted[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn unit_coefficients_predict_one() {
        let s = three_point();
        let mut fit = fit_mar_series(&s, &quad_basis()).unwrap();
        fit.gamma = DVector::from_element(3, 1.0);
        for x in [0.0, 0.2, 0.77, 1.0] {
            assert_abs_diff_eq!(predict(&fit, x, None).unwrap(), 1.0, epsilon = 1e-14);
        }
        assert!(predict(&fit, 0.5, Some(&[1.0])).is_err());
    }

    #[test]
    fn scale_equivariance_at_fixed_selection() {
        let s = noisy_sample(300, false, 6);
        let spec = SieveLayout::new(2, 2).build(&s.observed_x()).unwrap();
        let phi = |_y: f64, x: f64| 0.3 + 0.6 * x;
        let w = fpw_weights(&s, &phi, &spec).unwrap();
        let fit = fit_weighted_series(&s, &spec, &w.values).unwrap();
        let scaled_y: Vec<f64> = s.y().iter().map(|v| v * 3.0).collect();
        let s3 = Sample::new(s.delta().to_vec(), scaled_y, s.x().to_vec(), s.w().to_vec()).unwrap();
        let fit3 = fit_weighted_series(&s3, &spec, &w.values).unwrap();
        for (a, b) in fit.gamma.iter().zip(fit3.gamma.iter()) {
            assert!((3.0 * a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn linear_modes_coincide_when_all_selected() {
        let s = noisy_sample(200, true, 7);
        let spec = SieveLayout::new(2, 2).build(&s.observed_x()).unwrap();
        let phi = |_: f64, _: f64| 1.0;
        let fpw = fit_linear(&s, LinearWeighting::Fpw { selection: &phi, spec_p: &spec }).unwrap();
        let ipw = fit_linear(&s, LinearWeighting::Ipw { selection: &phi }).unwrap();
        let mar = fit_linear(&s, LinearWeighting::Mar).unwrap();
        let full = fit_linear(&s, LinearWeighting::Full { latent_x: s.x() }).unwrap();
        for other in [&ipw, &mar, &full] {
            for (a, b) in fpw.coefficients.iter().zip(&other.coefficients) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn linear_three_point_weighted_hand_solution() {
        // weights (1,1,2) at x = (0, .5, 1), y = (1, 2, 4):
        // Σw = 4, Σwx = 2.5, Σwx² = 2.25, Σwy = 11, Σwxy = 9
        // slope = (4*9 - 2.5*11)/(4*2.25 - 6.25) = 8.5/2.75
        let s = three_point();
        let phi = |_y: f64, x: f64| if x > 0.75 { 0.5 } else { 1.0 };
        let fit = fit_linear(&s, LinearWeighting::Ipw { selection: &phi }).unwrap();
        let slope = 8.5 / 2.75;
        let intercept = (11.0 - 2.5 * slope) / 4.0;
        assert_abs_diff_eq!(fit.coefficients[1], slope, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.coefficients[0], intercept, epsilon = 1e-12);
    }

    #[test]
    fn robust_errors_match_direct_sandwich() {
        let s = noisy_sample(60, true, 8);
        let fit = fit_linear(&s, LinearWeighting::Mar).unwrap();
        let n = s.n();
        let (mut sxx, mut sx, mut s00, mut s01, mut s11) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let x = s.x()[i];
            let e = s.y()[i] - fit.coefficients[0] - fit.coefficients[1] * x;
            sx += x;
            sxx += x * x;
            s00 += e * e;
            s01 += e * e * x;
            s11 += e * e * x * x;
        }
        let det = n as f64 * sxx - sx * sx;
        let inv = [[sxx / det, -sx / det], [-sx / det, n as f64 / det]];
        let meat = [[s00, s01], [s01, s11]];
        let mut v = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    for d in 0..2 {
                        v[a][b] += inv[a][c] * meat[c][d] * inv[d][b];
                    }
                }
            }
        }
        assert_abs_diff_eq!(fit.std_errors[0], v[0][0].sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(fit.std_errors[1], v[1][1].sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn too_few_units() {
        let s = Sample::new(vec![true, false], vec![1.0, 2.0], vec![0.5, 0.0], vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            fit_linear(&s, LinearWeighting::Mar),
            Err(FpwError::TooFewSelected { .. })
        ));
        assert!(fit_mar_series(&s, &quad_basis()).is_err());
    }

    #[test]
    fn non_positive_h_is_an_error() {
        // targets 1/φ = (-1, -1, 1) on a linear basis: the fit is negative at x = 0
        let s = three_point();
        let phi = |y: f64, _x: f64| if y > 3.0 { 1.0 } else { -1.0 };
        assert!(matches!(
            fpw_weights(&s, &phi, &linear_basis()),
            Err(FpwError::NonPositiveInverseProbability { .. })
        ));
    }
}
