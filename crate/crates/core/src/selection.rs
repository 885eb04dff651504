//! First stage: constrained sieve minimum-distance estimation of the
//! selection probability `φ(y, x) = P(Δ = 1 | Y = y, X* = x)`.
//!
//! The sieve is `φ = 1 / (β'q(y, x))` with `q` a tensor B-spline basis over
//! `(Y, X)`. The conditional moment `E[Δ/φ(Y,X) - 1 | Y, W] = 0` is
//! estimated by projecting the residual `Δ_i β'q(Y_i, X_i) - 1` onto a tensor
//! basis over `(Y, W)` (plus any linear controls). Since the residual is affine
//! in `β`, the criterion
//!
//! ```text
//! (1/n) Σ_i m̂(Y_i, W_i; β)^2 + ridge · ‖β - β_ref‖²
//! ```
//!
//! is a convex quadratic, and the sieve restriction `1 <= β'q <= 1/floor`
//! imposed on a finite constraint set is linear. `β_ref` is the constant model
//! at the observed response rate; it is the starting point and the target of
//! the ridge term, which picks one solution out of the set that the moment
//! condition alone leaves unidentified.

use nalgebra::{DMatrix, DVector};

use crate::basis::{tensor_design, SieveLayout, TensorSpec};
use crate::error::{FpwError, Result};
use crate::qp::QuadraticProgram;
use crate::sample::Sample;
use crate::stats::finite_range;

pub const DEFAULT_FLOOR: f64 = 0.01;
pub const DEFAULT_RIDGE: f64 = 1e-4;

/// Feasibility slack accepted on the sieve constraints.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-9;

/// Anything that assigns a selection probability to `(y, x)`.
pub trait SelectionProbability: Sync {
    fn probability(&self, y: f64, x: f64) -> f64;

    /// Lower bound on the probability, used to cap the FPW weights.
    fn floor(&self) -> f64 {
        DEFAULT_FLOOR
    }
}

impl<F> SelectionProbability for F
where
    F: Fn(f64, f64) -> f64 + Sync,
{
    fn probability(&self, y: f64, x: f64) -> f64 {
        self(y, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Optimizer {
    /// Exact primal active-set solve of the quadratic program.
    #[default]
    ActiveSet,
    ProjectedGradient,
    NelderMead,
}

impl std::str::FromStr for Optimizer {
    type Err = FpwError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "active-set" => Ok(Optimizer::ActiveSet),
            "projected-gradient" => Ok(Optimizer::ProjectedGradient),
            "nelder-mead" => Ok(Optimizer::NelderMead),
            other => Err(FpwError::InvalidArgument(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdConfig {
    /// Basis in `Y` for the instrument tensor.
    pub instrument_y: SieveLayout,
    /// Basis in `W` for the instrument tensor.
    pub instrument_w: SieveLayout,
    /// Basis in `Y` for the sieve `β'q(y, x)`.
    pub selection_y: SieveLayout,
    /// Basis in `X` for the sieve `β'q(y, x)`.
    pub selection_x: SieveLayout,
    pub optimizer: Optimizer,
    pub max_iter: usize,
    pub tol: f64,
    pub floor: f64,
    pub ridge: f64,
    /// Points per axis of the uniform constraint grid over the `(Y, X)` box.
    pub grid_size: usize,
}

impl Default for MdConfig {
    fn default() -> Self {
        Self {
            instrument_y: SieveLayout::quadratic(),
            instrument_w: SieveLayout::quadratic(),
            selection_y: SieveLayout::quadratic(),
            selection_x: SieveLayout::quadratic(),
            optimizer: Optimizer::ActiveSet,
            max_iter: 500,
            tol: 1e-9,
            floor: DEFAULT_FLOOR,
            ridge: DEFAULT_RIDGE,
            grid_size: 20,
        }
    }
}

impl MdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(FpwError::InvalidArgument("tol must be positive".into()));
        }
        if !(self.floor > 0.0 && self.floor <= 0.5) {
            return Err(FpwError::InvalidArgument(format!(
                "probability floor {} outside (0, 0.5]",
                self.floor
            )));
        }
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(FpwError::InvalidArgument("ridge must be nonnegative".into()));
        }
        if self.grid_size < 2 {
            return Err(FpwError::InvalidArgument("constraint grid needs at least 2 points per axis".into()));
        }
        if self.max_iter == 0 {
            return Err(FpwError::InvalidArgument("max_iter must be positive".into()));
        }
        Ok(())
    }
}

/// A fitted (or hand-built) sieve selection probability `1 / (β'q(y, x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionModel {
    beta: DVector<f64>,
    tspec: TensorSpec,
    floor: f64,
    objective_value: f64,
    constraint_grid: Vec<(f64, f64)>,
    converged: bool,
    iterations: usize,
}

impl SelectionModel {
    /// Wrap coefficients over the `(y, x)` tensor basis.
    pub fn from_coefficients(beta: DVector<f64>, tspec: TensorSpec, floor: f64) -> Result<Self> {
        if beta.len() != tspec.dim() {
            return Err(FpwError::DimensionMismatch {
                context: "selection coefficients",
                expected: tspec.dim(),
                found: beta.len(),
            });
        }
        if !(floor > 0.0 && floor <= 1.0) {
            return Err(FpwError::InvalidArgument(format!("probability floor {floor} outside (0, 1]")));
        }
        Ok(Self {
            beta,
            tspec,
            floor,
            objective_value: 0.0,
            constraint_grid: Vec::new(),
            converged: true,
            iterations: 0,
        })
    }

    /// The constant model `φ ≡ probability`, exact by partition of unity.
    pub fn constant(probability: f64, tspec: TensorSpec, floor: f64) -> Result<Self> {
        if !(probability > 0.0 && probability <= 1.0) {
            return Err(FpwError::InvalidArgument(format!("probability {probability} outside (0, 1]")));
        }
        let l = tspec.dim();
        Self::from_coefficients(DVector::from_element(l, 1.0 / probability), tspec, floor)
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn tspec(&self) -> &TensorSpec {
        &self.tspec
    }

    pub fn objective_value(&self) -> f64 {
        self.objective_value
    }

    pub fn constraint_grid(&self) -> &[(f64, f64)] {
        &self.constraint_grid
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Raw sieve denominator `β'q(y, x)`.
    pub fn denominator(&self, y: f64, x: f64) -> f64 {
        let mut q = vec![0.0; self.tspec.dim()];
        match self.tspec.eval_into(y, x, &mut q) {
            Ok(()) => q.iter().zip(self.beta.iter()).map(|(a, b)| a * b).sum(),
            Err(_) => f64::NAN,
        }
    }
}

impl SelectionProbability for SelectionModel {
    fn probability(&self, y: f64, x: f64) -> f64 {
        phi_eval(self, y, x)
    }

    fn floor(&self) -> f64 {
        self.floor
    }
}

/// `1 / (β'q(y, x))` clamped to `[floor, 1]`.
pub fn phi_eval(model: &SelectionModel, y: f64, x: f64) -> f64 {
    let d = model.denominator(y, x);
    if d.is_nan() {
        return model.floor;
    }
    if d <= 0.0 {
        // a non-positive denominator can only come from off-grid leakage
        return model.floor;
    }
    (1.0 / d).clamp(model.floor, 1.0)
}

/// Projection onto the span of the instrument design, kept as an
/// orthonormal basis `U` so that `m̂ = U U' r`.
struct InstrumentProjection {
    basis: DMatrix<f64>,
}

impl InstrumentProjection {
    fn build(sample: &Sample, cfg: &MdConfig) -> Result<Self> {
        let ys = cfg.instrument_y.build(sample.y())?;
        let ws = cfg.instrument_w.build(sample.w())?;
        let t = TensorSpec::new(ys, ws)?;
        let q = tensor_design(sample.y(), sample.w(), &t)?;
        let design = match sample.controls() {
            Some(c) => {
                let mut d = DMatrix::zeros(q.nrows(), q.ncols() + c.ncols());
                d.view_mut((0, 0), q.shape()).copy_from(&q);
                d.view_mut((0, q.ncols()), c.shape()).copy_from(c);
                d
            }
            None => q,
        };
        let svd = design.svd(true, false);
        let u = svd.u.ok_or(FpwError::SingularGram("instrument design"))?;
        let smax = svd.singular_values.max();
        let keep: Vec<usize> = svd
            .singular_values
            .iter()
            .enumerate()
            .filter(|(_, &s)| s > 1e-10 * smax && s > 0.0)
            .map(|(j, _)| j)
            .collect();
        if keep.is_empty() {
            return Err(FpwError::RankZero);
        }
        let basis = DMatrix::from_fn(u.nrows(), keep.len(), |i, j| u[(i, keep[j])]);
        Ok(Self { basis })
    }

    fn fitted(&self, target: &DVector<f64>) -> DVector<f64> {
        &self.basis * (self.basis.transpose() * target)
    }
}

/// The minimum-distance criterion for one sample, reduced to a quadratic
/// program in `β`.
pub struct MinimumDistance {
    tspec: TensorSpec,
    n: usize,
    /// `U' A` with `A_i = Δ_i q(Y_i, X_i)`.
    projected_design: DMatrix<f64>,
    /// `U' 1`.
    projected_ones: DVector<f64>,
    beta_ref: DVector<f64>,
    ridge: f64,
    floor: f64,
    grid: Vec<(f64, f64)>,
    program: QuadraticProgram,
}

impl MinimumDistance {
    pub fn new(sample: &Sample, cfg: &MdConfig) -> Result<Self> {
        cfg.validate()?;
        let n = sample.n();
        let selected = sample.selected_indices();
        if selected.is_empty() {
            return Err(FpwError::NoSelected);
        }
        let observed_x = sample.observed_x();
        let sel_y = cfg.selection_y.build(sample.y())?;
        let sel_x = cfg.selection_x.build(&observed_x)?;
        let tspec = TensorSpec::new(sel_y, sel_x)?;
        let l = tspec.dim();

        let mut design = DMatrix::zeros(n, l);
        let mut row = vec![0.0; l];
        for &i in &selected {
            tspec.eval_into(sample.y()[i], sample.x()[i], &mut row)?;
            for (j, &v) in row.iter().enumerate() {
                design[(i, j)] = v;
            }
        }

        let proj = InstrumentProjection::build(sample, cfg)?;
        let ut = proj.basis.transpose();
        let projected_design = &ut * &design;
        let projected_ones = &ut * DVector::from_element(n, 1.0);

        let rate = sample.response_rate();
        let start = (1.0 / rate).min(1.0 / cfg.floor);
        let beta_ref = DVector::from_element(l, start);

        // constraint set: every selected (Y_i, X_i) plus a uniform grid over the box
        let (ylo, yhi) = finite_range(sample.y()).ok_or(FpwError::EmptyData)?;
        let (xlo, xhi) = finite_range(&observed_x).ok_or(FpwError::EmptyData)?;
        let g = cfg.grid_size;
        let mut grid: Vec<(f64, f64)> = selected.iter().map(|&i| (sample.y()[i], sample.x()[i])).collect();
        for a in 0..g {
            let y = ylo + (yhi - ylo) * a as f64 / (g - 1) as f64;
            for b in 0..g {
                let x = xlo + (xhi - xlo) * b as f64 / (g - 1) as f64;
                grid.push((y, x));
            }
        }
        let mut constraints = DMatrix::zeros(grid.len(), l);
        for (r, &(y, x)) in grid.iter().enumerate() {
            tspec.eval_into(y, x, &mut row)?;
            for (j, &v) in row.iter().enumerate() {
                constraints[(r, j)] = v;
            }
        }

        let inv_n = 1.0 / n as f64;
        let bt = projected_design.transpose();
        let hessian = (&bt * &projected_design * inv_n + DMatrix::identity(l, l) * cfg.ridge) * 2.0;
        let linear = -(&bt * &projected_ones * inv_n + &beta_ref * cfg.ridge) * 2.0;
        let program = QuadraticProgram {
            hessian: (&hessian + hessian.transpose()) * 0.5,
            linear,
            constraints,
            lower: 1.0,
            upper: 1.0 / cfg.floor,
        };

        Ok(Self {
            tspec,
            n,
            projected_design,
            projected_ones,
            beta_ref,
            ridge: cfg.ridge,
            floor: cfg.floor,
            grid,
            program,
        })
    }

    pub fn tspec(&self) -> &TensorSpec {
        &self.tspec
    }

    pub fn reference_beta(&self) -> &DVector<f64> {
        &self.beta_ref
    }

    pub fn constraint_grid(&self) -> &[(f64, f64)] {
        &self.grid
    }

    /// Largest violation of `1 <= β'q <= 1/floor` over the constraint set.
    pub fn violation(&self, beta: &DVector<f64>) -> f64 {
        self.program.violation(beta)
    }

    /// Criterion value without a feasibility check.
    pub fn objective(&self, beta: &DVector<f64>) -> f64 {
        let r = &self.projected_design * beta - &self.projected_ones;
        r.norm_squared() / self.n as f64 + self.ridge * (beta - &self.beta_ref).norm_squared()
    }

    pub fn solve(&self, cfg: &MdConfig) -> Result<SelectionModel> {
        let start = &self.beta_ref;
        let sol = match cfg.optimizer {
            Optimizer::ActiveSet => self.program.solve_active_set(start, cfg.max_iter, cfg.tol),
            Optimizer::ProjectedGradient => self.program.solve_projected_gradient(start, cfg.max_iter, cfg.tol),
            Optimizer::NelderMead => self.program.solve_nelder_mead(start, cfg.max_iter, cfg.tol),
        };
        let mut beta = sol.x;
        let mut value = self.objective(&beta);
        let start_value = self.objective(start);
        if self.violation(&beta) > FEASIBILITY_TOLERANCE || !(value <= start_value) {
            log::warn!("first-stage solve left the feasible descent region; keeping the start point");
            beta = start.clone();
            value = start_value;
        }
        if !sol.converged {
            log::warn!(
                "first-stage optimizer did not converge in {} iterations",
                sol.iterations
            );
        }
        Ok(SelectionModel {
            beta,
            tspec: self.tspec.clone(),
            floor: self.floor,
            objective_value: value,
            constraint_grid: self.grid.clone(),
            converged: sol.converged,
            iterations: sol.iterations,
        })
    }
}

/// `m̂(Y_i, W_i; φ)` at every observation: the series fit of
/// `Δ_i / φ(Y_i, X_i) - 1` on the instrument basis. Unselected units
/// contribute the target `-1`.
pub fn conditional_mean_hat(sample: &Sample, phi: &SelectionModel, cfg: &MdConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let cap = (1.0 / phi.floor) * (1.0 + FEASIBILITY_TOLERANCE);
    let mut target = DVector::from_element(sample.n(), -1.0);
    for i in sample.selected_indices() {
        let d = phi.denominator(sample.y()[i], sample.x()[i]);
        if !(d <= cap) {
            return Err(FpwError::Infeasible { violation: d - 1.0 / phi.floor });
        }
        target[i] = d - 1.0;
    }
    let proj = InstrumentProjection::build(sample, cfg)?;
    Ok(proj.fitted(&target).iter().copied().collect())
}

/// `(1/n) Σ m̂² + ridge ‖β - β_ref‖²` for feasible `β`.
pub fn md_objective(beta: &DVector<f64>, sample: &Sample, cfg: &MdConfig) -> Result<f64> {
    let md = MinimumDistance::new(sample, cfg)?;
    if beta.len() != md.tspec.dim() {
        return Err(FpwError::DimensionMismatch {
            context: "selection coefficients",
            expected: md.tspec.dim(),
            found: beta.len(),
        });
    }
    let violation = md.violation(beta);
    if violation > FEASIBILITY_TOLERANCE {
        return Err(FpwError::Infeasible { violation });
    }
    Ok(md.objective(beta))
}

/// Fit the constrained sieve minimum-distance selection model.
pub fn estimate_selection_probability(sample: &Sample, cfg: &MdConfig) -> Result<SelectionModel> {
    MinimumDistance::new(sample, cfg)?.solve(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{make_knots, BasisSpec, KnotPlacement};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_tensor() -> TensorSpec {
        let b = make_knots(&[], &BasisSpec::new(2, 0, KnotPlacement::Uniform, 0.0, 1.0).unwrap()).unwrap();
        TensorSpec::new(b.clone(), b).unwrap()
    }

    fn random_sample(n: usize, p: f64, seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut delta = Vec::new();
        let mut y = Vec::new();
        let mut x = Vec::new();
        let mut w = Vec::new();
        for _ in 0..n {
            let wi: f64 = rng.random();
            let xi: f64 = 0.5 * wi + 0.5 * rng.random::<f64>();
            delta.push(rng.random::<f64>() < p);
            y.push(xi + rng.random::<f64>());
            x.push(xi);
            w.push(wi);
        }
        Sample::new(delta, y, x, w).unwrap()
    }

    #[test]
    fn phi_eval_cases() {
        let one = SelectionModel::constant(1.0, unit_tensor(), 0.01).unwrap();
        assert!((phi_eval(&one, 0.3, 0.8) - 1.0).abs() < 1e-15);
        let half = SelectionModel::constant(0.5, unit_tensor(), 0.01).unwrap();
        assert!((phi_eval(&half, 0.1, 0.9) - 0.5).abs() < 1e-15);
        // denominator 1/(2 floor) = 50 is within the cap; 200 is beyond it
        let beyond = SelectionModel::from_coefficients(DVector::from_element(9, 200.0), unit_tensor(), 0.01).unwrap();
        assert_eq!(phi_eval(&beyond, 0.5, 0.5), 0.01);
    }

    #[test]
    fn conditional_mean_reduction_cases() {
        let mut s = random_sample(300, 1.0, 3);
        assert_eq!(s.n_selected(), 300);
        let cfg = MdConfig::default();
        let one = SelectionModel::constant(1.0, unit_tensor(), 0.01).unwrap();
        let m = conditional_mean_hat(&s, &one, &cfg).unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-12));

        let half = SelectionModel::constant(0.5, unit_tensor(), 0.01).unwrap();
        let m = conditional_mean_hat(&s, &half, &cfg).unwrap();
        assert!(m.iter().all(|v| (v - 1.0).abs() < 1e-10));

        s = random_sample(4000, 0.7, 4);
        let c = SelectionModel::constant(0.7, unit_tensor(), 0.01).unwrap();
        let m = conditional_mean_hat(&s, &c, &cfg).unwrap();
        let mean = m.iter().sum::<f64>() / m.len() as f64;
        assert!(mean.abs() <= 3.0 / (s.n() as f64).sqrt());
    }

    #[test]
    fn all_selected_gives_unit_probability() {
        let s = random_sample(200, 1.0, 9);
        let cfg = MdConfig::default();
        let model = estimate_selection_probability(&s, &cfg).unwrap();
        assert!(model.converged());
        assert!(model.objective_value().abs() < 1e-20);
        for &(y, x) in model.constraint_grid() {
            assert!((phi_eval(&model, y, x) - 1.0).abs() < 1e-12);
        }
        let zero = md_objective(model.beta(), &s, &cfg).unwrap();
        assert!(zero < 1e-20);
    }

    #[test]
    fn fitted_model_is_feasible_and_descends() {
        let s = random_sample(600, 0.6, 12);
        let cfg = MdConfig::default();
        let md = MinimumDistance::new(&s, &cfg).unwrap();
        let model = md.solve(&cfg).unwrap();
        assert!(md.violation(model.beta()) <= FEASIBILITY_TOLERANCE);
        assert!(model.objective_value() <= md.objective(md.reference_beta()));
        assert!(model.objective_value() >= 0.0);
    }

    #[test]
    fn optimizers_reach_comparable_values() {
        let s = random_sample(400, 0.6, 21);
        let exact = estimate_selection_probability(&s, &MdConfig::default()).unwrap();
        let pg_cfg = MdConfig {
            optimizer: Optimizer::ProjectedGradient,
            max_iter: 5000,
            tol: 1e-12,
            ..MdConfig::default()
        };
        let pg = estimate_selection_probability(&s, &pg_cfg).unwrap();
        let nm_cfg = MdConfig {
            optimizer: Optimizer::NelderMead,
            max_iter: 20000,
            tol: 1e-14,
            ..MdConfig::default()
        };
        let nm = estimate_selection_probability(&s, &nm_cfg).unwrap();
        let scale = exact.objective_value().max(1e-12);
        assert!(pg.objective_value() >= exact.objective_value() - 1e-12);
        assert!(nm.objective_value() >= exact.objective_value() - 1e-12);
        assert!((pg.objective_value() - exact.objective_value()) / scale < 0.05);
        // Nelder-Mead only needs to make progress from the start
        let md = MinimumDistance::new(&s, &MdConfig::default()).unwrap();
        assert!(nm.objective_value() < md.objective(md.reference_beta()));
    }

    #[test]
    fn infeasible_beta_rejected() {
        let s = random_sample(100, 0.8, 2);
        let cfg = MdConfig::default();
        let low = DVector::from_element(9, 0.5);
        assert!(matches!(md_objective(&low, &s, &cfg), Err(FpwError::Infeasible { .. })));
    }

    #[test]
    fn no_selected_units() {
        let s = random_sample(50, 0.0, 1);
        assert!(matches!(
            estimate_selection_probability(&s, &MdConfig::default()),
            Err(FpwError::NoSelected)
        ));
    }
}
