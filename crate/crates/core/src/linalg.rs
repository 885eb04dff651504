//! Dense least-squares kernel: Gram matrices, symmetric solves and a
//! minimum-norm fallback for rank-deficient systems.
//!
//! Every Gram matrix is scaled by `1/n` at construction so entries stay O(1)
//! whatever the sample size.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{FpwError, Result};

/// Eigenvalues at or below `RANK_TOLERANCE * max_eigenvalue` are treated as
/// zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Allowed asymmetry, relative to the largest entry (at least 1).
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// Diagnostics attached to a solve against a Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GramSolve {
    pub gram: DMatrix<f64>,
    /// Ratio of extreme eigenvalues; infinite when the pseudo-inverse is used.
    pub condition_estimate: f64,
    pub used_pseudoinverse: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    pub coefficients: DVector<f64>,
    pub diagnostics: GramSolve,
}

/// Factorization of a symmetric matrix that solves by Cholesky when the
/// matrix is positive definite within tolerance and by an
/// eigenvalue-thresholded pseudo-inverse otherwise.
#[derive(Debug, Clone)]
pub struct SymmetricSolver {
    eigen: SymmetricEigen<f64, Dyn>,
    cholesky: Option<Cholesky<f64, Dyn>>,
    threshold: f64,
    condition_estimate: f64,
}

impl SymmetricSolver {
    pub fn new(gram: &DMatrix<f64>) -> Result<Self> {
        if !gram.is_square() {
            return Err(FpwError::DimensionMismatch {
                context: "square Gram matrix",
                expected: gram.nrows(),
                found: gram.ncols(),
            });
        }
        if gram.iter().any(|v| !v.is_finite()) {
            return Err(FpwError::NonFinite("Gram matrix"));
        }
        let asym = max_asymmetry(gram);
        let scale = gram.amax().max(1.0);
        if asym > SYMMETRY_TOLERANCE * scale {
            return Err(FpwError::NotSymmetric(asym));
        }

        let eigen = SymmetricEigen::new(gram.clone());
        let lmax = eigen.eigenvalues.max();
        let lmin = eigen.eigenvalues.min();
        let threshold = RANK_TOLERANCE * lmax.max(0.0);
        let definite = lmax > 0.0 && lmin > threshold;
        let cholesky = if definite {
            Cholesky::new(gram.clone())
        } else {
            None
        };
        let condition_estimate = if cholesky.is_some() {
            (lmax / lmin).max(1.0)
        } else {
            f64::INFINITY
        };
        Ok(Self {
            eigen,
            cholesky,
            threshold,
            condition_estimate,
        })
    }

    pub fn used_pseudoinverse(&self) -> bool {
        self.cholesky.is_none()
    }

    pub fn condition_estimate(&self) -> f64 {
        self.condition_estimate
    }

    /// Number of eigenvalues above the rank threshold.
    pub fn rank(&self) -> usize {
        self.eigen
            .eigenvalues
            .iter()
            .filter(|&&l| l > self.threshold && l > 0.0)
            .count()
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        if let Some(chol) = &self.cholesky {
            return chol.solve(rhs);
        }
        let v = &self.eigen.eigenvectors;
        let mut out = DVector::zeros(rhs.len());
        for (j, &l) in self.eigen.eigenvalues.iter().enumerate() {
            if l > self.threshold && l > 0.0 {
                let col = v.column(j);
                let coef = col.dot(rhs) / l;
                out.axpy(coef, &col, 1.0);
            }
        }
        out
    }

    /// Inverse, or the Moore-Penrose pseudo-inverse on the fallback path.
    pub fn inverse(&self) -> DMatrix<f64> {
        if let Some(chol) = &self.cholesky {
            return chol.inverse();
        }
        let k = self.eigen.eigenvalues.len();
        let v = &self.eigen.eigenvectors;
        let mut out = DMatrix::zeros(k, k);
        for (j, &l) in self.eigen.eigenvalues.iter().enumerate() {
            if l > self.threshold && l > 0.0 {
                let col = v.column(j);
                out.ger(1.0 / l, &col, &col, 1.0);
            }
        }
        out
    }
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Solve `gram * x = rhs` for symmetric `gram`.
pub fn solve_spd(gram: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<(DVector<f64>, GramSolve)> {
    if rhs.len() != gram.nrows() {
        return Err(FpwError::DimensionMismatch {
            context: "solve right-hand side",
            expected: gram.nrows(),
            found: rhs.len(),
        });
    }
    let solver = SymmetricSolver::new(gram)?;
    let x = solver.solve(rhs);
    Ok((
        x,
        GramSolve {
            gram: gram.clone(),
            condition_estimate: solver.condition_estimate(),
            used_pseudoinverse: solver.used_pseudoinverse(),
        },
    ))
}

/// `(1/n) Σ_i weights[i] · row_i row_i'`.
pub fn weighted_gram(design: &DMatrix<f64>, weights: &[f64]) -> Result<DMatrix<f64>> {
    let (n, k) = design.shape();
    if weights.len() != n {
        return Err(FpwError::DimensionMismatch {
            context: "gram weights",
            expected: n,
            found: weights.len(),
        });
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(FpwError::NonFinite("gram weights"));
    }
    let mut g = DMatrix::zeros(k, k);
    if n == 0 {
        return Ok(g);
    }
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for a in 0..k {
            let da = design[(i, a)] * w;
            if da == 0.0 {
                continue;
            }
            for b in a..k {
                g[(a, b)] += da * design[(i, b)];
            }
        }
    }
    let scale = 1.0 / n as f64;
    for a in 0..k {
        for b in a..k {
            let v = g[(a, b)] * scale;
            g[(a, b)] = v;
            g[(b, a)] = v;
        }
    }
    Ok(g)
}

/// `(1/n) design' design`.
pub fn gram(design: &DMatrix<f64>) -> DMatrix<f64> {
    let ones = vec![1.0; design.nrows()];
    weighted_gram(design, &ones).expect("unit weights are finite")
}

/// `(1/n) Σ_i weights[i] · row_i · response[i]`.
pub fn weighted_cross(
    design: &DMatrix<f64>,
    response: &[f64],
    weights: &[f64],
) -> Result<DVector<f64>> {
    let (n, k) = design.shape();
    if response.len() != n || weights.len() != n {
        return Err(FpwError::DimensionMismatch {
            context: "cross-product vectors",
            expected: n,
            found: response.len().min(weights.len()),
        });
    }
    let mut out = DVector::zeros(k);
    if n == 0 {
        return Ok(out);
    }
    for i in 0..n {
        let f = weights[i] * response[i];
        if f == 0.0 {
            continue;
        }
        for a in 0..k {
            out[a] += design[(i, a)] * f;
        }
    }
    Ok(out / n as f64)
}

/// Minimizer of `Σ_i (response[i] - row_i' b)^2`; the minimum-norm one when the
/// design is rank deficient.
pub fn least_squares(design: &DMatrix<f64>, response: &[f64]) -> Result<LeastSquares> {
    let ones = vec![1.0; design.nrows()];
    weighted_least_squares(design, response, &ones)
}

/// Minimizer of `Σ_i weights[i] (response[i] - row_i' b)^2`.
pub fn weighted_least_squares(
    design: &DMatrix<f64>,
    response: &[f64],
    weights: &[f64],
) -> Result<LeastSquares> {
    if design.nrows() == 0 || design.iter().all(|&v| v == 0.0) {
        return Err(FpwError::RankZero);
    }
    if response.iter().any(|v| !v.is_finite()) {
        return Err(FpwError::NonFinite("least squares response"));
    }
    let g = weighted_gram(design, weights)?;
    let rhs = weighted_cross(design, response, weights)?;
    if g.iter().all(|&v| v == 0.0) {
        return Err(FpwError::RankZero);
    }
    let (coefficients, diagnostics) = solve_spd(&g, &rhs)?;
    Ok(LeastSquares {
        coefficients,
        diagnostics,
    })
}
