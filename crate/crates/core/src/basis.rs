//! Clamped B-spline bases on a closed interval and their tensor products.
//!
//! A basis of degree `p` with `m` interior knots has dimension
//! `K = p + 1 + m`. The knot vector repeats each boundary point `p + 1`
//! times, so the basis interpolates at both ends and forms a partition of
//! unity on `[a, b]`. Evaluation points outside the interval are clamped to
//! the nearest boundary.

use nalgebra::DMatrix;

use crate::error::{FpwError, Result};

/// Largest supported spline degree. Evaluation uses fixed-size scratch space.
pub const MAX_DEGREE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KnotPlacement {
    /// Interior knots at empirical quantiles `j / (m + 1)` of the data.
    #[default]
    Quantile,
    /// Interior knots equally spaced over the boundary interval.
    Uniform,
}

impl std::str::FromStr for KnotPlacement {
    type Err = FpwError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "quantile" => Ok(KnotPlacement::Quantile),
            "uniform" => Ok(KnotPlacement::Uniform),
            other => Err(FpwError::InvalidArgument(format!(
                "unknown knot placement '{other}' (expected quantile or uniform)"
            ))),
        }
    }
}

/// A univariate B-spline basis. The knot vector is empty until
/// [`make_knots`] fills it in.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec {
    degree: usize,
    n_interior: usize,
    placement: KnotPlacement,
    lower: f64,
    upper: f64,
    knots: Vec<f64>,
}

impl BasisSpec {
    pub fn new(
        degree: usize,
        n_interior: usize,
        placement: KnotPlacement,
        lower: f64,
        upper: f64,
    ) -> Result<Self> {
        if degree > MAX_DEGREE {
            return Err(FpwError::InvalidArgument(format!(
                "spline degree {degree} exceeds the supported maximum {MAX_DEGREE}"
            )));
        }
        if !(lower.is_finite() && upper.is_finite()) || lower >= upper {
            return Err(FpwError::DegenerateInterval { lower, upper });
        }
        Ok(Self {
            degree,
            n_interior,
            placement,
            lower,
            upper,
            knots: Vec::new(),
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_interior(&self) -> usize {
        self.n_interior
    }

    pub fn placement(&self) -> KnotPlacement {
        self.placement
    }

    pub fn boundary(&self) -> (f64, f64) {
        (self.lower, self.upper)
    }

    /// Full clamped knot vector, empty before [`make_knots`].
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn interior_knots(&self) -> &[f64] {
        if self.knots.is_empty() {
            return &[];
        }
        &self.knots[self.degree + 1..self.knots.len() - self.degree - 1]
    }

    /// Basis dimension `K = degree + 1 + n_interior`.
    pub fn dim(&self) -> usize {
        self.degree + 1 + self.n_interior
    }

    pub fn has_knots(&self) -> bool {
        !self.knots.is_empty()
    }

    /// Locate the knot span and evaluate the `degree + 1` basis functions that
    /// are nonzero at `x`. Returns the index of the first of them.
    fn nonzero(&self, x: f64, out: &mut [f64; MAX_DEGREE + 1]) -> Result<usize> {
        if self.knots.is_empty() {
            return Err(FpwError::KnotsNotBuilt);
        }
        if x.is_nan() {
            return Err(FpwError::NonFinite("basis evaluation point"));
        }
        let p = self.degree;
        let t = &self.knots;
        let k = self.dim();
        let x = x.clamp(self.lower, self.upper);

        // span s in [p, k - 1] with t[s] <= x < t[s + 1]; x == upper uses the last span.
        let span = if x >= self.upper {
            k - 1
        } else {
            // first index in t[p + 1..=k] strictly greater than x
            let upper_part = &t[p + 1..=k];
            p + upper_part.partition_point(|&knot| knot <= x)
        };

        let mut left = [0.0; MAX_DEGREE + 1];
        let mut right = [0.0; MAX_DEGREE + 1];
        out[0] = 1.0;
        for j in 1..=p {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { out[r] / denom };
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
        Ok(span - p)
    }

    /// Evaluate all `K` basis functions at `x` into `out`.
    pub fn eval_into(&self, x: f64, out: &mut [f64]) -> Result<()> {
        if out.len() != self.dim() {
            return Err(FpwError::DimensionMismatch {
                context: "basis output buffer",
                expected: self.dim(),
                found: out.len(),
            });
        }
        let mut local = [0.0; MAX_DEGREE + 1];
        let first = self.nonzero(x, &mut local)?;
        out.fill(0.0);
        out[first..=first + self.degree].copy_from_slice(&local[..=self.degree]);
        Ok(())
    }
}

/// Fill in the clamped knot vector of `spec`.
///
/// Quantile placement takes the order statistic at (1-based) index
/// `ceil(q n)` for `q = j / (m + 1)`. Tied quantiles are pushed apart by one
/// ulp; knots that cannot be placed strictly inside the boundary interval are
/// dropped, which lowers the basis dimension.
pub fn make_knots(data: &[f64], spec: &BasisSpec) -> Result<BasisSpec> {
    let (a, b) = (spec.lower, spec.upper);
    if !(a.is_finite() && b.is_finite()) || a >= b {
        return Err(FpwError::DegenerateInterval { lower: a, upper: b });
    }
    let m = spec.n_interior;
    let candidates: Vec<f64> = match spec.placement {
        KnotPlacement::Uniform => (1..=m)
            .map(|j| a + (b - a) * j as f64 / (m + 1) as f64)
            .collect(),
        KnotPlacement::Quantile => {
            if data.is_empty() {
                return Err(FpwError::EmptyData);
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(FpwError::NonFinite("knot placement data"));
            }
            let mut sorted = data.to_vec();
            sorted.sort_by(f64::total_cmp);
            let n = sorted.len();
            (1..=m)
                .map(|j| {
                    let idx = (j * n).div_ceil(m + 1).clamp(1, n);
                    sorted[idx - 1]
                })
                .collect()
        }
    };

    let mut interior = Vec::with_capacity(m);
    let mut prev = a;
    for knot in candidates {
        let knot = knot.max(prev.next_up());
        if knot >= b {
            continue;
        }
        interior.push(knot);
        prev = knot;
    }
    if interior.len() < m {
        log::warn!(
            "dropped {} coincident interior knot(s); basis dimension reduced",
            m - interior.len()
        );
    }

    let p = spec.degree;
    let mut knots = Vec::with_capacity(interior.len() + 2 * (p + 1));
    knots.extend(std::iter::repeat_n(a, p + 1));
    knots.extend_from_slice(&interior);
    knots.extend(std::iter::repeat_n(b, p + 1));

    Ok(BasisSpec {
        n_interior: interior.len(),
        knots,
        ..spec.clone()
    })
}

/// All `K` basis values at `x`, clamped to the boundary interval.
pub fn eval_basis(x: f64, spec: &BasisSpec) -> Result<Vec<f64>> {
    let mut out = vec![0.0; spec.dim()];
    spec.eval_into(x, &mut out)?;
    Ok(out)
}

/// Row `i` is `eval_basis(xs[i])`. Selection masking is left to the caller.
pub fn design_matrix(xs: &[f64], spec: &BasisSpec) -> Result<DMatrix<f64>> {
    let k = spec.dim();
    let mut m = DMatrix::zeros(xs.len(), k);
    let mut row = vec![0.0; k];
    for (i, &x) in xs.iter().enumerate() {
        spec.eval_into(x, &mut row)?;
        for (j, &v) in row.iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

/// Recipe for a basis whose boundary and knots come from data: the boundary
/// is the data range and quantile knots use the same data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SieveLayout {
    pub degree: usize,
    pub n_interior: usize,
    pub placement: KnotPlacement,
}

impl SieveLayout {
    pub const fn new(degree: usize, n_interior: usize) -> Self {
        Self {
            degree,
            n_interior,
            placement: KnotPlacement::Quantile,
        }
    }

    /// Quadratic with no interior knots.
    pub const fn quadratic() -> Self {
        Self::new(2, 0)
    }

    pub fn dim(&self) -> usize {
        self.degree + 1 + self.n_interior
    }

    pub fn build(&self, data: &[f64]) -> Result<BasisSpec> {
        let (lo, hi) = crate::stats::finite_range(data).ok_or(FpwError::EmptyData)?;
        let spec = BasisSpec::new(self.degree, self.n_interior, self.placement, lo, hi)?;
        make_knots(data, &spec)
    }
}

/// Tensor product of two univariate bases, flattened with the first
/// coordinate major: entry `i * K_second + j` is `B_i(u) * C_j(v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub first: BasisSpec,
    pub second: BasisSpec,
}

impl TensorSpec {
    pub fn new(first: BasisSpec, second: BasisSpec) -> Result<Self> {
        if !first.has_knots() || !second.has_knots() {
            return Err(FpwError::KnotsNotBuilt);
        }
        Ok(Self { first, second })
    }

    /// `L = K_first * K_second`.
    pub fn dim(&self) -> usize {
        self.first.dim() * self.second.dim()
    }

    pub fn eval_into(&self, u: f64, v: f64, out: &mut [f64]) -> Result<()> {
        if out.len() != self.dim() {
            return Err(FpwError::DimensionMismatch {
                context: "tensor output buffer",
                expected: self.dim(),
                found: out.len(),
            });
        }
        let mut bu = [0.0; MAX_DEGREE + 1];
        let mut bv = [0.0; MAX_DEGREE + 1];
        let fu = self.first.nonzero(u, &mut bu)?;
        let fv = self.second.nonzero(v, &mut bv)?;
        let k2 = self.second.dim();
        out.fill(0.0);
        for (i, &a) in bu[..=self.first.degree].iter().enumerate() {
            let row = (fu + i) * k2;
            for (j, &b) in bv[..=self.second.degree].iter().enumerate() {
                out[row + fv + j] = a * b;
            }
        }
        Ok(())
    }
}

pub fn eval_tensor(u: f64, v: f64, tspec: &TensorSpec) -> Result<Vec<f64>> {
    let mut out = vec![0.0; tspec.dim()];
    tspec.eval_into(u, v, &mut out)?;
    Ok(out)
}

/// Design matrix with row `i` equal to `eval_tensor(us[i], vs[i])`.
pub fn tensor_design(us: &[f64], vs: &[f64], tspec: &TensorSpec) -> Result<DMatrix<f64>> {
    if us.len() != vs.len() {
        return Err(FpwError::DimensionMismatch {
            context: "tensor design coordinates",
            expected: us.len(),
            found: vs.len(),
        });
    }
    let l = tspec.dim();
    let mut m = DMatrix::zeros(us.len(), l);
    let mut row = vec![0.0; l];
    for (i, (&u, &v)) in us.iter().zip(vs).enumerate() {
        tspec.eval_into(u, v, &mut row)?;
        for (j, &val) in row.iter().enumerate() {
            m[(i, j)] = val;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn quad01() -> BasisSpec {
        let spec = BasisSpec::new(2, 0, KnotPlacement::Uniform, 0.0, 1.0).unwrap();
        make_knots(&[], &spec).unwrap()
    }

    /// Plain Cox-de Boor recursion, used as an independent oracle.
    fn cox_de_boor(i: usize, p: usize, t: &[f64], x: f64, last: bool) -> f64 {
        if p == 0 {
            let inside = t[i] <= x && x < t[i + 1];
            // close the final nonempty interval at the right boundary
            let at_end = last && x == t[i + 1] && t[i] < t[i + 1];
            return if inside || at_end { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = t[i + p] - t[i];
        if d1 > 0.0 {
            v += (x - t[i]) / d1 * cox_de_boor(i, p - 1, t, x, last);
        }
        let d2 = t[i + p + 1] - t[i + 1];
        if d2 > 0.0 {
            v += (t[i + p + 1] - x) / d2 * cox_de_boor(i + 1, p - 1, t, x, last);
        }
        v
    }

    #[test]
    fn quantile_knots_use_ceil_order_statistic() {
        let data: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let spec = BasisSpec::new(2, 2, KnotPlacement::Quantile, 0.1, 1.0).unwrap();
        let spec = make_knots(&data, &spec).unwrap();
        // ceil(10/3) = 4 -> 0.4, ceil(20/3) = 7 -> 0.7
        assert_eq!(spec.interior_knots(), &[0.4, 0.7]);
        assert_eq!(spec.dim(), 5);
    }

    #[test]
    fn clamped_knots_without_interior() {
        assert_eq!(quad01().knots(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn uniform_single_knot_is_midpoint() {
        let spec = BasisSpec::new(2, 1, KnotPlacement::Uniform, 0.0, 1.0).unwrap();
        let spec = make_knots(&[], &spec).unwrap();
        assert_eq!(spec.interior_knots(), &[0.5]);
    }

    #[test]
    fn knot_errors() {
        let spec = BasisSpec::new(2, 2, KnotPlacement::Quantile, 0.0, 1.0).unwrap();
        assert!(matches!(make_knots(&[], &spec), Err(FpwError::EmptyData)));
        assert!(matches!(
            BasisSpec::new(2, 0, KnotPlacement::Uniform, 1.0, 1.0),
            Err(FpwError::DegenerateInterval { .. })
        ));
        let bare = BasisSpec::new(2, 0, KnotPlacement::Uniform, 0.0, 1.0).unwrap();
        assert!(matches!(eval_basis(0.5, &bare), Err(FpwError::KnotsNotBuilt)));
    }

    #[test]
    fn tied_quantiles_are_separated_or_dropped() {
        let data = vec![0.0, 0.5, 0.5, 0.5, 0.5, 0.5, 1.0];
        let spec = BasisSpec::new(2, 3, KnotPlacement::Quantile, 0.0, 1.0).unwrap();
        let spec = make_knots(&data, &spec).unwrap();
        let knots = spec.interior_knots();
        assert!(knots.windows(2).all(|w| w[0] < w[1]));
        assert!(knots.iter().all(|&k| k > 0.0 && k < 1.0));
        assert_eq!(spec.dim(), 2 + 1 + spec.n_interior());

        // every quantile sits on the upper boundary: all knots dropped
        let data = vec![1.0; 5];
        let spec = BasisSpec::new(2, 2, KnotPlacement::Quantile, 0.0, 1.0).unwrap();
        let spec = make_knots(&data, &spec).unwrap();
        assert_eq!(spec.n_interior(), 0);
        assert_eq!(spec.dim(), 3);
    }

    #[test]
    fn quadratic_bernstein_values() {
        let spec = quad01();
        let v = eval_basis(0.5, &spec).unwrap();
        assert_abs_diff_eq!(v.as_slice(), &[0.25, 0.5, 0.25][..], epsilon = 1e-15);
        assert_eq!(eval_basis(0.0, &spec).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(eval_basis(1.0, &spec).unwrap(), vec![0.0, 0.0, 1.0]);
        // out-of-range points clamp
        assert_eq!(eval_basis(-3.0, &spec).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn design_matrix_rows() {
        let spec = quad01();
        let m = design_matrix(&[0.0, 0.5], &spec).unwrap();
        assert_eq!(m.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0]);
        assert_eq!(m.row(1).iter().copied().collect::<Vec<_>>(), vec![0.25, 0.5, 0.25]);
        assert_eq!(design_matrix(&[], &spec).unwrap().nrows(), 0);
    }

    #[test]
    fn tensor_values() {
        let t = TensorSpec::new(quad01(), quad01()).unwrap();
        assert_eq!(t.dim(), 9);
        let corner = eval_tensor(0.0, 0.0, &t).unwrap();
        assert_eq!(corner[0], 1.0);
        assert!(corner[1..].iter().all(|&v| v == 0.0));
        let mid = eval_tensor(0.5, 0.5, &t).unwrap();
        let b = [0.25, 0.5, 0.25];
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(mid[i * 3 + j], b[i] * b[j], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn tensor_is_first_coordinate_major() {
        let cubic = make_knots(
            &[],
            &BasisSpec::new(3, 0, KnotPlacement::Uniform, 0.0, 1.0).unwrap(),
        )
        .unwrap();
        let t = TensorSpec::new(quad01(), cubic).unwrap();
        assert_eq!(t.dim(), 12);
        // u at its upper end selects the last block of 4
        let v = eval_tensor(1.0, 0.0, &t).unwrap();
        assert_eq!(v[8], 1.0);
    }

    #[test]
    fn matches_cox_de_boor_oracle() {
        let data: Vec<f64> = (0..50).map(|i| ((i * 37) % 50) as f64 / 49.0).collect();
        for degree in 0..=4 {
            let spec = BasisSpec::new(degree, 4, KnotPlacement::Quantile, 0.0, 1.0).unwrap();
            let spec = make_knots(&data, &spec).unwrap();
            for step in 0..=200 {
                let x = step as f64 / 200.0;
                let got = eval_basis(x, &spec).unwrap();
                for (i, &g) in got.iter().enumerate() {
                    let want = cox_de_boor(i, degree, spec.knots(), x, true);
                    assert_abs_diff_eq!(g, want, epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn continuity_at_small_steps() {
        let data: Vec<f64> = (0..40).map(|i| (i as f64 / 39.0).powi(2)).collect();
        let spec = SieveLayout::new(2, 3).build(&data).unwrap();
        for step in 0..500 {
            let x = step as f64 / 500.0 * 0.999;
            let a = eval_basis(x, &spec).unwrap();
            let b = eval_basis(x + 1e-8, &spec).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn partition_of_unity_and_local_support(
            degree in 0usize..5,
            n_interior in 0usize..8,
            x in -0.5f64..1.5,
            seed_data in proptest::collection::vec(0.0f64..1.0, 20..60),
        ) {
            let spec = BasisSpec::new(degree, n_interior, KnotPlacement::Quantile, 0.0, 1.0).unwrap();
            let spec = make_knots(&seed_data, &spec).unwrap();
            prop_assert_eq!(spec.dim(), degree + 1 + spec.n_interior());
            let v = eval_basis(x, &spec).unwrap();
            let sum: f64 = v.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(v.iter().filter(|&&e| e != 0.0).count() <= degree + 1);
            prop_assert!(v.iter().all(|&e| (-1e-15..=1.0 + 1e-15).contains(&e)));
            let knots = spec.knots();
            prop_assert!(knots.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(spec.interior_knots().iter().all(|&k| k > 0.0 && k < 1.0));
        }

        #[test]
        fn tensor_partition_of_unity(u in 0.0f64..1.0, v in 0.0f64..1.0) {
            let spec = make_knots(
                &[],
                &BasisSpec::new(2, 2, KnotPlacement::Uniform, 0.0, 1.0).unwrap(),
            ).unwrap();
            let t = TensorSpec::new(spec.clone(), spec).unwrap();
            let s: f64 = eval_tensor(u, v, &t).unwrap().iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
    }
}
