use nalgebra::DMatrix;

use crate::error::{FpwError, Result};

/// One observation set `(Δ_i, Y_i, X_i, W_i)` with optional always-observed
/// linear controls.
///
/// The covariate is stored as `X = Δ X*`: entries with `Δ_i = 0` are held at
/// zero and never read by the estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    delta: Vec<bool>,
    y: Vec<f64>,
    x: Vec<f64>,
    w: Vec<f64>,
    controls: Option<DMatrix<f64>>,
    control_names: Vec<String>,
}

impl Sample {
    pub fn new(delta: Vec<bool>, y: Vec<f64>, x: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        let n = delta.len();
        for (name, len) in [("outcome", y.len()), ("covariate", x.len()), ("instrument", w.len())] {
            if len != n {
                return Err(FpwError::InvalidArgument(format!(
                    "{name} has length {len}, selection indicator has {n}"
                )));
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(FpwError::NonFinite("outcome"));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(FpwError::NonFinite("instrument"));
        }
        if delta.iter().zip(&x).any(|(&d, v)| d && !v.is_finite()) {
            return Err(FpwError::NonFinite("observed covariate"));
        }
        let x = delta
            .iter()
            .zip(x)
            .map(|(&d, v)| if d { v } else { 0.0 })
            .collect();
        Ok(Self {
            delta,
            y,
            x,
            w,
            controls: None,
            control_names: Vec::new(),
        })
    }

    /// Attach an `n × c` matrix of linear controls.
    pub fn with_controls(mut self, names: Vec<String>, controls: DMatrix<f64>) -> Result<Self> {
        if controls.nrows() != self.n() {
            return Err(FpwError::DimensionMismatch {
                context: "control rows",
                expected: self.n(),
                found: controls.nrows(),
            });
        }
        if names.len() != controls.ncols() {
            return Err(FpwError::DimensionMismatch {
                context: "control names",
                expected: controls.ncols(),
                found: names.len(),
            });
        }
        if controls.iter().any(|v| !v.is_finite()) {
            return Err(FpwError::NonFinite("controls"));
        }
        if controls.ncols() > 0 {
            self.controls = Some(controls);
            self.control_names = names;
        }
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.delta.len()
    }

    pub fn delta(&self) -> &[bool] {
        &self.delta
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Covariate values; zero wherever `Δ_i = 0`.
    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn controls(&self) -> Option<&DMatrix<f64>> {
        self.controls.as_ref()
    }

    pub fn control_names(&self) -> &[String] {
        &self.control_names
    }

    pub fn n_controls(&self) -> usize {
        self.controls.as_ref().map_or(0, |c| c.ncols())
    }

    pub fn n_selected(&self) -> usize {
        self.delta.iter().filter(|&&d| d).count()
    }

    pub fn selected_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.delta[i]).collect()
    }

    /// Covariate values of the selected units, in sample order.
    pub fn observed_x(&self) -> Vec<f64> {
        self.selected_indices().into_iter().map(|i| self.x[i]).collect()
    }

    pub fn response_rate(&self) -> f64 {
        if self.n() == 0 {
            return 0.0;
        }
        self.n_selected() as f64 / self.n() as f64
    }

    /// Drop controls, keeping `(Δ, Y, X, W)`.
    pub fn without_controls(&self) -> Self {
        Self {
            controls: None,
            control_names: Vec::new(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_unobserved_covariates() {
        let s = Sample::new(
            vec![true, false, true],
            vec![1.0, 2.0, 3.0],
            vec![0.5, f64::NAN, 0.7],
            vec![0.1, 0.2, 0.3],
        )
        .unwrap();
        assert_eq!(s.x(), &[0.5, 0.0, 0.7]);
        assert_eq!(s.n_selected(), 2);
        assert_eq!(s.observed_x(), vec![0.5, 0.7]);
    }

    #[test]
    fn rejects_bad_lengths_and_values() {
        assert!(Sample::new(vec![true], vec![1.0, 2.0], vec![0.0], vec![0.0]).is_err());
        assert!(Sample::new(vec![true], vec![1.0], vec![f64::NAN], vec![0.0]).is_err());
        let s = Sample::new(vec![true, true], vec![1.0, 2.0], vec![0.0, 1.0], vec![0.0, 1.0]).unwrap();
        assert!(s
            .clone()
            .with_controls(vec!["a".into()], DMatrix::zeros(3, 1))
            .is_err());
        assert!(s
            .with_controls(vec!["a".into(), "b".into()], DMatrix::zeros(2, 1))
            .is_err());
    }
}
