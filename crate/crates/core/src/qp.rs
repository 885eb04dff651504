//! Small dense convex quadratic programs with two-sided linear constraints:
//!
//! ```text
//! minimize   ½ b'Hb + g'b
//! subject to lower_j <= a_j'b <= upper_j   for every row a_j of A
//! ```
//!
//! `H` must be positive definite. Three solvers share the problem type: a
//! primal active-set method (exact up to rounding), projected gradient with
//! backtracking, and Nelder-Mead on the feasible region. All of them start
//! from a feasible point supplied by the caller.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

#[derive(Debug, Clone)]
pub struct QuadraticProgram {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constraints: DMatrix<f64>,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Lower,
    Upper,
}

impl Side {
    fn sign(self) -> f64 {
        match self {
            Side::Lower => 1.0,
            Side::Upper => -1.0,
        }
    }
}

impl QuadraticProgram {
    pub fn dim(&self) -> usize {
        self.hessian.nrows()
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.hessian * x + &self.linear
    }

    /// Largest constraint violation at `x` (zero when feasible).
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        let ax = &self.constraints * x;
        ax.iter()
            .map(|&v| (self.lower - v).max(v - self.upper).max(0.0))
            .fold(0.0, f64::max)
    }

    /// Primal active-set method. Working constraints are held with equality
    /// and the equality-constrained step comes from the KKT system.
    pub fn solve_active_set(&self, start: &DVector<f64>, max_iter: usize, tol: f64) -> QpSolution {
        let dim = self.dim();
        let m = self.constraints.nrows();
        let mut x = start.clone();
        let mut working: Vec<(usize, Side)> = Vec::new();
        let mut converged = false;
        let mut iterations = 0;

        // constraints already tight at the start enter the working set
        let ax = &self.constraints * &x;
        for j in 0..m {
            if working.len() >= dim {
                break;
            }
            for side in [Side::Lower, Side::Upper] {
                let slack = self.slack(ax[j], side);
                if slack.abs() <= 1e-14 * (1.0 + ax[j].abs()) {
                    let mut trial = working.clone();
                    trial.push((j, side));
                    if self.independent(&trial) {
                        working = trial;
                    }
                    break;
                }
            }
        }

        while iterations < max_iter {
            iterations += 1;
            let grad = self.gradient(&x);
            let (step, multipliers) = self.kkt_step(&grad, &working);
            let step_scale = 1.0 + x.amax();
            if step.amax() <= 1e-13 * step_scale {
                let grad_scale = 1.0 + grad.amax();
                let most_negative = multipliers
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .filter(|(_, &l)| l < -tol * grad_scale);
                match most_negative {
                    Some((k, _)) => {
                        working.remove(k);
                    }
                    None => {
                        converged = true;
                        break;
                    }
                }
                continue;
            }

            let ax = &self.constraints * &x;
            let ap = &self.constraints * &step;
            let mut alpha = 1.0;
            let mut blocking = None;
            for j in 0..m {
                for side in [Side::Lower, Side::Upper] {
                    if working.contains(&(j, side)) {
                        continue;
                    }
                    let slope = side.sign() * ap[j];
                    if slope >= 0.0 {
                        continue;
                    }
                    let slack = self.slack(ax[j], side).max(0.0);
                    let ratio = slack / -slope;
                    if ratio < alpha {
                        alpha = ratio;
                        blocking = Some((j, side));
                    }
                }
            }
            x.axpy(alpha, &step, 1.0);
            if let Some(b) = blocking {
                working.push(b);
            }
        }
        let value = self.value(&x);
        QpSolution {
            x,
            value,
            iterations,
            converged,
        }
    }

    fn slack(&self, ax: f64, side: Side) -> f64 {
        match side {
            Side::Lower => ax - self.lower,
            Side::Upper => self.upper - ax,
        }
    }

    fn independent(&self, working: &[(usize, Side)]) -> bool {
        let rows = DMatrix::from_fn(working.len(), self.dim(), |r, c| {
            self.constraints[(working[r].0, c)]
        });
        let sv = rows.singular_values();
        sv.min() > 1e-10 * sv.max().max(1e-300)
    }

    /// Solve `H p - A_w' λ = -grad`, `A_w p = 0` with signed working rows.
    fn kkt_step(&self, grad: &DVector<f64>, working: &[(usize, Side)]) -> (DVector<f64>, Vec<f64>) {
        let dim = self.dim();
        let w = working.len();
        let size = dim + w;
        let mut kkt = DMatrix::zeros(size, size);
        kkt.view_mut((0, 0), (dim, dim)).copy_from(&self.hessian);
        for (r, &(j, side)) in working.iter().enumerate() {
            let s = side.sign();
            for c in 0..dim {
                let a = s * self.constraints[(j, c)];
                kkt[(dim + r, c)] = a;
                kkt[(c, dim + r)] = -a;
            }
        }
        let mut rhs = DVector::zeros(size);
        rhs.rows_mut(0, dim).copy_from(&(-grad));
        let sol = kkt
            .clone()
            .lu()
            .solve(&rhs)
            .filter(|s| s.iter().all(|v| v.is_finite()))
            .unwrap_or_else(|| {
                kkt.svd(true, true)
                    .solve(&rhs, 1e-12)
                    .unwrap_or_else(|_| DVector::zeros(size))
            });
        let step = sol.rows(0, dim).into_owned();
        let multipliers = sol.rows(dim, w).iter().copied().collect();
        (step, multipliers)
    }

    /// Euclidean projection of `point` onto the feasible set, warm-started
    /// from the feasible `start`.
    pub fn project(&self, point: &DVector<f64>, start: &DVector<f64>, max_iter: usize, tol: f64) -> DVector<f64> {
        let proj = QuadraticProgram {
            hessian: DMatrix::identity(self.dim(), self.dim()),
            linear: -point,
            constraints: self.constraints.clone(),
            lower: self.lower,
            upper: self.upper,
        };
        proj.solve_active_set(start, max_iter, tol).x
    }

    /// Projected gradient with Armijo-type backtracking on the step length.
    pub fn solve_projected_gradient(&self, start: &DVector<f64>, max_iter: usize, tol: f64) -> QpSolution {
        let lmax = SymmetricEigen::new(self.hessian.clone())
            .eigenvalues
            .max()
            .max(1e-300);
        let mut x = start.clone();
        let mut value = self.value(&x);
        let mut converged = false;
        let mut iterations = 0;
        let mut step = 1.0 / lmax;
        while iterations < max_iter {
            iterations += 1;
            let grad = self.gradient(&x);
            let mut accepted = None;
            for _ in 0..60 {
                let target = &x - &grad * step;
                let cand = self.project(&target, &x, 200, 1e-12);
                let diff = &cand - &x;
                let cand_value = self.value(&cand);
                let bound = value + grad.dot(&diff) + diff.norm_squared() / (2.0 * step);
                if cand_value <= bound + 1e-15 * value.abs().max(1.0) {
                    accepted = Some((cand, cand_value, diff.norm()));
                    break;
                }
                step *= 0.5;
            }
            let Some((cand, cand_value, moved)) = accepted else {
                break;
            };
            x = cand;
            value = cand_value;
            if moved <= tol * (1.0 + x.norm()) {
                converged = true;
                break;
            }
            step *= 2.0;
        }
        QpSolution {
            x,
            value,
            iterations,
            converged,
        }
    }

    /// Nelder-Mead on the objective, with infeasible points valued at +inf.
    pub fn solve_nelder_mead(&self, start: &DVector<f64>, max_iter: usize, tol: f64) -> QpSolution {
        let dim = self.dim();
        let f = |p: &DVector<f64>| {
            if self.violation(p) > 1e-12 {
                f64::INFINITY
            } else {
                self.value(p)
            }
        };
        let mut simplex: Vec<(DVector<f64>, f64)> = Vec::with_capacity(dim + 1);
        simplex.push((start.clone(), f(start)));
        for i in 0..dim {
            // try both directions so that a start on a bound still spans
            let delta = 0.05 * start[i].abs().max(1.0);
            let mut p = start.clone();
            p[i] += delta;
            let mut v = f(&p);
            if !v.is_finite() {
                p[i] = start[i] - delta;
                v = f(&p);
            }
            simplex.push((p, v));
        }

        let mut iterations = 0;
        let mut converged = false;
        while iterations < max_iter {
            iterations += 1;
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let best = simplex[0].1;
            let worst = simplex[dim].1;
            if worst.is_finite() && (worst - best).abs() <= tol * (1.0 + best.abs()) {
                converged = true;
                break;
            }
            let centroid = simplex[..dim]
                .iter()
                .fold(DVector::zeros(dim), |acc, (p, _)| acc + p)
                / dim as f64;
            let reflect = &centroid + (&centroid - &simplex[dim].0);
            let fr = f(&reflect);
            if fr < best {
                let expand = &centroid + (&reflect - &centroid) * 2.0;
                let fe = f(&expand);
                simplex[dim] = if fe < fr { (expand, fe) } else { (reflect, fr) };
            } else if fr < simplex[dim - 1].1 {
                simplex[dim] = (reflect, fr);
            } else {
                let contract = &centroid + (&simplex[dim].0 - &centroid) * 0.5;
                let fc = f(&contract);
                if fc < worst {
                    simplex[dim] = (contract, fc);
                } else {
                    let anchor = simplex[0].0.clone();
                    for entry in simplex.iter_mut().skip(1) {
                        let p = &anchor + (&entry.0 - &anchor) * 0.5;
                        let v = f(&p);
                        *entry = (p, v);
                    }
                }
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (x, value) = simplex.swap_remove(0);
        QpSolution {
            x,
            value,
            iterations,
            converged,
        }
    }
}
