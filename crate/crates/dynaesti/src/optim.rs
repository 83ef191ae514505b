//! Box-constrained quasi-Newton maximization for the per-item M-step.
//!
//! Dense BFGS on the negated objective with gradient projection at the
//! bounds and Armijo backtracking; item parameter vectors are small, so the
//! dense inverse-Hessian update is cheap. The incumbent never regresses
//! below the starting value.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        assert!(lower.iter().zip(&upper).all(|(l, u)| l < u));
        Bounds { lower, upper }
    }

    fn project(&self, x: &mut DVector<f64>) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lower[i], self.upper[i]);
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimOptions {
    /// Infinity norm of the projected gradient at which to stop.
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            gradient_tolerance: 1e-6,
            max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Maximizes `objective` (returning value and gradient) over the box.
pub fn maximize_bounded<F>(
    objective: F,
    x0: &[f64],
    bounds: &Bounds,
    opts: &OptimOptions,
) -> OptimOutcome
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let dim = x0.len();
    let eval = |x: &DVector<f64>| {
        let (v, g) = objective(x.as_slice());
        (-v, DVector::from_vec(g.into_iter().map(|gi| -gi).collect()))
    };

    let mut x = DVector::from_column_slice(x0);
    bounds.project(&mut x);
    let (mut f, mut g) = eval(&x);
    let mut h_inv: DMatrix<f64> = DMatrix::identity(dim, dim);
    let mut converged = false;
    let mut iterations = 0;

    let at_lower = |x: &DVector<f64>, i: usize| x[i] <= bounds.lower[i] + 1e-12;
    let at_upper = |x: &DVector<f64>, i: usize| x[i] >= bounds.upper[i] - 1e-12;
    let projected_grad_norm = |x: &DVector<f64>, g: &DVector<f64>| {
        let mut norm = 0.0f64;
        for i in 0..dim {
            let gi = g[i];
            let blocked = (at_lower(x, i) && gi > 0.0) || (at_upper(x, i) && gi < 0.0);
            if !blocked {
                norm = norm.max(gi.abs());
            }
        }
        norm
    };

    for _ in 0..opts.max_iterations {
        if !f.is_finite() {
            break;
        }
        if projected_grad_norm(&x, &g) < opts.gradient_tolerance {
            converged = true;
            break;
        }
        iterations += 1;

        let mut dir = -(&h_inv * &g);
        if dir.dot(&g) >= 0.0 {
            h_inv = DMatrix::identity(dim, dim);
            dir = -g.clone();
        }

        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let mut x_new = &x + &dir * alpha;
            bounds.project(&mut x_new);
            let step = &x_new - &x;
            if step.norm() < 1e-15 {
                break;
            }
            let (f_new, g_new) = eval(&x_new);
            if f_new.is_finite() && f_new <= f + 1e-4 * g.dot(&step) {
                let y = &g_new - &g;
                let sy = step.dot(&y);
                if sy > 1e-12 * step.norm() * y.norm() {
                    // BFGS inverse update
                    let rho = 1.0 / sy;
                    let i_mat = DMatrix::<f64>::identity(dim, dim);
                    let left = &i_mat - rho * &step * y.transpose();
                    let right = &i_mat - rho * &y * step.transpose();
                    h_inv = &left * h_inv * &right + rho * &step * step.transpose();
                }
                x = x_new;
                f = f_new;
                g = g_new;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // no improving step along this direction; treat as stationary
            converged = projected_grad_norm(&x, &g) < 1e-3;
            break;
        }
    }
    if !converged && projected_grad_norm(&x, &g) < opts.gradient_tolerance {
        converged = true;
    }

    OptimOutcome {
        x: x.as_slice().to_vec(),
        value: -f,
        converged,
        iterations,
    }
}
