//! Gauss-Hermite nodes for expectations against Gaussian marginals.

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights of the n-point Gauss-Hermite rule (physicists' weight
/// `exp(-z^2)`), via the Golub-Welsch eigendecomposition of the Jacobi
/// matrix. Nodes ascend.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut jacobi = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let w = std::f64::consts::PI.sqrt() * eig.eigenvectors[(0, i)].powi(2);
            (eig.eigenvalues[i], w)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Expectation of `g` under `N(mean, var)` using precomputed Gauss-Hermite
/// nodes.
pub fn gaussian_expectation(
    nodes: &[f64],
    weights: &[f64],
    mean: f64,
    var: f64,
    mut g: impl FnMut(f64) -> f64,
) -> f64 {
    let scale = (2.0 * var).sqrt();
    let norm = 1.0 / std::f64::consts::PI.sqrt();
    nodes
        .iter()
        .zip(weights)
        .map(|(&z, &w)| w * g(mean + scale * z))
        .sum::<f64>()
        * norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn weights_sum_to_sqrt_pi() {
        for n in [1, 5, 21, 41] {
            let (_, w) = gauss_hermite(n);
            let total: f64 = w.iter().sum();
            assert_abs_diff_eq!(total, std::f64::consts::PI.sqrt(), epsilon = 1e-10);
        }
    }

    #[test]
    fn gaussian_moments_are_exact() {
        let (z, w) = gauss_hermite(41);
        let mean = gaussian_expectation(&z, &w, 1.3, 0.49, |x| x);
        assert_abs_diff_eq!(mean, 1.3, epsilon = 1e-10);
        let second = gaussian_expectation(&z, &w, 1.3, 0.49, |x| (x - 1.3) * (x - 1.3));
        assert_abs_diff_eq!(second, 0.49, epsilon = 1e-10);
        // degree-9 polynomial integrated exactly by a 41-point rule
        let ninth = gaussian_expectation(&z, &w, 0.0, 1.0, |x| x.powi(9));
        assert_abs_diff_eq!(ninth, 0.0, epsilon = 1e-8);
    }

    #[test]
    fn smooth_nonpolynomial_expectation() {
        let (z, w) = gauss_hermite(41);
        // E[sigmoid-ish smooth function] against a 200k-point trapezoid
        let g = |x: f64| 1.0 / (1.0 + (-1.7 * (x - 0.4)).exp());
        let quick = gaussian_expectation(&z, &w, 0.2, 1.21, g);
        let n = 200_001;
        let (lo, hi) = (0.2 - 8.0 * 1.1, 0.2 + 8.0 * 1.1);
        let step = (hi - lo) / (n - 1) as f64;
        let mut acc = 0.0;
        for k in 0..n {
            let x = lo + step * k as f64;
            let trap = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
            let d = x - 0.2;
            acc += trap * g(x) * (-0.5 * d * d / 1.21).exp();
        }
        let slow = acc * step / (2.0 * std::f64::consts::PI * 1.21).sqrt();
        assert_abs_diff_eq!(quick, slow, epsilon = 1e-8);
    }
}
