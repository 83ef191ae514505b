//! RBF covariance function and the Gaussian-process predictive algebra.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// Recommended diagonal jitter for near-singular covariance matrices.
pub const DEFAULT_JITTER: f64 = 1e-4;

/// Parameters of the RBF covariance `K(dt) = S^2 exp(-0.5 (dt/h)^2)` plus a
/// diagonal jitter term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    /// Time scale `h` controlling how fast the curve may vary.
    pub bandwidth: f64,
    /// Amplitude `S`; curve fitting requires `S = 1`.
    pub amplitude: f64,
    /// Diagonal jitter `epsilon` added where two times are bitwise equal.
    pub jitter: f64,
}

impl KernelParams {
    pub fn new(bandwidth: f64, amplitude: f64, jitter: f64) -> Result<Self> {
        let p = KernelParams {
            bandwidth,
            amplitude,
            jitter,
        };
        p.validate()?;
        Ok(p)
    }

    /// Unit-amplitude kernel with the default jitter, as used for fitting.
    pub fn standard(bandwidth: f64) -> Result<Self> {
        KernelParams::new(bandwidth, 1.0, DEFAULT_JITTER)
    }

    pub fn with_bandwidth(&self, bandwidth: f64) -> Result<Self> {
        KernelParams::new(bandwidth, self.amplitude, self.jitter)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(Error::InvalidKernelParams(format!(
                "bandwidth must be finite and > 0, got {}",
                self.bandwidth
            )));
        }
        if !(self.amplitude.is_finite() && self.amplitude > 0.0) {
            return Err(Error::InvalidKernelParams(format!(
                "amplitude must be finite and > 0, got {}",
                self.amplitude
            )));
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(Error::InvalidKernelParams(format!(
                "jitter must be finite and >= 0, got {}",
                self.jitter
            )));
        }
        Ok(())
    }
}

fn rbf_raw(delta: f64, params: &KernelParams) -> f64 {
    let z = delta / params.bandwidth;
    params.amplitude * params.amplitude * (-0.5 * z * z).exp()
}

/// Covariance between two curve points `dt` apart. The jitter is included if
/// and only if `dt == 0` exactly.
pub fn rbf(delta: f64, params: &KernelParams) -> Result<f64> {
    params.validate()?;
    if !delta.is_finite() {
        return Err(Error::NonFinite(format!("time difference {delta}")));
    }
    let mut k = rbf_raw(delta, params);
    if delta == 0.0 {
        k += params.jitter;
    }
    Ok(k)
}

fn check_times(label: &str, times: &[f64]) -> Result<()> {
    if let Some(t) = times.iter().find(|t| !t.is_finite()) {
        return Err(Error::NonFinite(format!("{label} contains {t}")));
    }
    Ok(())
}

/// Covariance matrix between two time vectors.
///
/// With `jitter_on_equal` set (a square self-covariance), the jitter is added
/// wherever the two times are bitwise equal; cross-covariances take the plain
/// kernel value.
pub fn build_cov(
    times_a: &[f64],
    times_b: &[f64],
    params: &KernelParams,
    jitter_on_equal: bool,
) -> Result<DMatrix<f64>> {
    params.validate()?;
    check_times("times_a", times_a)?;
    check_times("times_b", times_b)?;
    Ok(DMatrix::from_fn(times_a.len(), times_b.len(), |i, j| {
        let a = times_a[i];
        let b = times_b[j];
        let mut k = rbf_raw((a - b).abs(), params);
        if jitter_on_equal && a.to_bits() == b.to_bits() {
            k += params.jitter;
        }
        k
    }))
}

/// The three covariance blocks used by the predictive formulas: `sigma1` over
/// the emission times (jittered), `sigma2` over the query times (exact), and
/// the cross block `sigma12` (exact).
#[derive(Debug, Clone)]
pub struct CovMatrices {
    pub sigma1: DMatrix<f64>,
    pub sigma2: DMatrix<f64>,
    pub sigma12: DMatrix<f64>,
}

impl CovMatrices {
    pub fn new(emission_times: &[f64], query_times: &[f64], params: &KernelParams) -> Result<Self> {
        Ok(CovMatrices {
            sigma1: build_cov(emission_times, emission_times, params, true)?,
            sigma2: build_cov(query_times, query_times, params, false)?,
            sigma12: build_cov(emission_times, query_times, params, false)?,
        })
    }
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Cholesky factor of `sigma1 + Diag(v)`.
///
/// Every solve in this module goes through this factorization:
/// `(Sigma1^{-1} + Diag(1/v))^{-1} = Sigma1 (Sigma1 + Diag(v))^{-1} Diag(v)`,
/// so the near-singular `Sigma1` is never inverted on its own.
pub(crate) fn factor_sigma1_plus_v(
    sigma1: &DMatrix<f64>,
    variances: &DVector<f64>,
    params: &KernelParams,
) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let mut a = sigma1.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += variances[i];
    }
    Cholesky::new(a).ok_or(Error::SingularCovariance {
        jitter: params.jitter,
    })
}

fn check_factors(n: usize, means: &DVector<f64>, variances: &DVector<f64>) -> Result<()> {
    if means.len() != n || variances.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} emission times vs {} factor means and {} variances",
            means.len(),
            variances.len()
        )));
    }
    for i in 0..n {
        if !means[i].is_finite() {
            return Err(Error::NonFinite(format!("factor mean {}", means[i])));
        }
        if !(variances[i].is_finite() && variances[i] > 0.0) {
            return Err(Error::NonFinite(format!(
                "factor variance {} (must be finite and > 0)",
                variances[i]
            )));
        }
    }
    Ok(())
}

/// Posterior mean and covariance of the curve at `query_times`, given the
/// Gaussian factors `(means, variances)` attached to `emission_times`.
///
/// Evaluates `W = Sigma12^T Sigma1^{-1} (Sigma1^{-1} + Diag(1/v))^{-1}`,
/// `mu = W (m/v)` and `Sigma = Sigma2 + (W - Sigma12^T) Sigma1^{-1} Sigma12`,
/// which collapse to solves against `Sigma1 + Diag(v)`:
/// `mu = Sigma12^T (Sigma1 + Diag(v))^{-1} m` and
/// `Sigma = Sigma2 - Sigma12^T (Sigma1 + Diag(v))^{-1} Sigma12`.
/// The returned covariance is symmetrized.
pub fn predictive(
    emission_times: &[f64],
    query_times: &[f64],
    means: &DVector<f64>,
    variances: &DVector<f64>,
    params: &KernelParams,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_factors(emission_times.len(), means, variances)?;
    let cov = CovMatrices::new(emission_times, query_times, params)?;
    let chol = factor_sigma1_plus_v(&cov.sigma1, variances, params)?;

    let alpha = chol.solve(means);
    let mu = cov.sigma12.transpose() * alpha;

    let x = chol.solve(&cov.sigma12);
    let mut sigma = &cov.sigma2 - cov.sigma12.transpose() * x;
    symmetrize(&mut sigma);
    Ok((mu, sigma))
}

/// Marginal means and variances at `query_times` without forming the full
/// predictive covariance: one triangular solve gives the diagonal of
/// `Sigma12^T (Sigma1 + Diag(v))^{-1} Sigma12`.
pub fn predictive_marginals(
    emission_times: &[f64],
    query_times: &[f64],
    means: &DVector<f64>,
    variances: &DVector<f64>,
    params: &KernelParams,
) -> Result<Vec<(f64, f64)>> {
    check_factors(emission_times.len(), means, variances)?;
    params.validate()?;
    check_times("query_times", query_times)?;
    let sigma1 = build_cov(emission_times, emission_times, params, true)?;
    let sigma12 = build_cov(emission_times, query_times, params, false)?;
    let chol = factor_sigma1_plus_v(&sigma1, variances, params)?;

    let alpha = chol.solve(means);
    let t = chol
        .l()
        .solve_lower_triangular(&sigma12)
        .ok_or(Error::SingularCovariance {
            jitter: params.jitter,
        })?;
    let prior_var = params.amplitude * params.amplitude;
    Ok((0..query_times.len())
        .map(|j| {
            let mean = sigma12.column(j).dot(&alpha);
            let var = prior_var - t.column(j).norm_squared();
            (mean, var)
        })
        .collect())
}
