//! The grafting iteration: replace every emission factor with a
//! moment-matched Gaussian factor, all sites updated in parallel per sweep.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::emissions::{tilted_moments, EmissionTriplet, GridSpec, TiltedMoments};
use crate::error::{Error, Result};
use crate::kernel::{build_cov, factor_sigma1_plus_v, symmetrize, KernelParams};

/// Variance assigned to a factor whose emission has been discarded.
pub const FALLBACK_VARIANCE: f64 = 1e6;

/// A site's message is unusable once `v_i - P_ii` drops below this.
const MESSAGE_GUARD: f64 = 1e-10;

/// Gaussian replacement factors, one per emission site.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFactorSet {
    pub means: DVector<f64>,
    pub variances: DVector<f64>,
}

impl GaussianFactorSet {
    /// The initial state: every factor a standard Gaussian.
    pub fn standard(n: usize) -> Self {
        GaussianFactorSet {
            means: DVector::zeros(n),
            variances: DVector::from_element(n, 1.0),
        }
    }

    pub fn new(means: DVector<f64>, variances: DVector<f64>) -> Result<Self> {
        if means.len() != variances.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} factor means vs {} variances",
                means.len(),
                variances.len()
            )));
        }
        if variances.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::NonFinite("factor variance".into()));
        }
        Ok(GaussianFactorSet { means, variances })
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.len() == 0
    }

    /// True if the emission at site `i` is currently discarded.
    pub fn is_fallback(&self, i: usize) -> bool {
        self.variances[i] >= FALLBACK_VARIANCE
    }
}

/// Per-site Gaussian messages (the joint influence of the prior and every
/// other site's factor). A site whose message could not be formed is marked
/// invalid and its factor falls back to the discarded state on update.
#[derive(Debug, Clone)]
pub struct MessageSet {
    pub means: DVector<f64>,
    pub variances: DVector<f64>,
    pub valid: Vec<bool>,
}

/// Stopping and quadrature settings for the grafting loop.
#[derive(Debug, Clone)]
pub struct IterationControl {
    /// Convergence threshold on the largest factor-parameter change.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Fraction of the previous factor kept per update; 0 disables damping.
    pub damping: f64,
    pub grid: GridSpec,
}

impl Default for IterationControl {
    fn default() -> Self {
        IterationControl {
            tolerance: 1e-4,
            max_iterations: 50,
            damping: 0.0,
            grid: GridSpec::default(),
        }
    }
}

/// Result of a grafting run. `iterations` counts the sweeps that moved some
/// factor by at least the tolerance; with Gaussian emissions this is 1.
#[derive(Debug, Clone)]
pub struct GraftOutcome {
    pub factors: GaussianFactorSet,
    pub iterations: usize,
    pub converged: bool,
}

/// All Gaussian messages at once:
/// `P = (Sigma1^{-1} + Diag(1/v))^{-1}`,
/// `H = P + (diag(P) 1^T) o P / ((v - diag(P)) 1^T)`,
/// `M = 1 (m/v)^T - Diag(m/v)`, message variances `rho = diag(H)` and means
/// `eta = (H o M) 1`. `P` itself is computed as
/// `Sigma1 (Sigma1 + Diag(v))^{-1} Diag(v)` through one Cholesky solve.
pub fn compute_messages(
    factors: &GaussianFactorSet,
    sigma1: &DMatrix<f64>,
    params: &KernelParams,
) -> Result<MessageSet> {
    let n = factors.len();
    if sigma1.nrows() != n || sigma1.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "sigma1 is {}x{} for {} factors",
            sigma1.nrows(),
            sigma1.ncols(),
            n
        )));
    }
    let chol = factor_sigma1_plus_v(sigma1, &factors.variances, params)?;
    let rhs = DMatrix::from_fn(n, n, |i, j| if i == j { factors.variances[i] } else { 0.0 });
    let mut p = sigma1 * chol.solve(&rhs);
    symmetrize(&mut p);

    let m_over_v = DVector::from_fn(n, |i, _| factors.means[i] / factors.variances[i]);

    let mut h = DMatrix::zeros(n, n);
    let mut valid = vec![true; n];
    for i in 0..n {
        let gap = factors.variances[i] - p[(i, i)];
        if gap < MESSAGE_GUARD {
            valid[i] = false;
            continue;
        }
        let scale = 1.0 + p[(i, i)] / gap;
        for j in 0..n {
            h[(i, j)] = p[(i, j)] * scale;
        }
    }

    let mut rho = DVector::zeros(n);
    let mut eta = DVector::zeros(n);
    for i in 0..n {
        if !valid[i] {
            continue;
        }
        rho[i] = h[(i, i)];
        let mut acc = 0.0;
        for j in 0..n {
            // M has the factor naturals off the diagonal and zero on it
            if j != i {
                acc += h[(i, j)] * m_over_v[j];
            }
        }
        eta[i] = acc;
        if !(rho[i].is_finite() && rho[i] > 0.0 && eta[i].is_finite()) {
            valid[i] = false;
        }
    }
    Ok(MessageSet {
        means: eta,
        variances: rho,
        valid,
    })
}

/// Same messages as [`compute_messages`] without materializing `P`, `H`, or
/// `M`: only `diag(P)` and `P (m/v)` are needed, via
/// `P = Sigma1 - Sigma1 (Sigma1 + Diag(v))^{-1} Sigma1` and one triangular
/// solve against the Cholesky factor.
fn compute_messages_fast(
    factors: &GaussianFactorSet,
    sigma1: &DMatrix<f64>,
    params: &KernelParams,
) -> Result<MessageSet> {
    let n = factors.len();
    let chol = factor_sigma1_plus_v(sigma1, &factors.variances, params)?;
    let t = chol.l().solve_lower_triangular(sigma1).ok_or(
        Error::SingularCovariance {
            jitter: params.jitter,
        },
    )?;
    let mut p_diag = DVector::zeros(n);
    for i in 0..n {
        p_diag[i] = sigma1[(i, i)] - t.column(i).norm_squared();
    }
    let m_over_v = DVector::from_fn(n, |i, _| factors.means[i] / factors.variances[i]);
    let w = sigma1 * &m_over_v;
    let s = chol.solve(&w);
    let p_mv = &w - sigma1 * s;

    let mut eta = DVector::zeros(n);
    let mut rho = DVector::zeros(n);
    let mut valid = vec![true; n];
    for i in 0..n {
        let gap = factors.variances[i] - p_diag[i];
        if gap < MESSAGE_GUARD {
            valid[i] = false;
            continue;
        }
        let scale = factors.variances[i] / gap;
        rho[i] = p_diag[i] * scale;
        eta[i] = (p_mv[i] - p_diag[i] * m_over_v[i]) * scale;
        if !(rho[i].is_finite() && rho[i] > 0.0 && eta[i].is_finite()) {
            valid[i] = false;
        }
    }
    Ok(MessageSet {
        means: eta,
        variances: rho,
        valid,
    })
}

/// Divides each tilted marginal by its message:
/// `v = 1 / (1/gamma - 1/rho)`, `m = v (nu/gamma - eta/rho)`. Sites with a
/// non-positive `v` (the emission resists a Gaussian fit around the message)
/// or an invalid message are discarded via the fallback factor `(0, L)`.
pub fn update_factors(
    messages: &MessageSet,
    tilted: &[TiltedMoments],
) -> Result<GaussianFactorSet> {
    let n = messages.means.len();
    if tilted.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} tilted moments vs {} messages",
            tilted.len(),
            n
        )));
    }
    let mut means = DVector::zeros(n);
    let mut variances = DVector::from_element(n, FALLBACK_VARIANCE);
    for i in 0..n {
        if !messages.valid[i] {
            continue;
        }
        let (nu, gamma) = (tilted[i].mean, tilted[i].variance);
        let (eta, rho) = (messages.means[i], messages.variances[i]);
        let inv_v = 1.0 / gamma - 1.0 / rho;
        if inv_v <= 0.0 {
            continue;
        }
        let v = 1.0 / inv_v;
        let m = v * (nu / gamma - eta / rho);
        if v.is_finite() && v > 0.0 && m.is_finite() && v < FALLBACK_VARIANCE {
            means[i] = m;
            variances[i] = v;
        }
    }
    GaussianFactorSet::new(means, variances)
}

/// Runs the grafting loop from the standard-Gaussian initialization.
pub fn graft(
    emissions: &[EmissionTriplet],
    params: &KernelParams,
    ctrl: &IterationControl,
) -> Result<GraftOutcome> {
    let init = GaussianFactorSet::standard(emissions.len());
    graft_from(emissions, params, ctrl, init)
}

/// Runs the grafting loop from caller-supplied factors (used to warm-start
/// repeated fits over the same emission times).
pub fn graft_from(
    emissions: &[EmissionTriplet],
    params: &KernelParams,
    ctrl: &IterationControl,
    init: GaussianFactorSet,
) -> Result<GraftOutcome> {
    let n = emissions.len();
    if n == 0 {
        return Err(Error::NoEmissions);
    }
    if init.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} initial factors vs {} emissions",
            init.len(),
            n
        )));
    }
    let mut seen = std::collections::HashSet::with_capacity(n);
    for e in emissions {
        if !e.time.is_finite() {
            return Err(Error::NonFinite(format!("emission time {}", e.time)));
        }
        if !seen.insert(e.time.to_bits()) {
            return Err(Error::CoincidentTimes(e.time));
        }
    }
    let times: Vec<f64> = emissions.iter().map(|e| e.time).collect();
    let sigma1 = build_cov(&times, &times, params, true)?;

    // per-site log-density tables over the default grid, reused every sweep
    let step = (ctrl.grid.hi - ctrl.grid.lo) / (ctrl.grid.points - 1) as f64;
    let tables: Vec<Vec<f64>> = emissions
        .par_iter()
        .map(|e| {
            (0..ctrl.grid.points)
                .map(|k| e.log_density(ctrl.grid.lo + step * k as f64))
                .collect()
        })
        .collect();

    let mut factors = init;
    let mut productive = 0;
    let mut converged = false;

    for _ in 0..ctrl.max_iterations {
        let messages = compute_messages_fast(&factors, &sigma1, params)?;

        // Jacobi sweep: every site sees only the previous iteration's factors.
        let tilted: Vec<TiltedMoments> = (0..n)
            .into_par_iter()
            .map(|i| {
                if messages.valid[i] {
                    crate::emissions::tilted_moments_cached(
                        &emissions[i],
                        messages.means[i],
                        messages.variances[i],
                        &ctrl.grid,
                        Some(&tables[i]),
                    )
                } else {
                    // placeholder; update_factors ignores invalid sites
                    Ok(TiltedMoments {
                        mean: 0.0,
                        variance: 1.0,
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let mut next = update_factors(&messages, &tilted)?;

        if ctrl.damping > 0.0 {
            let d = ctrl.damping;
            for i in 0..n {
                let old_fb = factors.is_fallback(i);
                let new_fb = next.is_fallback(i);
                if !old_fb && !new_fb {
                    next.means[i] = (1.0 - d) * next.means[i] + d * factors.means[i];
                    next.variances[i] = (1.0 - d) * next.variances[i] + d * factors.variances[i];
                }
            }
        }

        let mut delta = 0.0f64;
        for i in 0..n {
            if next.is_fallback(i) {
                continue;
            }
            delta = delta
                .max((next.means[i] - factors.means[i]).abs())
                .max((next.variances[i] - factors.variances[i]).abs());
        }
        factors = next;
        if delta < ctrl.tolerance {
            converged = true;
            break;
        }
        productive += 1;
    }

    Ok(GraftOutcome {
        factors,
        iterations: productive,
        converged,
    })
}
