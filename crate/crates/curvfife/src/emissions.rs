//! Emission triplets and grid-based moment extraction of tilted marginals.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::transform::{log_norm_cdf, log_norm_sf, Transform};

/// Quadrature grid for tilted-marginal moments. The default covers `[-6, 6]`
/// with 1201 uniformly spaced points; when a Gaussian message extends past
/// that range the grid is widened to the union of the default range and
/// `mean +- 6 std` (same point count, wider spacing).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub points: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            points: 1201,
            lo: -6.0,
            hi: 6.0,
        }
    }
}

impl GridSpec {
    pub fn new(points: usize, lo: f64, hi: f64) -> Result<Self> {
        if points < 3 {
            return Err(Error::InvalidGrid(format!(
                "need at least 3 points, got {points}"
            )));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidGrid(format!("bad range [{lo}, {hi}]")));
        }
        Ok(GridSpec { points, lo, hi })
    }

    /// Grid bounds for a message `N(mean, var)`: the default range unless the
    /// message reaches past it. The containment test uses 5 standard
    /// deviations (truncating under 3e-7 of the message mass, negligible at
    /// the quadrature tolerance); a message that fails it gets the union of
    /// the default range and `mean +- 6 std`.
    fn effective_bounds(&self, msg_mean: f64, msg_var: f64) -> (f64, f64) {
        let sd = msg_var.sqrt();
        if msg_mean - 5.0 * sd >= self.lo && msg_mean + 5.0 * sd <= self.hi {
            (self.lo, self.hi)
        } else {
            (
                self.lo.min(msg_mean - 6.0 * sd),
                self.hi.max(msg_mean + 6.0 * sd),
            )
        }
    }

    /// True when [`GridSpec::effective_bounds`] keeps the default range.
    pub(crate) fn default_range_applies(&self, msg_mean: f64, msg_var: f64) -> bool {
        let sd = msg_var.sqrt();
        msg_mean - 5.0 * sd >= self.lo && msg_mean + 5.0 * sd <= self.hi
    }
}

type LogDensityFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// One observation: the time it was made, an opaque payload describing what
/// was observed, and the log-likelihood of that observation as a function of
/// the curve value (in fitted space) at that time.
#[derive(Clone)]
pub struct EmissionTriplet {
    pub time: f64,
    pub payload: String,
    log_density: LogDensityFn,
}

impl fmt::Debug for EmissionTriplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EmissionTriplet(t={}, {})", self.time, self.payload)
    }
}

impl EmissionTriplet {
    pub fn new(
        time: f64,
        payload: impl Into<String>,
        log_density: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        EmissionTriplet {
            time,
            payload: payload.into(),
            log_density: Arc::new(log_density),
        }
    }

    pub fn log_density(&self, y: f64) -> f64 {
        (self.log_density)(y)
    }

    /// A polled yes/no answer about a probability curve. In the original
    /// `[0, 1]` space the likelihood of "yes" is the curve value itself; the
    /// returned log-density is expressed in the fitted space of `transform`.
    pub fn bernoulli(time: f64, yes: bool, transform: &Transform) -> Self {
        let payload = if yes { "bernoulli:1" } else { "bernoulli:0" };
        match transform {
            Transform::Probit => {
                if yes {
                    EmissionTriplet::new(time, payload, log_norm_cdf)
                } else {
                    EmissionTriplet::new(time, payload, log_norm_sf)
                }
            }
            _ => {
                let t = transform.clone();
                EmissionTriplet::new(time, payload, move |x| {
                    let p = t.inverse(x);
                    let p = if yes { p } else { 1.0 - p };
                    if p > 0.0 && p <= 1.0 {
                        p.ln()
                    } else {
                        f64::NEG_INFINITY
                    }
                })
            }
        }
    }

    /// A direct noisy reading of the fitted-space curve value.
    pub fn gaussian(time: f64, mean: f64, std: f64) -> Self {
        let var = std * std;
        let log_norm = -0.5 * (2.0 * std::f64::consts::PI * var).ln();
        EmissionTriplet::new(time, format!("gaussian:{mean}:{std}"), move |y| {
            let d = y - mean;
            log_norm - 0.5 * d * d / var
        })
    }

    /// An emission carrying no information about the curve.
    pub fn uniform(time: f64) -> Self {
        EmissionTriplet::new(time, "uniform", |_| 0.0)
    }
}

/// Merges emissions sharing a bitwise-equal time into one composite emission
/// whose log-density is the sum of the originals (a product of factors over
/// the same variable). Input order of distinct times is preserved.
pub fn collapse_coincident(emissions: &[EmissionTriplet]) -> Vec<EmissionTriplet> {
    let mut out: Vec<EmissionTriplet> = Vec::with_capacity(emissions.len());
    let mut index_of: std::collections::HashMap<u64, usize> = std::collections::HashMap::new();
    for e in emissions {
        match index_of.get(&e.time.to_bits()) {
            None => {
                index_of.insert(e.time.to_bits(), out.len());
                out.push(e.clone());
            }
            Some(&i) => {
                let a = out[i].log_density.clone();
                let b = e.log_density.clone();
                let payload = format!("{}+{}", out[i].payload, e.payload);
                out[i] = EmissionTriplet {
                    time: out[i].time,
                    payload,
                    log_density: Arc::new(move |y| a(y) + b(y)),
                };
            }
        }
    }
    out
}

/// Mean and variance of a tilted marginal `p_f(y) ~ f(y) N(mean, var; y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiltedMoments {
    pub mean: f64,
    pub variance: f64,
}

/// Moments of `f(y) * N(msg_mean, msg_var; y)` by trapezoidal quadrature on
/// the (possibly widened) grid. Densities are handled in log space with
/// max-subtraction, so adding a constant to the log-density cannot change the
/// result.
pub fn tilted_moments(
    emission: &EmissionTriplet,
    msg_mean: f64,
    msg_var: f64,
    grid: &GridSpec,
) -> Result<TiltedMoments> {
    tilted_moments_cached(emission, msg_mean, msg_var, grid, None)
}

/// [`tilted_moments`] with an optional precomputed table of the emission's
/// log-density over the default grid, used when the message stays within the
/// default range.
pub(crate) fn tilted_moments_cached(
    emission: &EmissionTriplet,
    msg_mean: f64,
    msg_var: f64,
    grid: &GridSpec,
    default_log_density: Option<&[f64]>,
) -> Result<TiltedMoments> {
    if !(msg_var.is_finite() && msg_var > 0.0) {
        return Err(Error::NonFinite(format!("message variance {msg_var}")));
    }
    if !msg_mean.is_finite() {
        return Err(Error::NonFinite(format!("message mean {msg_mean}")));
    }
    let (lo, hi) = grid.effective_bounds(msg_mean, msg_var);
    let n = grid.points;
    let step = (hi - lo) / (n - 1) as f64;
    let cached = match default_log_density {
        Some(t) if t.len() == n && grid.default_range_applies(msg_mean, msg_var) => Some(t),
        _ => None,
    };

    let mut ys = Vec::with_capacity(n);
    let mut logw = Vec::with_capacity(n);
    let mut max_lw = f64::NEG_INFINITY;
    for k in 0..n {
        let y = lo + step * k as f64;
        let lf = match cached {
            Some(t) => t[k],
            None => emission.log_density(y),
        };
        if lf.is_nan() {
            return Err(Error::NonFinite(format!("emission log-density at y={y}")));
        }
        let d = y - msg_mean;
        let lw = lf - 0.5 * d * d / msg_var;
        max_lw = max_lw.max(lw);
        ys.push(y);
        logw.push(lw);
    }
    if !max_lw.is_finite() {
        return Err(Error::EmissionIncompatible);
    }

    let trap = |k: usize| if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
    let mut mass = 0.0;
    let mut first = 0.0;
    for k in 0..n {
        let w = trap(k) * (logw[k] - max_lw).exp();
        mass += w;
        first += w * ys[k];
    }
    let mean = first / mass;
    let mut second = 0.0;
    for k in 0..n {
        let w = trap(k) * (logw[k] - max_lw).exp();
        let d = ys[k] - mean;
        second += w * d * d;
    }
    let variance = second / mass;
    if !(mean.is_finite() && variance.is_finite() && variance > 0.0) {
        return Err(Error::DegenerateTilted);
    }
    Ok(TiltedMoments { mean, variance })
}

/// `log E[f(y)]` with the expectation over `N(mean, var)`, self-normalized so
/// a constant emission scores exactly `log` of that constant.
pub fn log_expected_density(
    emission: &EmissionTriplet,
    mean: f64,
    var: f64,
    grid: &GridSpec,
) -> Result<f64> {
    if !(var.is_finite() && var > 0.0) {
        return Err(Error::NonFinite(format!("marginal variance {var}")));
    }
    let (lo, hi) = grid.effective_bounds(mean, var);
    let n = grid.points;
    let step = (hi - lo) / (n - 1) as f64;

    // log-sum-exp over the tilted and the bare Gaussian weights
    let mut max_t = f64::NEG_INFINITY;
    let mut max_g = f64::NEG_INFINITY;
    let mut terms = Vec::with_capacity(n);
    for k in 0..n {
        let y = lo + step * k as f64;
        let lf = emission.log_density(y);
        if lf.is_nan() {
            return Err(Error::NonFinite(format!("emission log-density at y={y}")));
        }
        let d = y - mean;
        let lg = -0.5 * d * d / var;
        max_t = max_t.max(lf + lg);
        max_g = max_g.max(lg);
        terms.push((lf, lg));
    }
    if !max_t.is_finite() {
        return Err(Error::EmissionIncompatible);
    }
    let trap = |k: usize| if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, (lf, lg)) in terms.iter().enumerate() {
        num += trap(k) * (lf + lg - max_t).exp();
        den += trap(k) * (lg - max_g).exp();
    }
    Ok(max_t + num.ln() - (max_g + den.ln()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::norm_cdf;
    use approx::assert_abs_diff_eq;

    fn std_normal_emission(time: f64) -> EmissionTriplet {
        EmissionTriplet::gaussian(time, 0.0, 1.0)
    }

    #[test]
    fn gaussian_times_message_is_half_variance() {
        let e = std_normal_emission(0.0);
        let m = tilted_moments(&e, 0.0, 1.0, &GridSpec::default()).unwrap();
        assert_abs_diff_eq!(m.mean, 0.0, epsilon = 1e-4);
        assert_abs_diff_eq!(m.variance, 0.5, epsilon = 1e-4);
    }

    #[test]
    fn uniform_emission_returns_message_moments() {
        let e = EmissionTriplet::uniform(0.0);
        let m = tilted_moments(&e, 0.3, 0.7, &GridSpec::default()).unwrap();
        assert_abs_diff_eq!(m.mean, 0.3, epsilon = 1e-4);
        assert_abs_diff_eq!(m.variance, 0.7, epsilon = 1e-4);
    }

    #[test]
    fn probit_yes_matches_dense_grid_oracle() {
        let e = EmissionTriplet::bernoulli(0.0, true, &Transform::Probit);
        let m = tilted_moments(&e, 0.0, 1.0, &GridSpec::default()).unwrap();

        // 10^6-point quadrature of Phi(y) N(0, 1; y)
        let n = 1_000_001usize;
        let (lo, hi) = (-8.0f64, 8.0f64);
        let step = (hi - lo) / (n - 1) as f64;
        let mut mass = 0.0;
        let mut first = 0.0;
        let mut second = 0.0;
        for k in 0..n {
            let y = lo + step * k as f64;
            let trap = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
            let w = trap * norm_cdf(y) * (-0.5 * y * y).exp();
            mass += w;
            first += w * y;
        }
        let mean = first / mass;
        for k in 0..n {
            let y = lo + step * k as f64;
            let trap = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
            let w = trap * norm_cdf(y) * (-0.5 * y * y).exp();
            second += w * (y - mean) * (y - mean);
        }
        let var = second / mass;
        assert_abs_diff_eq!(m.mean, mean, epsilon = 1e-4);
        assert_abs_diff_eq!(m.variance, var, epsilon = 1e-4);
    }

    #[test]
    fn normalization_independence() {
        let e1 = EmissionTriplet::new(0.0, "raw", |y| -0.3 * y * y + 0.1 * y);
        let e2 = EmissionTriplet::new(0.0, "shifted", |y| -0.3 * y * y + 0.1 * y + 123.456);
        let m1 = tilted_moments(&e1, 0.2, 0.9, &GridSpec::default()).unwrap();
        let m2 = tilted_moments(&e2, 0.2, 0.9, &GridSpec::default()).unwrap();
        assert_abs_diff_eq!(m1.mean, m2.mean, epsilon = 1e-13);
        assert_abs_diff_eq!(m1.variance, m2.variance, epsilon = 1e-13);
    }

    #[test]
    fn grid_recenters_for_distant_messages() {
        let e = EmissionTriplet::uniform(0.0);
        let m = tilted_moments(&e, 20.0, 0.5, &GridSpec::default()).unwrap();
        assert_abs_diff_eq!(m.mean, 20.0, epsilon = 1e-3);
        assert_abs_diff_eq!(m.variance, 0.5, epsilon = 1e-3);
    }

    #[test]
    fn log_concave_emissions_shrink_variance() {
        let grid = GridSpec::default();
        for &(mean, var) in &[(0.0, 1.0), (-1.5, 0.4), (2.0, 2.5)] {
            for yes in [true, false] {
                let e = EmissionTriplet::bernoulli(0.0, yes, &Transform::Probit);
                let m = tilted_moments(&e, mean, var, &grid).unwrap();
                assert!(
                    m.variance <= var + 1e-9,
                    "bernoulli({yes}) under N({mean},{var}): gamma = {}",
                    m.variance
                );
            }
            // 3PL with zero guessing is log-concave in the fitted value
            let e = EmissionTriplet::new(0.0, "3pl", |y| -(1.0 + (-1.3 * (y - 0.2)).exp()).ln());
            let m = tilted_moments(&e, mean, var, &grid).unwrap();
            assert!(m.variance <= var + 1e-9);
        }
    }

    #[test]
    fn incompatible_emission_errors() {
        let e = EmissionTriplet::new(0.0, "nowhere", |_| f64::NEG_INFINITY);
        match tilted_moments(&e, 0.0, 1.0, &GridSpec::default()) {
            Err(Error::EmissionIncompatible) => {}
            other => panic!("expected EmissionIncompatible, got {other:?}"),
        }
    }

    #[test]
    fn bernoulli_densities() {
        let id = Transform::Identity;
        let yes = EmissionTriplet::bernoulli(0.0, true, &id);
        let no = EmissionTriplet::bernoulli(0.0, false, &id);
        assert_abs_diff_eq!(yes.log_density(0.7).exp(), 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(no.log_density(0.7).exp(), 0.3, epsilon = 1e-12);
        assert_eq!(yes.log_density(-0.2), f64::NEG_INFINITY);

        let probit_yes = EmissionTriplet::bernoulli(0.0, true, &Transform::Probit);
        assert_abs_diff_eq!(probit_yes.log_density(0.0).exp(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn collapse_sums_log_densities() {
        let a = EmissionTriplet::gaussian(0.5, 1.0, 1.0);
        let b = EmissionTriplet::gaussian(0.5, -1.0, 2.0);
        let c = EmissionTriplet::gaussian(0.25, 0.0, 1.0);
        let out = collapse_coincident(&[a.clone(), b.clone(), c.clone()]);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].time, 0.5);
        assert_abs_diff_eq!(
            out[0].log_density(0.3),
            a.log_density(0.3) + b.log_density(0.3),
            epsilon = 1e-14
        );
        assert_eq!(out[1].time, 0.25);
    }

    #[test]
    fn expected_density_of_constant_is_exact() {
        let e = EmissionTriplet::uniform(0.0);
        let s = log_expected_density(&e, 0.7, 1.3, &GridSpec::default()).unwrap();
        assert_abs_diff_eq!(s, 0.0, epsilon = 1e-14);

        let half = EmissionTriplet::new(0.0, "half", |_| 0.5f64.ln());
        let s = log_expected_density(&half, -0.2, 0.8, &GridSpec::default()).unwrap();
        assert_abs_diff_eq!(s, 0.5f64.ln(), epsilon = 1e-14);
    }
}
