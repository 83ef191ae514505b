//! Transforms between the curve's original space and the fitted space.
//!
//! Fitting assumes the curve marginally follows a standard normal at every
//! time. A curve with a different range (e.g. a probability in `[0, 1]`) is
//! handled by fitting `Q(y)` for a strictly increasing map `Q` and mapping
//! results back through `Q^{-1}`.

use std::fmt;
use std::sync::Arc;

use statrs::function::erf::{erf_inv, erfc};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_74;

/// Standard normal CDF, accurate in both tails.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Standard normal survival function `1 - Phi(x)`.
pub fn norm_sf(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

/// Log of the standard normal density.
pub fn log_norm_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Log of the standard normal CDF. Goes to `-inf` once `erfc` underflows
/// (around x = -37), which downstream quadrature treats as zero mass.
pub fn log_norm_cdf(x: f64) -> f64 {
    (0.5 * erfc(-x / SQRT_2)).ln()
}

/// Log of `1 - Phi(x)`.
pub fn log_norm_sf(x: f64) -> f64 {
    (0.5 * erfc(x / SQRT_2)).ln()
}

/// Standard normal quantile function.
///
/// Solves in the smaller tail (where the CDF retains full relative
/// precision): `erf_inv` seeds two Newton steps against the erfc-based
/// survival function, making `norm_cdf(probit(p)) = p` to near machine
/// precision.
pub fn probit(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probit requires p in (0, 1), got {p}");
    let (q, upper) = if p <= 0.5 { (p, false) } else { (1.0 - p, true) };
    // q = Phi(-t) with t >= 0
    let mut t = -SQRT_2 * erf_inv(2.0 * q - 1.0);
    if !t.is_finite() {
        // erf_inv saturates for extreme q; asymptotic seed for the tail
        let l = -q.ln();
        t = (2.0 * l - (2.0 * std::f64::consts::PI * 2.0 * l).ln()).max(0.0).sqrt();
    }
    for _ in 0..2 {
        let pdf = norm_pdf(t);
        if pdf < 1e-300 {
            break;
        }
        t += (norm_sf(t) - q) / pdf;
    }
    if upper {
        t
    } else {
        -t
    }
}

type TransformFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Strictly increasing map `Q` from the curve's original space to the fitted
/// space, with its inverse.
#[derive(Clone)]
pub enum Transform {
    /// Fit the curve values as they are.
    Identity,
    /// `Q = probit`: original values in `(0, 1)`, fitted values on the real
    /// line with a standard normal marginal under a uniform original prior.
    Probit,
    /// User-supplied pair; `forward` must be strictly increasing and
    /// `inverse` its inverse.
    Custom {
        name: String,
        forward: TransformFn,
        inverse: TransformFn,
    },
}

impl Transform {
    pub fn custom(
        name: impl Into<String>,
        forward: impl Fn(f64) -> f64 + Send + Sync + 'static,
        inverse: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Transform::Custom {
            name: name.into(),
            forward: Arc::new(forward),
            inverse: Arc::new(inverse),
        }
    }

    /// Original space -> fitted space.
    pub fn forward(&self, y: f64) -> f64 {
        match self {
            Transform::Identity => y,
            Transform::Probit => probit(y),
            Transform::Custom { forward, .. } => forward(y),
        }
    }

    /// Fitted space -> original space.
    pub fn inverse(&self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::Probit => norm_cdf(x),
            Transform::Custom { inverse, .. } => inverse(x),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Transform::Identity => "identity",
            Transform::Probit => "probit",
            Transform::Custom { name, .. } => name,
        }
    }
}

impl fmt::Debug for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Transform({})", self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_reference_values() {
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((norm_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-10);
        assert!((norm_cdf(-1.0) - 0.158_655_253_931_457_05).abs() < 1e-10);
        // deep tail stays positive and finite in log space
        assert!(log_norm_cdf(-30.0).is_finite());
        assert!((log_norm_cdf(-30.0) - (-454.32)).abs() < 0.5);
    }

    #[test]
    fn probit_round_trip_is_tight() {
        // original -> fitted -> original, over the original space
        for i in 1..1000 {
            let y = i as f64 / 1000.0;
            let r = norm_cdf(probit(y));
            assert!((r - y).abs() < 1e-10, "round trip failed at y = {y}: {r}");
        }
        // fitted -> original -> fitted in the well-conditioned region
        for i in 0..=60 {
            let x = -3.0 + 0.1 * i as f64;
            let r = probit(norm_cdf(x));
            assert!((r - x).abs() < 1e-10, "round trip failed at x = {x}: {r}");
        }
    }

    #[test]
    fn transform_round_trips() {
        let probit_t = Transform::Probit;
        for i in 1..100 {
            let y = i as f64 / 100.0;
            let x = probit_t.forward(y);
            assert!((probit_t.inverse(x) - y).abs() < 1e-10);
        }
        let logit = Transform::custom(
            "logit",
            |y: f64| (y / (1.0 - y)).ln(),
            |x: f64| 1.0 / (1.0 + (-x).exp()),
        );
        for i in 1..100 {
            let y = i as f64 / 100.0;
            assert!((logit.inverse(logit.forward(y)) - y).abs() < 1e-10);
        }
    }

    #[test]
    fn probit_known_quantiles() {
        assert!((probit(0.5)).abs() < 1e-14);
        assert!((probit(0.841_344_746_068_542_9) - 1.0).abs() < 1e-10);
        assert!((probit(0.975) - 1.959_963_984_540_054).abs() < 1e-9);
    }
}
