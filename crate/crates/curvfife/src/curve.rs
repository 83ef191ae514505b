//! Public curve-fitting API: fitting, predictive queries, confidence bands in
//! the original space, and cross-validated bandwidth selection.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::emissions::{collapse_coincident, log_expected_density, EmissionTriplet};
use crate::error::{Error, Result};
use crate::grafting::{graft_from, GaussianFactorSet, IterationControl};
use crate::kernel::{self, predictive, KernelParams};
use crate::transform::Transform;

/// A fitted curve distribution: a Gaussian process posterior in fitted space
/// that answers mean/covariance queries at arbitrary time sets, plus the
/// transform mapping results back to the original space.
#[derive(Debug, Clone)]
pub struct CurveDistribution {
    emission_times: Vec<f64>,
    factors: GaussianFactorSet,
    params: KernelParams,
    transform: Transform,
    converged: bool,
    iterations: usize,
}

/// Per-time summary of the fitted curve in its original space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalBand {
    pub time: f64,
    pub median: f64,
    pub lower70: f64,
    pub upper70: f64,
}

impl CurveDistribution {
    /// Posterior mean vector and covariance matrix at `query_times`, in
    /// fitted space.
    pub fn query(&self, query_times: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        predictive(
            &self.emission_times,
            query_times,
            &self.factors.means,
            &self.factors.variances,
            &self.params,
        )
    }

    /// Marginal mean and variance at a single time, in fitted space.
    pub fn marginal(&self, time: f64) -> Result<(f64, f64)> {
        let (mu, sigma) = self.query(&[time])?;
        Ok((mu[0], sigma[(0, 0)]))
    }

    /// Marginal means and variances at each time, in fitted space. Avoids
    /// forming the full covariance matrix.
    pub fn marginal_moments(&self, query_times: &[f64]) -> Result<Vec<(f64, f64)>> {
        kernel::predictive_marginals(
            &self.emission_times,
            query_times,
            &self.factors.means,
            &self.factors.variances,
            &self.params,
        )
    }

    /// Median and 70% (one standard deviation) band in the original space.
    /// The median maps through the inverse transform exactly; the band
    /// endpoints are the images of `mean +- std`.
    pub fn marginals(&self, query_times: &[f64]) -> Result<Vec<MarginalBand>> {
        let moments = self.marginal_moments(query_times)?;
        Ok(query_times
            .iter()
            .zip(moments)
            .map(|(&time, (mean, var))| {
                let std = var.max(0.0).sqrt();
                MarginalBand {
                    time,
                    median: self.transform.inverse(mean),
                    lower70: self.transform.inverse(mean - std),
                    upper70: self.transform.inverse(mean + std),
                }
            })
            .collect())
    }

    pub fn emission_times(&self) -> &[f64] {
        &self.emission_times
    }

    pub fn factors(&self) -> &GaussianFactorSet {
        &self.factors
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn transform(&self) -> &Transform {
        &self.transform
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }
}

/// Fits a curve distribution to emissions whose log-densities are expressed
/// in the fitted (transformed) space. Coincident emission times are collapsed
/// into composite emissions first. Requires unit amplitude; non-convergence
/// is reported through [`CurveDistribution::converged`], not as an error.
pub fn fit(
    emissions: &[EmissionTriplet],
    params: &KernelParams,
    transform: Transform,
    ctrl: &IterationControl,
) -> Result<CurveDistribution> {
    fit_impl(emissions, params, transform, ctrl, None)
}

/// Like [`fit`], but starts the grafting loop from previously fitted factors
/// (the factor count must match the collapsed emission count).
pub fn fit_warm(
    emissions: &[EmissionTriplet],
    params: &KernelParams,
    transform: Transform,
    ctrl: &IterationControl,
    init: &GaussianFactorSet,
) -> Result<CurveDistribution> {
    fit_impl(emissions, params, transform, ctrl, Some(init))
}

fn fit_impl(
    emissions: &[EmissionTriplet],
    params: &KernelParams,
    transform: Transform,
    ctrl: &IterationControl,
    init: Option<&GaussianFactorSet>,
) -> Result<CurveDistribution> {
    params.validate()?;
    if params.amplitude != 1.0 {
        return Err(Error::AmplitudeNotUnit(params.amplitude));
    }
    if emissions.is_empty() {
        return Err(Error::NoEmissions);
    }
    let collapsed = collapse_coincident(emissions);
    let init = match init {
        Some(f) => f.clone(),
        None => GaussianFactorSet::standard(collapsed.len()),
    };
    let outcome = graft_from(&collapsed, params, ctrl, init)?;
    Ok(CurveDistribution {
        emission_times: collapsed.iter().map(|e| e.time).collect(),
        factors: outcome.factors,
        params: *params,
        transform,
        converged: outcome.converged,
        iterations: outcome.iterations,
    })
}

/// Outcome of k-fold bandwidth selection: the chosen bandwidth and the mean
/// held-out log-likelihood for every candidate (in the input order).
#[derive(Debug, Clone)]
pub struct BandwidthSelection {
    pub chosen: f64,
    pub scores: Vec<(f64, f64)>,
}

/// Candidate grid used when the caller has no prior knowledge: 8 log-spaced
/// bandwidths between `span/50` and `span/2`.
pub fn default_candidates(emissions: &[EmissionTriplet]) -> Vec<f64> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for e in emissions {
        lo = lo.min(e.time);
        hi = hi.max(e.time);
    }
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let (a, b) = ((span / 50.0).ln(), (span / 2.0).ln());
    (0..8)
        .map(|i| (a + (b - a) * i as f64 / 7.0).exp())
        .collect()
}

/// Chooses the bandwidth by k-fold cross validation: emissions are shuffled
/// with the seed and dealt round-robin into k folds; each candidate is scored
/// by the mean, over all held-out emissions, of the log expected density
/// under the marginal fitted from the remaining folds. Ties go to the
/// smallest candidate.
pub fn select_bandwidth(
    emissions: &[EmissionTriplet],
    candidates: &[f64],
    k: usize,
    params: &KernelParams,
    ctrl: &IterationControl,
    seed: u64,
) -> Result<BandwidthSelection> {
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    if k < 2 {
        return Err(Error::KTooSmall(k));
    }
    let n = emissions.len();
    if n < k {
        return Err(Error::KTooLarge { k, n });
    }
    for (i, &h) in candidates.iter().enumerate() {
        params.with_bandwidth(h).map_err(|_| {
            Error::InvalidKernelParams(format!("candidate {i} has bandwidth {h}"))
        })?;
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let folds: Vec<Vec<usize>> = (0..k)
        .map(|f| order.iter().skip(f).step_by(k).copied().collect())
        .collect();

    let jobs: Vec<(usize, usize)> = (0..candidates.len())
        .flat_map(|c| (0..k).map(move |f| (c, f)))
        .collect();
    let fold_scores: Vec<(usize, f64, usize)> = jobs
        .par_iter()
        .map(|&(c, f)| {
            let h = candidates[c];
            let p = params.with_bandwidth(h)?;
            let train: Vec<EmissionTriplet> = folds
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != f)
                .flat_map(|(_, fold)| fold.iter().map(|&j| emissions[j].clone()))
                .collect();
            let dist = fit(&train, &p, Transform::Identity, ctrl)?;
            let held: Vec<&EmissionTriplet> = folds[f].iter().map(|&j| &emissions[j]).collect();
            let times: Vec<f64> = held.iter().map(|e| e.time).collect();
            let moments = dist.marginal_moments(&times)?;
            let mut total = 0.0;
            for (e, (mean, var)) in held.iter().zip(moments) {
                total += log_expected_density(e, mean, var, &ctrl.grid)?;
            }
            Ok((c, total, held.len()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut sums = vec![0.0f64; candidates.len()];
    let mut counts = vec![0usize; candidates.len()];
    for (c, total, cnt) in fold_scores {
        sums[c] += total;
        counts[c] += cnt;
    }
    let scores: Vec<(f64, f64)> = candidates
        .iter()
        .zip(sums.iter().zip(&counts))
        .map(|(&h, (&s, &c))| (h, s / c as f64))
        .collect();

    let mut ranked: Vec<(f64, f64)> = scores.clone();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut chosen = ranked[0];
    for &(h, s) in &ranked[1..] {
        if s > chosen.1 {
            chosen = (h, s);
        }
    }

    Ok(BandwidthSelection {
        chosen: chosen.0,
        scores,
    })
}
