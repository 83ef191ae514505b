//! Synthetic data: ability curves from Latin-hypercube endpoints filled in by
//! a Gaussian-process bridge, randomly drawn items, and sampled responses.

use curvfife::kernel::{build_cov, KernelParams};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::irf::{ItemModel, ThreePl};
use crate::records::ResponseRecord;

/// Mean of the bridge process. Curves live in the unit interval, so the
/// bridge reverts to its midpoint between the conditioned endpoints.
const BRIDGE_MEAN: f64 = 0.5;

const MAX_REJECTIONS: usize = 100_000;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_students: usize,
    pub m_items: usize,
    /// Time scale of the generating RBF covariance.
    pub gen_bandwidth: f64,
    /// Amplitude of the generating RBF covariance.
    pub gen_amplitude: f64,
    /// Resolution of the dense grid the true curves are sampled on.
    pub grid_points: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(n_students: usize, m_items: usize, seed: u64) -> Self {
        SynthConfig {
            n_students,
            m_items,
            gen_bandwidth: 0.19,
            gen_amplitude: 0.6,
            grid_points: 1001,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_students == 0 || self.m_items == 0 {
            return Err(Error::InvalidConfig(
                "need at least one student and one item".into(),
            ));
        }
        if !(self.gen_bandwidth > 0.0 && self.gen_amplitude > 0.0) {
            return Err(Error::InvalidConfig(
                "generator bandwidth and amplitude must be > 0".into(),
            ));
        }
        if self.grid_points < 3 {
            return Err(Error::InvalidConfig("grid needs at least 3 points".into()));
        }
        Ok(())
    }
}

/// True ability curves on a dense common grid over `[0, 1]`.
#[derive(Debug, Clone)]
pub struct TrueCurves {
    pub grid: Vec<f64>,
    pub curves: Vec<Vec<f64>>,
}

impl TrueCurves {
    /// Linear interpolation of curve `i` at time `t` (clamped to the grid).
    pub fn value(&self, i: usize, t: f64) -> f64 {
        let grid = &self.grid;
        let vals = &self.curves[i];
        if t <= grid[0] {
            return vals[0];
        }
        if t >= grid[grid.len() - 1] {
            return vals[vals.len() - 1];
        }
        let j = grid.partition_point(|&g| g <= t) - 1;
        let w = (t - grid[j]) / (grid[j + 1] - grid[j]);
        vals[j] * (1.0 - w) + vals[j + 1] * w
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent per-entity seeds from a master seed: stream 0 = endpoints,
/// 1 = per-curve bridge draws, 2 = items, 3 = per-student responses.
pub(crate) fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream.wrapping_add(splitmix64(index))))
}

fn standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    let u: f64 = rng.random::<f64>().max(1e-300);
    let v: f64 = rng.random();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

/// Latin hypercube sample of the unit square: each coordinate is stratified
/// into `n` equal bins hit exactly once, paired by independent permutations.
fn lhs_endpoints(n: usize, rng: &mut ChaCha12Rng) -> Vec<(f64, f64)> {
    let mut perm_a: Vec<usize> = (0..n).collect();
    let mut perm_b: Vec<usize> = (0..n).collect();
    perm_a.shuffle(rng);
    perm_b.shuffle(rng);
    (0..n)
        .map(|i| {
            let a = (perm_a[i] as f64 + rng.random::<f64>()) / n as f64;
            let b = (perm_b[i] as f64 + rng.random::<f64>()) / n as f64;
            (a, b)
        })
        .collect()
}

struct Bridge {
    /// Interior conditional mean coefficients against (endpoints - mean).
    gain: DMatrix<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
}

/// Exact Gaussian conditioning of the dense-grid process on the two endpoint
/// values, factored once and reused for every curve and rejection attempt.
fn build_bridge(grid: &[f64], config: &SynthConfig) -> Result<Bridge> {
    let interior: Vec<f64> = grid[1..grid.len() - 1].to_vec();
    let ends = [grid[0], *grid.last().unwrap()];
    for base_jitter in [1e-8, 1e-7, 1e-6, 1e-5, 1e-4] {
        let params = KernelParams::new(config.gen_bandwidth, config.gen_amplitude, base_jitter)
            .map_err(curvfife::Error::from)?;
        let sigma_ii = build_cov(&interior, &interior, &params, true).map_err(curvfife::Error::from)?;
        let sigma_ie = build_cov(&interior, &ends, &params, false).map_err(curvfife::Error::from)?;
        let sigma_ee = build_cov(&ends, &ends, &params, true).map_err(curvfife::Error::from)?;
        let Some(ee_inv) = sigma_ee.try_inverse() else {
            continue;
        };
        let gain = &sigma_ie * ee_inv;
        let cond = &sigma_ii - &gain * sigma_ie.transpose();
        if let Some(chol) = Cholesky::new(cond) {
            return Ok(Bridge { gain, chol });
        }
    }
    Err(Error::InvalidConfig(
        "generator covariance could not be factored even with maximal jitter".into(),
    ))
}

/// Draws the true ability curves: LHS endpoints, GP bridge interiors,
/// rejection until the whole curve lies inside `[0, 1]`.
pub fn sample_curves(config: &SynthConfig) -> Result<TrueCurves> {
    config.validate()?;
    let g = config.grid_points;
    let grid: Vec<f64> = (0..g).map(|k| k as f64 / (g - 1) as f64).collect();

    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, 0, 0));
    let endpoints = lhs_endpoints(config.n_students, &mut rng);
    let bridge = build_bridge(&grid, config)?;
    let l = bridge.chol.l();

    let curves: Vec<Vec<f64>> = (0..config.n_students)
        .into_par_iter()
        .map(|i| {
            let (start, end) = endpoints[i];
            let shift = DVector::from_vec(vec![start - BRIDGE_MEAN, end - BRIDGE_MEAN]);
            let mean = &bridge.gain * shift;
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, 1, i as u64));
            for _ in 0..MAX_REJECTIONS {
                let z = DVector::from_fn(g - 2, |_, _| standard_normal(&mut rng));
                let interior = &mean + &l * z;
                if interior
                    .iter()
                    .all(|&v| (BRIDGE_MEAN + v >= 0.0) && (BRIDGE_MEAN + v <= 1.0))
                {
                    let mut curve = Vec::with_capacity(g);
                    curve.push(start);
                    curve.extend(interior.iter().map(|&v| BRIDGE_MEAN + v));
                    curve.push(end);
                    return Ok(curve);
                }
            }
            Err(Error::RejectionExhausted {
                attempts: MAX_REJECTIONS,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(TrueCurves { grid, curves })
}

/// Draws the item bank: `b ~ U[0,1]`, `c ~ U[0, 0.2]`, `a = exp(0.2 Z)`.
pub fn sample_items(config: &SynthConfig) -> Vec<(String, ItemModel)> {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, 2, 0));
    (0..config.m_items)
        .map(|j| {
            let a = (0.2 * standard_normal(&mut rng)).exp();
            let mut b: f64 = rng.random();
            while !(b > 0.0 && b < 1.0) {
                b = rng.random();
            }
            let c = 0.2 * rng.random::<f64>();
            let item = ItemModel::ProbitThreePl(ThreePl::new(a, b, c).expect("sampled params"));
            (item_id(j), item)
        })
        .collect()
}

/// Response times uniformly spread over `[0, 1]`, one per item.
pub fn uniform_times(m: usize) -> Vec<f64> {
    if m == 1 {
        return vec![0.0];
    }
    (0..m).map(|j| j as f64 / (m - 1) as f64).collect()
}

pub fn student_id(i: usize) -> String {
    format!("s{i:04}")
}

pub fn item_id(j: usize) -> String {
    format!("i{j:04}")
}

/// Samples every response `R_ij` from the item's IRF at the student's true
/// ability at time `times[j]`.
pub fn sample_responses(
    curves: &TrueCurves,
    items: &[(String, ItemModel)],
    times: &[f64],
    seed: u64,
) -> Result<Vec<ResponseRecord>> {
    if times.len() != items.len() {
        return Err(Error::InvalidConfig(format!(
            "{} response times for {} items",
            times.len(),
            items.len()
        )));
    }
    let per_student: Vec<Vec<ResponseRecord>> = (0..curves.curves.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 3, i as u64));
            items
                .iter()
                .zip(times)
                .map(|((item_name, item), &t)| {
                    let theta = curves.value(i, t);
                    let response = sample_response(item, theta, &mut rng)?;
                    Ok(ResponseRecord {
                        student: student_id(i),
                        item: item_name.clone(),
                        time: t,
                        response,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_student.into_iter().flatten().collect())
}

fn sample_response(item: &ItemModel, theta: f64, rng: &mut ChaCha12Rng) -> Result<i64> {
    match item {
        ItemModel::ThreePl(_) | ItemModel::ProbitThreePl(_) => {
            let p = item.response_prob(theta, 1)?;
            Ok(if rng.random::<f64>() < p { 1 } else { 0 })
        }
        ItemModel::Golf(g) => {
            let probs = crate::irf::golf_probs(theta, g);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (k, s) in g.support().enumerate() {
                acc += probs[k];
                if u < acc {
                    return Ok(s);
                }
            }
            Ok(g.s_max())
        }
    }
}
