//! Shared helpers for the acceptance suite: independent oracles and
//! synthetic-scenario builders. Everything here recomputes results through
//! routes distinct from the library's own (explicit inverses, dense grids,
//! whitened brute-force quadrature).

#![allow(dead_code)]

use curvfife::emissions::EmissionTriplet;
use curvfife::kernel::{build_cov, KernelParams};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use dynaesti::irf::{IrfFamily, ItemModel, ThreePl};
use dynaesti::optim::{maximize_bounded, Bounds, OptimOptions};
use dynaesti::records::{Dataset, ResponseRecord};

pub fn standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    let u: f64 = rng.random::<f64>().max(1e-300);
    let v: f64 = rng.random();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

/// Exact heteroscedastic GP regression by explicit inversion: the closed
/// form the grafted posterior must reproduce for Gaussian emissions.
pub fn gp_regression_oracle(
    times: &[f64],
    query: &[f64],
    obs: &DVector<f64>,
    noise_vars: &DVector<f64>,
    params: &KernelParams,
) -> (DVector<f64>, DMatrix<f64>) {
    let sigma1 = build_cov(times, times, params, true).unwrap();
    let sigma2 = build_cov(query, query, params, false).unwrap();
    let sigma12 = build_cov(times, query, params, false).unwrap();
    let mut noisy = sigma1;
    for i in 0..times.len() {
        noisy[(i, i)] += noise_vars[i];
    }
    let inv = noisy.try_inverse().expect("oracle inverse");
    let mu = sigma12.transpose() * &inv * obs;
    let sigma = sigma2 - sigma12.transpose() * &inv * sigma12;
    (mu, sigma)
}

/// Brute-force marginal means/stds of `N(0, Sigma1) prod f_i(y_i)` by
/// exhaustive quadrature in whitened coordinates (`Y = L z`), so arbitrary
/// site correlation poses no resolution problem.
pub fn whitened_quadrature_posterior(
    emissions: &[EmissionTriplet],
    params: &KernelParams,
    grid_per_dim: usize,
) -> Vec<(f64, f64)> {
    let n = emissions.len();
    assert!(n <= 4, "oracle is exponential in n");
    let times: Vec<f64> = emissions.iter().map(|e| e.time).collect();
    let sigma1 = build_cov(&times, &times, params, true).unwrap();
    let l = nalgebra::Cholesky::new(sigma1).expect("prior cholesky").l();

    let g = grid_per_dim;
    let (lo, hi) = (-6.0f64, 6.0f64);
    let step = (hi - lo) / (g - 1) as f64;
    let zs: Vec<f64> = (0..g).map(|k| lo + step * k as f64).collect();

    let total = g.pow(n as u32);
    let mut mass = 0.0f64;
    let mut first = vec![0.0f64; n];
    let mut second = vec![0.0f64; n];
    let mut z = vec![0.0f64; n];
    let mut y = vec![0.0f64; n];
    for flat in 0..total {
        let mut rem = flat;
        let mut lw = 0.0;
        let mut trap = 1.0;
        for zd in z.iter_mut().take(n) {
            let k = rem % g;
            rem /= g;
            *zd = zs[k];
            lw -= 0.5 * *zd * *zd;
            if k == 0 || k == g - 1 {
                trap *= 0.5;
            }
        }
        for d in 0..n {
            let mut acc = 0.0;
            for j in 0..=d {
                acc += l[(d, j)] * z[j];
            }
            y[d] = acc;
            lw += emissions[d].log_density(acc);
        }
        if lw == f64::NEG_INFINITY {
            continue;
        }
        let w = trap * lw.exp();
        mass += w;
        for d in 0..n {
            first[d] += w * y[d];
            second[d] += w * y[d] * y[d];
        }
    }
    (0..n)
        .map(|d| {
            let mean = first[d] / mass;
            let var = second[d] / mass - mean * mean;
            (mean, var.max(0.0).sqrt())
        })
        .collect()
}

/// Classical static marginal-EM for the probit 3PL on a dense ability grid:
/// the E-step keeps the full grid posterior per student (no Gaussian
/// approximation anywhere), the M-step maximizes the grid-weighted expected
/// log-likelihood per item with the same parameterization and bounds the
/// library uses.
pub fn static_grid_em(
    records: &[ResponseRecord],
    init: ThreePl,
    rounds: usize,
    tol: f64,
) -> Vec<(String, ThreePl)> {
    let data = Dataset::from_records(records).expect("records");
    let n_students = data.students.len();
    let n_items = data.items.len();
    let grid_n = 1201usize;
    let grid: Vec<f64> = (0..grid_n)
        .map(|k| -6.0 + 12.0 * k as f64 / (grid_n - 1) as f64)
        .collect();
    let log_prior: Vec<f64> = grid.iter().map(|&t| -0.5 * t * t).collect();

    let mut items = vec![init; n_items];
    let mut prev_total = f64::NEG_INFINITY;
    for _round in 0..rounds {
        // E: per-student grid posterior under fixed items
        let fitted: Vec<ItemModel> = items.iter().map(|p| ItemModel::ProbitThreePl(*p)).collect();
        let mut weights = vec![vec![0.0f64; grid_n]; n_students];
        let mut total = 0.0;
        for (i, recs) in data.by_student.iter().enumerate() {
            let mut lw = log_prior.clone();
            for &k in recs {
                let r = &data.records[k];
                for (q, &theta) in grid.iter().enumerate() {
                    lw[q] += fitted[r.item].log_prob_fitted(theta, r.response);
                }
            }
            let max = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for w in lw.iter_mut() {
                *w = (*w - max).exp();
                z += *w;
            }
            for w in weights[i].iter_mut().zip(lw.iter()) {
                *w.0 = w.1 / z;
            }
            total += max + z.ln();
        }

        // M: per-item maximization over (a, probit-space b, c)
        for (j, recs) in data.by_item.iter().enumerate() {
            let prev = items[j];
            let objective = |p: &[f64]| -> (f64, Vec<f64>) {
                let (a, b, c) = (p[0], p[1], p[2]);
                let mut value = 0.0;
                let mut grad = [0.0f64; 3];
                for &k in recs {
                    let r = &data.records[k];
                    let correct = r.response != 0;
                    for (q, &theta) in grid.iter().enumerate() {
                        let w = weights[r.student][q];
                        if w == 0.0 {
                            continue;
                        }
                        let z = a * (theta - b);
                        let s = dynaesti::irf::sigmoid(z);
                        if correct {
                            let f = c + (1.0 - c) * s;
                            value += w * f.ln();
                            let ds = (1.0 - c) * s * (1.0 - s);
                            grad[0] += w * ds * (theta - b) / f;
                            grad[1] += w * (-ds * a) / f;
                            grad[2] += w * (1.0 - s) / f;
                        } else {
                            value += w * ((1.0 - c).ln() + dynaesti::irf::log_sigmoid(-z));
                            grad[0] += w * (-s * (theta - b));
                            grad[1] += w * (s * a);
                            grad[2] += w * (-1.0 / (1.0 - c));
                        }
                    }
                }
                (value, grad.to_vec())
            };
            let start = [
                prev.discrimination,
                curvfife::transform::probit(prev.difficulty),
                prev.guessing,
            ];
            let bounds = Bounds::new(vec![1e-3, -10.0, 0.0], vec![1e3, 10.0, 0.5]);
            let out = maximize_bounded(objective, &start, &bounds, &OptimOptions::default());
            items[j] = ThreePl {
                discrimination: out.x[0],
                difficulty: curvfife::transform::norm_cdf(out.x[1])
                    .clamp(f64::EPSILON, 1.0 - f64::EPSILON),
                guessing: out.x[2],
            };
        }

        if (total - prev_total).abs() / prev_total.abs().max(1e-8) < tol {
            break;
        }
        prev_total = total;
    }
    data.items.iter().cloned().zip(items).collect()
}

/// Static abilities, stratified over [0, 1], with responses sampled from the
/// usual item bank at the usual uniform times.
pub fn static_truth(
    n_students: usize,
    m_items: usize,
    seed: u64,
) -> (Vec<f64>, Vec<(String, ItemModel)>, Vec<ResponseRecord>) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n_students).collect();
    order.shuffle(&mut rng);
    let mut thetas = vec![0.0f64; n_students];
    for (i, &bin) in order.iter().enumerate() {
        thetas[i] = (bin as f64 + rng.random::<f64>()) / n_students as f64;
    }

    let config = dynaesti::simulate::SynthConfig::new(n_students, m_items, seed);
    let items = dynaesti::simulate::sample_items(&config);
    let times = dynaesti::simulate::uniform_times(m_items);

    let mut records = Vec::with_capacity(n_students * m_items);
    for (i, &theta) in thetas.iter().enumerate() {
        for (j, (id, item)) in items.iter().enumerate() {
            let p = item.response_prob(theta, 1).expect("interior theta");
            let response = if rng.random::<f64>() < p { 1 } else { 0 };
            records.push(ResponseRecord {
                student: dynaesti::simulate::student_id(i),
                item: id.clone(),
                time: times[j],
                response,
            });
        }
    }
    (thetas, items, records)
}

/// A strongly time-varying ability curve in [0, 1] for the hold-out
/// scenario.
pub fn swinging_curve(t: f64) -> f64 {
    0.5 + 0.38 * (2.0 * std::f64::consts::PI * 1.25 * t).sin()
}

/// A subject's records sampled from an ability trajectory.
pub fn subject_records(
    theta_of: impl Fn(f64) -> f64,
    items: &[(String, ItemModel)],
    n_responses: usize,
    seed: u64,
) -> Vec<ResponseRecord> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..n_responses)
        .map(|k| {
            let t = k as f64 / (n_responses - 1) as f64;
            let (id, item) = &items[k % items.len()];
            let p = item
                .response_prob(theta_of(t).clamp(1e-9, 1.0 - 1e-9), 1)
                .expect("interior theta");
            let response = if rng.random::<f64>() < p { 1 } else { 0 };
            ResponseRecord {
                student: "subject".into(),
                item: id.clone(),
                time: t,
                response,
            }
        })
        .collect()
}

pub fn family_transform() -> curvfife::Transform {
    IrfFamily::ProbitThreePl.transform()
}
