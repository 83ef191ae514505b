//! Fidelity checks of the grafted posterior against exhaustive quadrature.

use curvfife::emissions::EmissionTriplet;
use curvfife::grafting::IterationControl;
use curvfife::kernel::{build_cov, KernelParams};
use curvfife::transform::Transform;
use curvfife::{fit, CurveDistribution};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

/// Marginal means and stds of `p(Y) ~ N(0, Sigma1) prod_i f_i(y_i)` by brute
/// force. Integrates in whitened coordinates `Y = L z` (L the Cholesky factor
/// of Sigma1, z standard normal), so strongly correlated sites pose no
/// resolution problem. Independent of the grafting path.
fn quadrature_posterior(emissions: &[EmissionTriplet], params: &KernelParams) -> Vec<(f64, f64)> {
    let n = emissions.len();
    assert!(n <= 4, "oracle is exponential in n");
    let times: Vec<f64> = emissions.iter().map(|e| e.time).collect();
    let sigma1 = build_cov(&times, &times, params, true).unwrap();
    let l = nalgebra::Cholesky::new(sigma1).expect("prior cholesky").l();

    let g = 51usize;
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
        for d in 0..n {
            let k = rem % g;
            rem /= g;
            z[d] = zs[k];
            lw -= 0.5 * z[d] * z[d];
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

fn grafted_site_moments(dist: &CurveDistribution) -> Vec<(f64, f64)> {
    dist.marginal_moments(dist.emission_times())
        .unwrap()
        .into_iter()
        .map(|(m, v)| (m, v.max(0.0).sqrt()))
        .collect()
}

#[test]
fn single_probit_yes_emission_matches_oracle() {
    let params = KernelParams::standard(0.19).unwrap();
    let emissions = vec![EmissionTriplet::bernoulli(0.0, true, &Transform::Probit)];
    let dist = fit(
        &emissions,
        &params,
        Transform::Probit,
        &IterationControl::default(),
    )
    .unwrap();
    let fitted = grafted_site_moments(&dist);
    let oracle = quadrature_posterior(&emissions, &params);
    assert!(fitted[0].0 > 0.0, "posterior mean should be positive");
    assert!((fitted[0].0 - oracle[0].0).abs() < 0.02);
    assert!((fitted[0].1 - oracle[0].1).abs() < 0.02);
}

#[test]
fn four_mixed_emissions_match_oracle() {
    let params = KernelParams::standard(0.3).unwrap();
    let tr = Transform::Probit;
    let emissions = vec![
        EmissionTriplet::bernoulli(0.05, true, &tr),
        EmissionTriplet::bernoulli(0.35, true, &tr),
        EmissionTriplet::bernoulli(0.6, false, &tr),
        EmissionTriplet::bernoulli(0.95, true, &tr),
    ];
    let dist = fit(&emissions, &params, tr, &IterationControl::default()).unwrap();
    let fitted = grafted_site_moments(&dist);
    let oracle = quadrature_posterior(&emissions, &params);
    for i in 0..4 {
        assert!(
            (fitted[i].0 - oracle[i].0).abs() < 0.05,
            "mean at site {i}: {} vs {}",
            fitted[i].0,
            oracle[i].0
        );
        assert!(
            (fitted[i].1 - oracle[i].1).abs() < 0.05,
            "std at site {i}: {} vs {}",
            fitted[i].1,
            oracle[i].1
        );
    }
}

#[test]
fn random_small_instances_match_oracle() {
    let params = KernelParams::standard(0.25).unwrap();
    let tr = Transform::Probit;
    let mut rng = ChaCha12Rng::seed_from_u64(2024);
    for _ in 0..10 {
        let n = rng.random_range(1..=4);
        let mut times: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        times.sort_by(f64::total_cmp);
        let emissions: Vec<_> = times
            .iter()
            .map(|&t| EmissionTriplet::bernoulli(t, rng.random::<bool>(), &tr))
            .collect();
        let dist = fit(&emissions, &params, tr.clone(), &IterationControl::default()).unwrap();
        let fitted = grafted_site_moments(&dist);
        let oracle = quadrature_posterior(&emissions, &params);
        for i in 0..n {
            assert!(
                (fitted[i].0 - oracle[i].0).abs() < 0.05,
                "mean site {i}/{n} at t={:?} conv={} iters={}: {} vs {}",
                dist.emission_times(),
                dist.converged(),
                dist.iterations(),
                fitted[i].0,
                oracle[i].0
            );
            assert!(
                (fitted[i].1 - oracle[i].1).abs() < 0.05,
                "std site {i}/{n}: {} vs {}",
                fitted[i].1,
                oracle[i].1
            );
        }
    }
}

#[test]
fn denoises_a_sine_curve() {
    // gaussian readings of sin-shaped curve: the posterior mean should beat
    // the raw observations
    let params = KernelParams::standard(0.25).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(9);
    let n = 60;
    let noise = 0.5;
    let truth = |t: f64| (2.0 * std::f64::consts::PI * t).sin() * 0.8;
    let times: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let obs: Vec<f64> = times
        .iter()
        .map(|&t| {
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            let g = (-2.0 * a.max(1e-12).ln()).sqrt() * (2.0 * std::f64::consts::PI * b).cos();
            truth(t) + noise * g
        })
        .collect();
    let emissions: Vec<_> = times
        .iter()
        .zip(&obs)
        .map(|(&t, &v)| EmissionTriplet::gaussian(t, v, noise))
        .collect();
    let dist = fit(
        &emissions,
        &params,
        Transform::Identity,
        &IterationControl::default(),
    )
    .unwrap();
    let (mu, _) = dist.query(&times).unwrap();

    let mut fit_err = 0.0;
    let mut raw_err = 0.0;
    for i in 0..n {
        fit_err += (mu[i] - truth(times[i])).powi(2);
        raw_err += (obs[i] - truth(times[i])).powi(2);
    }
    assert!(
        fit_err < raw_err,
        "posterior mean error {fit_err} vs raw {raw_err}"
    );
}
