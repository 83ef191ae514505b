//! Metrics comparing estimated curves and items to the truth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::irf::{golf_probs, probit_three_pl, three_pl, ItemModel};

/// A function sampled on a strictly increasing grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledFunction {
    grid: Vec<f64>,
    values: Vec<f64>,
}

impl SampledFunction {
    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if grid.len() != values.len() {
            return Err(Error::InvalidFunction(format!(
                "{} grid points vs {} values",
                grid.len(),
                values.len()
            )));
        }
        if grid.len() < 2 {
            return Err(Error::InvalidFunction("need at least 2 points".into()));
        }
        if grid.iter().any(|g| !g.is_finite()) || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidFunction("non-finite entries".into()));
        }
        if grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidFunction(
                "grid must be strictly increasing".into(),
            ));
        }
        Ok(SampledFunction { grid, values })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn lo(&self) -> f64 {
        self.grid[0]
    }

    pub fn hi(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    fn value_at(&self, t: f64) -> f64 {
        if t <= self.lo() {
            return self.values[0];
        }
        if t >= self.hi() {
            return *self.values.last().unwrap();
        }
        let j = self.grid.partition_point(|&g| g <= t) - 1;
        let w = (t - self.grid[j]) / (self.grid[j + 1] - self.grid[j]);
        self.values[j] * (1.0 - w) + self.values[j + 1] * w
    }

    pub fn is_constant(&self) -> bool {
        self.values.iter().all(|&v| v == self.values[0])
    }
}

/// Merged grid of both functions restricted to their common interval.
fn common_grid(f: &SampledFunction, g: &SampledFunction) -> Result<Vec<f64>> {
    let lo = f.lo().max(g.lo());
    let hi = f.hi().min(g.hi());
    if lo >= hi {
        return Err(Error::DisjointGrids);
    }
    let mut pts: Vec<f64> = f
        .grid
        .iter()
        .chain(&g.grid)
        .copied()
        .filter(|&t| t >= lo && t <= hi)
        .collect();
    pts.push(lo);
    pts.push(hi);
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    Ok(pts)
}

/// Root mean integrated squared error between two sampled functions:
/// trapezoidal quadrature of the squared difference over the common
/// interval, square-rooted.
pub fn rmise(f: &SampledFunction, g: &SampledFunction) -> Result<f64> {
    let grid = common_grid(f, g)?;
    let sq: Vec<f64> = grid
        .iter()
        .map(|&t| {
            let d = f.value_at(t) - g.value_at(t);
            d * d
        })
        .collect();
    let mut acc = 0.0;
    for k in 1..grid.len() {
        acc += 0.5 * (sq[k] + sq[k - 1]) * (grid[k] - grid[k - 1]);
    }
    Ok(acc.sqrt())
}

/// Cosine similarity between the derivatives of the two curves on their
/// common grid; derivatives by central differences (one-sided at the ends).
pub fn correspondence(theta: &SampledFunction, theta_hat: &SampledFunction) -> Result<f64> {
    let grid = common_grid(theta, theta_hat)?;
    let n = grid.len();
    if n < 2 {
        return Err(Error::DisjointGrids);
    }
    let deriv = |f: &SampledFunction| -> Vec<f64> {
        (0..n)
            .map(|k| {
                let (a, b) = if k == 0 {
                    (0, 1)
                } else if k == n - 1 {
                    (n - 2, n - 1)
                } else {
                    (k - 1, k + 1)
                };
                (f.value_at(grid[b]) - f.value_at(grid[a])) / (grid[b] - grid[a])
            })
            .collect()
    };
    let df = deriv(theta);
    let dg = deriv(theta_hat);
    let trap = |k: usize| -> f64 {
        let left = if k == 0 { 0.0 } else { grid[k] - grid[k - 1] };
        let right = if k == n - 1 { 0.0 } else { grid[k + 1] - grid[k] };
        0.5 * (left + right)
    };
    let mut dot = 0.0;
    let mut nf = 0.0;
    let mut ng = 0.0;
    for k in 0..n {
        let w = trap(k);
        dot += w * df[k] * dg[k];
        nf += w * df[k] * df[k];
        ng += w * dg[k] * dg[k];
    }
    if nf == 0.0 || ng == 0.0 {
        return Err(Error::ConstantCurve);
    }
    Ok(dot / (nf.sqrt() * ng.sqrt()))
}

/// Correct-response probability curve over the family's ability domain
/// (`[0, 1]` for the probit 3PL with limit values at the endpoints,
/// `[-3, 3]` otherwise).
fn prob_curve(item: &ItemModel, points: usize) -> Vec<(f64, f64)> {
    match item {
        ItemModel::ProbitThreePl(p) => (0..points)
            .map(|k| {
                let theta = k as f64 / (points - 1) as f64;
                let prob = if theta <= 0.0 {
                    p.guessing
                } else if theta >= 1.0 {
                    1.0
                } else {
                    probit_three_pl(theta, p, true).expect("interior theta")
                };
                (theta, prob)
            })
            .collect(),
        ItemModel::ThreePl(p) => (0..points)
            .map(|k| {
                let theta = -3.0 + 6.0 * k as f64 / (points - 1) as f64;
                (theta, three_pl(theta, p, true))
            })
            .collect(),
        ItemModel::Golf(_) => unreachable!("handled per category"),
    }
}

/// RMISE between two items of the same family: the correct-probability
/// curves for dichotomous families, the RMS over categories of per-category
/// RMISEs for the stroke model (over abilities in `[-3, 3]`).
pub fn irf_rmise(item_true: &ItemModel, item_est: &ItemModel) -> Result<f64> {
    if item_true.family() != item_est.family() {
        return Err(Error::FamilyMismatch(
            item_true.family().to_string(),
            item_est.family().to_string(),
        ));
    }
    let points = 1001;
    match (item_true, item_est) {
        (ItemModel::Golf(a), ItemModel::Golf(b)) => {
            if a.s_min() != b.s_min() || a.s_max() != b.s_max() {
                return Err(Error::FamilyMismatch(
                    format!("golf[{}, {}]", a.s_min(), a.s_max()),
                    format!("golf[{}, {}]", b.s_min(), b.s_max()),
                ));
            }
            let grid: Vec<f64> = (0..points)
                .map(|k| -3.0 + 6.0 * k as f64 / (points - 1) as f64)
                .collect();
            let cats = (a.s_max() - a.s_min() + 1) as usize;
            let mut acc = 0.0;
            for cat in 0..cats {
                let fa: Vec<f64> = grid.iter().map(|&t| golf_probs(t, a)[cat]).collect();
                let fb: Vec<f64> = grid.iter().map(|&t| golf_probs(t, b)[cat]).collect();
                let sa = SampledFunction::new(grid.clone(), fa)?;
                let sb = SampledFunction::new(grid.clone(), fb)?;
                let r = rmise(&sa, &sb)?;
                acc += r * r;
            }
            Ok((acc / cats as f64).sqrt())
        }
        _ => {
            let ca = prob_curve(item_true, points);
            let cb = prob_curve(item_est, points);
            let grid: Vec<f64> = ca.iter().map(|p| p.0).collect();
            let fa = SampledFunction::new(grid.clone(), ca.into_iter().map(|p| p.1).collect())?;
            let fb = SampledFunction::new(grid, cb.into_iter().map(|p| p.1).collect())?;
            rmise(&fa, &fb)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudentMetrics {
    pub student: String,
    pub rmise: f64,
    /// Undefined (None) when either curve is constant.
    pub correspondence: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub item: String,
    pub rmise: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub curve_rms_rmise: f64,
    pub irf_rms_rmise: f64,
    pub mean_correspondence: Option<f64>,
    pub correspondence_threshold: f64,
    pub fraction_above_threshold: Option<f64>,
    pub students: Vec<StudentMetrics>,
    pub items: Vec<ItemMetrics>,
}

impl ExperimentReport {
    /// Aligned-column rendering for terminals.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<28} {:>10.6}\n",
            "curve RMS RMISE", self.curve_rms_rmise
        ));
        out.push_str(&format!(
            "{:<28} {:>10.6}\n",
            "IRF RMS RMISE", self.irf_rms_rmise
        ));
        match self.mean_correspondence {
            Some(c) => out.push_str(&format!("{:<28} {:>10.6}\n", "mean correspondence", c)),
            None => out.push_str(&format!("{:<28} {:>10}\n", "mean correspondence", "n/a")),
        }
        match self.fraction_above_threshold {
            Some(f) => out.push_str(&format!(
                "{:<28} {:>10.6}\n",
                format!("fraction C > {}", self.correspondence_threshold),
                f
            )),
            None => out.push_str(&format!(
                "{:<28} {:>10}\n",
                format!("fraction C > {}", self.correspondence_threshold),
                "n/a"
            )),
        }
        out
    }
}

/// Aggregates per-student curve metrics and per-item IRF metrics. Curves and
/// items are matched by id; every estimated id must exist in the truth.
pub fn experiment_report(
    true_curves: &[(String, SampledFunction)],
    est_curves: &[(String, SampledFunction)],
    true_items: &[(String, ItemModel)],
    est_items: &[(String, ItemModel)],
    correspondence_threshold: f64,
) -> Result<ExperimentReport> {
    let truth_by_id: std::collections::BTreeMap<&str, &SampledFunction> = true_curves
        .iter()
        .map(|(id, f)| (id.as_str(), f))
        .collect();
    let mut students = Vec::with_capacity(est_curves.len());
    for (id, est) in est_curves {
        let truth = truth_by_id
            .get(id.as_str())
            .ok_or_else(|| Error::InvalidConfig(format!("no true curve for student '{id}'")))?;
        let r = rmise(truth, est)?;
        let c = match correspondence(truth, est) {
            Ok(c) => Some(c),
            Err(Error::ConstantCurve) => None,
            Err(e) => return Err(e),
        };
        students.push(StudentMetrics {
            student: id.clone(),
            rmise: r,
            correspondence: c,
        });
    }

    let items_by_id: std::collections::BTreeMap<&str, &ItemModel> =
        true_items.iter().map(|(id, m)| (id.as_str(), m)).collect();
    let mut items = Vec::with_capacity(est_items.len());
    for (id, est) in est_items {
        let truth = items_by_id
            .get(id.as_str())
            .ok_or_else(|| Error::InvalidConfig(format!("no true item '{id}'")))?;
        items.push(ItemMetrics {
            item: id.clone(),
            rmise: irf_rmise(truth, est)?,
        });
    }

    let rms = |xs: &[f64]| -> f64 {
        if xs.is_empty() {
            0.0
        } else {
            (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt()
        }
    };
    let curve_rms = rms(&students.iter().map(|s| s.rmise).collect::<Vec<_>>());
    let item_rms = rms(&items.iter().map(|i| i.rmise).collect::<Vec<_>>());
    let defined: Vec<f64> = students.iter().filter_map(|s| s.correspondence).collect();
    let (mean_c, frac) = if defined.is_empty() {
        (None, None)
    } else {
        let mean = defined.iter().sum::<f64>() / defined.len() as f64;
        let frac = defined
            .iter()
            .filter(|&&c| c > correspondence_threshold)
            .count() as f64
            / defined.len() as f64;
        (Some(mean), Some(frac))
    };

    Ok(ExperimentReport {
        curve_rms_rmise: curve_rms,
        irf_rms_rmise: item_rms,
        mean_correspondence: mean_c,
        correspondence_threshold,
        fraction_above_threshold: frac,
        students,
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::irf::ThreePl;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn sampled(grid: Vec<f64>, values: Vec<f64>) -> SampledFunction {
        SampledFunction::new(grid, values).unwrap()
    }

    fn unit_grid(n: usize) -> Vec<f64> {
        (0..n).map(|k| k as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn rmise_identities() {
        let grid = unit_grid(101);
        let f = sampled(grid.clone(), grid.iter().map(|t| t.sin()).collect());
        assert_abs_diff_eq!(rmise(&f, &f).unwrap(), 0.0, epsilon = 1e-15);

        let g = sampled(grid.clone(), grid.iter().map(|t| t.sin() + 0.1).collect());
        assert_abs_diff_eq!(rmise(&f, &g).unwrap(), 0.1, epsilon = 1e-10);

        let grid = unit_grid(1001);
        let lin = sampled(grid.clone(), grid.clone());
        let zero = sampled(grid.clone(), vec![0.0; 1001]);
        assert_abs_diff_eq!(
            rmise(&lin, &zero).unwrap(),
            (1.0f64 / 3.0).sqrt(),
            epsilon = 1e-4
        );
    }

    #[test]
    fn rmise_is_a_metric_on_random_triples() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let grid = unit_grid(101);
        for _ in 0..20 {
            let mut draw = || -> SampledFunction {
                sampled(
                    grid.clone(),
                    grid.iter()
                        .map(|&t| (3.0 * t + rng.random::<f64>()).sin() * rng.random::<f64>())
                        .collect(),
                )
            };
            let (f, g, h) = (draw(), draw(), draw());
            let (fg, gf) = (rmise(&f, &g).unwrap(), rmise(&g, &f).unwrap());
            assert_abs_diff_eq!(fg, gf, epsilon = 1e-10);
            let (fh, gh) = (rmise(&f, &h).unwrap(), rmise(&g, &h).unwrap());
            assert!(fg <= fh + gh + 1e-10);
        }
    }

    #[test]
    fn correspondence_identities() {
        let grid = unit_grid(1001);
        let theta = sampled(grid.clone(), grid.iter().map(|t| (5.0 * t).sin()).collect());
        assert_abs_diff_eq!(correspondence(&theta, &theta).unwrap(), 1.0, epsilon = 1e-12);

        let neg = sampled(
            grid.clone(),
            grid.iter().map(|t| -(5.0 * t).sin()).collect(),
        );
        assert_abs_diff_eq!(
            correspondence(&theta, &neg).unwrap(),
            -1.0,
            epsilon = 1e-12
        );

        let lin = sampled(grid.clone(), grid.clone());
        let quad = sampled(grid.clone(), grid.iter().map(|t| t * t).collect());
        assert_abs_diff_eq!(
            correspondence(&lin, &quad).unwrap(),
            3.0f64.sqrt() / 2.0,
            epsilon = 1e-3
        );

        let flat = sampled(grid.clone(), vec![0.7; 1001]);
        assert!(matches!(
            correspondence(&lin, &flat),
            Err(Error::ConstantCurve)
        ));
    }

    #[test]
    fn correspondence_invariances_hold_on_random_pairs() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let grid = unit_grid(201);
        for _ in 0..100 {
            let mut draw = || -> Vec<f64> {
                let a: f64 = rng.random::<f64>() * 4.0;
                let p: f64 = rng.random::<f64>() * 6.0;
                grid.iter().map(|&t| (p * t + a).sin() + 0.3 * t).collect()
            };
            let f = draw();
            let g = draw();
            let base = correspondence(&sampled(grid.clone(), f.clone()), &sampled(grid.clone(), g.clone())).unwrap();
            assert!((-1.0 - 1e-10..=1.0 + 1e-10).contains(&base));

            let shift: f64 = rng.random::<f64>() * 10.0 - 5.0;
            let scale: f64 = 0.1 + rng.random::<f64>() * 5.0;
            let f2: Vec<f64> = f.iter().map(|v| v * scale + shift).collect();
            let alt = correspondence(&sampled(grid.clone(), f2), &sampled(grid.clone(), g)).unwrap();
            assert_abs_diff_eq!(base, alt, epsilon = 1e-10);
        }
    }

    #[test]
    fn irf_rmise_cases() {
        let a = ItemModel::ProbitThreePl(ThreePl::new(1.2, 0.4, 0.1).unwrap());
        assert_abs_diff_eq!(irf_rmise(&a, &a).unwrap(), 0.0, epsilon = 1e-12);

        let b = ItemModel::ProbitThreePl(ThreePl::new(1.2 * 1.001, 0.4, 0.1).unwrap());
        let r = irf_rmise(&a, &b).unwrap();
        assert!(r > 0.0 && r < 0.01, "tiny perturbation gave {r}");

        let c = ItemModel::ThreePl(ThreePl::new(1.2, 0.4, 0.1).unwrap());
        assert!(matches!(irf_rmise(&a, &c), Err(Error::FamilyMismatch(..))));
    }

    #[test]
    fn perfect_estimates_report() {
        let grid = unit_grid(101);
        let curves: Vec<(String, SampledFunction)> = (0..3)
            .map(|i| {
                let f = sampled(
                    grid.clone(),
                    grid.iter().map(|&t| (t * (i + 2) as f64).sin()).collect(),
                );
                (format!("s{i}"), f)
            })
            .collect();
        let items: Vec<(String, ItemModel)> = (0..3)
            .map(|j| {
                (
                    format!("i{j}"),
                    ItemModel::ProbitThreePl(ThreePl::new(1.0, 0.3 + 0.1 * j as f64, 0.05).unwrap()),
                )
            })
            .collect();
        let report = experiment_report(&curves, &curves, &items, &items, 0.6).unwrap();
        assert_abs_diff_eq!(report.curve_rms_rmise, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.irf_rms_rmise, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.mean_correspondence.unwrap(), 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(report.fraction_above_threshold.unwrap(), 1.0, epsilon = 0.0);
        assert!(!report.to_text().is_empty());
    }
}
