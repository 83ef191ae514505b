//! EM over ability curves and item parameters: the E-step fits one curve
//! distribution per student with the items' IRFs as emission distributions;
//! the M-step maximizes each item's expected log-likelihood under the fitted
//! ability marginals.

use std::collections::BTreeMap;

use curvfife::curve::{default_candidates, fit, fit_warm, select_bandwidth, CurveDistribution};
use curvfife::emissions::{log_expected_density, EmissionTriplet};
use curvfife::grafting::{GaussianFactorSet, IterationControl};
use curvfife::kernel::{KernelParams, DEFAULT_JITTER};
use curvfife::transform::probit;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::irf::{clip_strokes, log_three_pl_at, GolfItem, IrfFamily, ItemModel, StepParams, ThreePl};
use crate::optim::{maximize_bounded, Bounds, OptimOptions, OptimOutcome};
use crate::quadrature::gauss_hermite;
use crate::records::{Dataset, ResponseRecord};
use crate::simulate::derive_seed;

/// Whether abilities vary over time or are a single latent scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Dynamic,
    /// All responses share one pseudo-time, reducing the curve prior to a
    /// single standard-normal latent and the pipeline to classical IRT.
    Static,
}

/// How the RBF bandwidth is chosen for each student's curve fit.
#[derive(Debug, Clone)]
pub enum BandwidthPolicy {
    Fixed(f64),
    /// Cross-validate on the first round, freeze afterwards.
    SelectOnce {
        candidates: Option<Vec<f64>>,
        k: usize,
    },
    /// Cross-validate on every round.
    SelectEachRound {
        candidates: Option<Vec<f64>>,
        k: usize,
    },
}

impl Default for BandwidthPolicy {
    fn default() -> Self {
        BandwidthPolicy::SelectOnce {
            candidates: None,
            k: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmConfig {
    pub family: IrfFamily,
    pub mode: Mode,
    pub bandwidth: BandwidthPolicy,
    pub jitter: f64,
    pub em_max_rounds: usize,
    /// Relative change in total expected log-likelihood at which to stop.
    pub em_tol: f64,
    /// Gauss-Hermite nodes for the M-step expectations.
    pub quadrature_points: usize,
    pub fit: IterationControl,
    pub optim: OptimOptions,
    pub ability_grid_points: usize,
    pub seed: u64,
    pub init_three_pl: ThreePl,
    /// Occurrence threshold for stroke-count clipping (golf family).
    pub min_stroke_count: usize,
}

impl EmConfig {
    pub fn new(family: IrfFamily, seed: u64) -> Self {
        EmConfig {
            family,
            mode: Mode::Dynamic,
            bandwidth: BandwidthPolicy::default(),
            jitter: DEFAULT_JITTER,
            em_max_rounds: 30,
            em_tol: 1e-4,
            quadrature_points: 41,
            fit: IterationControl::default(),
            optim: OptimOptions::default(),
            ability_grid_points: 101,
            seed,
            init_three_pl: ThreePl {
                discrimination: 1.0,
                difficulty: 0.5,
                guessing: 0.0,
            },
            min_stroke_count: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.em_max_rounds < 1 {
            return Err(Error::InvalidConfig("em_max_rounds must be >= 1".into()));
        }
        if self.quadrature_points < 11 {
            return Err(Error::InvalidConfig(
                "need at least 11 quadrature points".into(),
            ));
        }
        if self.ability_grid_points < 1 {
            return Err(Error::InvalidConfig("ability grid needs points".into()));
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(Error::InvalidConfig("jitter must be >= 0".into()));
        }
        Ok(())
    }

    fn kernel(&self, bandwidth: f64) -> Result<KernelParams> {
        Ok(KernelParams::new(bandwidth, 1.0, self.jitter).map_err(curvfife::Error::from)?)
    }
}

/// Per-student carry-over between rounds: frozen bandwidths and grafted
/// factors used to warm-start the next round's fit.
#[derive(Debug, Clone, Default)]
pub struct EmState {
    bandwidths: Vec<Option<f64>>,
    factors: Vec<Option<GaussianFactorSet>>,
}

impl EmState {
    pub fn for_dataset(data: &Dataset) -> Self {
        EmState {
            bandwidths: vec![None; data.students.len()],
            factors: vec![None; data.students.len()],
        }
    }
}

#[derive(Debug)]
pub struct EStepOutcome {
    /// One fitted curve distribution per student, in dataset order.
    pub dists: Vec<CurveDistribution>,
    /// Fitted-space marginal (mean, variance) of the ability at each record's
    /// time, indexed like `Dataset::records`.
    pub moments: Vec<(f64, f64)>,
    pub bandwidths: Vec<f64>,
    pub warnings: Vec<String>,
}

fn emission_time(mode: Mode, t: f64) -> f64 {
    match mode {
        Mode::Dynamic => t,
        Mode::Static => 0.0,
    }
}

/// Log response probability as a function of the fitted-space ability, with
/// per-item constants hoisted out of the inner loop.
pub fn fitted_emission(item: &ItemModel, response: i64, time: f64) -> EmissionTriplet {
    let payload = format!("irf:{}:{response}", item.family());
    match item {
        ItemModel::ThreePl(p) => {
            let (a, b, c) = (p.discrimination, p.difficulty, p.guessing);
            let correct = response != 0;
            EmissionTriplet::new(time, payload, move |x| log_three_pl_at(x, a, b, c, correct))
        }
        ItemModel::ProbitThreePl(p) => {
            let (a, bq, c) = (p.discrimination, probit(p.difficulty), p.guessing);
            let correct = response != 0;
            EmissionTriplet::new(time, payload, move |x| log_three_pl_at(x, a, bq, c, correct))
        }
        ItemModel::Golf(g) => {
            let g = g.clone();
            EmissionTriplet::new(time, payload, move |x| {
                crate::irf::ItemModel::Golf(g.clone()).log_prob_fitted(x, response)
            })
        }
    }
}

fn validate_item_support(items: &[ItemModel], data: &Dataset) -> Result<()> {
    for r in &data.records {
        if let ItemModel::Golf(g) = &items[r.item] {
            if r.response != 0 && g.step(r.response).is_none() {
                return Err(Error::UnsupportedStroke {
                    s: r.response,
                    s_min: g.s_min(),
                    s_max: g.s_max(),
                });
            }
        }
    }
    Ok(())
}

/// Bandwidth for one student's emissions under the configured policy. A
/// student with fewer emissions than folds gets a smaller k; fewer than two
/// distinct times (including static mode) skips selection entirely.
fn choose_bandwidth(
    emissions: &[EmissionTriplet],
    policy: &BandwidthPolicy,
    config: &EmConfig,
    seed: u64,
) -> Result<f64> {
    let span = {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for e in emissions {
            lo = lo.min(e.time);
            hi = hi.max(e.time);
        }
        hi - lo
    };
    if span <= 0.0 {
        return Ok(1.0);
    }
    let (candidates, k) = match policy {
        BandwidthPolicy::Fixed(h) => return Ok(*h),
        BandwidthPolicy::SelectOnce { candidates, k }
        | BandwidthPolicy::SelectEachRound { candidates, k } => (candidates, *k),
    };
    let candidates = match candidates {
        Some(c) => c.clone(),
        None => default_candidates(emissions),
    };
    if candidates.len() == 1 {
        return Ok(candidates[0]);
    }
    let k = k.min(emissions.len()).max(2);
    if emissions.len() < 2 {
        return Ok(span / 4.0);
    }
    let params = config.kernel(candidates[0])?;
    let sel = select_bandwidth(emissions, &candidates, k, &params, &config.fit, seed)?;
    Ok(sel.chosen)
}

/// Fits every student's ability-curve distribution with the items fixed and
/// returns the per-record marginal moments the M-step needs.
pub fn e_step(
    data: &Dataset,
    items: &[ItemModel],
    config: &EmConfig,
    state: &mut EmState,
) -> Result<EStepOutcome> {
    config.validate()?;
    if items.len() != data.items.len() {
        return Err(Error::InvalidConfig(format!(
            "{} item models for {} items",
            items.len(),
            data.items.len()
        )));
    }
    validate_item_support(items, data)?;

    struct StudentFit {
        dist: CurveDistribution,
        bandwidth: f64,
        by_record: Vec<(usize, f64, f64)>,
        warning: Option<String>,
    }

    let transform = config.family.transform();
    let prev_bandwidths = state.bandwidths.clone();
    let prev_factors = std::mem::take(&mut state.factors);

    let fits: Vec<StudentFit> = data
        .by_student
        .par_iter()
        .enumerate()
        .map(|(i, rec_ids)| {
            let emissions: Vec<EmissionTriplet> = rec_ids
                .iter()
                .map(|&k| {
                    let r = &data.records[k];
                    fitted_emission(&items[r.item], r.response, emission_time(config.mode, r.time))
                })
                .collect();

            let bandwidth = match (&config.bandwidth, prev_bandwidths[i]) {
                (BandwidthPolicy::SelectOnce { .. }, Some(h)) => h,
                (policy, _) => choose_bandwidth(
                    &emissions,
                    policy,
                    config,
                    derive_seed(config.seed, 10, i as u64),
                )?,
            };
            let params = config.kernel(bandwidth)?;

            let dist = match &prev_factors[i] {
                Some(f) if can_warm_start(f, &emissions) => {
                    fit_warm(&emissions, &params, transform.clone(), &config.fit, f)?
                }
                _ => fit(&emissions, &params, transform.clone(), &config.fit)?,
            };
            let warning = if dist.converged() {
                None
            } else {
                Some(format!(
                    "student {}: grafting stopped at {} iterations without converging",
                    data.students[i],
                    dist.iterations()
                ))
            };

            let times = dist.emission_times().to_vec();
            let moments = dist.marginal_moments(&times)?;
            let by_time: std::collections::HashMap<u64, (f64, f64)> = times
                .iter()
                .zip(&moments)
                .map(|(t, m)| (t.to_bits(), *m))
                .collect();
            let by_record = rec_ids
                .iter()
                .map(|&k| {
                    let t = emission_time(config.mode, data.records[k].time);
                    let (mean, var) = by_time[&t.to_bits()];
                    (k, mean, var)
                })
                .collect();

            Ok(StudentFit {
                dist,
                bandwidth,
                by_record,
                warning,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut moments = vec![(0.0, 0.0); data.records.len()];
    let mut warnings = Vec::new();
    let mut dists = Vec::with_capacity(fits.len());
    let mut bandwidths = Vec::with_capacity(fits.len());
    for (i, f) in fits.into_iter().enumerate() {
        for (k, mean, var) in &f.by_record {
            moments[*k] = (*mean, *var);
        }
        state.bandwidths[i] = Some(f.bandwidth);
        state.factors.push(Some(f.dist.factors().clone()));
        bandwidths.push(f.bandwidth);
        if let Some(w) = f.warning {
            warnings.push(w);
        }
        dists.push(f.dist);
    }
    Ok(EStepOutcome {
        dists,
        moments,
        bandwidths,
        warnings,
    })
}

fn can_warm_start(factors: &GaussianFactorSet, emissions: &[EmissionTriplet]) -> bool {
    let unique: std::collections::HashSet<u64> =
        emissions.iter().map(|e| e.time.to_bits()).collect();
    factors.len() == unique.len()
}

#[derive(Debug)]
pub struct MStepOutcome {
    pub items: Vec<ItemModel>,
    /// Total expected log-likelihood at the returned parameters.
    pub expected_loglik: f64,
    pub warnings: Vec<String>,
}

const DISCRIMINATION_BOUNDS: (f64, f64) = (1e-3, 1e3);
const DIFFICULTY_BOUNDS: (f64, f64) = (-10.0, 10.0);
const GUESSING_BOUNDS: (f64, f64) = (0.0, 0.5);

/// 3PL expected log-likelihood and gradient in (a, fitted difficulty, c),
/// accumulated over pre-expanded quadrature nodes.
fn three_pl_objective(
    nodes: &[(f64, f64, bool)], // (x, weight, correct)
) -> impl Fn(&[f64]) -> (f64, Vec<f64>) + '_ {
    move |p: &[f64]| {
        let (a, b, c) = (p[0], p[1], p[2]);
        let mut value = 0.0;
        let mut grad = [0.0f64; 3];
        for &(x, w, correct) in nodes {
            let z = a * (x - b);
            let s = crate::irf::sigmoid(z);
            if correct {
                let f = c + (1.0 - c) * s;
                value += w * f.ln();
                let ds = (1.0 - c) * s * (1.0 - s);
                grad[0] += w * ds * (x - b) / f;
                grad[1] += w * (-ds * a) / f;
                grad[2] += w * (1.0 - s) / f;
            } else {
                value += w * ((1.0 - c).ln() + crate::irf::log_sigmoid(-z));
                grad[0] += w * (-s * (x - b));
                grad[1] += w * (s * a);
                grad[2] += w * (-1.0 / (1.0 - c));
            }
        }
        (value, grad.to_vec())
    }
}

fn golf_pack(item: &GolfItem) -> (Vec<f64>, i64, i64) {
    let (s_min, s_max) = (item.s_min(), item.s_max());
    let mut x = Vec::new();
    for s in (s_min..=-1).rev().chain(1..=s_max) {
        let step = item.step(s).expect("support");
        x.push(step.discrimination);
        x.push(step.difficulty);
    }
    (x, s_min, s_max)
}

fn golf_unpack(x: &[f64], s_min: i64, s_max: i64) -> GolfItem {
    let mut below = Vec::new();
    let mut above = Vec::new();
    let mut i = 0;
    for _ in 0..(-s_min) {
        below.push(StepParams {
            discrimination: x[i],
            difficulty: x[i + 1],
        });
        i += 2;
    }
    for _ in 0..s_max {
        above.push(StepParams {
            discrimination: x[i],
            difficulty: x[i + 1],
        });
        i += 2;
    }
    GolfItem::new(below, above).expect("bounded parameters")
}

/// Index of the packed (a, b) pair for stroke count `s`.
fn golf_slot(s: i64, s_min: i64) -> usize {
    let pos = if s < 0 {
        (-s - 1) as usize
    } else {
        (-s_min) as usize + (s - 1) as usize
    };
    2 * pos
}

fn golf_objective<'a>(
    nodes: &'a [(f64, f64, i64)], // (x, weight, stroke count)
    s_min: i64,
    s_max: i64,
) -> impl Fn(&[f64]) -> (f64, Vec<f64>) + 'a {
    let n_cats = (s_max - s_min + 1) as usize;
    move |p: &[f64]| {
        let item = golf_unpack(p, s_min, s_max);
        let mut value = 0.0;
        let mut grad = vec![0.0f64; p.len()];
        let mut odds = vec![0.0f64; n_cats];
        let mut probs = vec![0.0f64; n_cats];
        for &(x, w, resp) in nodes {
            for (idx, s) in (s_min..=s_max).enumerate() {
                odds[idx] = crate::irf::golf_log_odds(x, &item, s).expect("support");
            }
            let max = odds.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (idx, o) in odds.iter().enumerate() {
                probs[idx] = (o - max).exp();
                z += probs[idx];
            }
            for pr in probs.iter_mut() {
                *pr /= z;
            }
            let resp_idx = (resp - s_min) as usize;
            value += w * (odds[resp_idx] - max - z.ln());

            // d log P(resp) / d p = d omega_resp - E_k[d omega_k]
            for (idx, s) in (s_min..=s_max).enumerate() {
                if s == 0 {
                    continue;
                }
                let coeff = (if idx == resp_idx { 1.0 } else { 0.0 }) - probs[idx];
                if coeff == 0.0 {
                    continue;
                }
                // omega_s touches steps from sgn(s) out to s
                let sign = if s > 0 { 1.0 } else { -1.0 };
                let mut k = if s > 0 { 1 } else { -1 };
                loop {
                    let slot = golf_slot(k, s_min);
                    let (a_k, b_k) = (p[slot], p[slot + 1]);
                    let _ = a_k;
                    grad[slot] += w * coeff * sign * (x - b_k);
                    grad[slot + 1] += w * coeff * sign * (-p[slot]);
                    if k == s {
                        break;
                    }
                    k += if s > 0 { 1 } else { -1 };
                }
            }
        }
        (value, grad)
    }
}

/// Maximizes each item's expected log-likelihood independently, warm-started
/// from the previous parameters. An item whose optimization fails (or whose
/// best value is not finite) keeps its previous parameters.
pub fn m_step(
    data: &Dataset,
    moments: &[(f64, f64)],
    prev_items: &[ItemModel],
    config: &EmConfig,
) -> Result<MStepOutcome> {
    config.validate()?;
    if moments.len() != data.records.len() {
        return Err(Error::InvalidConfig(format!(
            "{} marginal moments for {} records",
            moments.len(),
            data.records.len()
        )));
    }
    let (gh_nodes, gh_weights) = gauss_hermite(config.quadrature_points);
    let norm = 1.0 / std::f64::consts::PI.sqrt();

    struct ItemFit {
        item: ItemModel,
        value: f64,
        warning: Option<String>,
    }

    let fits: Vec<ItemFit> = data
        .by_item
        .par_iter()
        .enumerate()
        .map(|(j, rec_ids)| {
            let prev = &prev_items[j];
            if rec_ids.is_empty() {
                return ItemFit {
                    item: prev.clone(),
                    value: 0.0,
                    warning: Some(format!("item {}: no responses", data.items[j])),
                };
            }
            // pre-expand the quadrature nodes of every response's marginal
            let expand = |resp_of: &dyn Fn(&crate::records::IndexedRecord) -> i64| {
                let mut nodes = Vec::with_capacity(rec_ids.len() * gh_nodes.len());
                for &k in rec_ids {
                    let (mean, var) = moments[k];
                    let scale = (2.0 * var.max(0.0)).sqrt();
                    let resp = resp_of(&data.records[k]);
                    for (z, w) in gh_nodes.iter().zip(&gh_weights) {
                        nodes.push((mean + scale * z, w * norm, resp));
                    }
                }
                nodes
            };

            let (outcome, item): (OptimOutcome, ItemModel) = match prev {
                ItemModel::ThreePl(p) | ItemModel::ProbitThreePl(p) => {
                    let probit_family = matches!(prev, ItemModel::ProbitThreePl(_));
                    let nodes: Vec<(f64, f64, bool)> = expand(&|r| r.response)
                        .into_iter()
                        .map(|(x, w, r)| (x, w, r != 0))
                        .collect();
                    let objective = three_pl_objective(&nodes);
                    let b0 = if probit_family {
                        probit(p.difficulty)
                    } else {
                        p.difficulty
                    };
                    let start = [p.discrimination, b0, p.guessing];
                    let bounds = Bounds::new(
                        vec![DISCRIMINATION_BOUNDS.0, DIFFICULTY_BOUNDS.0, GUESSING_BOUNDS.0],
                        vec![DISCRIMINATION_BOUNDS.1, DIFFICULTY_BOUNDS.1, GUESSING_BOUNDS.1],
                    );
                    let out = maximize_bounded(&objective, &start, &bounds, &config.optim);
                    let fitted = ThreePl {
                        discrimination: out.x[0],
                        // keep the probit-space difficulty strictly inside
                        // (0, 1): norm_cdf saturates to 1.0 near the bound
                        difficulty: if probit_family {
                            curvfife::transform::norm_cdf(out.x[1])
                                .clamp(f64::EPSILON, 1.0 - f64::EPSILON)
                        } else {
                            out.x[1]
                        },
                        guessing: out.x[2],
                    };
                    let item = if probit_family {
                        ItemModel::ProbitThreePl(fitted)
                    } else {
                        ItemModel::ThreePl(fitted)
                    };
                    (out, item)
                }
                ItemModel::Golf(g) => {
                    let nodes = expand(&|r| r.response);
                    let (start, s_min, s_max) = golf_pack(g);
                    let objective = golf_objective(&nodes, s_min, s_max);
                    let dim = start.len();
                    let mut lower = Vec::with_capacity(dim);
                    let mut upper = Vec::with_capacity(dim);
                    for i in 0..dim {
                        if i % 2 == 0 {
                            lower.push(DISCRIMINATION_BOUNDS.0);
                            upper.push(DISCRIMINATION_BOUNDS.1);
                        } else {
                            lower.push(DIFFICULTY_BOUNDS.0);
                            upper.push(DIFFICULTY_BOUNDS.1);
                        }
                    }
                    let bounds = Bounds::new(lower, upper);
                    let out = maximize_bounded(&objective, &start, &bounds, &config.optim);
                    let item = ItemModel::Golf(golf_unpack(&out.x, s_min, s_max));
                    (out, item)
                }
            };

            if !outcome.value.is_finite() {
                return ItemFit {
                    item: prev.clone(),
                    value: f64::NEG_INFINITY,
                    warning: Some(format!(
                        "item {}: optimizer returned a non-finite objective; keeping previous parameters",
                        data.items[j]
                    )),
                };
            }
            ItemFit {
                item,
                value: outcome.value,
                warning: None,
            }
        })
        .collect();

    let mut items = Vec::with_capacity(fits.len());
    let mut warnings = Vec::new();
    let mut total = 0.0;
    for f in fits {
        total += if f.value.is_finite() { f.value } else { 0.0 };
        items.push(f.item);
        if let Some(w) = f.warning {
            warnings.push(w);
        }
    }
    Ok(MStepOutcome {
        items,
        expected_loglik: total,
        warnings,
    })
}

/// Per-student ability summary on a reporting grid, in the family's native
/// ability space.
#[derive(Debug, Clone)]
pub struct AbilityEstimate {
    pub student: String,
    pub grid_times: Vec<f64>,
    pub median: Vec<f64>,
    pub lower70: Vec<f64>,
    pub upper70: Vec<f64>,
    pub dist: CurveDistribution,
}

#[derive(Debug, Clone)]
pub struct EmDiagnostics {
    pub rounds: usize,
    pub expected_loglik: Vec<f64>,
    pub converged: bool,
    pub warnings: Vec<String>,
    pub bandwidths: Vec<(String, f64)>,
}

#[derive(Debug)]
pub struct EmOutcome {
    pub items: Vec<(String, ItemModel)>,
    pub abilities: Vec<AbilityEstimate>,
    pub diagnostics: EmDiagnostics,
}

fn initial_items(data: &mut Dataset, config: &EmConfig) -> Result<Vec<ItemModel>> {
    match config.family {
        IrfFamily::ThreePl => {
            let p = ThreePl::new(
                config.init_three_pl.discrimination,
                config.init_three_pl.difficulty,
                config.init_three_pl.guessing,
            )?;
            Ok(vec![ItemModel::ThreePl(p); data.items.len()])
        }
        IrfFamily::ProbitThreePl => {
            let p = config.init_three_pl;
            if !(p.difficulty > 0.0 && p.difficulty < 1.0) {
                return Err(Error::InvalidConfig(
                    "probit 3PL initialization needs difficulty in (0, 1)".into(),
                ));
            }
            let p = ThreePl::new(p.discrimination, p.difficulty, p.guessing)?;
            Ok(vec![ItemModel::ProbitThreePl(p); data.items.len()])
        }
        IrfFamily::Golf => {
            // derive each hole's supported range from its data, folding
            // rare extreme counts onto the range edge
            let mut items = Vec::with_capacity(data.items.len());
            for j in 0..data.items.len() {
                let responses: Vec<i64> = data.by_item[j]
                    .iter()
                    .map(|&k| data.records[k].response)
                    .collect();
                let clip = clip_strokes(&responses, config.min_stroke_count)?;
                for (&k, &clipped) in data.by_item[j].iter().zip(&clip.clipped) {
                    data.records[k].response = clipped;
                }
                let flat = StepParams {
                    discrimination: 1.0,
                    difficulty: 0.0,
                };
                items.push(ItemModel::Golf(GolfItem::new(
                    vec![flat; (-clip.s_min) as usize],
                    vec![flat; clip.s_max as usize],
                )?));
            }
            Ok(items)
        }
    }
}

fn ability_grid(data: &Dataset, config: &EmConfig) -> Vec<f64> {
    let (lo, hi) = data.time_span();
    let n = config.ability_grid_points;
    if n == 1 || lo == hi {
        return vec![lo];
    }
    (0..n)
        .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
        .collect()
}

fn ability_estimates(
    data: &Dataset,
    dists: Vec<CurveDistribution>,
    config: &EmConfig,
) -> Result<Vec<AbilityEstimate>> {
    let grid = ability_grid(data, config);
    data.students
        .iter()
        .zip(dists)
        .map(|(student, dist)| {
            let bands = match config.mode {
                Mode::Dynamic => dist.marginals(&grid)?,
                // the static latent is constant: evaluate once, replicate
                Mode::Static => {
                    let b = dist.marginals(&[0.0])?[0];
                    grid.iter()
                        .map(|&t| curvfife::curve::MarginalBand { time: t, ..b })
                        .collect()
                }
            };
            Ok(AbilityEstimate {
                student: student.clone(),
                grid_times: grid.clone(),
                median: bands.iter().map(|b| b.median).collect(),
                lower70: bands.iter().map(|b| b.lower70).collect(),
                upper70: bands.iter().map(|b| b.upper70).collect(),
                dist,
            })
        })
        .collect()
}

/// Runs the full EM: items initialized per config, alternation until the
/// total expected log-likelihood stabilizes, abilities extracted with the
/// final items.
pub fn run_em(records: &[ResponseRecord], config: &EmConfig) -> Result<EmOutcome> {
    config.validate()?;
    let mut data = Dataset::from_records(records)?;
    let mut items = initial_items(&mut data, config)?;
    let mut state = EmState::for_dataset(&data);

    let mut trace = Vec::new();
    let mut warnings = Vec::new();
    let mut converged = false;
    let mut rounds = 0;

    for _ in 0..config.em_max_rounds {
        rounds += 1;
        let e = e_step(&data, &items, config, &mut state)?;
        warnings.extend(e.warnings);
        let m = m_step(&data, &e.moments, &items, config)?;
        warnings.extend(m.warnings);
        items = m.items;
        trace.push(m.expected_loglik);
        let n = trace.len();
        if n >= 2 {
            let prev = trace[n - 2];
            let rel = (trace[n - 1] - prev).abs() / prev.abs().max(1e-8);
            if rel < config.em_tol {
                converged = true;
                break;
            }
        }
    }

    // abilities under the final items
    let e = e_step(&data, &items, config, &mut state)?;
    let bandwidths = data
        .students
        .iter()
        .cloned()
        .zip(e.bandwidths.iter().copied())
        .collect();
    let abilities = ability_estimates(&data, e.dists, config)?;

    Ok(EmOutcome {
        items: data.items.iter().cloned().zip(items).collect(),
        abilities,
        diagnostics: EmDiagnostics {
            rounds,
            expected_loglik: trace,
            converged,
            warnings,
            bandwidths,
        },
    })
}

/// Out-of-sample comparison of the dynamic and static ability models for one
/// subject, with the items fixed. Per run the responses are split into
/// random halves; each scheme fits the ability on one half and assigns the
/// held-out half the expected likelihood under its fitted marginals; the two
/// half-scores are combined geometrically, then geometrically averaged over
/// runs. Returns the dynamic/static likelihood ratio.
#[derive(Debug, Clone)]
pub struct HoldoutReport {
    pub ratio: f64,
    pub mean_log_dynamic: f64,
    pub mean_log_static: f64,
    pub runs: Vec<HoldoutRun>,
}

#[derive(Debug, Clone)]
pub struct HoldoutRun {
    pub log_dynamic: f64,
    pub log_static: f64,
}

pub fn holdout_compare(
    records: &[ResponseRecord],
    items: &[(String, ItemModel)],
    config: &EmConfig,
    n_runs: usize,
    seed: u64,
) -> Result<HoldoutReport> {
    if records.len() < 2 {
        return Err(Error::TooFewResponses(records.len()));
    }
    let subject = &records[0].student;
    if records.iter().any(|r| &r.student != subject) {
        return Err(Error::InvalidConfig(
            "hold-out comparison expects records for a single subject".into(),
        ));
    }
    let by_id: BTreeMap<&str, &ItemModel> =
        items.iter().map(|(id, m)| (id.as_str(), m)).collect();
    for r in records {
        if !by_id.contains_key(r.item.as_str()) {
            return Err(Error::UnknownItem(r.item.clone()));
        }
    }

    let emission_for = |r: &ResponseRecord, mode: Mode| -> EmissionTriplet {
        fitted_emission(by_id[r.item.as_str()], r.response, emission_time(mode, r.time))
    };

    let score_half = |train: &[usize], test: &[usize], mode: Mode, seed: u64| -> Result<f64> {
        let train_emissions: Vec<EmissionTriplet> = train
            .iter()
            .map(|&k| emission_for(&records[k], mode))
            .collect();
        let bandwidth = match mode {
            Mode::Static => 1.0,
            Mode::Dynamic => choose_bandwidth(&train_emissions, &config.bandwidth, config, seed)?,
        };
        let params = config.kernel(bandwidth)?;
        let dist = fit(
            &train_emissions,
            &params,
            config.family.transform(),
            &config.fit,
        )?;
        let mut total = 0.0;
        for &k in test {
            let e = emission_for(&records[k], mode);
            let (mean, var) = dist.marginal(e.time)?;
            total += log_expected_density(&e, mean, var, &config.fit.grid)?;
        }
        Ok(total)
    };

    let mut runs = Vec::with_capacity(n_runs);
    for run in 0..n_runs {
        let mut order: Vec<usize> = (0..records.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 20, run as u64));
        order.shuffle(&mut rng);
        let (a, b) = order.split_at(records.len() / 2);

        let mut log_dyn = 0.0;
        let mut log_stat = 0.0;
        for (train, test) in [(a, b), (b, a)] {
            let s = derive_seed(seed, 21, run as u64);
            log_dyn += score_half(train, test, Mode::Dynamic, s)?;
            log_stat += score_half(train, test, Mode::Static, s)?;
        }
        runs.push(HoldoutRun {
            log_dynamic: log_dyn / 2.0,
            log_static: log_stat / 2.0,
        });
    }
    let mean_log_dynamic = runs.iter().map(|r| r.log_dynamic).sum::<f64>() / n_runs as f64;
    let mean_log_static = runs.iter().map(|r| r.log_static).sum::<f64>() / n_runs as f64;
    Ok(HoldoutReport {
        ratio: (mean_log_dynamic - mean_log_static).exp(),
        mean_log_dynamic,
        mean_log_static,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{sample_curves, sample_items, sample_responses, uniform_times, SynthConfig};

    fn tiny_records() -> Vec<ResponseRecord> {
        let config = SynthConfig {
            grid_points: 101,
            ..SynthConfig::new(5, 5, 42)
        };
        let curves = sample_curves(&config).unwrap();
        let items = sample_items(&config);
        sample_responses(&curves, &items, &uniform_times(5), config.seed).unwrap()
    }

    fn tiny_config() -> EmConfig {
        EmConfig {
            bandwidth: BandwidthPolicy::Fixed(0.3),
            em_max_rounds: 1,
            ..EmConfig::new(IrfFamily::ProbitThreePl, 7)
        }
    }

    #[test]
    fn one_round_on_tiny_data_is_finite() {
        let records = tiny_records();
        let out = run_em(&records, &tiny_config()).unwrap();
        assert_eq!(out.items.len(), 5);
        assert_eq!(out.abilities.len(), 5);
        assert_eq!(out.diagnostics.rounds, 1);
        assert!(out.diagnostics.expected_loglik[0].is_finite());
        for a in &out.abilities {
            for k in 0..a.grid_times.len() {
                assert!(a.lower70[k] <= a.median[k] && a.median[k] <= a.upper70[k]);
            }
        }
    }

    #[test]
    fn e_step_moments_match_single_fit() {
        // one response per student: the marginal equals a 1-emission fit
        let records = vec![
            ResponseRecord {
                student: "a".into(),
                item: "i1".into(),
                time: 0.4,
                response: 1,
            },
            ResponseRecord {
                student: "b".into(),
                item: "i1".into(),
                time: 0.6,
                response: 0,
            },
        ];
        let config = tiny_config();
        let data = Dataset::from_records(&records).unwrap();
        let items = vec![ItemModel::ProbitThreePl(
            ThreePl::new(1.3, 0.4, 0.1).unwrap(),
        )];
        let mut state = EmState::for_dataset(&data);
        let e = e_step(&data, &items, &config, &mut state).unwrap();

        let lone = fit(
            &[fitted_emission(&items[0], 1, 0.4)],
            &config.kernel(0.3).unwrap(),
            config.family.transform(),
            &config.fit,
        )
        .unwrap();
        let (mean, var) = lone.marginal(0.4).unwrap();
        assert!((e.moments[0].0 - mean).abs() < 1e-12);
        assert!((e.moments[0].1 - var).abs() < 1e-12);
    }

    #[test]
    fn all_correct_students_sit_above_the_prior_mean() {
        let mut records = Vec::new();
        for j in 0..12 {
            records.push(ResponseRecord {
                student: "ace".into(),
                item: format!("i{j}"),
                time: j as f64 / 11.0,
                response: 1,
            });
        }
        let config = tiny_config();
        let data = Dataset::from_records(&records).unwrap();
        let items = vec![ItemModel::ProbitThreePl(ThreePl::new(1.0, 0.5, 0.0).unwrap()); 12];
        let mut state = EmState::for_dataset(&data);
        let e = e_step(&data, &items, &config, &mut state).unwrap();
        for (mean, _) in e.moments {
            assert!(mean > 0.0, "marginal mean {mean} not above prior");
        }
    }

    #[test]
    fn m_step_never_decreases_the_expected_loglik() {
        let records = tiny_records();
        let config = tiny_config();
        let mut data = Dataset::from_records(&records).unwrap();
        let items = initial_items(&mut data, &config).unwrap();
        let mut state = EmState::for_dataset(&data);
        let e = e_step(&data, &items, &config, &mut state).unwrap();

        // value of the expected log-likelihood at the previous parameters
        let (gh, gw) = gauss_hermite(config.quadrature_points);
        let norm = 1.0 / std::f64::consts::PI.sqrt();
        let mut before = 0.0;
        for (k, r) in data.records.iter().enumerate() {
            let (mean, var) = e.moments[k];
            let scale = (2.0 * var).sqrt();
            for (z, w) in gh.iter().zip(&gw) {
                before +=
                    w * norm * items[r.item].log_prob_fitted(mean + scale * z, r.response);
            }
        }
        let m = m_step(&data, &e.moments, &items, &config).unwrap();
        assert!(
            m.expected_loglik >= before - 1e-8,
            "{} < {}",
            m.expected_loglik,
            before
        );
    }

    #[test]
    fn em_results_invariant_to_record_permutation() {
        let mut records = tiny_records();
        let config = EmConfig {
            em_max_rounds: 2,
            ..tiny_config()
        };
        let a = run_em(&records, &config).unwrap();
        records.reverse();
        let b = run_em(&records, &config).unwrap();
        for (x, y) in a.items.iter().zip(&b.items) {
            assert_eq!(x.0, y.0);
            assert_eq!(x.1, y.1);
        }
        for (x, y) in a.abilities.iter().zip(&b.abilities) {
            assert_eq!(x.median, y.median);
        }
    }

    #[test]
    fn identical_responses_push_guessing_to_a_bound() {
        // every student answers item i0 correctly at every time
        let mut records = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                records.push(ResponseRecord {
                    student: format!("s{i}"),
                    item: format!("i{j}"),
                    time: j as f64 / 5.0,
                    response: if j == 0 { 1 } else { (i + j) as i64 % 2 },
                });
            }
        }
        let config = EmConfig {
            em_max_rounds: 3,
            ..tiny_config()
        };
        let out = run_em(&records, &config).unwrap();
        let (_, item) = &out.items[0];
        let ItemModel::ProbitThreePl(p) = item else {
            panic!()
        };
        // an always-correct item drifts toward maximal guessing or minimal
        // difficulty; either way stays inside its bounds without crashing
        assert!(p.guessing <= 0.5 && p.guessing >= 0.0);
        assert!(p.difficulty > 0.0 && p.difficulty < 1.0);
    }

    #[test]
    fn two_response_holdout_completes() {
        let items = vec![(
            "i0".to_string(),
            ItemModel::ProbitThreePl(ThreePl::new(1.0, 0.5, 0.0).unwrap()),
        )];
        let records = vec![
            ResponseRecord {
                student: "solo".into(),
                item: "i0".into(),
                time: 0.2,
                response: 1,
            },
            ResponseRecord {
                student: "solo".into(),
                item: "i0".into(),
                time: 0.8,
                response: 0,
            },
        ];
        let config = EmConfig {
            bandwidth: BandwidthPolicy::Fixed(0.3),
            ..EmConfig::new(IrfFamily::ProbitThreePl, 3)
        };
        let report = holdout_compare(&records, &items, &config, 3, 5).unwrap();
        assert!(report.ratio.is_finite() && report.ratio > 0.0);
        assert_eq!(report.runs.len(), 3);
    }
}
