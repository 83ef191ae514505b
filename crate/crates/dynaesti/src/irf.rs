//! Item response functions: the 3PL family (plain and probit-transformed)
//! and the cumulative-step stroke model used for golf holes.

use std::collections::BTreeMap;

use curvfife::transform::{probit, Transform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln sigmoid(z)` without underflow.
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Three-parameter logistic item: discrimination `a > 0`, difficulty `b`,
/// guessing probability `c` in `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreePl {
    pub discrimination: f64,
    pub difficulty: f64,
    pub guessing: f64,
}

impl ThreePl {
    pub fn new(discrimination: f64, difficulty: f64, guessing: f64) -> Result<Self> {
        if !(discrimination.is_finite() && discrimination > 0.0) {
            return Err(Error::InvalidItem(format!(
                "discrimination must be > 0, got {discrimination}"
            )));
        }
        if !difficulty.is_finite() {
            return Err(Error::InvalidItem(format!(
                "difficulty must be finite, got {difficulty}"
            )));
        }
        if !(guessing.is_finite() && (0.0..1.0).contains(&guessing)) {
            return Err(Error::InvalidItem(format!(
                "guessing must lie in [0, 1), got {guessing}"
            )));
        }
        Ok(ThreePl {
            discrimination,
            difficulty,
            guessing,
        })
    }
}

/// `P(correct | theta) = c + (1 - c) sigmoid(a (theta - b))`; an incorrect
/// response takes the complement.
pub fn three_pl(theta: f64, item: &ThreePl, correct: bool) -> f64 {
    let p = item.guessing
        + (1.0 - item.guessing) * sigmoid(item.discrimination * (theta - item.difficulty));
    if correct {
        p
    } else {
        1.0 - p
    }
}

/// The probit-transformed 3PL for abilities in `(0, 1)`:
/// `c + (1 - c) sigmoid(a (probit(theta) - probit(b)))`.
pub fn probit_three_pl(theta: f64, item: &ThreePl, correct: bool) -> Result<f64> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::InvalidItem(format!(
            "probit 3PL needs theta in (0, 1), got {theta}"
        )));
    }
    if !(item.difficulty > 0.0 && item.difficulty < 1.0) {
        return Err(Error::InvalidItem(format!(
            "probit 3PL needs difficulty in (0, 1), got {}",
            item.difficulty
        )));
    }
    let shifted = ThreePl {
        discrimination: item.discrimination,
        difficulty: probit(item.difficulty),
        guessing: item.guessing,
    };
    Ok(three_pl(probit(theta), &shifted, correct))
}

/// One step of the stroke model: how sharply (`discrimination`) and at what
/// ability (`difficulty`) the odds tip from the previous stroke count to this
/// one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepParams {
    pub discrimination: f64,
    pub difficulty: f64,
}

/// Stroke-count item (a modified generalized partial credit model). `s`
/// counts strokes below par: positive is better than par, negative worse,
/// zero is par itself. Both sides of par must be populated; support is the
/// contiguous range `s_min..=s_max` with `s_min <= -1 < 1 <= s_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GolfItem {
    /// Steps for s = -1, -2, ... in that order.
    below: Vec<StepParams>,
    /// Steps for s = 1, 2, ... in that order.
    above: Vec<StepParams>,
}

impl GolfItem {
    pub fn new(below: Vec<StepParams>, above: Vec<StepParams>) -> Result<Self> {
        if below.is_empty() || above.is_empty() {
            return Err(Error::InvalidItem(
                "stroke model needs at least one step on each side of par".into(),
            ));
        }
        for s in below.iter().chain(&above) {
            if !(s.discrimination.is_finite() && s.discrimination > 0.0) {
                return Err(Error::InvalidItem(format!(
                    "step discrimination must be > 0, got {}",
                    s.discrimination
                )));
            }
            if !s.difficulty.is_finite() {
                return Err(Error::InvalidItem("step difficulty must be finite".into()));
            }
        }
        Ok(GolfItem { below, above })
    }

    pub fn s_min(&self) -> i64 {
        -(self.below.len() as i64)
    }

    pub fn s_max(&self) -> i64 {
        self.above.len() as i64
    }

    /// Step parameters for a supported non-zero stroke count.
    pub fn step(&self, s: i64) -> Option<&StepParams> {
        if s > 0 {
            self.above.get((s - 1) as usize)
        } else if s < 0 {
            self.below.get((-s - 1) as usize)
        } else {
            None
        }
    }

    /// Supported stroke counts in ascending order, including par.
    pub fn support(&self) -> impl Iterator<Item = i64> + '_ {
        self.s_min()..=self.s_max()
    }
}

/// Log odds of `s` strokes below par versus par:
/// zero at par, otherwise `sgn(s)` times the cumulative sum of
/// `a_k (theta - b_k)` from the first step out to `s`.
pub fn golf_log_odds(theta: f64, item: &GolfItem, s: i64) -> Result<f64> {
    if s == 0 {
        return Ok(0.0);
    }
    if s < item.s_min() || s > item.s_max() {
        return Err(Error::UnsupportedStroke {
            s,
            s_min: item.s_min(),
            s_max: item.s_max(),
        });
    }
    let sign = if s > 0 { 1.0 } else { -1.0 };
    let mut sum = 0.0;
    let mut k = if s > 0 { 1 } else { -1 };
    loop {
        let step = item.step(k).expect("step within support");
        sum += step.discrimination * (theta - step.difficulty);
        if k == s {
            break;
        }
        k += if s > 0 { 1 } else { -1 };
    }
    Ok(sign * sum)
}

/// Probabilities over the supported stroke counts (ascending, including par):
/// a softmax of the log odds.
pub fn golf_probs(theta: f64, item: &GolfItem) -> Vec<f64> {
    let odds: Vec<f64> = item
        .support()
        .map(|s| golf_log_odds(theta, item, s).expect("support"))
        .collect();
    let max = odds.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = odds.iter().map(|&o| (o - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / total).collect()
}

fn golf_log_prob(theta: f64, item: &GolfItem, s: i64) -> Result<f64> {
    let target = golf_log_odds(theta, item, s)?;
    let mut max = f64::NEG_INFINITY;
    let mut odds = Vec::with_capacity((item.s_max() - item.s_min() + 1) as usize);
    for k in item.support() {
        let o = golf_log_odds(theta, item, k).expect("support");
        max = max.max(o);
        odds.push(o);
    }
    let lse = max + odds.iter().map(|&o| (o - max).exp()).sum::<f64>().ln();
    Ok(target - lse)
}

/// Item families understood by the EM driver and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IrfFamily {
    ThreePl,
    ProbitThreePl,
    Golf,
}

impl IrfFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            IrfFamily::ThreePl => "3pl",
            IrfFamily::ProbitThreePl => "probit3pl",
            IrfFamily::Golf => "golf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "3pl" => Ok(IrfFamily::ThreePl),
            "probit3pl" => Ok(IrfFamily::ProbitThreePl),
            "golf" => Ok(IrfFamily::Golf),
            _ => Err(Error::UnknownFamily(s.to_string())),
        }
    }

    pub const ALL: [IrfFamily; 3] = [IrfFamily::ThreePl, IrfFamily::ProbitThreePl, IrfFamily::Golf];

    /// Transform between the ability's native space and the fitted space.
    pub fn transform(&self) -> Transform {
        match self {
            IrfFamily::ProbitThreePl => Transform::Probit,
            _ => Transform::Identity,
        }
    }
}

impl std::fmt::Display for IrfFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An item: family tag plus its parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub enum ItemModel {
    ThreePl(ThreePl),
    ProbitThreePl(ThreePl),
    Golf(GolfItem),
}

impl ItemModel {
    pub fn family(&self) -> IrfFamily {
        match self {
            ItemModel::ThreePl(_) => IrfFamily::ThreePl,
            ItemModel::ProbitThreePl(_) => IrfFamily::ProbitThreePl,
            ItemModel::Golf(_) => IrfFamily::Golf,
        }
    }

    /// Response probability given the ability in the family's native space.
    pub fn response_prob(&self, theta: f64, response: i64) -> Result<f64> {
        match self {
            ItemModel::ThreePl(p) => Ok(three_pl(theta, p, response != 0)),
            ItemModel::ProbitThreePl(p) => probit_three_pl(theta, p, response != 0),
            ItemModel::Golf(g) => Ok(golf_log_prob(theta, g, response)?.exp()),
        }
    }

    /// Log response probability as a function of the fitted-space ability
    /// (the probit family maps through the transform internally).
    pub fn log_prob_fitted(&self, x: f64, response: i64) -> f64 {
        match self {
            ItemModel::ThreePl(p) => log_three_pl_at(x, p.discrimination, p.difficulty, p.guessing, response != 0),
            ItemModel::ProbitThreePl(p) => log_three_pl_at(
                x,
                p.discrimination,
                probit(p.difficulty),
                p.guessing,
                response != 0,
            ),
            ItemModel::Golf(g) => golf_log_prob(x, g, response).unwrap_or(f64::NEG_INFINITY),
        }
    }
}

/// Stable `ln P` for a 3PL evaluated directly in the fitted space, with the
/// difficulty already expressed there.
pub(crate) fn log_three_pl_at(x: f64, a: f64, b_fitted: f64, c: f64, correct: bool) -> f64 {
    let z = a * (x - b_fitted);
    if correct {
        if c == 0.0 {
            log_sigmoid(z)
        } else {
            (c + (1.0 - c) * sigmoid(z)).ln()
        }
    } else {
        // 1 - c - (1-c) sigmoid(z) = (1-c) sigmoid(-z)
        (1.0 - c).ln() + log_sigmoid(-z)
    }
}

/// Result of thresholding stroke counts for one hole.
#[derive(Debug, Clone, PartialEq)]
pub struct StrokeClip {
    pub s_min: i64,
    pub s_max: i64,
    pub clipped: Vec<i64>,
}

/// Finds the widest contiguous stroke-count range around par in which every
/// non-zero count keeps more than `min_count` occurrences, folding counts
/// beyond the range inward onto the range edge. Folding happens before the
/// threshold re-check, so an edge category may be carried over the threshold
/// by the counts it absorbs.
pub fn clip_strokes(records: &[i64], min_count: usize) -> Result<StrokeClip> {
    if records.is_empty() {
        return Err(Error::NoRecords);
    }
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for &s in records {
        *counts.entry(s).or_insert(0) += 1;
    }
    let tally = |from: i64, dir: i64| -> usize {
        counts
            .iter()
            .filter(|(&s, _)| if dir > 0 { s >= from } else { s <= from })
            .map(|(_, &c)| c)
            .sum()
    };
    let grow = |dir: i64| -> i64 {
        let mut edge = 0i64;
        loop {
            let cand = edge + dir;
            let interior_ok =
                edge == 0 || counts.get(&edge).copied().unwrap_or(0) > min_count;
            if interior_ok && tally(cand, dir) > min_count {
                edge = cand;
            } else {
                return edge;
            }
        }
    };
    let s_max = grow(1);
    let s_min = grow(-1);
    if s_max < 1 || s_min > -1 {
        return Err(Error::NoFittableCategories);
    }
    let clipped = records.iter().map(|&s| s.clamp(s_min, s_max)).collect();
    Ok(StrokeClip {
        s_min,
        s_max,
        clipped,
    })
}
