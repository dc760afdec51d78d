//! Conformal quantiles of score multisets padded with a point mass at +∞.
//!
//! `Quantile(beta; F)` is the left-continuous inverse `inf { v : F(v) >= beta }`.
//! The conformal versions append a point mass at +∞ before inverting: with
//! equal weights it has mass `1/(n+1)`, so the result is the
//! `ceil(beta (n+1))`-th smallest score, or +∞ when that rank is `n+1`. With
//! weights, score `i` carries `w_i / (sum_j w_j + w_test)` and +∞ carries the
//! test unit's share `w_test / (sum_j w_j + w_test)`.
//!
//! Comparisons against `beta` accept cumulative mass within a relative
//! `1e-12` of the target, so products such as `0.3 * 10` that land a hair
//! above an integer do not push the answer one order statistic up.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack allowed when comparing cumulative mass with `beta`.
pub const CUMULATIVE_TOLERANCE: f64 = 1e-12;

/// A quantile on the augmented real line.
///
/// `Infinite` sorts above every finite value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreQuantile {
    Finite(f64),
    Infinite,
}

impl ScoreQuantile {
    fn from_score(v: f64) -> Self {
        if v == f64::INFINITY {
            ScoreQuantile::Infinite
        } else {
            ScoreQuantile::Finite(v)
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, ScoreQuantile::Infinite)
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            ScoreQuantile::Finite(v) => Some(v),
            ScoreQuantile::Infinite => None,
        }
    }

    /// `true` when a score `v` is at or below this quantile.
    pub fn admits(self, v: f64) -> bool {
        match self {
            ScoreQuantile::Finite(q) => v <= q,
            ScoreQuantile::Infinite => true,
        }
    }
}

impl PartialOrd for ScoreQuantile {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (self, other) {
            (ScoreQuantile::Finite(a), ScoreQuantile::Finite(b)) => a.partial_cmp(b),
            (ScoreQuantile::Finite(_), ScoreQuantile::Infinite) => Some(Ordering::Less),
            (ScoreQuantile::Infinite, ScoreQuantile::Finite(_)) => Some(Ordering::Greater),
            (ScoreQuantile::Infinite, ScoreQuantile::Infinite) => Some(Ordering::Equal),
        }
    }
}

impl fmt::Display for ScoreQuantile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreQuantile::Finite(v) => write!(f, "{v}"),
            ScoreQuantile::Infinite => f.write_str("inf"),
        }
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "beta must lie in (0, 1), got {beta}"
        )))
    }
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    Ok(())
}

/// `ceil(beta * m)`, tolerant of rounding just above an integer.
pub(crate) fn tolerant_rank(beta: f64, m: usize) -> usize {
    let target = beta * m as f64;
    ((target * (1.0 - CUMULATIVE_TOLERANCE)).ceil() as usize).max(1)
}

fn sorted(scores: &[f64]) -> Vec<f64> {
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Calibration scores sorted once so repeated quantile queries are cheap.
#[derive(Clone, Debug, PartialEq)]
pub struct SortedScores {
    sorted: Vec<f64>,
}

impl SortedScores {
    pub fn new(scores: &[f64]) -> Result<Self> {
        check_scores(scores)?;
        Ok(Self {
            sorted: sorted(scores),
        })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.sorted
    }

    /// `ceil(beta (n+1))`-th smallest of the scores together with +∞.
    pub fn conformal(&self, beta: f64) -> ScoreQuantile {
        let k = tolerant_rank(beta, self.sorted.len() + 1);
        match self.sorted.get(k - 1) {
            Some(&v) => ScoreQuantile::from_score(v),
            None => ScoreQuantile::Infinite,
        }
    }

    /// `ceil(beta n)`-th smallest score, no padding. `beta` may be 1.
    pub fn naive(&self, beta: f64) -> f64 {
        let k = tolerant_rank(beta, self.sorted.len()).min(self.sorted.len());
        self.sorted[k - 1]
    }
}

/// `ceil(beta (n+1))`-th smallest element of `scores ∪ {+∞}`.
pub fn conformal_quantile_unweighted(scores: &[f64], beta: f64) -> Result<ScoreQuantile> {
    check_beta(beta)?;
    Ok(SortedScores::new(scores)?.conformal(beta))
}

/// `ceil(beta n)`-th smallest score (the unpadded order statistic).
pub fn order_statistic_quantile(scores: &[f64], beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "beta must lie in (0, 1], got {beta}"
        )));
    }
    Ok(SortedScores::new(scores)?.naive(beta))
}

/// Calibration scores, their weights, and the weight of the test point
/// (which is placed at +∞).
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedScores {
    scores: Vec<f64>,
    weights: Vec<f64>,
    tail_weight: f64,
}

fn check_weight(w: f64) -> bool {
    w > 0.0 && w.is_finite()
}

impl WeightedScores {
    pub fn new(scores: Vec<f64>, weights: Vec<f64>, tail_weight: f64) -> Result<Self> {
        check_scores(&scores)?;
        if scores.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "{} scores but {} weights",
                scores.len(),
                weights.len()
            )));
        }
        if !weights.iter().all(|&w| check_weight(w)) || !check_weight(tail_weight) {
            return Err(Error::InvalidArgument(
                "weights must be positive and finite".into(),
            ));
        }
        Ok(Self {
            scores,
            weights,
            tail_weight,
        })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn tail_weight(&self) -> f64 {
        self.tail_weight
    }
}

/// Normalized point masses: one per calibration score plus the +∞ mass.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftWeights {
    pub calibration: Vec<f64>,
    pub tail: f64,
}

/// `p_i = w_i / (sum_j w_j + w_test)` and `p_{n+1} = w_test / (sum_j w_j + w_test)`.
pub fn normalize_shift_weights(ws: &WeightedScores) -> ShiftWeights {
    let total: f64 = ws.weights.iter().sum::<f64>() + ws.tail_weight;
    ShiftWeights {
        calibration: ws.weights.iter().map(|w| w / total).collect(),
        tail: ws.tail_weight / total,
    }
}

/// Weighted step CDF over distinct sorted scores, reusable across many
/// test-point weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SortedWeightedScores {
    values: Vec<f64>,
    cumulative: Vec<f64>,
    total: f64,
}

impl SortedWeightedScores {
    pub fn new(scores: &[f64], weights: &[f64]) -> Result<Self> {
        check_scores(scores)?;
        if scores.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "{} scores but {} weights",
                scores.len(),
                weights.len()
            )));
        }
        if !weights.iter().all(|&w| check_weight(w)) {
            return Err(Error::InvalidArgument(
                "weights must be positive and finite".into(),
            ));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        let mut values: Vec<f64> = Vec::new();
        let mut cumulative: Vec<f64> = Vec::new();
        let mut acc = 0.0;
        for i in order {
            acc += weights[i];
            if values.last() == Some(&scores[i]) {
                *cumulative.last_mut().unwrap() = acc;
            } else {
                values.push(scores[i]);
                cumulative.push(acc);
            }
        }
        Ok(Self {
            values,
            cumulative,
            total: acc,
        })
    }

    /// Sum of calibration weights.
    pub fn total_weight(&self) -> f64 {
        self.total
    }

    fn invert(&self, target: f64) -> ScoreQuantile {
        let threshold = target * (1.0 - CUMULATIVE_TOLERANCE);
        let idx = self.cumulative.partition_point(|&c| c < threshold);
        match self.values.get(idx) {
            Some(&v) => ScoreQuantile::from_score(v),
            None => ScoreQuantile::Infinite,
        }
    }

    /// Quantile of the calibration masses padded with `tail_weight` at +∞.
    pub fn conformal(&self, beta: f64, tail_weight: f64) -> ScoreQuantile {
        self.invert(beta * (self.total + tail_weight))
    }

    /// Quantile of the calibration masses alone.
    pub fn unpadded(&self, beta: f64) -> f64 {
        match self.invert(beta * self.total) {
            ScoreQuantile::Finite(v) => v,
            ScoreQuantile::Infinite => *self.values.last().unwrap(),
        }
    }
}

/// A level and the weighted multiset it is evaluated on.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedQuantileQuery {
    pub beta: f64,
    pub scores: WeightedScores,
}

/// `Quantile(beta; sum_i p_i δ_{V_i} + p_{n+1} δ_∞)`.
pub fn conformal_quantile_weighted(query: &PaddedQuantileQuery) -> Result<ScoreQuantile> {
    check_beta(query.beta)?;
    let ws = &query.scores;
    Ok(SortedWeightedScores::new(&ws.scores, &ws.weights)?.conformal(query.beta, ws.tail_weight))
}

/// Weighted quantile without the +∞ point mass (the survey-weighted but
/// non-conformal baseline).
pub fn weighted_quantile_unpadded(scores: &[f64], weights: &[f64], beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "beta must lie in (0, 1], got {beta}"
        )));
    }
    Ok(SortedWeightedScores::new(scores, weights)?.unpadded(beta))
}
