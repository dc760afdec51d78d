use serde::{Deserialize, Serialize};

use super::check_alpha;
use super::region::{Method, PredictionRegion, RegionNote};
use crate::designs::DrawnSample;
use crate::error::{Error, Result};
use crate::population::FinitePopulation;
use crate::quantiles::{tolerant_rank, ScoreQuantile, SortedScores, SortedWeightedScores};
use crate::scores::{ScoreKind, ScoreModel};

/// Calibration scores with their design weights, sorted once and reused for
/// every test point.
#[derive(Clone, Debug)]
pub struct CalibrationContext {
    model: ScoreModel,
    scores: Vec<f64>,
    weights: Option<Vec<f64>>,
    alpha: f64,
    exchangeable: bool,
    sorted: SortedScores,
    weighted: Option<SortedWeightedScores>,
}

impl CalibrationContext {
    /// Scores every calibration draw. Weights are the draws' base weights and
    /// exchangeability follows the design.
    pub fn from_sample(
        pop: &FinitePopulation,
        calibration: &DrawnSample,
        model: ScoreModel,
        alpha: f64,
    ) -> Result<Self> {
        let scores = calibration
            .units
            .iter()
            .map(|&id| {
                let u = pop.unit(id);
                model.score(&u.x, u.y)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_scores(
            model,
            scores,
            Some(calibration.base_weights.clone()),
            alpha,
            calibration.design.is_exchangeable(),
        )
    }

    pub fn from_scores(
        model: ScoreModel,
        scores: Vec<f64>,
        weights: Option<Vec<f64>>,
        alpha: f64,
        exchangeable: bool,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        let sorted = SortedScores::new(&scores)?;
        let weighted = weights
            .as_deref()
            .map(|w| SortedWeightedScores::new(&scores, w))
            .transpose()?;
        Ok(Self {
            model,
            scores,
            weights,
            alpha,
            exchangeable,
            sorted,
            weighted,
        })
    }

    /// Same scores at another miscoverage level.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            alpha,
            ..self.clone()
        })
    }

    pub fn model(&self) -> &ScoreModel {
        &self.model
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn level(&self) -> f64 {
        1.0 - self.alpha
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn is_exchangeable(&self) -> bool {
        self.exchangeable
    }

    /// `true` when `alpha <= 1/(n+1)`: the unweighted quantile is +∞.
    pub fn alpha_is_degenerate(&self) -> bool {
        tolerant_rank(self.level(), self.len() + 1) > self.len()
    }

    pub fn quantile_unweighted(&self) -> ScoreQuantile {
        self.sorted.conformal(self.level())
    }

    /// Padded weighted quantile with `test_weight` at +∞.
    pub fn quantile_weighted(&self, test_weight: f64) -> Result<ScoreQuantile> {
        let w = self
            .weighted
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("calibration set carries no weights".into()))?;
        if !(test_weight > 0.0 && test_weight.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "test weight must be positive and finite, got {test_weight}"
            )));
        }
        Ok(w.conformal(self.level(), test_weight))
    }

    /// Unweighted quantile without the +∞ pad.
    pub fn naive_quantile(&self) -> f64 {
        self.sorted.naive(self.level())
    }

    /// Weighted quantile without the +∞ pad.
    pub fn naive_weighted_quantile(&self) -> Result<f64> {
        let w = self
            .weighted
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("calibration set carries no weights".into()))?;
        Ok(w.unpadded(self.level()))
    }

    pub(crate) fn region(
        &self,
        x: &[f64],
        q: ScoreQuantile,
        method: Method,
    ) -> Result<PredictionRegion> {
        PredictionRegion::from_quantile(&self.model, x, q, self.level(), method)
    }
}

/// Split conformal for exchangeable designs (SRS with or without
/// replacement).
pub fn split_interval_exchangeable(
    ctx: &CalibrationContext,
    x_test: &[f64],
) -> Result<PredictionRegion> {
    if !ctx.exchangeable {
        return Err(Error::IncompatibleDesign(
            "the exchangeable engine needs an SRS calibration set; use the weighted engine".into(),
        ));
    }
    let method = match ctx.model.kind() {
        ScoreKind::OneMinusProb => Method::Classification,
        _ => Method::Split,
    };
    let region = ctx.region(x_test, ctx.quantile_unweighted(), method)?;
    Ok(if ctx.alpha_is_degenerate() {
        region.with_note(RegionNote::DegenerateAlpha)
    } else {
        region
    })
}

/// Weighted split conformal: calibration mass `w_i`, and the test unit's own
/// weight `test_weight` placed at +∞.
pub fn split_interval_weighted(
    ctx: &CalibrationContext,
    x_test: &[f64],
    test_weight: f64,
) -> Result<PredictionRegion> {
    let method = match ctx.model.kind() {
        ScoreKind::OneMinusProb => Method::ClassificationWeighted,
        _ => Method::SplitWeighted,
    };
    let q = ctx.quantile_weighted(test_weight)?;
    ctx.region(x_test, q, method)
}

/// How the test unit's weight is obtained when it is not known exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "value")]
pub enum TestWeight {
    Known(f64),
    /// Upper bound on any unit's weight; the region is then valid for every
    /// weight at or below it.
    Conservative(f64),
    /// One region per candidate weight.
    Sensitivity(Vec<f64>),
}

/// Weighted split conformal under each [`TestWeight`] mode. Returns the
/// weight used alongside each region.
pub fn split_interval_with_weight(
    ctx: &CalibrationContext,
    x_test: &[f64],
    weight: &TestWeight,
) -> Result<Vec<(f64, PredictionRegion)>> {
    let weights: Vec<f64> = match weight {
        TestWeight::Known(w) | TestWeight::Conservative(w) => vec![*w],
        TestWeight::Sensitivity(ws) if ws.is_empty() => {
            return Err(Error::InvalidArgument("empty weight grid".into()))
        }
        TestWeight::Sensitivity(ws) => ws.clone(),
    };
    weights
        .into_iter()
        .map(|w| Ok((w, split_interval_weighted(ctx, x_test, w)?)))
        .collect()
}

/// Label set `{ k : 1 - p_k(x) <= q }`. Weighted when `test_weight` is given.
pub fn classification_set(
    ctx: &CalibrationContext,
    x_test: &[f64],
    test_weight: Option<f64>,
) -> Result<PredictionRegion> {
    if ctx.model.kind() != ScoreKind::OneMinusProb {
        return Err(Error::InvalidArgument(
            "classification sets need a classifier score model".into(),
        ));
    }
    match test_weight {
        Some(w) => split_interval_weighted(ctx, x_test, w),
        None => split_interval_exchangeable(ctx, x_test),
    }
}
