use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::check_alpha;
use super::region::{Endpoint, Method, PredictionRegion, Region, RegionNote};
use crate::error::{Error, Result};
use crate::quantiles::SortedWeightedScores;
use crate::scores::{fit_ols, Regressor};

/// A learning procedure refit once per candidate response.
///
/// Full conformal is only valid when the fit treats its rows symmetrically
/// (up to the supplied weights).
pub trait RegressionFitter: Send + Sync {
    fn fit(&self, x: &[Vec<f64>], y: &[f64], weights: Option<&[f64]>)
        -> Result<Arc<dyn Regressor>>;
}

/// Ordinary, or survey-weighted, least squares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OlsFitter {
    pub weighted: bool,
}

impl RegressionFitter for OlsFitter {
    fn fit(
        &self,
        x: &[Vec<f64>],
        y: &[f64],
        weights: Option<&[f64]>,
    ) -> Result<Arc<dyn Regressor>> {
        let w = if self.weighted { weights } else { None };
        Ok(Arc::new(fit_ols(x, y, w)?))
    }
}

/// Candidate responses tried by [`full_conformal_interval`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum GridSpec {
    /// `points` evenly spaced values over `[min - r, max + r]`, where `r` is
    /// the range of the training responses.
    Auto {
        points: usize,
    },
    Range {
        lower: f64,
        upper: f64,
        points: usize,
    },
    Values {
        values: Vec<f64>,
    },
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Auto { points: 200 }
    }
}

fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let step = (hi - lo) / (points - 1) as f64;
    (0..points)
        .map(|i| {
            if i + 1 == points {
                hi
            } else {
                lo + step * i as f64
            }
        })
        .collect()
}

impl GridSpec {
    pub fn values(&self, y: &[f64]) -> Result<Vec<f64>> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        match self {
            GridSpec::Auto { points } => {
                if *points < 2 {
                    return bad("a grid needs at least 2 points");
                }
                let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let r = if hi > lo { hi - lo } else { 1.0 };
                Ok(linspace(lo - r, hi + r, *points))
            }
            GridSpec::Range {
                lower,
                upper,
                points,
            } => {
                if *points < 2 || lower.partial_cmp(upper) != Some(std::cmp::Ordering::Less) {
                    return bad("a grid needs lower < upper and at least 2 points");
                }
                Ok(linspace(*lower, *upper, *points))
            }
            GridSpec::Values { values } => {
                if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
                    return bad("grid values must be finite and non-empty");
                }
                let mut v = values.clone();
                v.sort_by(f64::total_cmp);
                v.dedup();
                Ok(v)
            }
        }
    }
}

/// Training rows for full conformal.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingData {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    /// Design weights; required for the weighted variant.
    pub weights: Option<Vec<f64>>,
}

/// Full (transductive) conformal with absolute-residual scores.
///
/// Every grid value `y` is appended to the data as the test response, the
/// model is refit, and `y` is kept when its score is at most the padded
/// `1 - alpha` quantile of the training scores. With `test_weight` the
/// quantile is weighted by the design weights and the test unit's weight
/// sits at +∞. The region reported is the hull of the kept values.
pub fn full_conformal_interval(
    data: &TrainingData,
    x_test: &[f64],
    alpha: f64,
    grid: &GridSpec,
    test_weight: Option<f64>,
    fitter: &dyn RegressionFitter,
) -> Result<PredictionRegion> {
    check_alpha(alpha)?;
    let n = data.y.len();
    if n == 0 || data.x.len() != n {
        return Err(Error::InvalidArgument(
            "training data must have one row per response".into(),
        ));
    }
    let weights: Vec<f64> = match (test_weight, &data.weights) {
        (None, _) => vec![1.0; n + 1],
        (Some(t), Some(w)) if w.len() == n => w.iter().copied().chain([t]).collect(),
        (Some(_), Some(_)) => {
            return Err(Error::InvalidArgument("one weight per training row".into()))
        }
        (Some(_), None) => {
            return Err(Error::InvalidArgument(
                "weighted full conformal needs design weights".into(),
            ))
        }
    };
    if !weights.iter().all(|w| *w > 0.0 && w.is_finite()) {
        return Err(Error::InvalidArgument(
            "weights must be positive and finite".into(),
        ));
    }
    let candidates = grid.values(&data.y)?;
    let mut x_aug = data.x.clone();
    x_aug.push(x_test.to_vec());
    let level = 1.0 - alpha;

    let accepted = candidates
        .par_iter()
        .map(|&cand| {
            let mut y_aug = data.y.clone();
            y_aug.push(cand);
            let model = fitter.fit(&x_aug, &y_aug, Some(&weights))?;
            let scores: Vec<f64> = x_aug
                .iter()
                .zip(&y_aug)
                .map(|(x, y)| (y - model.predict(x)).abs())
                .collect();
            let cal = SortedWeightedScores::new(&scores[..n], &weights[..n])?;
            Ok(cal.conformal(level, weights[n]).admits(scores[n]))
        })
        .collect::<Result<Vec<bool>>>()?;

    let method = if test_weight.is_some() {
        Method::FullWeighted
    } else {
        Method::Full
    };
    let kept: Vec<usize> = (0..candidates.len()).filter(|&i| accepted[i]).collect();
    let (Some(&first), Some(&last)) = (kept.first(), kept.last()) else {
        return Ok(PredictionRegion {
            region: Region::Empty,
            level,
            method,
            notes: vec![RegionNote::Empty],
        });
    };
    let mut notes = Vec::new();
    if last - first + 1 != kept.len() {
        notes.push(RegionNote::NonContiguous);
    }
    if first == 0 || last + 1 == candidates.len() {
        notes.push(RegionNote::GridBoundary);
    }
    Ok(PredictionRegion {
        region: Region::Interval {
            lower: Endpoint::Finite(candidates[first]),
            upper: Endpoint::Finite(candidates[last]),
        },
        level,
        method,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_data() -> TrainingData {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64]).collect();
        let y = x
            .iter()
            .enumerate()
            .map(|(i, v)| 2.0 * v[0] + 1.0 + ((i * 37) % 11) as f64 / 5.0 - 1.0)
            .collect();
        TrainingData {
            x,
            y,
            weights: Some((0..30).map(|i| 1.0 + (i % 4) as f64).collect()),
        }
    }

    #[test]
    fn interval_covers_the_fitted_line() {
        let d = line_data();
        let r = full_conformal_interval(
            &d,
            &[15.0],
            0.2,
            &GridSpec::default(),
            None,
            &OlsFitter::default(),
        )
        .unwrap();
        assert!(r.contains(31.0));
        assert!(r.size() < 5.0);
        assert!(r.notes.is_empty());
    }

    #[test]
    fn tiny_alpha_accepts_whole_grid() {
        let d = line_data();
        let grid = GridSpec::Range {
            lower: -10.0,
            upper: 10.0,
            points: 21,
        };
        let r =
            full_conformal_interval(&d, &[15.0], 0.01, &grid, None, &OlsFitter::default()).unwrap();
        assert_eq!(
            r.region,
            Region::Interval {
                lower: Endpoint::Finite(-10.0),
                upper: Endpoint::Finite(10.0)
            }
        );
        assert!(r.notes.contains(&RegionNote::GridBoundary));
    }

    #[test]
    fn grid_far_from_data_is_empty() {
        let d = line_data();
        let grid = GridSpec::Range {
            lower: 1000.0,
            upper: 1100.0,
            points: 11,
        };
        let r =
            full_conformal_interval(&d, &[15.0], 0.2, &grid, None, &OlsFitter::default()).unwrap();
        assert_eq!(r.region, Region::Empty);
    }

    #[test]
    fn equal_weights_match_unweighted() {
        let mut d = line_data();
        d.weights = Some(vec![3.0; 30]);
        let a = full_conformal_interval(
            &d,
            &[4.0],
            0.2,
            &GridSpec::default(),
            None,
            &OlsFitter::default(),
        )
        .unwrap();
        let b = full_conformal_interval(
            &d,
            &[4.0],
            0.2,
            &GridSpec::default(),
            Some(3.0),
            &OlsFitter::default(),
        )
        .unwrap();
        assert_eq!(a.region, b.region);
    }

    #[test]
    fn weighted_needs_weights() {
        let mut d = line_data();
        d.weights = None;
        assert!(full_conformal_interval(
            &d,
            &[4.0],
            0.2,
            &GridSpec::default(),
            Some(1.0),
            &OlsFitter::default()
        )
        .is_err());
    }
}
