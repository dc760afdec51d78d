use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::quantiles::ScoreQuantile;
use crate::scores::ScoreModel;

/// Interval endpoint on the extended real line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Endpoint {
    NegInfinity,
    Finite(f64),
    PosInfinity,
}

impl Endpoint {
    pub fn value(self) -> f64 {
        match self {
            Endpoint::NegInfinity => f64::NEG_INFINITY,
            Endpoint::Finite(v) => v,
            Endpoint::PosInfinity => f64::INFINITY,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Endpoint::Finite(_))
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::NegInfinity => f.write_str("-inf"),
            Endpoint::Finite(v) => write!(f, "{v}"),
            Endpoint::PosInfinity => f.write_str("inf"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Region {
    Interval {
        lower: Endpoint,
        upper: Endpoint,
    },
    Set {
        labels: Vec<usize>,
        n_classes: usize,
    },
    /// No candidate conformed (full conformal only).
    Empty,
}

/// Which engine produced a region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Split,
    SplitWeighted,
    Full,
    FullWeighted,
    Classification,
    ClassificationWeighted,
    Stratified,
    ClusterSubsampleOnce,
    ClusterRepeated,
    ClusterDouble,
    ClusterPooled,
    ObservedCluster,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::Split => "split",
            Method::SplitWeighted => "split-weighted",
            Method::Full => "full",
            Method::FullWeighted => "full-weighted",
            Method::Classification => "classification",
            Method::ClassificationWeighted => "classification-weighted",
            Method::Stratified => "stratified",
            Method::ClusterSubsampleOnce => "cluster-sub1",
            Method::ClusterRepeated => "cluster-subB",
            Method::ClusterDouble => "cluster-double",
            Method::ClusterPooled => "cluster-pool",
            Method::ObservedCluster => "observed-cluster",
        };
        f.write_str(s)
    }
}

/// Diagnostics attached to a region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegionNote {
    /// The padded quantile was +∞; the region is the whole line or label set.
    Vacuous,
    /// `alpha <= 1/(n+1)`, so no finite quantile exists for this sample size.
    DegenerateAlpha,
    /// Full conformal accepted grid points that are not contiguous; the
    /// region reported is their hull.
    NonContiguous,
    /// Full conformal accepted an end point of the grid; the true region may
    /// extend past it.
    GridBoundary,
    /// Nothing conformed.
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRegion {
    pub region: Region,
    /// Nominal coverage `1 - alpha`.
    pub level: f64,
    pub method: Method,
    pub notes: Vec<RegionNote>,
}

impl PredictionRegion {
    /// Turns a score threshold into the region `{ y : score(x, y) <= q }`.
    pub fn from_quantile(
        model: &ScoreModel,
        x: &[f64],
        q: ScoreQuantile,
        level: f64,
        method: Method,
    ) -> Result<Self> {
        let mut notes = Vec::new();
        if q.is_infinite() {
            notes.push(RegionNote::Vacuous);
        }
        let region = match model {
            ScoreModel::AbsResidual(_) => {
                let centre = model.predict(x)?.expect("regression model");
                match q {
                    ScoreQuantile::Finite(q) => Region::Interval {
                        lower: Endpoint::Finite(centre - q),
                        upper: Endpoint::Finite(centre + q),
                    },
                    ScoreQuantile::Infinite => Region::Interval {
                        lower: Endpoint::NegInfinity,
                        upper: Endpoint::PosInfinity,
                    },
                }
            }
            ScoreModel::Response => Region::Interval {
                lower: Endpoint::NegInfinity,
                upper: match q {
                    ScoreQuantile::Finite(q) => Endpoint::Finite(q),
                    ScoreQuantile::Infinite => Endpoint::PosInfinity,
                },
            },
            ScoreModel::OneMinusProb(_) => {
                let probs = model.predict_proba(x)?.expect("classifier");
                let labels = probs
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| q.admits(1.0 - **p))
                    .map(|(k, _)| k)
                    .collect();
                Region::Set {
                    labels,
                    n_classes: probs.len(),
                }
            }
        };
        Ok(Self {
            region,
            level,
            method,
            notes,
        })
    }

    /// Whole real line, or every label.
    pub fn is_vacuous(&self) -> bool {
        match &self.region {
            Region::Interval { lower, upper } => {
                *lower == Endpoint::NegInfinity && *upper == Endpoint::PosInfinity
            }
            Region::Set { labels, n_classes } => labels.len() == *n_classes,
            Region::Empty => false,
        }
    }

    pub fn contains(&self, y: f64) -> bool {
        match &self.region {
            Region::Interval { lower, upper } => lower.value() <= y && y <= upper.value(),
            Region::Set { labels, .. } => {
                y >= 0.0 && y.fract() == 0.0 && labels.contains(&(y as usize))
            }
            Region::Empty => false,
        }
    }

    /// Interval length (possibly infinite) or set size.
    pub fn size(&self) -> f64 {
        match &self.region {
            Region::Interval { lower, upper } => upper.value() - lower.value(),
            Region::Set { labels, .. } => labels.len() as f64,
            Region::Empty => 0.0,
        }
    }

    /// `true` when every point of `self` lies in `other`.
    pub fn is_subset_of(&self, other: &PredictionRegion) -> bool {
        match (&self.region, &other.region) {
            (Region::Empty, _) => true,
            (Region::Interval { lower: a, upper: b }, Region::Interval { lower: c, upper: d }) => {
                c.value() <= a.value() && b.value() <= d.value()
            }
            (Region::Set { labels: a, .. }, Region::Set { labels: b, .. }) => {
                a.iter().all(|l| b.contains(l))
            }
            _ => false,
        }
    }

    pub(crate) fn with_note(mut self, note: RegionNote) -> Self {
        if !self.notes.contains(&note) {
            self.notes.push(note);
        }
        self
    }
}
