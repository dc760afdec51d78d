use std::collections::BTreeMap;

use super::region::{Method, PredictionRegion};
use super::split::{split_interval_exchangeable, split_interval_weighted, CalibrationContext};
use crate::designs::{DesignSpec, DrawnSample};
use crate::error::{Error, Result};
use crate::population::FinitePopulation;
use crate::scores::ScoreModel;

/// One calibration context per stratum.
#[derive(Clone, Debug)]
pub struct StratifiedCalibration {
    labels: Vec<String>,
    contexts: Vec<Option<CalibrationContext>>,
}

impl StratifiedCalibration {
    /// Splits a stratified calibration sample by stratum. Strata with no
    /// calibration units are kept as empty slots.
    pub fn from_sample(
        pop: &FinitePopulation,
        calibration: &DrawnSample,
        model: ScoreModel,
        alpha: f64,
    ) -> Result<Self> {
        let DesignSpec::Stratified { within, .. } = &calibration.design else {
            return Err(Error::IncompatibleDesign(format!(
                "stratified calibration needs a stratified sample, got {}",
                calibration.design.name()
            )));
        };
        let labels = pop
            .stratum_labels()
            .ok_or_else(|| Error::IncompatibleDesign("population has no strata".into()))?
            .to_vec();
        let strata = calibration
            .strata
            .as_ref()
            .expect("stratified sample records strata");
        let mut positions = vec![Vec::new(); labels.len()];
        for (p, &h) in strata.iter().enumerate() {
            positions[h].push(p);
        }
        let contexts = positions
            .iter()
            .map(|pos| {
                if pos.is_empty() {
                    return Ok(None);
                }
                let part = calibration.subset(pos);
                let mut ctx = CalibrationContext::from_sample(pop, &part, model.clone(), alpha)?;
                if within.is_exchangeable() {
                    ctx = CalibrationContext::from_scores(
                        model.clone(),
                        ctx.scores().to_vec(),
                        ctx.weights().map(<[f64]>::to_vec),
                        alpha,
                        true,
                    )?;
                }
                Ok(Some(ctx))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { labels, contexts })
    }

    /// One optional context per stratum label, in label order.
    pub fn from_contexts(
        labels: Vec<String>,
        contexts: Vec<Option<CalibrationContext>>,
    ) -> Result<Self> {
        if labels.len() != contexts.len() {
            return Err(Error::DimensionMismatch {
                expected: labels.len(),
                got: contexts.len(),
            });
        }
        Ok(Self { labels, contexts })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownStratum(label.to_string()))
    }

    pub fn context(&self, stratum: usize) -> Option<&CalibrationContext> {
        self.contexts.get(stratum).and_then(Option::as_ref)
    }

    /// Same scores at another level.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        Ok(Self {
            labels: self.labels.clone(),
            contexts: self
                .contexts
                .iter()
                .map(|c| c.as_ref().map(|c| c.with_alpha(alpha)).transpose())
                .collect::<Result<_>>()?,
        })
    }
}

/// Calibrates only against the test unit's own stratum. Strata sampled by
/// SRS use the exchangeable engine; PPS strata need `test_weight`.
pub fn stratified_interval(
    cal: &StratifiedCalibration,
    x_test: &[f64],
    stratum: usize,
    test_weight: Option<f64>,
) -> Result<PredictionRegion> {
    let label = cal
        .labels
        .get(stratum)
        .ok_or_else(|| Error::UnknownStratum(format!("index {stratum}")))?;
    let ctx = cal.context(stratum).ok_or_else(|| {
        Error::InvalidArgument(format!("stratum {label} has no calibration units"))
    })?;
    let mut region = if ctx.is_exchangeable() {
        split_interval_exchangeable(ctx, x_test)?
    } else {
        let w = test_weight.ok_or_else(|| {
            Error::InvalidArgument(format!("stratum {label} is PPS; a test weight is required"))
        })?;
        split_interval_weighted(ctx, x_test, w)?
    };
    region.method = Method::Stratified;
    Ok(region)
}

/// Post-stratification weights `N_h / n_h`.
#[derive(Clone, Debug, PartialEq)]
pub struct PostStratWeights {
    /// One weight per sampled unit, in input order.
    pub unit_weights: Vec<f64>,
    /// Weight a test unit receives in each stratum with `n_h >= 1`.
    pub stratum_weights: BTreeMap<String, f64>,
}

impl PostStratWeights {
    pub fn tail_weight(&self, stratum: &str) -> Result<f64> {
        self.stratum_weights.get(stratum).copied().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "no sampled units in post-stratum {stratum}; its weight is undefined"
            ))
        })
    }
}

/// Weights for a simple random sample post-stratified to known population
/// counts. `sample_counts` defaults to the counts in `unit_strata`.
pub fn poststrat_weights(
    unit_strata: &[String],
    population_sizes: &BTreeMap<String, f64>,
    sample_counts: Option<&BTreeMap<String, usize>>,
) -> Result<PostStratWeights> {
    let mut counted = BTreeMap::new();
    for s in unit_strata {
        *counted.entry(s.clone()).or_insert(0usize) += 1;
    }
    let counts = sample_counts.unwrap_or(&counted);
    let mut stratum_weights = BTreeMap::new();
    for (label, &n_h) in counts {
        if n_h == 0 {
            continue;
        }
        let big = *population_sizes
            .get(label)
            .ok_or_else(|| Error::UnknownStratum(label.clone()))?;
        if !(big > 0.0 && big.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "population size of {label} must be positive"
            )));
        }
        stratum_weights.insert(label.clone(), big / n_h as f64);
    }
    let unit_weights = unit_strata
        .iter()
        .map(|s| {
            stratum_weights
                .get(s)
                .copied()
                .ok_or_else(|| Error::UnknownStratum(s.clone()))
        })
        .collect::<Result<_>>()?;
    Ok(PostStratWeights {
        unit_weights,
        stratum_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn ctx(scores: &[f64]) -> CalibrationContext {
        let m = ScoreModel::regression(crate::scores::ConstantPredictor { value: 0.0, dim: 0 });
        CalibrationContext::from_scores(m, scores.to_vec(), None, 0.25, true).unwrap()
    }

    #[test]
    fn strata_calibrate_separately() {
        let cal = StratifiedCalibration::from_contexts(
            s(&["a", "b", "c"]),
            vec![
                Some(ctx(&[1.0, 2.0, 3.0, 4.0])),
                Some(ctx(&[10.0, 20.0, 30.0, 40.0])),
                None,
            ],
        )
        .unwrap();
        assert_eq!(stratified_interval(&cal, &[], 0, None).unwrap().size(), 8.0);
        assert_eq!(
            stratified_interval(&cal, &[], 1, None).unwrap().size(),
            80.0
        );
        assert!(stratified_interval(&cal, &[], 2, None).is_err());
        assert!(matches!(
            stratified_interval(&cal, &[], 3, None),
            Err(Error::UnknownStratum(_))
        ));
        assert_eq!(cal.index_of("b").unwrap(), 1);
    }

    #[test]
    fn one_stratum_matches_unstratified() {
        let c = ctx(&[3.0, 1.0, 4.0, 1.5, 9.0]);
        let cal =
            StratifiedCalibration::from_contexts(s(&["only"]), vec![Some(c.clone())]).unwrap();
        let a = stratified_interval(&cal, &[], 0, None).unwrap();
        let b = split_interval_exchangeable(&c, &[]).unwrap();
        assert_eq!(a.region, b.region);
    }

    #[test]
    fn poststrat_arithmetic() {
        let sizes = BTreeMap::from([("a".to_string(), 90.0), ("b".to_string(), 10.0)]);
        let counts = BTreeMap::from([("a".to_string(), 5), ("b".to_string(), 5)]);
        let units = s(&["a", "a", "a", "a", "a", "b", "b", "b", "b", "b"]);
        let w = poststrat_weights(&units, &sizes, Some(&counts)).unwrap();
        assert_eq!(w.unit_weights[0], 18.0);
        assert_eq!(w.unit_weights[9], 2.0);
        let doubled: BTreeMap<String, f64> =
            sizes.iter().map(|(k, v)| (k.clone(), 2.0 * v)).collect();
        let w2 = poststrat_weights(&units, &doubled, Some(&counts)).unwrap();
        let norm = |v: &[f64]| {
            let t: f64 = v.iter().sum();
            v.iter().map(|x| x / t).collect::<Vec<_>>()
        };
        assert_eq!(norm(&w.unit_weights), norm(&w2.unit_weights));
    }

    #[test]
    fn poststrat_weights_are_population_over_sample() {
        let sizes = BTreeMap::from([
            ("a".to_string(), 100.0),
            ("b".to_string(), 30.0),
            ("c".to_string(), 5.0),
        ]);
        let w = poststrat_weights(&s(&["a", "b", "a", "a"]), &sizes, None).unwrap();
        let third = 100.0 / 3.0;
        assert_eq!(w.unit_weights, vec![third, 30.0, third, third]);
        assert_eq!(w.tail_weight("b").unwrap(), 30.0);
        assert!(w.tail_weight("c").is_err());
    }

    #[test]
    fn unknown_post_stratum_errors() {
        let sizes = BTreeMap::from([("a".to_string(), 10.0)]);
        assert!(matches!(
            poststrat_weights(&s(&["z"]), &sizes, None),
            Err(Error::UnknownStratum(_))
        ));
    }

    #[test]
    fn single_poststratum_is_uniform() {
        let sizes = BTreeMap::from([("a".to_string(), 50.0)]);
        let w = poststrat_weights(&s(&["a"; 5]), &sizes, None).unwrap();
        assert!(w.unit_weights.iter().all(|&v| v == 10.0));
    }
}
