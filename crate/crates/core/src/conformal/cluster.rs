use rand::Rng;
use serde::{Deserialize, Serialize};

use super::check_alpha;
use super::region::{Endpoint, Method, PredictionRegion, Region, RegionNote};
use super::split::{split_interval_exchangeable, CalibrationContext};
use crate::designs::DrawnSample;
use crate::error::{Error, Result};
use crate::population::FinitePopulation;
use crate::quantiles::{ScoreQuantile, SortedScores, SortedWeightedScores, CUMULATIVE_TOLERANCE};
use crate::scores::ScoreModel;

/// Calibration units of one sampled cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterGroup {
    pub label: String,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub scores: Vec<f64>,
}

/// Calibration data grouped by sampled cluster.
#[derive(Clone, Debug)]
pub struct ClusteredCalibration {
    model: ScoreModel,
    groups: Vec<ClusterGroup>,
}

impl ClusteredCalibration {
    pub fn from_sample(
        pop: &FinitePopulation,
        calibration: &DrawnSample,
        model: ScoreModel,
    ) -> Result<Self> {
        let (Some(clusters), Some(labels)) = (&calibration.clusters, pop.cluster_labels()) else {
            return Err(Error::IncompatibleDesign(
                "sample carries no cluster membership".into(),
            ));
        };
        let mut slots: Vec<Option<usize>> = vec![None; labels.len()];
        let mut raw: Vec<(String, Vec<Vec<f64>>, Vec<f64>)> = Vec::new();
        for (&id, &c) in calibration.units.iter().zip(clusters) {
            let slot = *slots[c].get_or_insert_with(|| {
                raw.push((labels[c].clone(), Vec::new(), Vec::new()));
                raw.len() - 1
            });
            let u = pop.unit(id);
            raw[slot].1.push(u.x.clone());
            raw[slot].2.push(u.y);
        }
        Self::from_groups(model, raw)
    }

    /// Builds from `(label, covariates, responses)` triples.
    pub fn from_groups(
        model: ScoreModel,
        groups: Vec<(String, Vec<Vec<f64>>, Vec<f64>)>,
    ) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::EmptyScores);
        }
        let groups = groups
            .into_iter()
            .map(|(label, x, y)| {
                if y.is_empty() || x.len() != y.len() {
                    return Err(Error::InvalidArgument(format!(
                        "cluster {label} needs one covariate row per response and at least one unit"
                    )));
                }
                let scores = x
                    .iter()
                    .zip(&y)
                    .map(|(x, &y)| model.score(x, y))
                    .collect::<Result<_>>()?;
                Ok(ClusterGroup {
                    label,
                    x,
                    y,
                    scores,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { model, groups })
    }

    pub fn model(&self) -> &ScoreModel {
        &self.model
    }

    pub fn groups(&self) -> &[ClusterGroup] {
        &self.groups
    }

    /// Number of sampled clusters.
    pub fn k(&self) -> usize {
        self.groups.len()
    }

    pub fn n_units(&self) -> usize {
        self.groups.iter().map(|g| g.y.len()).sum()
    }
}

fn one_per_cluster<R: Rng + ?Sized>(cal: &ClusteredCalibration, rng: &mut R) -> Vec<usize> {
    cal.groups
        .iter()
        .map(|g| rng.random_range(0..g.y.len()))
        .collect()
}

/// Exchangeable calibration on one randomly chosen unit per cluster.
#[derive(Clone, Debug)]
pub struct ClusterSubsampleEngine {
    pub context: CalibrationContext,
    /// Position of the chosen unit within each cluster.
    pub chosen: Vec<usize>,
}

impl ClusterSubsampleEngine {
    pub fn region(&self, x_test: &[f64]) -> Result<PredictionRegion> {
        let mut r = split_interval_exchangeable(&self.context, x_test)?;
        r.method = Method::ClusterSubsampleOnce;
        Ok(r)
    }
}

/// Keeps one unit per sampled cluster, chosen uniformly. Valid at `1 - alpha`
/// but discards the rest of each cluster.
pub fn cluster_subsample_once<R: Rng + ?Sized>(
    cal: &ClusteredCalibration,
    alpha: f64,
    rng: &mut R,
) -> Result<ClusterSubsampleEngine> {
    let chosen = one_per_cluster(cal, rng);
    let scores = cal
        .groups
        .iter()
        .zip(&chosen)
        .map(|(g, &j)| g.scores[j])
        .collect();
    Ok(ClusterSubsampleEngine {
        context: CalibrationContext::from_scores(cal.model.clone(), scores, None, alpha, true)?,
        chosen,
    })
}

/// A fixed score threshold applied to any test covariate.
#[derive(Clone, Debug)]
pub struct ThresholdEngine {
    pub model: ScoreModel,
    pub threshold: ScoreQuantile,
    pub level: f64,
    pub method: Method,
}

impl ThresholdEngine {
    pub fn region(&self, x_test: &[f64]) -> Result<PredictionRegion> {
        PredictionRegion::from_quantile(
            &self.model,
            x_test,
            self.threshold,
            self.level,
            self.method,
        )
    }
}

/// Repeats the one-unit-per-cluster subsample `b` times and keeps a candidate
/// score `s` when its conformal p-value, averaged over subsamples, exceeds
/// `alpha`:
///
/// `(1/b) sum_r (1 + #{ j : V_j^(r) >= s }) / (k + 1) > alpha`.
///
/// The averaged p-value only guarantees `1 - 2 alpha`. The accepted set is
/// `s <= s*` for the largest pooled score `s*` that passes, so it is found
/// exactly without a grid.
pub fn cluster_repeated_subsample<R: Rng + ?Sized>(
    cal: &ClusteredCalibration,
    alpha: f64,
    b: usize,
    rng: &mut R,
) -> Result<ThresholdEngine> {
    check_alpha(alpha)?;
    if b == 0 {
        return Err(Error::InvalidArgument("need at least one subsample".into()));
    }
    let k = cal.k();
    let draws: Vec<Vec<f64>> = (0..b)
        .map(|_| {
            let mut v: Vec<f64> = one_per_cluster(cal, rng)
                .into_iter()
                .zip(&cal.groups)
                .map(|(j, g)| g.scores[j])
                .collect();
            v.sort_by(f64::total_cmp);
            v
        })
        .collect();
    let target = alpha * (b * (k + 1)) as f64 * (1.0 + CUMULATIVE_TOLERANCE);
    let passes = |s: f64| {
        let total: usize = draws
            .iter()
            .map(|d| 1 + k - d.partition_point(|&v| v < s))
            .sum();
        total as f64 > target
    };
    let threshold = if passes(f64::INFINITY) {
        ScoreQuantile::Infinite
    } else {
        let mut pooled: Vec<f64> = draws.concat();
        pooled.sort_by(f64::total_cmp);
        pooled.dedup();
        let count = pooled.partition_point(|&v| passes(v));
        ScoreQuantile::Finite(pooled[count - 1])
    };
    Ok(ThresholdEngine {
        model: cal.model.clone(),
        threshold,
        level: 1.0 - alpha,
        method: Method::ClusterRepeated,
    })
}

/// Where the +∞ mass of the pooled cluster-weighted CDF comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PooledPadding {
    /// A whole phantom cluster: mass `1/(k+1)`.
    #[default]
    PhantomCluster,
    /// A single phantom unit carrying an average unit's weight `k/n`; reduces
    /// exactly to the exchangeable engine when `k = 1` or every cluster has
    /// one unit.
    PhantomUnit,
}

/// Pools every calibration unit, each weighted `1/n_l` by its cluster's
/// size so every cluster carries equal mass, pads with +∞, and inverts at
/// `1 - alpha`. Coverage holds only as the number of clusters grows.
pub fn cluster_pooled_cdf(
    cal: &ClusteredCalibration,
    alpha: f64,
    padding: PooledPadding,
) -> Result<ThresholdEngine> {
    check_alpha(alpha)?;
    let mut scores = Vec::with_capacity(cal.n_units());
    let mut weights = Vec::with_capacity(cal.n_units());
    for g in &cal.groups {
        let w = 1.0 / g.scores.len() as f64;
        scores.extend_from_slice(&g.scores);
        weights.extend(std::iter::repeat_n(w, g.scores.len()));
    }
    let tail = match padding {
        PooledPadding::PhantomCluster => 1.0,
        PooledPadding::PhantomUnit => cal.k() as f64 / cal.n_units() as f64,
    };
    let threshold = SortedWeightedScores::new(&scores, &weights)?.conformal(1.0 - alpha, tail);
    Ok(ThresholdEngine {
        model: cal.model.clone(),
        threshold,
        level: 1.0 - alpha,
        method: Method::ClusterPooled,
    })
}

/// Two-sided interval for the response of a unit from an unsampled cluster,
/// using responses only.
///
/// Each sampled cluster gives a within-cluster conformal interval with
/// `alpha/4` in each tail; the conformal quantiles of those endpoints across
/// clusters, again with `alpha/4` per tail, form the region. A union bound
/// gives coverage at least `1 - alpha`.
pub fn cluster_double_conformal(
    cal: &ClusteredCalibration,
    alpha: f64,
) -> Result<PredictionRegion> {
    check_alpha(alpha)?;
    if cal.k() < 2 {
        return Err(Error::InvalidArgument(
            "double conformal needs at least two sampled clusters".into(),
        ));
    }
    let beta = 1.0 - alpha / 4.0;
    let as_score = |q: ScoreQuantile| q.finite().unwrap_or(f64::INFINITY);
    let mut uppers = Vec::with_capacity(cal.k());
    let mut neg_lowers = Vec::with_capacity(cal.k());
    for g in &cal.groups {
        let neg: Vec<f64> = g.y.iter().map(|v| -v).collect();
        uppers.push(as_score(SortedScores::new(&g.y)?.conformal(beta)));
        neg_lowers.push(as_score(SortedScores::new(&neg)?.conformal(beta)));
    }
    let upper = match SortedScores::new(&uppers)?.conformal(beta) {
        ScoreQuantile::Finite(v) => Endpoint::Finite(v),
        ScoreQuantile::Infinite => Endpoint::PosInfinity,
    };
    let lower = match SortedScores::new(&neg_lowers)?.conformal(beta) {
        ScoreQuantile::Finite(v) => Endpoint::Finite(-v),
        ScoreQuantile::Infinite => Endpoint::NegInfinity,
    };
    let mut r = PredictionRegion {
        region: Region::Interval { lower, upper },
        level: 1.0 - alpha,
        method: Method::ClusterDouble,
        notes: Vec::new(),
    };
    if !lower.is_finite() || !upper.is_finite() {
        r = r.with_note(RegionNote::Vacuous);
    }
    Ok(r)
}

/// Test unit from a cluster that was sampled: calibrate on that cluster's
/// own units, which are exchangeable with it.
pub fn observed_cluster_interval(
    cal: &ClusteredCalibration,
    cluster: &str,
    alpha: f64,
    x_test: &[f64],
) -> Result<PredictionRegion> {
    let g = cal
        .groups
        .iter()
        .find(|g| g.label == cluster)
        .ok_or_else(|| Error::UnknownCluster(cluster.to_string()))?;
    let ctx =
        CalibrationContext::from_scores(cal.model.clone(), g.scores.clone(), None, alpha, true)?;
    let mut r = split_interval_exchangeable(&ctx, x_test)?;
    r.method = Method::ObservedCluster;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn groups(ys: &[&[f64]]) -> ClusteredCalibration {
        let raw = ys
            .iter()
            .enumerate()
            .map(|(i, y)| (format!("C{}", i + 1), vec![vec![]; y.len()], y.to_vec()))
            .collect();
        ClusteredCalibration::from_groups(ScoreModel::Response, raw).unwrap()
    }

    #[test]
    fn singleton_clusters_reduce_to_exchangeable() {
        let ys: Vec<f64> = (0..19).map(|i| ((i * 13) % 19) as f64).collect();
        let nested: Vec<&[f64]> = ys.iter().map(std::slice::from_ref).collect();
        let cal = groups(&nested);
        let ctx =
            CalibrationContext::from_scores(ScoreModel::Response, ys.clone(), None, 0.2, true)
                .unwrap();
        let plain = split_interval_exchangeable(&ctx, &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let once = cluster_subsample_once(&cal, 0.2, &mut rng)
            .unwrap()
            .region(&[])
            .unwrap();
        assert_eq!(once.region, plain.region);
        for pad in [PooledPadding::PhantomCluster, PooledPadding::PhantomUnit] {
            let pooled = cluster_pooled_cdf(&cal, 0.2, pad)
                .unwrap()
                .region(&[])
                .unwrap();
            assert_eq!(pooled.region, plain.region);
        }
    }

    #[test]
    fn one_cluster_pooled_with_phantom_unit_is_exchangeable() {
        let ys: Vec<f64> = (0..24).map(|i| ((i * 7) % 24) as f64 * 0.5).collect();
        let cal = groups(&[&ys]);
        let ctx =
            CalibrationContext::from_scores(ScoreModel::Response, ys.clone(), None, 0.1, true)
                .unwrap();
        let plain = split_interval_exchangeable(&ctx, &[]).unwrap();
        let pooled = cluster_pooled_cdf(&cal, 0.1, PooledPadding::PhantomUnit)
            .unwrap()
            .region(&[])
            .unwrap();
        assert_eq!(pooled.region, plain.region);
    }

    #[test]
    fn repeated_subsample_is_vacuous_with_few_clusters() {
        let cal = groups(&[&[1.0, 2.0], &[3.0], &[4.0, 5.0, 6.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = cluster_repeated_subsample(&cal, 0.2, 10, &mut rng).unwrap();
        assert!(e.threshold.is_infinite());
        assert!(e.region(&[]).unwrap().is_vacuous());
    }

    #[test]
    fn repeated_subsample_matches_brute_force_scan() {
        let ys: Vec<Vec<f64>> = (0..12)
            .map(|c| {
                (0..(1 + c % 4))
                    .map(|j| ((c * 5 + j * 3) % 17) as f64)
                    .collect()
            })
            .collect();
        let refs: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
        let cal = groups(&refs);
        let seed = 11;
        let e = cluster_repeated_subsample(&cal, 0.2, 25, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
        // replay the same draws and scan a fine grid
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws: Vec<Vec<f64>> = (0..25)
            .map(|_| {
                one_per_cluster(&cal, &mut rng)
                    .into_iter()
                    .zip(&cal.groups)
                    .map(|(j, g)| g.scores[j])
                    .collect()
            })
            .collect();
        let pval = |s: f64| {
            draws
                .iter()
                .map(|d| (1 + d.iter().filter(|&&v| v >= s).count()) as f64 / 13.0)
                .sum::<f64>()
                / 25.0
        };
        let q = e.threshold.finite().unwrap();
        for i in -40..400 {
            let s = i as f64 * 0.05;
            assert_eq!(pval(s) > 0.2, s <= q, "s = {s}");
        }
    }

    #[test]
    fn single_repeat_contains_the_single_subsample() {
        let ys: Vec<Vec<f64>> = (0..15)
            .map(|c| (0..3).map(|j| ((c * 7 + j * 5) % 13) as f64).collect())
            .collect();
        let refs: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
        let cal = groups(&refs);
        for alpha in [0.1, 0.2, 0.3] {
            let once =
                cluster_subsample_once(&cal, alpha, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            let rep = cluster_repeated_subsample(&cal, alpha, 1, &mut ChaCha8Rng::seed_from_u64(5))
                .unwrap();
            let a = once.region(&[]).unwrap();
            let b = rep.region(&[]).unwrap();
            assert!(a.is_subset_of(&b));
            assert_eq!(once.context.scores().len(), 15);
        }
    }

    #[test]
    fn constant_clusters_give_a_point() {
        let cal = ClusteredCalibration::from_groups(
            ScoreModel::regression(crate::scores::ConstantPredictor { value: 7.0, dim: 0 }),
            (0..6)
                .map(|c| (format!("C{c}"), vec![vec![]; 3], vec![7.0; 3]))
                .collect(),
        )
        .unwrap();
        let e =
            cluster_repeated_subsample(&cal, 0.2, 8, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let r = e.region(&[]).unwrap();
        assert_eq!(
            r.region,
            Region::Interval {
                lower: Endpoint::Finite(7.0),
                upper: Endpoint::Finite(7.0)
            }
        );
    }

    #[test]
    fn pooled_cdf_weights_clusters_equally() {
        // one cluster {0}, one cluster 1..=99: each carries half the mass, so the
        // 40% point lies at 0 although 99% of the units are positive
        let big: Vec<f64> = (1..=99).map(f64::from).collect();
        let cal = groups(&[&[0.0], &big]);
        let e = cluster_pooled_cdf(&cal, 0.6, PooledPadding::PhantomUnit).unwrap();
        assert_eq!(e.threshold, ScoreQuantile::Finite(0.0));
        // 60%: need mass 0.6 * (2 + 2/100) = 1.212, cluster two reaches 1 + j/99
        let e = cluster_pooled_cdf(&cal, 0.4, PooledPadding::PhantomUnit).unwrap();
        assert_eq!(e.threshold, ScoreQuantile::Finite(21.0));
    }

    #[test]
    fn equal_cluster_sizes_pool_like_exchangeable() {
        let ys: Vec<Vec<f64>> = (0..8)
            .map(|c| (0..5).map(|j| ((c * 11 + j * 3) % 23) as f64).collect())
            .collect();
        let refs: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
        let cal = groups(&refs);
        let all: Vec<f64> = ys.concat();
        for alpha in [0.05, 0.1, 0.2, 0.5] {
            let ctx = CalibrationContext::from_scores(
                ScoreModel::Response,
                all.clone(),
                None,
                alpha,
                true,
            )
            .unwrap();
            let plain = split_interval_exchangeable(&ctx, &[]).unwrap();
            let pooled = cluster_pooled_cdf(&cal, alpha, PooledPadding::PhantomUnit)
                .unwrap()
                .region(&[])
                .unwrap();
            assert_eq!(pooled.region, plain.region);
        }
    }

    #[test]
    fn double_conformal_needs_two_clusters_and_is_vacuous_when_small() {
        assert!(cluster_double_conformal(&groups(&[&[1.0, 2.0]]), 0.2).is_err());
        let r = cluster_double_conformal(&groups(&[&[1.0, 2.0], &[3.0, 4.0]]), 0.5).unwrap();
        assert!(r.is_vacuous());
    }

    #[test]
    fn double_conformal_brackets_the_data() {
        let ys: Vec<Vec<f64>> = (0..60)
            .map(|c| {
                (0..30)
                    .map(|j| (c as f64) * 0.1 + ((j * 7) % 30) as f64)
                    .collect()
            })
            .collect();
        let refs: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
        let r = cluster_double_conformal(&groups(&refs), 0.2).unwrap();
        let Region::Interval { lower, upper } = r.region else {
            panic!()
        };
        assert!(lower.value() <= 1.0 && upper.value() >= 29.0);
        assert!(lower.is_finite() && upper.is_finite());
    }

    #[test]
    fn observed_cluster_uses_own_units() {
        let cal = groups(&[&[1.0, 2.0, 3.0, 4.0], &[100.0]]);
        let r = observed_cluster_interval(&cal, "C1", 0.2, &[]).unwrap();
        assert!(r.contains(4.0) && !r.contains(4.5));
        assert_eq!(r.method, Method::ObservedCluster);
        assert!(matches!(
            observed_cluster_interval(&cal, "C9", 0.2, &[]),
            Err(Error::UnknownCluster(_))
        ));
    }
}
