//! Sampling designs and the design-aware training/calibration splitter.
//!
//! Every design reports, for each drawn unit, the base weight `1/pi` of its
//! draw. For PPS without replacement the reported weight is the
//! with-replacement weight `1/(n p_j)`, where `p_j` is the single-draw
//! probability proportional to size; the weighted conformal quantile consumes
//! exactly these weights.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::FinitePopulation;

/// Design used inside each stratum of a stratified sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WithinStratum {
    SrsWr,
    #[default]
    SrsWor,
    PpsWr,
    PpsWor,
}

impl WithinStratum {
    pub fn is_exchangeable(self) -> bool {
        matches!(self, WithinStratum::SrsWr | WithinStratum::SrsWor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DesignSpec {
    SrsWr {
        n: usize,
    },
    SrsWor {
        n: usize,
    },
    PpsWr {
        n: usize,
    },
    PpsWor {
        n: usize,
    },
    /// Independent draws inside every stratum with fixed per-stratum counts.
    Stratified {
        allocation: BTreeMap<String, usize>,
        #[serde(default)]
        within: WithinStratum,
    },
    /// SRS without replacement of `k` clusters. All units of a selected
    /// cluster are taken unless `per_cluster` asks for an SRS of that many.
    Cluster {
        k: usize,
        #[serde(default)]
        per_cluster: Option<usize>,
    },
}

impl DesignSpec {
    /// Short name used by the CLI and report tables.
    pub fn name(&self) -> &'static str {
        match self {
            DesignSpec::SrsWr { .. } => "srs-wr",
            DesignSpec::SrsWor { .. } => "srs-wor",
            DesignSpec::PpsWr { .. } => "pps-wr",
            DesignSpec::PpsWor { .. } => "pps-wor",
            DesignSpec::Stratified { .. } => "stratified",
            DesignSpec::Cluster { .. } => "cluster",
        }
    }

    /// Calibration units drawn this way are exchangeable with a uniformly
    /// drawn test unit.
    pub fn is_exchangeable(&self) -> bool {
        matches!(self, DesignSpec::SrsWr { .. } | DesignSpec::SrsWor { .. })
    }

    pub fn requires_size_measure(&self) -> bool {
        match self {
            DesignSpec::PpsWr { .. } | DesignSpec::PpsWor { .. } => true,
            DesignSpec::Stratified { within, .. } => {
                matches!(within, WithinStratum::PpsWr | WithinStratum::PpsWor)
            }
            _ => false,
        }
    }

    /// Checks that the design can be drawn from `pop`.
    pub fn validate(&self, pop: &FinitePopulation) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidDesign(m));
        if self.requires_size_measure() && !pop.has_size_measure() {
            return bad(format!("{} design requires a size measure", self.name()));
        }
        let n_pop = pop.len();
        match self {
            DesignSpec::SrsWr { n } | DesignSpec::PpsWr { n } if *n == 0 => {
                bad("sample size must be at least 1".into())
            }
            DesignSpec::SrsWor { n } | DesignSpec::PpsWor { n } => {
                if *n == 0 {
                    bad("sample size must be at least 1".into())
                } else if *n > n_pop {
                    bad(format!(
                        "cannot draw {n} units without replacement from N = {n_pop}"
                    ))
                } else {
                    Ok(())
                }
            }
            DesignSpec::Stratified { allocation, within } => {
                let Some(labels) = pop.stratum_labels() else {
                    return bad("stratified design on a population without strata".into());
                };
                let members = pop.stratum_members().expect("strata present");
                for (h, label) in labels.iter().enumerate() {
                    match allocation.get(label) {
                        None | Some(0) => {
                            return bad(format!("empty allocation for stratum `{label}`"))
                        }
                        Some(&n_h) => {
                            let wor =
                                matches!(within, WithinStratum::SrsWor | WithinStratum::PpsWor);
                            if wor && n_h > members[h].len() {
                                return bad(format!(
                                    "stratum `{label}` has {} units, allocation is {n_h}",
                                    members[h].len()
                                ));
                            }
                        }
                    }
                }
                if let Some(extra) = allocation.keys().find(|k| !labels.contains(k)) {
                    return Err(Error::UnknownStratum(extra.clone()));
                }
                Ok(())
            }
            DesignSpec::Cluster { k, per_cluster } => {
                let Some(labels) = pop.cluster_labels() else {
                    return bad("cluster design on a population without clusters".into());
                };
                if *k == 0 || *k > labels.len() {
                    return bad(format!("need 1 <= k <= {} clusters, got {k}", labels.len()));
                }
                if *per_cluster == Some(0) {
                    return bad("per_cluster must be at least 1".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// The weight each population unit would carry if it were drawn, indexed
    /// by `id - 1`. This is the tail weight a test unit contributes to the
    /// weighted conformal quantile.
    pub fn population_weights(&self, pop: &FinitePopulation) -> Result<Vec<f64>> {
        self.validate(pop)?;
        let n_pop = pop.len();
        Ok(match self {
            DesignSpec::SrsWr { n } | DesignSpec::SrsWor { n } => {
                vec![n_pop as f64 / *n as f64; n_pop]
            }
            DesignSpec::PpsWr { n } | DesignSpec::PpsWor { n } => {
                pps_weights(pop.units().iter().map(|u| u.size.unwrap()), *n)
            }
            DesignSpec::Stratified { allocation, within } => {
                let labels = pop.stratum_labels().unwrap();
                let mut out = vec![0.0; n_pop];
                for (h, ids) in pop.stratum_members().unwrap().iter().enumerate() {
                    let n_h = allocation[&labels[h]];
                    let w: Vec<f64> = match within {
                        WithinStratum::SrsWr | WithinStratum::SrsWor => {
                            vec![ids.len() as f64 / n_h as f64; ids.len()]
                        }
                        _ => pps_weights(ids.iter().map(|&id| pop.unit(id).size.unwrap()), n_h),
                    };
                    for (&id, w) in ids.iter().zip(w) {
                        out[id - 1] = w;
                    }
                }
                out
            }
            DesignSpec::Cluster { k, per_cluster } => {
                let members = pop.cluster_members().unwrap();
                let first_stage = members.len() as f64 / *k as f64;
                let mut out = vec![0.0; n_pop];
                for ids in &members {
                    let second = match per_cluster {
                        Some(m) => ids.len() as f64 / (*m).min(ids.len()) as f64,
                        None => 1.0,
                    };
                    for &id in ids {
                        out[id - 1] = first_stage * second;
                    }
                }
                out
            }
        })
    }
}

fn pps_weights(sizes: impl Iterator<Item = f64> + Clone, n: usize) -> Vec<f64> {
    let total: f64 = sizes.clone().sum();
    sizes.map(|s| total / (n as f64 * s)).collect()
}

/// One realized sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrawnSample {
    /// Population ids in draw order; repeats are possible for WR designs.
    pub units: Vec<usize>,
    /// `1/pi` of each draw.
    pub base_weights: Vec<f64>,
    /// Stratum index of each drawn unit, when the population is stratified.
    pub strata: Option<Vec<usize>>,
    /// Cluster index of each drawn unit, when the population is clustered.
    pub clusters: Option<Vec<usize>>,
    pub design: DesignSpec,
}

impl DrawnSample {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    fn from_parts(
        pop: &FinitePopulation,
        design: DesignSpec,
        units: Vec<usize>,
        base_weights: Vec<f64>,
    ) -> Self {
        let strata = pop.stratum_labels().map(|_| {
            units
                .iter()
                .map(|&id| pop.unit(id).stratum.unwrap())
                .collect()
        });
        let clusters = pop.cluster_labels().map(|_| {
            units
                .iter()
                .map(|&id| pop.unit(id).cluster.unwrap())
                .collect()
        });
        Self {
            units,
            base_weights,
            strata,
            clusters,
            design,
        }
    }

    /// Rebuilds a sample from drawn population ids, taking base weights from
    /// the design.
    pub fn from_ids(
        pop: &FinitePopulation,
        design: &DesignSpec,
        units: Vec<usize>,
    ) -> Result<Self> {
        let weights = design.population_weights(pop)?;
        if let Some(&bad) = units.iter().find(|&&id| id == 0 || id > pop.len()) {
            return Err(Error::InvalidArgument(format!(
                "unit id {bad} is not in the population"
            )));
        }
        let base_weights = units.iter().map(|&id| weights[id - 1]).collect();
        Ok(Self::from_parts(pop, design.clone(), units, base_weights))
    }

    /// Keeps the draws at `positions`, in that order.
    pub fn subset(&self, positions: &[usize]) -> Self {
        let pick = |v: &Vec<usize>| positions.iter().map(|&p| v[p]).collect();
        Self {
            units: pick(&self.units),
            base_weights: positions.iter().map(|&p| self.base_weights[p]).collect(),
            strata: self.strata.as_ref().map(pick),
            clusters: self.clusters.as_ref().map(pick),
            design: self.design.clone(),
        }
    }
}

/// Fenwick tree over non-negative masses, for sequential size-proportional
/// draws without replacement.
struct MassTree {
    tree: Vec<f64>,
}

impl MassTree {
    fn new(masses: &[f64]) -> Self {
        let n = masses.len();
        let mut tree = vec![0.0; n + 1];
        for (i, &m) in masses.iter().enumerate() {
            let mut j = i + 1;
            while j <= n {
                tree[j] += m;
                j += j & j.wrapping_neg();
            }
        }
        Self { tree }
    }

    fn add(&mut self, i: usize, delta: f64) {
        let n = self.tree.len() - 1;
        let mut j = i + 1;
        while j <= n {
            self.tree[j] += delta;
            j += j & j.wrapping_neg();
        }
    }

    fn total(&self) -> f64 {
        let mut j = self.tree.len() - 1;
        let mut s = 0.0;
        while j > 0 {
            s += self.tree[j];
            j -= j & j.wrapping_neg();
        }
        s
    }

    /// Smallest index whose inclusive prefix mass exceeds `target`.
    fn find(&self, mut target: f64) -> usize {
        let n = self.tree.len() - 1;
        let mut pos = 0;
        let mut step = n.next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= target {
                pos = next;
                target -= self.tree[next];
            }
            step >>= 1;
        }
        pos.min(n - 1)
    }
}

/// Draws `n` positions from `sizes` proportional to size.
fn pps_positions<R: Rng + ?Sized>(
    sizes: &[f64],
    n: usize,
    replace: bool,
    rng: &mut R,
) -> Vec<usize> {
    if replace {
        let mut cum = Vec::with_capacity(sizes.len());
        let mut acc = 0.0;
        for &s in sizes {
            acc += s;
            cum.push(acc);
        }
        (0..n)
            .map(|_| {
                let u = rng.random::<f64>() * acc;
                cum.partition_point(|&c| c <= u).min(sizes.len() - 1)
            })
            .collect()
    } else {
        let mut tree = MassTree::new(sizes);
        let mut taken = vec![false; sizes.len()];
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let u = rng.random::<f64>() * tree.total();
            let mut i = tree.find(u);
            // Rounding in the running sums can land on an exhausted unit.
            if taken[i] {
                i = (0..sizes.len())
                    .map(|d| (i + d) % sizes.len())
                    .find(|&j| !taken[j])
                    .expect("units remain");
            }
            taken[i] = true;
            tree.add(i, -sizes[i]);
            out.push(i);
        }
        out
    }
}

fn draw_ids<R: Rng + ?Sized>(
    ids: &[usize],
    sizes: impl Fn(usize) -> f64,
    within: WithinStratum,
    n: usize,
    rng: &mut R,
) -> Vec<usize> {
    let positions: Vec<usize> = match within {
        WithinStratum::SrsWr => (0..n).map(|_| rng.random_range(0..ids.len())).collect(),
        WithinStratum::SrsWor => index::sample(rng, ids.len(), n).into_vec(),
        WithinStratum::PpsWr | WithinStratum::PpsWor => {
            let s: Vec<f64> = ids.iter().map(|&id| sizes(id)).collect();
            pps_positions(&s, n, within == WithinStratum::PpsWr, rng)
        }
    };
    positions.into_iter().map(|p| ids[p]).collect()
}

/// Draws one sample from `pop` under `spec`.
pub fn draw<R: Rng + ?Sized>(
    pop: &FinitePopulation,
    spec: &DesignSpec,
    rng: &mut R,
) -> Result<DrawnSample> {
    let weights = spec.population_weights(pop)?;
    let all_ids: Vec<usize> = (1..=pop.len()).collect();
    let size = |id: usize| pop.unit(id).size.expect("size measure validated");
    let units = match spec {
        DesignSpec::SrsWr { n } => draw_ids(&all_ids, size, WithinStratum::SrsWr, *n, rng),
        DesignSpec::SrsWor { n } => draw_ids(&all_ids, size, WithinStratum::SrsWor, *n, rng),
        DesignSpec::PpsWr { n } => draw_ids(&all_ids, size, WithinStratum::PpsWr, *n, rng),
        DesignSpec::PpsWor { n } => draw_ids(&all_ids, size, WithinStratum::PpsWor, *n, rng),
        DesignSpec::Stratified { allocation, within } => {
            let labels = pop.stratum_labels().unwrap();
            let members = pop.stratum_members().unwrap();
            let mut units = Vec::new();
            for (h, ids) in members.iter().enumerate() {
                let n_h = allocation[&labels[h]];
                units.extend(draw_ids(ids, size, *within, n_h, rng));
            }
            units
        }
        DesignSpec::Cluster { k, per_cluster } => {
            let members = pop.cluster_members().unwrap();
            let mut chosen = index::sample(rng, members.len(), *k).into_vec();
            chosen.sort_unstable();
            let mut units = Vec::new();
            for c in chosen {
                match per_cluster {
                    None => units.extend(&members[c]),
                    Some(m) => {
                        let m = (*m).min(members[c].len());
                        units.extend(draw_ids(&members[c], size, WithinStratum::SrsWor, m, rng));
                    }
                }
            }
            units
        }
    };
    let base_weights = units.iter().map(|&id| weights[id - 1]).collect();
    Ok(DrawnSample::from_parts(
        pop,
        spec.clone(),
        units,
        base_weights,
    ))
}

/// [`draw`] with a fresh ChaCha8 stream seeded from `seed`.
pub fn draw_seeded(pop: &FinitePopulation, spec: &DesignSpec, seed: u64) -> Result<DrawnSample> {
    draw(pop, spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Result of [`design_split`].
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSample {
    pub train: DrawnSample,
    pub calibration: DrawnSample,
    /// Strata too small to split; their units all went to training.
    pub flagged_strata: Vec<usize>,
}

fn split_count(n: usize, frac: f64) -> usize {
    ((frac * n as f64).round() as usize).clamp(1, n - 1)
}

/// Splits a sample into proper-training and calibration parts that both
/// follow the original design.
///
/// Clustered samples are split by whole clusters, stratified samples within
/// every stratum, and everything else uniformly at random.
pub fn design_split<R: Rng + ?Sized>(
    sample: &DrawnSample,
    frac_train: f64,
    rng: &mut R,
) -> Result<SplitSample> {
    if !(frac_train > 0.0 && frac_train < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "training fraction must lie in (0, 1), got {frac_train}"
        )));
    }
    let mut train = Vec::new();
    let mut calib = Vec::new();
    let mut flagged = Vec::new();

    match (&sample.design, &sample.strata, &sample.clusters) {
        (DesignSpec::Cluster { .. }, _, Some(clusters)) => {
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (p, &c) in clusters.iter().enumerate() {
                groups.entry(c).or_default().push(p);
            }
            if groups.len() < 2 {
                return Err(Error::InvalidDesign(
                    "a cluster sample needs at least 2 clusters to split".into(),
                ));
            }
            let mut keys: Vec<usize> = groups.keys().copied().collect();
            keys.shuffle(rng);
            let n_train = split_count(keys.len(), frac_train);
            for (i, key) in keys.iter().enumerate() {
                let side = if i < n_train { &mut train } else { &mut calib };
                side.extend(&groups[key]);
            }
        }
        (DesignSpec::Stratified { .. }, Some(strata), _) => {
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (p, &h) in strata.iter().enumerate() {
                groups.entry(h).or_default().push(p);
            }
            for (h, mut positions) in groups {
                if positions.len() < 2 {
                    flagged.push(h);
                    train.extend(positions);
                    continue;
                }
                positions.shuffle(rng);
                let n_train = split_count(positions.len(), frac_train);
                train.extend(&positions[..n_train]);
                calib.extend(&positions[n_train..]);
            }
        }
        _ => {
            if sample.len() < 2 {
                return Err(Error::InvalidDesign(
                    "need at least 2 sampled units to split".into(),
                ));
            }
            let mut positions: Vec<usize> = (0..sample.len()).collect();
            positions.shuffle(rng);
            let n_train = split_count(positions.len(), frac_train);
            train.extend(&positions[..n_train]);
            calib.extend(&positions[n_train..]);
        }
    }
    train.sort_unstable();
    calib.sort_unstable();
    Ok(SplitSample {
        train: sample.subset(&train),
        calibration: sample.subset(&calib),
        flagged_strata: flagged,
    })
}
