//! Finite populations: the fixed table of units every design samples from.
//!
//! A [`FinitePopulation`] is immutable once built. Ids are always `1..=N` in
//! row order; the identifier found in a source file (if any) is kept as the
//! unit's `label`.

use std::collections::HashMap;
use std::fs::File;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether the response is a real number or a class label `0..n_classes`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum ResponseKind {
    Continuous,
    Categorical { n_classes: usize },
}

/// One population record.
#[derive(Clone, Debug, PartialEq)]
pub struct Unit {
    /// Population id in `1..=N`.
    pub id: usize,
    /// Identifier carried over from the source table.
    pub label: String,
    pub x: Vec<f64>,
    /// Response. Class labels are stored as small non-negative integers.
    pub y: f64,
    /// Index into [`FinitePopulation::stratum_labels`].
    pub stratum: Option<usize>,
    /// Index into [`FinitePopulation::cluster_labels`].
    pub cluster: Option<usize>,
    pub size: Option<f64>,
}

/// A unit before label interning; the input to [`FinitePopulation::from_records`].
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub label: String,
    pub x: Vec<f64>,
    pub y: f64,
    pub stratum: Option<String>,
    pub cluster: Option<String>,
    pub size: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinitePopulation {
    units: Vec<Unit>,
    covariate_names: Vec<String>,
    response: ResponseKind,
    stratum_labels: Option<Vec<String>>,
    cluster_labels: Option<Vec<String>>,
    dropped_rows: usize,
}

fn intern(labels: &mut Vec<String>, index: &mut HashMap<String, usize>, label: String) -> usize {
    if let Some(&i) = index.get(&label) {
        return i;
    }
    let i = labels.len();
    index.insert(label.clone(), i);
    labels.push(label);
    i
}

impl FinitePopulation {
    /// Builds a population, checking every table invariant.
    ///
    /// Stratum and cluster labels are interned in order of first appearance.
    pub fn from_records(
        records: Vec<Record>,
        covariate_names: Vec<String>,
        response: ResponseKind,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidPopulation("population has no units".into()));
        }
        let dim = covariate_names.len();
        let has_stratum = records[0].stratum.is_some();
        let has_cluster = records[0].cluster.is_some();
        let has_size = records[0].size.is_some();

        let mut stratum_labels = Vec::new();
        let mut stratum_index = HashMap::new();
        let mut cluster_labels = Vec::new();
        let mut cluster_index = HashMap::new();
        let mut units = Vec::with_capacity(records.len());

        for (row, rec) in records.into_iter().enumerate() {
            if rec.x.len() != dim {
                return Err(Error::InvalidPopulation(format!(
                    "unit {} has {} covariates, expected {dim}",
                    row + 1,
                    rec.x.len()
                )));
            }
            if rec.stratum.is_some() != has_stratum
                || rec.cluster.is_some() != has_cluster
                || rec.size.is_some() != has_size
            {
                return Err(Error::InvalidPopulation(format!(
                    "unit {} is missing a stratum, cluster or size field present on other units",
                    row + 1
                )));
            }
            if let Some(s) = rec.size {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::InvalidPopulation(format!(
                        "unit {} has non-positive size measure {s}",
                        row + 1
                    )));
                }
            }
            if !rec.y.is_finite() || rec.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidPopulation(format!(
                    "unit {} has a non-finite value",
                    row + 1
                )));
            }
            if let ResponseKind::Categorical { n_classes } = response {
                if rec.y < 0.0 || rec.y.fract() != 0.0 || rec.y as usize >= n_classes {
                    return Err(Error::UnknownClass {
                        label: rec.y,
                        n_classes,
                    });
                }
            }
            let stratum = rec
                .stratum
                .map(|l| intern(&mut stratum_labels, &mut stratum_index, l));
            let cluster = rec
                .cluster
                .map(|l| intern(&mut cluster_labels, &mut cluster_index, l));
            units.push(Unit {
                id: row + 1,
                label: rec.label,
                x: rec.x,
                y: rec.y,
                stratum,
                cluster,
                size: rec.size,
            });
        }

        Ok(Self {
            units,
            covariate_names,
            response,
            stratum_labels: has_stratum.then_some(stratum_labels),
            cluster_labels: has_cluster.then_some(cluster_labels),
            dropped_rows: 0,
        })
    }

    /// Number of units `N`.
    pub fn len(&self) -> usize {
        self.units.len()
    }

    /// Always false; populations hold at least one unit.
    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    /// Unit with population id `id` (1-based).
    pub fn unit(&self, id: usize) -> &Unit {
        &self.units[id - 1]
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn response(&self) -> ResponseKind {
        self.response
    }

    pub fn stratum_labels(&self) -> Option<&[String]> {
        self.stratum_labels.as_deref()
    }

    pub fn cluster_labels(&self) -> Option<&[String]> {
        self.cluster_labels.as_deref()
    }

    pub fn has_size_measure(&self) -> bool {
        self.units[0].size.is_some()
    }

    /// Rows removed for missing values when the population was loaded.
    pub fn dropped_rows(&self) -> usize {
        self.dropped_rows
    }

    /// Unit ids grouped by stratum index.
    pub fn stratum_members(&self) -> Option<Vec<Vec<usize>>> {
        let labels = self.stratum_labels.as_ref()?;
        let mut out = vec![Vec::new(); labels.len()];
        for u in &self.units {
            out[u.stratum.expect("stratum labels present")].push(u.id);
        }
        Some(out)
    }

    /// Unit ids grouped by cluster index.
    pub fn cluster_members(&self) -> Option<Vec<Vec<usize>>> {
        let labels = self.cluster_labels.as_ref()?;
        let mut out = vec![Vec::new(); labels.len()];
        for u in &self.units {
            out[u.cluster.expect("cluster labels present")].push(u.id);
        }
        Some(out)
    }

    /// Responses in id order.
    pub fn responses(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.y).collect()
    }

    /// Replaces (or adds) the size measure.
    pub fn with_size_measure(mut self, sizes: &[f64]) -> Result<Self> {
        if sizes.len() != self.units.len() {
            return Err(Error::InvalidPopulation(format!(
                "{} size values for {} units",
                sizes.len(),
                self.units.len()
            )));
        }
        if let Some((i, s)) = sizes
            .iter()
            .enumerate()
            .find(|(_, s)| !(**s > 0.0 && s.is_finite()))
        {
            return Err(Error::InvalidPopulation(format!(
                "unit {} has non-positive size measure {s}",
                i + 1
            )));
        }
        for (u, &s) in self.units.iter_mut().zip(sizes) {
            u.size = Some(s);
        }
        Ok(self)
    }
}

/// Maps columns of a delimited file onto population roles.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSchema {
    #[serde(default)]
    pub id: Option<String>,
    pub y: String,
    #[serde(default)]
    pub x: Vec<String>,
    #[serde(default)]
    pub stratum: Option<String>,
    #[serde(default)]
    pub cluster: Option<String>,
    #[serde(default)]
    pub size: Option<String>,
    /// Treat `y` as integer class labels.
    #[serde(default)]
    pub categorical: bool,
}

impl ColumnSchema {
    /// The schema [`write_population`] produces for `pop`.
    pub fn written(pop: &FinitePopulation) -> Self {
        Self {
            id: Some("id".into()),
            y: "y".into(),
            x: pop.covariate_names.clone(),
            stratum: pop.stratum_labels.as_ref().map(|_| "stratum".into()),
            cluster: pop.cluster_labels.as_ref().map(|_| "cluster".into()),
            size: pop.has_size_measure().then(|| "size".into()),
            categorical: matches!(pop.response, ResponseKind::Categorical { .. }),
        }
    }
}

fn is_missing(field: &str) -> bool {
    let f = field.trim();
    f.is_empty() || f.eq_ignore_ascii_case("na") || f.eq_ignore_ascii_case("nan")
}

fn parse_f64(row: usize, column: &str, value: &str) -> Result<f64> {
    value.trim().parse::<f64>().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        value: value.to_string(),
    })
}

/// Reads a comma-separated file with a header row.
///
/// Rows with a missing value in any mapped column are dropped and counted
/// (see [`FinitePopulation::dropped_rows`]); the remaining rows are renumbered
/// `1..=N` in file order.
pub fn load_population(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<FinitePopulation> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };

    let id_col = schema.id.as_deref().map(col).transpose()?;
    let y_col = col(&schema.y)?;
    let x_cols = schema
        .x
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;
    let stratum_col = schema.stratum.as_deref().map(col).transpose()?;
    let cluster_col = schema.cluster.as_deref().map(col).transpose()?;
    let size_col = schema.size.as_deref().map(col).transpose()?;

    let mut mapped: Vec<usize> = vec![y_col];
    mapped.extend(&x_cols);
    mapped.extend(id_col);
    mapped.extend(stratum_col);
    mapped.extend(cluster_col);
    mapped.extend(size_col);

    let mut records = Vec::new();
    let mut dropped = 0;
    let mut max_class = 0usize;
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = i + 2;
        if mapped.iter().any(|&c| row.get(c).is_none_or(is_missing)) {
            dropped += 1;
            continue;
        }
        let y = parse_f64(line, &schema.y, &row[y_col])?;
        if schema.categorical {
            if y < 0.0 || y.fract() != 0.0 {
                return Err(Error::Parse {
                    row: line,
                    column: schema.y.clone(),
                    value: row[y_col].to_string(),
                });
            }
            max_class = max_class.max(y as usize);
        }
        let x = x_cols
            .iter()
            .zip(&schema.x)
            .map(|(&c, name)| parse_f64(line, name, &row[c]))
            .collect::<Result<Vec<_>>>()?;
        let size = match size_col {
            Some(c) => {
                let s = parse_f64(line, schema.size.as_deref().unwrap_or_default(), &row[c])?;
                if s <= 0.0 {
                    return Err(Error::InvalidPopulation(format!(
                        "line {line}: non-positive size measure {s}"
                    )));
                }
                Some(s)
            }
            None => None,
        };
        records.push(Record {
            label: match id_col {
                Some(c) => row[c].trim().to_string(),
                None => (records.len() + 1).to_string(),
            },
            x,
            y,
            stratum: stratum_col.map(|c| row[c].trim().to_string()),
            cluster: cluster_col.map(|c| row[c].trim().to_string()),
            size,
        });
    }

    let response = if schema.categorical {
        ResponseKind::Categorical {
            n_classes: max_class + 1,
        }
    } else {
        ResponseKind::Continuous
    };
    let mut pop = FinitePopulation::from_records(records, schema.x.clone(), response)?;
    pop.dropped_rows = dropped;
    Ok(pop)
}

/// Writes `pop` in the layout described by [`ColumnSchema::written`].
pub fn write_population(pop: &FinitePopulation, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["id".to_string(), "y".to_string()];
    header.extend(pop.covariate_names.iter().cloned());
    if pop.stratum_labels.is_some() {
        header.push("stratum".into());
    }
    if pop.cluster_labels.is_some() {
        header.push("cluster".into());
    }
    if pop.has_size_measure() {
        header.push("size".into());
    }
    w.write_record(&header)?;
    for u in &pop.units {
        let mut row = vec![u.label.clone(), u.y.to_string()];
        row.extend(u.x.iter().map(f64::to_string));
        if let (Some(labels), Some(s)) = (&pop.stratum_labels, u.stratum) {
            row.push(labels[s].clone());
        }
        if let (Some(labels), Some(c)) = (&pop.cluster_labels, u.cluster) {
            row.push(labels[c].clone());
        }
        if let Some(s) = u.size {
            row.push(s.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parameters of a synthetic population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticPopSpec {
    pub n_units: usize,
    #[serde(default = "one")]
    pub n_strata: usize,
    #[serde(default = "one")]
    pub n_clusters: usize,
    #[serde(default)]
    pub covariate_dim: usize,
    pub noise_scale: f64,
    /// 0: size measure independent of y. 1: y is the size measure.
    #[serde(default)]
    pub informativeness: f64,
    pub seed: u64,
    /// Draw a categorical response with this many classes instead.
    #[serde(default)]
    pub n_classes: Option<usize>,
}

fn one() -> usize {
    1
}

impl SyntheticPopSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidPopulation(m.to_string()));
        if self.n_clusters < 1 || self.n_units < self.n_clusters {
            return bad("need n_units >= n_clusters >= 1");
        }
        if self.n_strata < 1 || self.n_units < self.n_strata {
            return bad("need n_units >= n_strata >= 1");
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be positive");
        }
        if !(0.0..=1.0).contains(&self.informativeness) {
            return bad("informativeness must lie in [0, 1]");
        }
        if matches!(self.n_classes, Some(k) if k < 2) {
            return bad("n_classes must be at least 2");
        }
        Ok(())
    }
}

const INTERCEPT: f64 = 500.0;
const SIZE_SCALE: f64 = 100.0;
const SIZE_LOG_SD: f64 = 0.75;
const CLUSTER_SIZE_LOG_SD: f64 = 1.0;

fn slope(k: usize) -> f64 {
    40.0 * (-0.6f64).powi(k as i32)
}

/// Splits `n` into `parts.len()` positive counts with shares proportional to
/// `parts` (largest-remainder rounding). Requires `n >= parts.len()`.
fn apportion(n: usize, parts: &[f64]) -> Vec<usize> {
    let k = parts.len();
    let total: f64 = parts.iter().sum();
    let exact: Vec<f64> = parts.iter().map(|p| n as f64 * p / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let left = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(left) {
        counts[i] += 1;
    }
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let donor = (0..k).max_by_key(|&i| (counts[i], usize::MAX - i)).unwrap();
        counts[donor] -= 1;
        counts[empty] += 1;
    }
    counts
}

/// Generates a synthetic population, bit-identical for a given spec.
///
/// Layout of the generator:
/// - covariates are iid standard normal;
/// - strata take geometrically decreasing shares of the units
///   (`1, 1/2, 1/4, ...`) and stratum `h` shifts the linear signal down by
///   `h * noise_scale`;
/// - clusters have heavy-tailed sizes (every cluster gets at least one unit)
///   and a random effect with standard deviation `noise_scale / 2`;
/// - the size measure is `100 * exp(0.75 * z)` with `z` independent of
///   everything else;
/// - the continuous response is `(1 - t) * signal + t * size` where `t` is
///   the informativeness and `signal = 500 + beta . x + effects + noise`.
///
/// With `n_classes = Some(K)` the response is instead drawn from a
/// multinomial-logit model in the covariates.
pub fn generate_population(spec: &SyntheticPopSpec) -> Result<FinitePopulation> {
    spec.validate()?;
    let n = spec.n_units;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let shares: Vec<f64> = (0..spec.n_strata).map(|h| 0.5f64.powi(h as i32)).collect();
    let mut strata: Vec<usize> = apportion(n, &shares)
        .into_iter()
        .enumerate()
        .flat_map(|(h, c)| std::iter::repeat_n(h, c))
        .collect();
    strata.shuffle(&mut rng);

    let cluster_weights: Vec<f64> = (0..spec.n_clusters)
        .map(|_| (CLUSTER_SIZE_LOG_SD * rng.sample::<f64, _>(StandardNormal)).exp())
        .collect();
    let mut clusters: Vec<usize> = (0..spec.n_clusters).collect();
    let pick = WeightedIndex::new(&cluster_weights).expect("positive cluster weights");
    clusters.extend((spec.n_clusters..n).map(|_| pick.sample(&mut rng)));
    clusters.shuffle(&mut rng);
    let cluster_effect: Vec<f64> = (0..spec.n_clusters)
        .map(|_| 0.5 * spec.noise_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let d = spec.covariate_dim;
    let mut records = Vec::with_capacity(n);
    for j in 0..n {
        let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let size = SIZE_SCALE * (SIZE_LOG_SD * rng.sample::<f64, _>(StandardNormal)).exp();
        let noise: f64 = rng.sample(StandardNormal);
        let y = match spec.n_classes {
            Some(k) => {
                let logits: Vec<f64> = (0..k)
                    .map(|c| {
                        x.iter()
                            .enumerate()
                            .map(|(i, xi)| {
                                let phase = std::f64::consts::TAU * c as f64 / k as f64;
                                1.5 * (phase + i as f64).cos() * xi
                            })
                            .sum()
                    })
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let probs: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                WeightedIndex::new(&probs)
                    .expect("softmax weights")
                    .sample(&mut rng) as f64
            }
            None => {
                let linear: f64 = x.iter().enumerate().map(|(k, xi)| slope(k) * xi).sum();
                let signal = INTERCEPT + linear - spec.noise_scale * strata[j] as f64
                    + cluster_effect[clusters[j]]
                    + spec.noise_scale * noise;
                let t = spec.informativeness;
                if t == 1.0 {
                    size
                } else {
                    (1.0 - t) * signal + t * size
                }
            }
        };
        records.push(Record {
            label: (j + 1).to_string(),
            x,
            y,
            stratum: Some(format!("S{}", strata[j] + 1)),
            cluster: Some(format!("C{}", clusters[j] + 1)),
            size: Some(size),
        });
    }

    let names = (1..=d).map(|k| format!("x{k}")).collect();
    let response = match spec.n_classes {
        Some(k) => ResponseKind::Categorical { n_classes: k },
        None => ResponseKind::Continuous,
    };
    let mut pop = FinitePopulation::from_records(records, names, response)?;
    // Stratum/cluster indices follow label order, not first appearance.
    pop.canonicalize_labels();
    Ok(pop)
}

impl FinitePopulation {
    fn canonicalize_labels(&mut self) {
        fn remap(labels: &mut Vec<String>, key: impl Fn(&str) -> usize) -> Vec<usize> {
            let mut order: Vec<usize> = (0..labels.len()).collect();
            order.sort_by_key(|&i| key(&labels[i]));
            let mut new_of_old = vec![0; labels.len()];
            for (new, &old) in order.iter().enumerate() {
                new_of_old[old] = new;
            }
            *labels = order.iter().map(|&i| labels[i].clone()).collect();
            new_of_old
        }
        let numeric = |s: &str| s[1..].parse::<usize>().unwrap_or(usize::MAX);
        if let Some(labels) = self.stratum_labels.as_mut() {
            let map = remap(labels, numeric);
            for u in &mut self.units {
                u.stratum = u.stratum.map(|s| map[s]);
            }
        }
        if let Some(labels) = self.cluster_labels.as_mut() {
            let map = remap(labels, numeric);
            for u in &mut self.units {
                u.cluster = u.cluster.map(|c| map[c]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    fn schema() -> ColumnSchema {
        ColumnSchema {
            id: Some("id".into()),
            y: "y".into(),
            x: vec!["a".into()],
            ..Default::default()
        }
    }

    #[test]
    fn loads_minimal_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(&dir, "p.csv", "id,y,a\n1,1,0.5\n2,2,0.1\n3,3,0\n4,4,9\n");
        let pop = load_population(&p, &schema()).unwrap();
        assert_eq!(pop.len(), 4);
        assert_eq!(pop.responses(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pop.dropped_rows(), 0);
        assert!(pop.stratum_labels().is_none());
    }

    #[test]
    fn drops_rows_with_missing_response() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(&dir, "p.csv", "id,y,a\n1,1,0.5\n2,,0.1\n3,3,0\n4,4,9\n");
        let pop = load_population(&p, &schema()).unwrap();
        assert_eq!(pop.len(), 3);
        assert_eq!(pop.dropped_rows(), 1);
        assert_eq!(pop.unit(2).label, "3");
        assert_eq!(pop.unit(2).id, 2);
    }

    #[test]
    fn zero_size_measure_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(&dir, "p.csv", "id,y,a,s\n1,1,0.5,2\n2,2,0.1,0\n");
        let mut s = schema();
        s.size = Some("s".into());
        assert!(matches!(
            load_population(&p, &s),
            Err(Error::InvalidPopulation(_))
        ));
    }

    #[test]
    fn missing_file_and_unmapped_column() {
        assert!(matches!(
            load_population("/nonexistent/pop.csv", &schema()),
            Err(Error::Io { .. })
        ));
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(&dir, "p.csv", "id,y\n1,1\n");
        assert!(matches!(
            load_population(&p, &schema()),
            Err(Error::MissingColumn(c)) if c == "a"
        ));
    }

    #[test]
    fn ragged_rows_are_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(&dir, "p.csv", "id,y,a\n1,1,0.5\n2,2\n");
        assert!(load_population(&p, &schema()).is_err());
    }

    #[test]
    fn from_records_rejects_mixed_labels() {
        let rec = |stratum: Option<&str>| Record {
            label: "u".into(),
            x: vec![],
            y: 1.0,
            stratum: stratum.map(String::from),
            cluster: None,
            size: None,
        };
        let err = FinitePopulation::from_records(
            vec![rec(Some("a")), rec(None)],
            vec![],
            ResponseKind::Continuous,
        );
        assert!(err.is_err());
    }

    fn spec(seed: u64) -> SyntheticPopSpec {
        SyntheticPopSpec {
            n_units: 500,
            n_strata: 3,
            n_clusters: 40,
            covariate_dim: 2,
            noise_scale: 10.0,
            informativeness: 0.0,
            seed,
            n_classes: None,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(
            generate_population(&spec(3)).unwrap(),
            generate_population(&spec(3)).unwrap()
        );
        assert_ne!(
            generate_population(&spec(3)).unwrap(),
            generate_population(&spec(4)).unwrap()
        );
    }

    #[test]
    fn strata_and_clusters_partition_units() {
        let pop = generate_population(&spec(1)).unwrap();
        let strata = pop.stratum_members().unwrap();
        assert_eq!(strata.len(), 3);
        assert!(strata.iter().all(|m| !m.is_empty()));
        assert_eq!(strata.iter().map(Vec::len).sum::<usize>(), 500);
        let clusters = pop.cluster_members().unwrap();
        assert_eq!(clusters.len(), 40);
        assert!(clusters.iter().all(|m| !m.is_empty()));
        assert_eq!(pop.stratum_labels().unwrap(), ["S1", "S2", "S3"]);
    }

    #[test]
    fn single_cluster_is_shared() {
        let mut s = spec(2);
        s.n_clusters = 1;
        let pop = generate_population(&s).unwrap();
        assert!(pop.units().iter().all(|u| u.cluster == Some(0)));
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn uninformative_size_is_uncorrelated_with_response() {
        let mut s = spec(11);
        s.n_units = 10_000;
        s.n_clusters = 300;
        let pop = generate_population(&s).unwrap();
        let sizes: Vec<f64> = pop.units().iter().map(|u| u.size.unwrap()).collect();
        let r = correlation(&sizes, &pop.responses());
        assert!(r.abs() < 0.05, "r = {r}");
    }

    #[test]
    fn informative_size_is_the_response() {
        let mut s = spec(5);
        s.informativeness = 1.0;
        let pop = generate_population(&s).unwrap();
        assert!(pop.units().iter().all(|u| u.size == Some(u.y)));
    }

    #[test]
    fn categorical_response_uses_class_labels() {
        let mut s = spec(8);
        s.n_classes = Some(3);
        let pop = generate_population(&s).unwrap();
        assert_eq!(pop.response(), ResponseKind::Categorical { n_classes: 3 });
        for c in 0..3 {
            assert!(pop.units().iter().any(|u| u.y == c as f64));
        }
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let mut s = spec(1);
        s.n_clusters = 0;
        assert!(generate_population(&s).is_err());
        let mut s = spec(1);
        s.n_strata = 501;
        assert!(generate_population(&s).is_err());
    }

    #[test]
    fn apportion_keeps_every_part_nonempty() {
        assert_eq!(apportion(3, &[1.0, 0.5, 0.25]), vec![1, 1, 1]);
        let c = apportion(700, &[1.0, 0.5, 0.25]);
        assert_eq!(c.iter().sum::<usize>(), 700);
        assert_eq!(c, vec![400, 200, 100]);
    }
}
