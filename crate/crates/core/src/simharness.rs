//! Monte Carlo coverage experiments on a finite population.
//!
//! Every replicate draws a sample under the configured design, builds each
//! method's region for *every* unit of the population, and records the
//! fraction covered. Because the test unit is uniform over the population,
//! that fraction is the replicate's exact conditional coverage. Replicates
//! run in parallel on independent ChaCha8 streams (stream `r` of the
//! configured seed) and are reduced in replicate order, so a report depends
//! only on its config.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{
    cluster_double_conformal, cluster_pooled_cdf, cluster_repeated_subsample,
    cluster_subsample_once, CalibrationContext, ClusteredCalibration, Method, PooledPadding,
    PredictionRegion, StratifiedCalibration,
};
use crate::designs::{design_split, draw, DesignSpec, DrawnSample};
use crate::error::{Error, Result};
use crate::population::{
    generate_population, load_population, ColumnSchema, FinitePopulation, ResponseKind,
    SyntheticPopSpec,
};
use crate::quantiles::{order_statistic_quantile, ScoreQuantile, SortedWeightedScores};
use crate::scores::{fit_logistic, fit_ols, ScoreModel};

/// Where the population comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum PopulationSource {
    Synthetic(SyntheticPopSpec),
    File { path: PathBuf, schema: ColumnSchema },
}

impl PopulationSource {
    pub fn load(&self) -> Result<FinitePopulation> {
        match self {
            PopulationSource::Synthetic(spec) => generate_population(spec),
            PopulationSource::File { path, schema } => load_population(path, schema),
        }
    }
}

/// Size measure used by PPS designs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SizeMeasureRule {
    /// The population's own size column.
    #[default]
    Population,
    /// `1 + sqrt(|r_i|)` with `r_i` the residual of a least-squares fit of
    /// `y` on the covariates over the whole population. Makes PPS sampling
    /// informative about regression errors.
    ResidualRoot,
}

/// What is being predicted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// One-sided bound `(-inf, q]` on `y` from the whole sample, no model.
    #[default]
    Unsupervised,
    /// Least squares on the training part, `|y - f(x)|` scores on the rest.
    Regression,
    /// Multinomial logistic on the training part, `1 - p_y(x)` scores.
    Classification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Engine {
    #[serde(rename = "split")]
    Split,
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "stratified")]
    Stratified,
    #[serde(rename = "cluster-sub1")]
    ClusterSub1,
    #[serde(rename = "cluster-subB")]
    ClusterSubB,
    #[serde(rename = "cluster-double")]
    ClusterDouble,
    #[serde(rename = "cluster-pool")]
    ClusterPool,
}

impl Engine {
    pub fn as_str(self) -> &'static str {
        match self {
            Engine::Split => "split",
            Engine::Full => "full",
            Engine::Stratified => "stratified",
            Engine::ClusterSub1 => "cluster-sub1",
            Engine::ClusterSubB => "cluster-subB",
            Engine::ClusterDouble => "cluster-double",
            Engine::ClusterPool => "cluster-pool",
        }
    }
}

/// Padded conformal quantile, or the unpadded order statistic baseline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantileRule {
    #[default]
    Conformal,
    Naive,
}

fn default_subsamples() -> usize {
    20
}

/// One row of the method matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub engine: Engine,
    /// Weight calibration scores by the design weights.
    #[serde(default)]
    pub weights: bool,
    #[serde(default)]
    pub quantile: QuantileRule,
    /// Fit the model by weighted least squares / weighted likelihood.
    #[serde(default)]
    pub weighted_model: bool,
    /// Subsamples for `cluster-subB`.
    #[serde(default = "default_subsamples")]
    pub subsamples: usize,
    #[serde(default)]
    pub padding: PooledPadding,
}

impl MethodSpec {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            format!(
                "{}/{}/{}{}",
                self.engine.as_str(),
                if self.weights {
                    "weighted"
                } else {
                    "unweighted"
                },
                match self.quantile {
                    QuantileRule::Conformal => "conformal",
                    QuantileRule::Naive => "naive",
                },
                if self.weighted_model { "/wls" } else { "" }
            )
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Coverage,
    Length,
    VacuousRate,
}

/// A band an experiment's result must fall in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandCheck {
    pub method: String,
    pub alpha: f64,
    #[serde(default)]
    pub stratum: Option<String>,
    #[serde(default = "default_metric")]
    pub metric: Metric,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
}

fn default_metric() -> Metric {
    Metric::Coverage
}

fn default_alphas() -> Vec<f64> {
    vec![0.2, 0.1]
}

fn default_replicates() -> usize {
    1000
}

fn default_split() -> f64 {
    0.5
}

fn default_name() -> String {
    "experiment".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub mode: Mode,
    /// Fraction of each sample used for model fitting (regression and
    /// classification only).
    #[serde(default = "default_split")]
    pub split_fraction: f64,
    #[serde(default)]
    pub size_measure: SizeMeasureRule,
    pub population: PopulationSource,
    pub design: DesignSpec,
    pub methods: Vec<MethodSpec>,
    #[serde(default)]
    pub checks: Vec<BandCheck>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a TOML config; a relative population path is taken relative to
    /// the config file.
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let PopulationSource::File { path: p, .. } = &mut cfg.population {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::EmptyMethodMatrix);
        }
        let bad = |m: String| Err(Error::Config(m));
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if self.alphas.is_empty() {
            return bad("at least one alpha is required".into());
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return bad(format!("alpha must lie in (0, 1), got {a}"));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad(format!(
                "split_fraction must lie in (0, 1), got {}",
                self.split_fraction
            ));
        }
        let mut names: Vec<String> = self.methods.iter().map(MethodSpec::label).collect();
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return bad(format!("duplicate method name {}", w[0]));
        }
        Ok(())
    }
}

/// The unpadded `ceil(beta n)`-th smallest score: the naive baseline the
/// conformal quantile is compared against.
pub fn naive_quantile_baseline(scores: &[f64], beta: f64) -> Result<f64> {
    order_statistic_quantile(scores, beta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowStatus {
    Ok,
    Skipped,
}

/// One `(method, alpha)` result, or one stratum of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub engine: Engine,
    pub weights: bool,
    pub quantile: QuantileRule,
    pub weighted_model: bool,
    pub alpha: f64,
    /// Empty for the marginal row.
    pub stratum: Option<String>,
    pub status: RowStatus,
    pub reason: Option<String>,
    pub replicates: usize,
    pub coverage: Option<f64>,
    pub coverage_lo: Option<f64>,
    pub coverage_hi: Option<f64>,
    /// Mean finite interval length (or label-set size); empty when every
    /// region was unbounded.
    pub length: Option<f64>,
    pub length_lo: Option<f64>,
    pub length_hi: Option<f64>,
    pub vacuous_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub check: BandCheck,
    pub value: Option<f64>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub name: String,
    pub seed: u64,
    pub replicates: usize,
    pub population_size: usize,
    pub rows: Vec<ReportRow>,
    pub checks: Vec<CheckOutcome>,
}

impl CoverageReport {
    /// The marginal (all-strata) row for a method at `alpha`.
    pub fn row(&self, method: &str, alpha: f64) -> Option<&ReportRow> {
        self.stratum_row(method, alpha, None)
    }

    pub fn stratum_row(
        &self,
        method: &str,
        alpha: f64,
        stratum: Option<&str>,
    ) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.alpha == alpha && r.stratum.as_deref() == stratum)
    }

    pub fn all_checks_pass(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Per-replicate result of one method at one level.
#[derive(Clone, Debug, Default)]
struct Tally {
    coverage: f64,
    length: Option<f64>,
    vacuous: f64,
    strata: Vec<f64>,
}

enum Threshold {
    Fixed(ScoreQuantile),
    /// Padded weighted quantile with each unit's own design weight at +∞.
    PerWeight {
        cdf: SortedWeightedScores,
        beta: f64,
    },
    PerStratum(Vec<Option<Threshold>>),
    Region(PredictionRegion),
}

impl Threshold {
    fn for_unit(
        &self,
        unit: usize,
        stratum: Option<usize>,
        weights: &[f64],
    ) -> Option<ScoreQuantile> {
        match self {
            Threshold::Fixed(q) => Some(*q),
            Threshold::PerWeight { cdf, beta } => Some(cdf.conformal(*beta, weights[unit])),
            Threshold::PerStratum(t) => match t[stratum.expect("stratified population")].as_ref() {
                Some(t) => t.for_unit(unit, stratum, weights),
                // nothing to calibrate against: fall back to the whole line
                None => Some(ScoreQuantile::Infinite),
            },
            Threshold::Region(_) => None,
        }
    }
}

struct Prepared<'a> {
    cfg: &'a ExperimentConfig,
    pop: FinitePopulation,
    test_weights: Vec<f64>,
    active: Vec<usize>,
}

fn skip_reason(cfg: &ExperimentConfig, pop: &FinitePopulation, m: &MethodSpec) -> Option<String> {
    let clustered = matches!(cfg.design, DesignSpec::Cluster { .. });
    let stratified = matches!(cfg.design, DesignSpec::Stratified { .. });
    let naive = m.quantile == QuantileRule::Naive;
    let reason = match m.engine {
        Engine::Full => {
            "full conformal refits the model per grid point and test unit; run it through `predict`"
        }
        Engine::Stratified if !stratified => "the stratified engine needs a stratified design",
        Engine::ClusterSub1 | Engine::ClusterSubB | Engine::ClusterDouble | Engine::ClusterPool
            if !clustered =>
        {
            "cluster engines need a cluster design"
        }
        Engine::ClusterSubB if naive => "repeated subsampling has no naive variant",
        Engine::ClusterDouble if naive => "double conformal has no naive variant",
        Engine::ClusterDouble if cfg.mode != Mode::Unsupervised => {
            "double conformal works on responses only"
        }
        Engine::ClusterPool if matches!(pop.response(), ResponseKind::Categorical { .. }) => {
            "the pooled CDF needs a continuous response"
        }
        Engine::ClusterSub1 | Engine::ClusterSubB | Engine::ClusterDouble | Engine::ClusterPool
            if m.weights =>
        {
            "cluster engines weight clusters themselves; set weights = false"
        }
        _ if m.weighted_model && cfg.mode == Mode::Unsupervised => {
            "no model is fit in unsupervised mode"
        }
        _ => return None,
    };
    Some(reason.to_string())
}

fn check_mode(cfg: &ExperimentConfig, pop: &FinitePopulation) -> Result<()> {
    match (cfg.mode, pop.response()) {
        (Mode::Classification, ResponseKind::Continuous) => Err(Error::Config(
            "classification mode needs a categorical response".into(),
        )),
        (Mode::Regression | Mode::Unsupervised, ResponseKind::Categorical { .. }) => Err(
            Error::Config("regression and unsupervised modes need a continuous response".into()),
        ),
        _ => Ok(()),
    }
}

fn apply_size_rule(pop: FinitePopulation, rule: SizeMeasureRule) -> Result<FinitePopulation> {
    match rule {
        SizeMeasureRule::Population => Ok(pop),
        SizeMeasureRule::ResidualRoot => {
            let x: Vec<Vec<f64>> = pop.units().iter().map(|u| u.x.clone()).collect();
            let y = pop.responses();
            let fit = fit_ols(&x, &y, None)?;
            let model = ScoreModel::regression(fit);
            let sizes = pop
                .units()
                .iter()
                .map(|u| Ok(1.0 + model.score(&u.x, u.y)?.sqrt()))
                .collect::<Result<Vec<_>>>()?;
            pop.with_size_measure(&sizes)
        }
    }
}

fn xy(pop: &FinitePopulation, s: &DrawnSample) -> (Vec<Vec<f64>>, Vec<f64>) {
    s.units
        .iter()
        .map(|&id| {
            let u = pop.unit(id);
            (u.x.clone(), u.y)
        })
        .unzip()
}

impl Prepared<'_> {
    fn fit(&self, train: &DrawnSample, weighted: bool) -> Result<ScoreModel> {
        let (x, y) = xy(&self.pop, train);
        let w = weighted.then_some(train.base_weights.as_slice());
        Ok(match self.pop.response() {
            ResponseKind::Continuous => ScoreModel::regression(fit_ols(&x, &y, w)?),
            ResponseKind::Categorical { n_classes } => {
                ScoreModel::classification(fit_logistic(&x, &y, n_classes, w)?)
            }
        })
    }

    fn replicate(&self, r: usize) -> Result<Vec<Vec<Tally>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(r as u64);
        let sample = draw(&self.pop, &self.cfg.design, &mut rng)?;
        let (calibration, models) = match self.cfg.mode {
            Mode::Unsupervised => (
                sample,
                [Some(ScoreModel::Response), Some(ScoreModel::Response)],
            ),
            Mode::Regression | Mode::Classification => {
                let split = design_split(&sample, self.cfg.split_fraction, &mut rng)?;
                let need = |wm: bool| {
                    self.active
                        .iter()
                        .any(|&i| self.cfg.methods[i].weighted_model == wm)
                };
                let plain = need(false)
                    .then(|| self.fit(&split.train, false))
                    .transpose()?;
                let weighted = need(true)
                    .then(|| self.fit(&split.train, true))
                    .transpose()?;
                (split.calibration, [plain, weighted])
            }
        };
        self.active
            .iter()
            .map(|&i| {
                let m = &self.cfg.methods[i];
                let model = models[m.weighted_model as usize]
                    .clone()
                    .expect("model fitted");
                let method_seed: u64 = rng.random();
                self.cfg
                    .alphas
                    .iter()
                    .map(|&alpha| {
                        let t = self.threshold(m, &model, &calibration, alpha, method_seed)?;
                        self.evaluate(&model, &t, alpha)
                    })
                    .collect()
            })
            .collect()
    }

    fn threshold(
        &self,
        m: &MethodSpec,
        model: &ScoreModel,
        cal: &DrawnSample,
        alpha: f64,
        method_seed: u64,
    ) -> Result<Threshold> {
        let naive = m.quantile == QuantileRule::Naive;
        let flat = |ctx: &CalibrationContext, weights: bool| -> Result<Threshold> {
            Ok(match (weights, naive) {
                (false, false) => Threshold::Fixed(ctx.quantile_unweighted()),
                (false, true) => Threshold::Fixed(ScoreQuantile::Finite(ctx.naive_quantile())),
                (true, true) => {
                    Threshold::Fixed(ScoreQuantile::Finite(ctx.naive_weighted_quantile()?))
                }
                (true, false) => Threshold::PerWeight {
                    cdf: SortedWeightedScores::new(
                        ctx.scores(),
                        ctx.weights().expect("design weights"),
                    )?,
                    beta: ctx.level(),
                },
            })
        };
        let sub_rng = || ChaCha8Rng::seed_from_u64(method_seed);
        Ok(match m.engine {
            Engine::Split => {
                let ctx = CalibrationContext::from_sample(&self.pop, cal, model.clone(), alpha)?;
                flat(&ctx, m.weights)?
            }
            Engine::Stratified => {
                let sc = StratifiedCalibration::from_sample(&self.pop, cal, model.clone(), alpha)?;
                let per = (0..sc.labels().len())
                    .map(|h| {
                        sc.context(h)
                            .map(|ctx| flat(ctx, m.weights || !ctx.is_exchangeable()))
                            .transpose()
                    })
                    .collect::<Result<_>>()?;
                Threshold::PerStratum(per)
            }
            Engine::ClusterSub1 => {
                let cc = ClusteredCalibration::from_sample(&self.pop, cal, model.clone())?;
                let e = cluster_subsample_once(&cc, alpha, &mut sub_rng())?;
                flat(&e.context, false)?
            }
            Engine::ClusterSubB => {
                let cc = ClusteredCalibration::from_sample(&self.pop, cal, model.clone())?;
                let e = cluster_repeated_subsample(&cc, alpha, m.subsamples, &mut sub_rng())?;
                Threshold::Fixed(e.threshold)
            }
            Engine::ClusterPool => {
                let cc = ClusteredCalibration::from_sample(&self.pop, cal, model.clone())?;
                if naive {
                    let (scores, weights): (Vec<f64>, Vec<f64>) = cc
                        .groups()
                        .iter()
                        .flat_map(|g| {
                            g.scores
                                .iter()
                                .map(move |&s| (s, 1.0 / g.scores.len() as f64))
                        })
                        .unzip();
                    let q = SortedWeightedScores::new(&scores, &weights)?.unpadded(1.0 - alpha);
                    Threshold::Fixed(ScoreQuantile::Finite(q))
                } else {
                    Threshold::Fixed(cluster_pooled_cdf(&cc, alpha, m.padding)?.threshold)
                }
            }
            Engine::ClusterDouble => {
                let cc = ClusteredCalibration::from_sample(&self.pop, cal, model.clone())?;
                Threshold::Region(cluster_double_conformal(&cc, alpha)?)
            }
            Engine::Full => unreachable!("full conformal is skipped"),
        })
    }

    fn evaluate(&self, model: &ScoreModel, t: &Threshold, alpha: f64) -> Result<Tally> {
        let n_strata = self.pop.stratum_labels().map_or(0, <[String]>::len);
        let mut hits = vec![0usize; n_strata];
        let mut sizes = vec![0usize; n_strata];
        let mut covered = 0usize;
        let mut vacuous = 0usize;
        let mut length_sum = 0.0;
        let mut finite = 0usize;
        for (i, u) in self.pop.units().iter().enumerate() {
            let region = match t {
                Threshold::Region(r) => r.clone(),
                _ => {
                    let q = t
                        .for_unit(i, u.stratum, &self.test_weights)
                        .expect("threshold");
                    PredictionRegion::from_quantile(model, &u.x, q, 1.0 - alpha, Method::Split)?
                }
            };
            let hit = region.contains(u.y);
            covered += hit as usize;
            vacuous += region.is_vacuous() as usize;
            let size = region.size();
            if size.is_finite() {
                length_sum += size;
                finite += 1;
            }
            if let Some(h) = u.stratum {
                hits[h] += hit as usize;
                sizes[h] += 1;
            }
        }
        let n = self.pop.len() as f64;
        Ok(Tally {
            coverage: covered as f64 / n,
            length: (finite > 0).then(|| length_sum / finite as f64),
            vacuous: vacuous as f64 / n,
            strata: hits
                .iter()
                .zip(&sizes)
                .map(|(&h, &s)| h as f64 / s as f64)
                .collect(),
        })
    }
}

/// `(mean, mean - 2 sd / sqrt(R), mean + 2 sd / sqrt(R))`.
fn summarize(values: &[f64]) -> (f64, f64, f64) {
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt()
    } else {
        0.0
    };
    let half = 2.0 * sd / r.sqrt();
    (mean, mean - half, mean + half)
}

fn base_row(m: &MethodSpec, alpha: f64, replicates: usize) -> ReportRow {
    ReportRow {
        method: m.label(),
        engine: m.engine,
        weights: m.weights,
        quantile: m.quantile,
        weighted_model: m.weighted_model,
        alpha,
        stratum: None,
        status: RowStatus::Ok,
        reason: None,
        replicates,
        coverage: None,
        coverage_lo: None,
        coverage_hi: None,
        length: None,
        length_lo: None,
        length_hi: None,
        vacuous_rate: None,
    }
}

/// Runs every replicate and aggregates coverage, length and vacuous rate per
/// method and level.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<CoverageReport> {
    cfg.validate()?;
    let pop = apply_size_rule(cfg.population.load()?, cfg.size_measure)?;
    check_mode(cfg, &pop)?;
    cfg.design.validate(&pop)?;
    let test_weights = cfg.design.population_weights(&pop)?;
    let reasons: Vec<Option<String>> = cfg
        .methods
        .iter()
        .map(|m| skip_reason(cfg, &pop, m))
        .collect();
    let active: Vec<usize> = (0..cfg.methods.len())
        .filter(|&i| reasons[i].is_none())
        .collect();
    let prepared = Prepared {
        cfg,
        pop,
        test_weights,
        active,
    };

    let tallies: Vec<Vec<Vec<Tally>>> = if prepared.active.is_empty() {
        Vec::new()
    } else {
        (0..cfg.replicates)
            .into_par_iter()
            .map(|r| prepared.replicate(r))
            .collect::<Result<_>>()?
    };

    let strata: Vec<String> = prepared
        .pop
        .stratum_labels()
        .filter(|l| l.len() > 1)
        .map(<[String]>::to_vec)
        .unwrap_or_default();
    let mut rows = Vec::new();
    for (i, m) in cfg.methods.iter().enumerate() {
        for (a, &alpha) in cfg.alphas.iter().enumerate() {
            if let Some(reason) = &reasons[i] {
                rows.push(ReportRow {
                    status: RowStatus::Skipped,
                    reason: Some(reason.clone()),
                    replicates: 0,
                    ..base_row(m, alpha, 0)
                });
                continue;
            }
            let slot = prepared.active.iter().position(|&j| j == i).unwrap();
            let reps: Vec<&Tally> = tallies.iter().map(|t| &t[slot][a]).collect();
            let cov: Vec<f64> = reps.iter().map(|t| t.coverage).collect();
            let (c, clo, chi) = summarize(&cov);
            let lens: Vec<f64> = reps.iter().filter_map(|t| t.length).collect();
            let len = (!lens.is_empty()).then(|| summarize(&lens));
            let vac = reps.iter().map(|t| t.vacuous).sum::<f64>() / reps.len() as f64;
            rows.push(ReportRow {
                coverage: Some(c),
                coverage_lo: Some(clo),
                coverage_hi: Some(chi),
                length: len.map(|l| l.0),
                length_lo: len.map(|l| l.1),
                length_hi: len.map(|l| l.2),
                vacuous_rate: Some(vac),
                ..base_row(m, alpha, cfg.replicates)
            });
            for (h, label) in strata.iter().enumerate() {
                let cov: Vec<f64> = reps.iter().map(|t| t.strata[h]).collect();
                let (c, clo, chi) = summarize(&cov);
                rows.push(ReportRow {
                    stratum: Some(label.clone()),
                    coverage: Some(c),
                    coverage_lo: Some(clo),
                    coverage_hi: Some(chi),
                    ..base_row(m, alpha, cfg.replicates)
                });
            }
        }
    }

    let mut report = CoverageReport {
        name: cfg.name.clone(),
        seed: cfg.seed,
        replicates: cfg.replicates,
        population_size: prepared.pop.len(),
        rows,
        checks: Vec::new(),
    };
    report.checks = cfg
        .checks
        .iter()
        .map(|c| {
            let row = report.stratum_row(&c.method, c.alpha, c.stratum.as_deref());
            let value = row.and_then(|r| match c.metric {
                Metric::Coverage => r.coverage,
                Metric::Length => r.length,
                Metric::VacuousRate => r.vacuous_rate,
            });
            let passed = value
                .is_some_and(|v| c.min.is_none_or(|lo| v >= lo) && c.max.is_none_or(|hi| v <= hi));
            CheckOutcome {
                check: c.clone(),
                value,
                passed,
            }
        })
        .collect();
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Table,
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Table => "txt",
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

fn fmt_ci(lo: Option<f64>, hi: Option<f64>, digits: usize) -> String {
    match (lo, hi) {
        (Some(lo), Some(hi)) => format!("({lo:.digits$}, {hi:.digits$})"),
        _ => "-".into(),
    }
}

fn render_table(report: &CoverageReport) -> String {
    let mut alphas: Vec<f64> = Vec::new();
    for r in &report.rows {
        if !alphas.contains(&r.alpha) {
            alphas.push(r.alpha);
        }
    }
    let mut keys: Vec<(&str, Option<&str>)> = Vec::new();
    for r in &report.rows {
        let k = (r.method.as_str(), r.stratum.as_deref());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let width = keys
        .iter()
        .map(|(m, s)| m.len() + s.map_or(0, |s| s.len() + 4))
        .max()
        .unwrap_or(6)
        .max(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} (N = {}, {} replicates, seed {})",
        report.name, report.population_size, report.replicates, report.seed
    );
    let _ = write!(
        out,
        "{:<width$}  {:<14} {:<8} {:<9} {:<5}",
        "method", "engine", "weights", "quantile", "wls"
    );
    for a in &alphas {
        let level = format!("{}%", (1.0 - a) * 100.0);
        let _ = write!(
            out,
            "  {:<18} {:<20} {:<7}",
            format!("{level} coverage"),
            "length",
            "vacuous"
        );
    }
    out.push('\n');
    for (method, stratum) in keys {
        let first = report
            .rows
            .iter()
            .find(|r| r.method == method && r.stratum.as_deref() == stratum)
            .unwrap();
        let name = match stratum {
            Some(s) => format!("  [{s}]"),
            None => method.to_string(),
        };
        let _ = write!(
            out,
            "{:<width$}  {:<14} {:<8} {:<9} {:<5}",
            name,
            first.engine.as_str(),
            if first.weights { "yes" } else { "no" },
            match first.quantile {
                QuantileRule::Conformal => "conformal",
                QuantileRule::Naive => "naive",
            },
            if first.weighted_model { "yes" } else { "no" }
        );
        if first.status == RowStatus::Skipped {
            let _ = write!(out, "  skipped: {}", first.reason.as_deref().unwrap_or(""));
            out.push('\n');
            continue;
        }
        for a in &alphas {
            let row = report
                .rows
                .iter()
                .find(|r| r.method == method && r.stratum.as_deref() == stratum && r.alpha == *a);
            match row {
                Some(r) => {
                    let _ = write!(
                        out,
                        "  {:<18} {:<20} {:<7}",
                        fmt_ci(r.coverage_lo, r.coverage_hi, 3),
                        fmt_ci(r.length_lo, r.length_hi, 1),
                        r.vacuous_rate.map_or("-".into(), |v| format!("{v:.3}"))
                    );
                }
                None => {
                    let _ = write!(out, "  {:<18} {:<20} {:<7}", "-", "-", "-");
                }
            }
        }
        out.push('\n');
    }
    for c in &report.checks {
        let _ = writeln!(
            out,
            "check {} {} alpha={}{}: {} in [{}, {}] -> {}",
            c.check.method,
            match c.check.metric {
                Metric::Coverage => "coverage",
                Metric::Length => "length",
                Metric::VacuousRate => "vacuous-rate",
            },
            c.check.alpha,
            c.check
                .stratum
                .as_deref()
                .map(|s| format!(" [{s}]"))
                .unwrap_or_default(),
            c.value.map_or("-".into(), |v| v.to_string()),
            c.check.min.map_or("-inf".into(), |v| v.to_string()),
            c.check.max.map_or("inf".into(), |v| v.to_string()),
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    out
}

/// Report rows as CSV, one line per row.
pub fn rows_to_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io {
        path: PathBuf::from("<memory>"),
        source: e.into_error(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub fn render_report(report: &CoverageReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Table => Ok(render_table(report)),
        ReportFormat::Csv => rows_to_csv(&report.rows),
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)? + "\n"),
    }
}

/// Writes the report to `path` in the given format.
pub fn emit_report(
    report: &CoverageReport,
    format: ReportFormat,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let text = render_report(report, format)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
