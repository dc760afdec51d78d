use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use svyconform::conformal::{
    cluster_double_conformal, cluster_pooled_cdf, cluster_repeated_subsample,
    cluster_subsample_once, full_conformal_interval, observed_cluster_interval,
    split_interval_exchangeable, split_interval_with_weight, stratified_interval,
    CalibrationContext, ClusteredCalibration, GridSpec, OlsFitter, PooledPadding, PredictionRegion,
    Region, StratifiedCalibration, TestWeight, TrainingData,
};
use svyconform::designs::{design_split, draw, DesignSpec, DrawnSample, WithinStratum};
use svyconform::population::{
    generate_population, load_population, write_population, ColumnSchema, FinitePopulation,
    ResponseKind, SyntheticPopSpec,
};
use svyconform::scores::{fit_logistic, fit_ols_named, ScoreModel};
use svyconform::simharness::{
    emit_report, render_report, run_experiment, ExperimentConfig, ReportFormat,
};
use svyconform::{Error, Result};

#[derive(Parser)]
#[command(
    name = "svyconform",
    version,
    about = "Conformal prediction for survey samples"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic population to CSV.
    Generate(GenerateArgs),
    /// Draw one sample and write its ids and weights.
    Draw(DrawArgs),
    /// Build prediction regions for test units.
    Predict(PredictArgs),
    /// Run a Monte Carlo coverage experiment from a TOML config.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    n_units: usize,
    #[arg(long, default_value_t = 1)]
    n_strata: usize,
    #[arg(long, default_value_t = 1)]
    n_clusters: usize,
    #[arg(long, default_value_t = 0)]
    covariate_dim: usize,
    #[arg(long, default_value_t = 50.0)]
    noise_scale: f64,
    #[arg(long, default_value_t = 0.0)]
    informativeness: f64,
    #[arg(long)]
    n_classes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PopulationArgs {
    /// Population CSV with a header row.
    #[arg(long)]
    population: PathBuf,
    #[arg(long, default_value = "y")]
    y: String,
    /// Covariate columns; default is every column without another role.
    #[arg(long, value_delimiter = ',')]
    x: Option<Vec<String>>,
    #[arg(long, default_value = "id")]
    id_col: String,
    #[arg(long, default_value = "stratum")]
    stratum_col: String,
    #[arg(long, default_value = "cluster")]
    cluster_col: String,
    #[arg(long, default_value = "size")]
    size_col: String,
    /// Treat the response as integer class labels.
    #[arg(long)]
    categorical: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum DesignKind {
    SrsWr,
    SrsWor,
    PpsWr,
    PpsWor,
    Stratified,
    Cluster,
}

#[derive(Args)]
struct DesignArgs {
    #[arg(long, value_enum)]
    design: DesignKind,
    /// Sample size (SRS and PPS designs).
    #[arg(long)]
    n: Option<usize>,
    /// Per-stratum counts, e.g. `S1=100,S2=50,S3=50`.
    #[arg(long)]
    allocation: Option<String>,
    /// Within-stratum design.
    #[arg(long, value_enum, default_value = "srs-wor")]
    within: WithinKind,
    /// Number of clusters sampled.
    #[arg(long)]
    k: Option<usize>,
    /// Second-stage SRS size inside each sampled cluster.
    #[arg(long)]
    per_cluster: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum WithinKind {
    SrsWr,
    SrsWor,
    PpsWr,
    PpsWor,
}

#[derive(Args)]
struct DrawArgs {
    #[command(flatten)]
    pop: PopulationArgs,
    #[command(flatten)]
    design: DesignArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PredictMethod {
    Split,
    Full,
    Stratified,
    #[value(name = "cluster-sub1")]
    ClusterSub1,
    #[value(name = "cluster-subB")]
    ClusterSubB,
    ClusterDouble,
    ClusterPool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Unsupervised,
    Regression,
    Classification,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    pop: PopulationArgs,
    #[command(flatten)]
    design: DesignArgs,
    /// Sample written by `draw`; drawn afresh with `--seed` when omitted.
    #[arg(long)]
    sample: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "split")]
    method: PredictMethod,
    /// Defaults to classification for a categorical response, regression
    /// when there are covariates, and unsupervised otherwise.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Training share of the sample when a model is fit.
    #[arg(long, default_value_t = 0.5)]
    split_fraction: f64,
    /// Fit the model with the design weights.
    #[arg(long)]
    weighted_model: bool,
    /// Test rows: CSV with the covariate columns and optionally `id`,
    /// `stratum`, `cluster` and `weight`. Default: unsampled population units.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Weight of every test unit.
    #[arg(long, group = "tw")]
    test_weight: Option<f64>,
    /// Conservative mode: an upper bound on any unit's weight.
    #[arg(long, group = "tw")]
    max_weight: Option<f64>,
    /// Sensitivity mode: one region per listed weight.
    #[arg(long, group = "tw", value_delimiter = ',')]
    weight_grid: Option<Vec<f64>>,
    /// Subsamples for `cluster-subB`.
    #[arg(long, default_value_t = 20)]
    subsamples: usize,
    #[arg(long, value_enum, default_value = "phantom-cluster")]
    padding: PaddingArg,
    /// Cluster engines: calibrate a test unit from a sampled cluster on that
    /// cluster's own units.
    #[arg(long)]
    observed_clusters: bool,
    /// Grid points for full conformal.
    #[arg(long, default_value_t = 200)]
    grid_points: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PaddingArg {
    PhantomCluster,
    PhantomUnit,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Results directory; default `results/<name>` next to the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the configured number of replicates.
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Draw(a) => draw_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Simulate(a) => simulate(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn generate(a: GenerateArgs) -> Result<ExitCode> {
    let spec = SyntheticPopSpec {
        n_units: a.n_units,
        n_strata: a.n_strata,
        n_clusters: a.n_clusters,
        covariate_dim: a.covariate_dim,
        noise_scale: a.noise_scale,
        informativeness: a.informativeness,
        seed: a.seed,
        n_classes: a.n_classes,
    };
    write_population(&generate_population(&spec)?, &a.out)?;
    Ok(ExitCode::SUCCESS)
}

fn read_header(path: &Path) -> Result<Vec<String>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io {
            path: path.to_path_buf(),
            source: io,
        },
        other => Error::Config(format!("{}: {other:?}", path.display())),
    })?;
    Ok(r.headers()?.iter().map(str::to_string).collect())
}

fn load_pop(a: &PopulationArgs) -> Result<FinitePopulation> {
    let header = read_header(&a.population)?;
    let has = |c: &str| header.iter().any(|h| h == c);
    let opt = |c: &str| has(c).then(|| c.to_string());
    let schema = ColumnSchema {
        id: opt(&a.id_col),
        y: a.y.clone(),
        x: match &a.x {
            Some(x) => x.clone(),
            None => header
                .iter()
                .filter(|h| {
                    ![&a.y, &a.id_col, &a.stratum_col, &a.cluster_col, &a.size_col].contains(h)
                })
                .cloned()
                .collect(),
        },
        stratum: opt(&a.stratum_col),
        cluster: opt(&a.cluster_col),
        size: opt(&a.size_col),
        categorical: a.categorical,
    };
    let pop = load_population(&a.population, &schema)?;
    if pop.dropped_rows() > 0 {
        eprintln!(
            "note: dropped {} rows with missing values",
            pop.dropped_rows()
        );
    }
    Ok(pop)
}

fn parse_allocation(text: &str) -> Result<BTreeMap<String, usize>> {
    text.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|part| {
            let (k, v) = part.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("allocation entry `{part}` is not LABEL=COUNT"))
            })?;
            let n = v.trim().parse().map_err(|_| {
                Error::InvalidArgument(format!("allocation count `{v}` is not an integer"))
            })?;
            Ok((k.trim().to_string(), n))
        })
        .collect()
}

fn design_spec(a: &DesignArgs) -> Result<DesignSpec> {
    let need_n = || {
        a.n.ok_or_else(|| Error::InvalidArgument("--n is required for this design".into()))
    };
    Ok(match a.design {
        DesignKind::SrsWr => DesignSpec::SrsWr { n: need_n()? },
        DesignKind::SrsWor => DesignSpec::SrsWor { n: need_n()? },
        DesignKind::PpsWr => DesignSpec::PpsWr { n: need_n()? },
        DesignKind::PpsWor => DesignSpec::PpsWor { n: need_n()? },
        DesignKind::Stratified => DesignSpec::Stratified {
            allocation: parse_allocation(
                a.allocation
                    .as_deref()
                    .ok_or_else(|| Error::InvalidArgument("--allocation is required".into()))?,
            )?,
            within: match a.within {
                WithinKind::SrsWr => WithinStratum::SrsWr,
                WithinKind::SrsWor => WithinStratum::SrsWor,
                WithinKind::PpsWr => WithinStratum::PpsWr,
                WithinKind::PpsWor => WithinStratum::PpsWor,
            },
        },
        DesignKind::Cluster => DesignSpec::Cluster {
            k: a.k
                .ok_or_else(|| Error::InvalidArgument("--k is required".into()))?,
            per_cluster: a.per_cluster,
        },
    })
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(fs::File::create(p).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?),
        None => Box::new(io::stdout()),
    })
}

fn flush_csv(w: csv::Writer<Box<dyn Write>>) -> Result<()> {
    w.into_inner()
        .map_err(|e| Error::Io {
            path: PathBuf::from("<output>"),
            source: e.into_error(),
        })?
        .flush()
        .map_err(|e| Error::Io {
            path: PathBuf::from("<output>"),
            source: e,
        })
}

fn draw_cmd(a: DrawArgs) -> Result<ExitCode> {
    let pop = load_pop(&a.pop)?;
    let spec = design_spec(&a.design)?;
    let sample = draw(&pop, &spec, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    let mut w = csv::Writer::from_writer(output(a.out.as_deref())?);
    let mut header = vec!["id", "label", "weight"];
    if sample.strata.is_some() {
        header.push("stratum");
    }
    if sample.clusters.is_some() {
        header.push("cluster");
    }
    w.write_record(&header)?;
    for (p, &id) in sample.units.iter().enumerate() {
        let u = pop.unit(id);
        let mut row = vec![
            id.to_string(),
            u.label.clone(),
            sample.base_weights[p].to_string(),
        ];
        if let Some(s) = &sample.strata {
            row.push(pop.stratum_labels().unwrap()[s[p]].clone());
        }
        if let Some(c) = &sample.clusters {
            row.push(pop.cluster_labels().unwrap()[c[p]].clone());
        }
        w.write_record(&row)?;
    }
    flush_csv(w)?;
    Ok(ExitCode::SUCCESS)
}

fn read_sample_ids(path: &Path) -> Result<Vec<usize>> {
    let mut r = csv::Reader::from_path(path)?;
    let col = r
        .headers()?
        .iter()
        .position(|h| h == "id")
        .ok_or_else(|| Error::MissingColumn("id".into()))?;
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec?;
            let v = &rec[col];
            v.trim().parse().map_err(|_| Error::Parse {
                row: i + 2,
                column: "id".into(),
                value: v.to_string(),
            })
        })
        .collect()
}

/// A unit to predict for.
struct TestRow {
    id: String,
    x: Vec<f64>,
    stratum: Option<String>,
    cluster: Option<String>,
    weight: Option<f64>,
}

fn read_test_rows(path: &Path, names: &[String]) -> Result<Vec<TestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let find = |c: &str| header.iter().position(|h| h == c);
    let xcols = names
        .iter()
        .map(|n| find(n).ok_or_else(|| Error::MissingColumn(n.clone())))
        .collect::<Result<Vec<_>>>()?;
    let (id, st, cl, wt) = (find("id"), find("stratum"), find("cluster"), find("weight"));
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |c: usize, name: &str| -> Result<f64> {
            rec[c].trim().parse().map_err(|_| Error::Parse {
                row: i + 2,
                column: name.to_string(),
                value: rec[c].to_string(),
            })
        };
        rows.push(TestRow {
            id: id.map_or_else(|| (i + 1).to_string(), |c| rec[c].to_string()),
            x: xcols
                .iter()
                .zip(names)
                .map(|(&c, n)| num(c, n))
                .collect::<Result<_>>()?,
            stratum: st.map(|c| rec[c].to_string()),
            cluster: cl.map(|c| rec[c].to_string()),
            weight: wt.map(|c| num(c, "weight")).transpose()?,
        });
    }
    Ok(rows)
}

fn unsampled_rows(pop: &FinitePopulation, sample: &DrawnSample, weights: &[f64]) -> Vec<TestRow> {
    let mut taken = vec![false; pop.len() + 1];
    for &id in &sample.units {
        taken[id] = true;
    }
    pop.units()
        .iter()
        .filter(|u| !taken[u.id])
        .map(|u| TestRow {
            id: u.label.clone(),
            x: u.x.clone(),
            stratum: u.stratum.map(|h| pop.stratum_labels().unwrap()[h].clone()),
            cluster: u.cluster.map(|c| pop.cluster_labels().unwrap()[c].clone()),
            weight: Some(weights[u.id - 1]),
        })
        .collect()
}

fn fit_model(pop: &FinitePopulation, train: &DrawnSample, weighted: bool) -> Result<ScoreModel> {
    let (x, y): (Vec<Vec<f64>>, Vec<f64>) = train
        .units
        .iter()
        .map(|&id| (pop.unit(id).x.clone(), pop.unit(id).y))
        .unzip();
    let w = weighted.then_some(train.base_weights.as_slice());
    Ok(match pop.response() {
        ResponseKind::Continuous => {
            ScoreModel::regression(fit_ols_named(&x, &y, w, pop.covariate_names())?)
        }
        ResponseKind::Categorical { n_classes } => {
            ScoreModel::classification(fit_logistic(&x, &y, n_classes, w)?)
        }
    })
}

fn fmt_region(r: &PredictionRegion) -> (String, String, String) {
    match &r.region {
        Region::Interval { lower, upper } => (lower.to_string(), upper.to_string(), String::new()),
        Region::Set { labels, .. } => (
            String::new(),
            String::new(),
            labels
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(";"),
        ),
        Region::Empty => (String::new(), String::new(), String::new()),
    }
}

fn predict(a: PredictArgs) -> Result<ExitCode> {
    let pop = load_pop(&a.pop)?;
    let spec = design_spec(&a.design)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let sample = match &a.sample {
        Some(p) => DrawnSample::from_ids(&pop, &spec, read_sample_ids(p)?)?,
        None => draw(&pop, &spec, &mut rng)?,
    };
    let pop_weights = spec.population_weights(&pop)?;
    let rows = match &a.test {
        Some(p) => read_test_rows(p, pop.covariate_names())?,
        None => unsampled_rows(&pop, &sample, &pop_weights),
    };
    let mode = a.mode.unwrap_or(match pop.response() {
        ResponseKind::Categorical { .. } => ModeArg::Classification,
        ResponseKind::Continuous if pop.covariate_dim() > 0 => ModeArg::Regression,
        ResponseKind::Continuous => ModeArg::Unsupervised,
    });

    // full conformal refits on the whole sample; every other engine splits
    let (train, calibration) = match (mode, a.method) {
        (ModeArg::Unsupervised, _) | (_, PredictMethod::Full) => (None, sample),
        _ => {
            let s = design_split(&sample, a.split_fraction, &mut rng)?;
            if !s.flagged_strata.is_empty() {
                eprintln!(
                    "note: {} strata too small to split went to training",
                    s.flagged_strata.len()
                );
            }
            (Some(s.train), s.calibration)
        }
    };
    let model = match &train {
        None => ScoreModel::Response,
        Some(t) => fit_model(&pop, t, a.weighted_model)?,
    };
    let weight_mode = |row: &TestRow| -> Result<Option<TestWeight>> {
        Ok(if let Some(w) = a.test_weight {
            Some(TestWeight::Known(w))
        } else if let Some(w) = a.max_weight {
            Some(TestWeight::Conservative(w))
        } else if let Some(g) = &a.weight_grid {
            Some(TestWeight::Sensitivity(g.clone()))
        } else {
            row.weight.map(TestWeight::Known)
        })
    };
    let padding = match a.padding {
        PaddingArg::PhantomCluster => PooledPadding::PhantomCluster,
        PaddingArg::PhantomUnit => PooledPadding::PhantomUnit,
    };

    let mut w = csv::Writer::from_writer(output(a.out.as_deref())?);
    w.write_record([
        "id",
        "test_weight",
        "lower",
        "upper",
        "labels",
        "level",
        "method",
        "vacuous",
    ])?;
    let mut emit = |id: &str, weight: Option<f64>, r: &PredictionRegion| -> Result<()> {
        let (lo, hi, labels) = fmt_region(r);
        w.write_record([
            id.to_string(),
            weight.map(|v| v.to_string()).unwrap_or_default(),
            lo,
            hi,
            labels,
            r.level.to_string(),
            r.method.to_string(),
            r.is_vacuous().to_string(),
        ])?;
        Ok(())
    };

    match a.method {
        PredictMethod::Split => {
            let ctx = CalibrationContext::from_sample(&pop, &calibration, model, a.alpha)?;
            for row in &rows {
                if ctx.is_exchangeable() && a.max_weight.is_none() && a.weight_grid.is_none() {
                    emit(&row.id, None, &split_interval_exchangeable(&ctx, &row.x)?)?;
                    continue;
                }
                let mode = weight_mode(row)?.ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "test row {} has no weight; pass --test-weight, --max-weight or --weight-grid",
                        row.id
                    ))
                })?;
                for (wt, r) in split_interval_with_weight(&ctx, &row.x, &mode)? {
                    emit(&row.id, Some(wt), &r)?;
                }
            }
        }
        PredictMethod::Full => {
            if mode == ModeArg::Classification {
                return Err(Error::InvalidArgument(
                    "full conformal supports regression only".into(),
                ));
            }
            let (x, y): (Vec<Vec<f64>>, Vec<f64>) = calibration
                .units
                .iter()
                .map(|&id| (pop.unit(id).x.clone(), pop.unit(id).y))
                .unzip();
            let exch = calibration.design.is_exchangeable();
            let data = TrainingData {
                x,
                y,
                weights: Some(calibration.base_weights.clone()),
            };
            let fitter = OlsFitter {
                weighted: a.weighted_model,
            };
            let grid = GridSpec::Auto {
                points: a.grid_points,
            };
            for row in &rows {
                let weights: Vec<Option<f64>> = match weight_mode(row)? {
                    _ if exch && a.max_weight.is_none() && a.weight_grid.is_none() => vec![None],
                    Some(TestWeight::Known(v) | TestWeight::Conservative(v)) => vec![Some(v)],
                    Some(TestWeight::Sensitivity(g)) => g.into_iter().map(Some).collect(),
                    None => {
                        return Err(Error::InvalidArgument(format!(
                            "test row {} has no weight",
                            row.id
                        )))
                    }
                };
                for wt in weights {
                    let r = full_conformal_interval(&data, &row.x, a.alpha, &grid, wt, &fitter)?;
                    emit(&row.id, wt, &r)?;
                }
            }
        }
        PredictMethod::Stratified => {
            let cal = StratifiedCalibration::from_sample(&pop, &calibration, model, a.alpha)?;
            for row in &rows {
                let label = row
                    .stratum
                    .as_deref()
                    .ok_or_else(|| Error::MissingColumn("stratum".into()))?;
                let h = cal.index_of(label)?;
                let wt = match weight_mode(row)? {
                    Some(TestWeight::Known(v) | TestWeight::Conservative(v)) => Some(v),
                    _ => None,
                };
                emit(&row.id, wt, &stratified_interval(&cal, &row.x, h, wt)?)?;
            }
        }
        PredictMethod::ClusterSub1
        | PredictMethod::ClusterSubB
        | PredictMethod::ClusterDouble
        | PredictMethod::ClusterPool => {
            let cal = ClusteredCalibration::from_sample(&pop, &calibration, model)?;
            let mut rest = Vec::new();
            for row in &rows {
                match &row.cluster {
                    Some(c)
                        if a.observed_clusters && cal.groups().iter().any(|g| &g.label == c) =>
                    {
                        emit(
                            &row.id,
                            None,
                            &observed_cluster_interval(&cal, c, a.alpha, &row.x)?,
                        )?;
                    }
                    _ => rest.push(row),
                }
            }
            let rows = rest;
            match a.method {
                PredictMethod::ClusterSub1 => {
                    let e = cluster_subsample_once(&cal, a.alpha, &mut rng)?;
                    for row in &rows {
                        emit(&row.id, None, &e.region(&row.x)?)?;
                    }
                }
                PredictMethod::ClusterSubB => {
                    let e = cluster_repeated_subsample(&cal, a.alpha, a.subsamples, &mut rng)?;
                    for row in &rows {
                        emit(&row.id, None, &e.region(&row.x)?)?;
                    }
                }
                PredictMethod::ClusterPool => {
                    let e = cluster_pooled_cdf(&cal, a.alpha, padding)?;
                    for row in &rows {
                        emit(&row.id, None, &e.region(&row.x)?)?;
                    }
                }
                _ => {
                    let r = cluster_double_conformal(&cal, a.alpha)?;
                    for row in &rows {
                        emit(&row.id, None, &r)?;
                    }
                }
            }
        }
    }
    flush_csv(w)?;
    Ok(ExitCode::SUCCESS)
}

fn simulate(a: SimulateArgs) -> Result<ExitCode> {
    let mut cfg = ExperimentConfig::from_toml_file(&a.config)?;
    if let Some(r) = a.replicates {
        cfg.replicates = r;
    }
    let out = a.out.unwrap_or_else(|| {
        a.config
            .parent()
            .unwrap_or(Path::new("."))
            .join("results")
            .join(&cfg.name)
    });
    let report = run_experiment(&cfg)?;
    fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let echo = out.join("config.toml");
    fs::write(&echo, cfg.to_toml()?).map_err(|e| Error::Io {
        path: echo,
        source: e,
    })?;
    for f in [ReportFormat::Table, ReportFormat::Csv, ReportFormat::Json] {
        emit_report(&report, f, out.join(format!("report.{}", f.extension())))?;
    }
    if !a.quiet {
        print!("{}", render_report(&report, ReportFormat::Table)?);
    }
    Ok(if report.all_checks_pass() {
        ExitCode::SUCCESS
    } else {
        eprintln!("one or more checks fell outside their band");
        ExitCode::from(2)
    })
}
