//! Command-line front end: `synth`, `fit`, `sweep`, `assign`, `eval`.
//!
//! Exit codes: 0 success, 1 usage or data error, 2 a fit stopped without
//! converging (its outputs are still written). Errors go to stderr as one
//! `CODE: message` line; stdout lists the files written.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{
    load_csv, load_features_with_encoding, make_synthetic, write_csv, Encoding, Preprocessing,
    Role, Schema, SyntheticSpec,
};
use crate::error::{FmcError, Result};
use crate::eval::{accuracy_best_mapping, sweep, CostKind};
use crate::fairness::GroupIndex;
use crate::mixture::{ModelParams, Structure};
use crate::objective::PenaltyForm;
use crate::optim::{fit, post_assign, Algorithm, FitConfig, FitReport, Metrics, StopReason};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "fmc", version, about = "Fair model-based clustering")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic dataset from a JSON mixture spec.
    Synth(SynthArgs),
    /// Fit one model.
    Fit(FitArgs),
    /// Fit a grid of λ values and seeds.
    Sweep(SweepArgs),
    /// Assign new rows with a fitted model.
    Assign(AssignArgs),
    /// Evaluate a fitted model on a dataset.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON mixture spec.
    #[arg(long)]
    pub spec: PathBuf,
    /// Output CSV; `<stem>.labels.csv` and `<stem>.schema.json` go beside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Schema JSON file or inline `col=role,...`.
    #[arg(long)]
    pub schema: Option<String>,
    /// gd, em or em-minibatch.
    #[arg(long)]
    pub algo: Option<Algorithm>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long = "batch-frac")]
    pub batch_frac: Option<f64>,
    #[arg(long = "subsample-frac")]
    pub subsample_frac: Option<f64>,
    /// iso, diag, multinoulli or mixed.
    #[arg(long)]
    pub structure: Option<Structure>,
    /// abs or squared.
    #[arg(long = "penalty-form")]
    pub penalty_form: Option<PenaltyForm>,
    /// dist or sqdist.
    #[arg(long)]
    pub cost: Option<CostKind>,
    #[arg(long)]
    pub standardize: bool,
    #[arg(long)]
    pub l2norm: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated λ grid.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Also write per-λ mean and std series.
    #[arg(long = "plot-data")]
    pub plot_data: bool,
}

#[derive(Debug, Args)]
pub struct AssignArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV with the training columns, including the sensitive column.
    #[arg(long)]
    pub data: PathBuf,
    /// Optional `row,label` file of reference labels (binary) for accuracy.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub cost: Option<CostKind>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Schema given inline, as a role map, or as a path to a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemaSource {
    Roles(BTreeMap<String, Role>),
    Text(String),
}

impl SchemaSource {
    pub fn resolve(&self) -> Result<Schema> {
        match self {
            SchemaSource::Roles(r) => Ok(Schema { roles: r.clone() }),
            SchemaSource::Text(s) => {
                let p = Path::new(s);
                if p.is_file() {
                    let text = std::fs::read_to_string(p).map_err(|e| FmcError::io(p, e))?;
                    Ok(serde_json::from_str(&text)?)
                } else {
                    Schema::parse_inline(s)
                }
            }
        }
    }
}

/// JSON run configuration accepted by `fit` and `sweep`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub data: Option<PathBuf>,
    pub schema: Option<SchemaSource>,
    pub algorithm: Option<Algorithm>,
    /// Any subset of the fit configuration fields.
    #[serde(default)]
    pub fit: serde_json::Map<String, Value>,
    #[serde(default)]
    pub standardize: bool,
    #[serde(default)]
    pub l2_normalize: bool,
    pub out: Option<PathBuf>,
    pub lambdas: Option<Vec<f64>>,
    pub seeds: Option<Vec<u64>>,
    pub jobs: Option<usize>,
}

impl RunConfigFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FmcError::io(path, e))?;
        let cfg: RunConfigFile = serde_json::from_str(&text)?;
        Ok(cfg)
    }
}

/// Fully resolved inputs of a `fit` or `sweep` run, echoed into reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRun {
    pub data: PathBuf,
    pub schema: Schema,
    pub algorithm: Algorithm,
    pub config: FitConfig,
    pub standardize: bool,
    pub l2_normalize: bool,
    pub out: PathBuf,
}

pub fn resolve_run(args: &RunArgs) -> Result<(ResolvedRun, RunConfigFile)> {
    let file = match &args.config {
        Some(p) => RunConfigFile::read(p)?,
        None => RunConfigFile::default(),
    };
    let algorithm = args.algo.or(file.algorithm).unwrap_or(Algorithm::Em);
    let k = args
        .k
        .or_else(|| file.fit.get("k").and_then(Value::as_u64).map(|v| v as usize))
        .unwrap_or(2);
    let defaults = match algorithm {
        Algorithm::Gd => FitConfig::gd(k),
        _ => FitConfig::em(k),
    };
    let mut merged = serde_json::to_value(&defaults)?;
    for (key, v) in &file.fit {
        merged[key.as_str()] = v.clone();
    }
    let mut config: FitConfig = serde_json::from_value(merged)?;
    config.k = k;
    macro_rules! set {
        ($flag:expr, $field:ident) => {
            if let Some(v) = $flag {
                config.$field = v;
            }
        };
    }
    set!(args.lambda, lambda);
    set!(args.gamma, learning_rate);
    set!(args.t, max_iter);
    set!(args.r, inner_steps);
    set!(args.batch_frac, batch_fraction);
    set!(args.subsample_frac, subsample_fraction);
    set!(args.structure, structure);
    set!(args.penalty_form, penalty_form);
    set!(args.cost, cost);
    set!(args.seed, seed);

    let data = args
        .data
        .clone()
        .or_else(|| file.data.clone())
        .ok_or_else(|| FmcError::Config("no --data given".into()))?;
    if !data.is_file() {
        return Err(FmcError::io(
            &data,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let schema = match (&args.schema, &file.schema) {
        (Some(s), _) => SchemaSource::Text(s.clone()).resolve()?,
        (None, Some(s)) => s.resolve()?,
        (None, None) => return Err(FmcError::Schema("no --schema given".into())),
    };
    let run = ResolvedRun {
        data,
        schema,
        algorithm,
        config,
        standardize: args.standardize || file.standardize,
        l2_normalize: args.l2norm || file.l2_normalize,
        out: args
            .out
            .clone()
            .or_else(|| file.out.clone())
            .unwrap_or_else(|| PathBuf::from("fmc-out")),
    };
    Ok((run, file))
}

/// Everything needed to assign new rows: parameters plus the preprocessing
/// and column encoding of the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub params: ModelParams,
    pub preprocessing: Preprocessing,
    pub encoding: Encoding,
    pub algorithm: Algorithm,
    pub config: FitConfig,
}

impl FittedModel {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FmcError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `report.json` of a `fit` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub run: ResolvedRun,
    pub report: FitReport,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| FmcError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| FmcError::io(path, e))
}

/// Result of a command: files written and the exit code to use.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub written: Vec<PathBuf>,
    pub code: i32,
}

impl Outcome {
    fn ok(written: Vec<PathBuf>) -> Self {
        Outcome {
            written,
            code: EXIT_OK,
        }
    }
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.{suffix}"))
}

pub fn cmd_synth(args: &SynthArgs) -> Result<Outcome> {
    let text = std::fs::read_to_string(&args.spec).map_err(|e| FmcError::io(&args.spec, e))?;
    let mut spec: SyntheticSpec = serde_json::from_str(&text)?;
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    let ds = make_synthetic(&spec)?;
    write_csv(&ds, &args.out)?;

    let labels_path = sidecar(&args.out, "labels.csv");
    let mut w = csv::Writer::from_path(&labels_path)?;
    w.write_record(["row", "label"])?;
    for (i, l) in ds.truth.as_deref().unwrap_or_default().iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush().map_err(|e| FmcError::io(&labels_path, e))?;

    let enc = &ds.encoding;
    let schema = Schema::new(
        enc.cont_names
            .iter()
            .map(|c| (c.clone(), Role::Continuous))
            .chain(enc.cate_names.iter().map(|c| (c.clone(), Role::Categorical)))
            .chain(std::iter::once((enc.sensitive_name.clone(), Role::Sensitive))),
    );
    let schema_path = sidecar(&args.out, "schema.json");
    write_json(&schema_path, &schema)?;
    Ok(Outcome::ok(vec![args.out.clone(), labels_path, schema_path]))
}

fn load_for_run(run: &ResolvedRun) -> Result<(crate::data::Dataset, Preprocessing)> {
    let raw = load_csv(&run.data, &run.schema)?;
    Preprocessing::fit(&raw, run.standardize, run.l2_normalize)
}

pub fn cmd_fit(args: &FitArgs) -> Result<Outcome> {
    let (run, _) = resolve_run(&args.run)?;
    let (ds, pre) = load_for_run(&run)?;
    let groups = GroupIndex::from_dataset(&ds)?;
    let mut report = fit(run.algorithm, &ds, &groups, &run.config)?;
    report.preprocessing = pre.clone();
    create_dir(&run.out)?;
    let model = FittedModel {
        params: report.params.clone(),
        preprocessing: pre,
        encoding: ds.encoding.clone(),
        algorithm: run.algorithm,
        config: run.config.clone(),
    };
    let code = match report.stop_reason {
        StopReason::MaxIterations | StopReason::Diverged => EXIT_NOT_CONVERGED,
        StopReason::Converged | StopReason::Stalled => EXIT_OK,
    };
    let report_path = run.out.join("report.json");
    let model_path = run.out.join("model.json");
    write_json(&report_path, &ReportFile { run, report })?;
    write_json(&model_path, &model)?;
    Ok(Outcome {
        written: vec![report_path, model_path],
        code,
    })
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<Outcome> {
    let (run, file) = resolve_run(&args.run)?;
    let lambdas = args
        .lambdas
        .clone()
        .or(file.lambdas)
        .ok_or_else(|| FmcError::Config("no --lambdas given".into()))?;
    let seeds = args
        .seeds
        .clone()
        .or(file.seeds)
        .unwrap_or_else(|| vec![run.config.seed]);
    let jobs = args
        .jobs
        .or(file.jobs)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let (ds, _) = load_for_run(&run)?;
    let groups = GroupIndex::from_dataset(&ds)?;
    let result = sweep(run.algorithm, &ds, &groups, &run.config, &lambdas, &seeds, jobs)?;
    create_dir(&run.out)?;
    let csv_path = run.out.join("sweep.csv");
    let json_path = run.out.join("sweep.json");
    result.write_csv(&csv_path)?;
    result.write_json(&json_path)?;
    let mut written = vec![csv_path, json_path];
    if args.plot_data {
        let plot = run.out.join("plot.csv");
        result.write_plot_data(&plot)?;
        written.push(plot);
    }
    Ok(Outcome::ok(written))
}

pub fn cmd_assign(args: &AssignArgs) -> Result<Outcome> {
    let model = FittedModel::read(&args.model)?;
    let (raw, _) = load_features_with_encoding(&args.data, &model.encoding)?;
    let features = model.preprocessing.apply(&raw)?;
    let (psi, labels) = post_assign(&model.params, &features)?;
    let mut w = csv::Writer::from_path(&args.out)?;
    let mut header = vec!["row".to_string(), "label".to_string()];
    header.extend((0..model.params.k()).map(|k| format!("p{k}")));
    w.write_record(&header)?;
    for (i, l) in labels.iter().enumerate() {
        let mut rec = vec![i.to_string(), l.to_string()];
        rec.extend(psi.psi.row(i).iter().map(|p| p.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| FmcError::io(&args.out, e))?;
    Ok(Outcome::ok(vec![args.out.clone()]))
}

/// `row,label` file written by `synth` or `assign`.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| FmcError::Schema(format!("{} has no `label` column", path.display())))?;
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec?;
            rec[col].parse().map_err(|_| FmcError::Parse {
                row: i + 1,
                column: "label".into(),
                value: rec[col].to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFile {
    pub metrics: Metrics,
    pub accuracy: Option<f64>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Outcome> {
    let model = FittedModel::read(&args.model)?;
    let (raw, sensitive) = load_features_with_encoding(&args.data, &model.encoding)?;
    let sensitive = sensitive.ok_or_else(|| {
        FmcError::Schema(format!(
            "sensitive column `{}` missing from data",
            model.encoding.sensitive_name
        ))
    })?;
    let features = model.preprocessing.apply(&raw)?;
    model.params.check_features(&features)?;
    let ds = crate::data::Dataset::new(features, sensitive, model.encoding.sensitive_levels.len())?;
    let groups = GroupIndex::from_dataset(&ds)?;
    let cost_kind = args.cost.unwrap_or(model.config.cost);
    let metrics = Metrics::compute(&model.params, &ds, &groups, cost_kind)?;
    let accuracy = match &args.truth {
        Some(p) => {
            let truth = read_labels(p)?;
            let (_, labels) = post_assign(&model.params, &ds.features)?;
            Some(accuracy_best_mapping(&labels, &truth)?)
        }
        None => None,
    };
    write_json(&args.out, &EvalFile { metrics, accuracy })?;
    Ok(Outcome::ok(vec![args.out.clone()]))
}

pub fn execute(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Assign(a) => cmd_assign(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

/// Parses `args`, runs the command and reports on stdout/stderr. Returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("E_USAGE: {}", first.trim_start_matches("error: "));
            return EXIT_ERROR;
        }
    };
    match execute(&cli) {
        Ok(out) => {
            for p in &out.written {
                println!("{}", p.display());
            }
            if out.code == EXIT_NOT_CONVERGED {
                eprintln!("E_NOT_CONVERGED: fit stopped before convergence");
            }
            out.code
        }
        Err(e) => {
            eprintln!("{}: {}", e.code(), e.to_string().replace('\n', " "));
            EXIT_ERROR
        }
    }
}

/// Initializes logging from `FMC_LOG` (default `warn`).
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("FMC_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_rejects_unknown_keys() {
        let err = serde_json::from_str::<RunConfigFile>(r#"{"data": "x.csv", "lamda": 1}"#);
        assert!(err.is_err());
    }

    #[test]
    fn schema_source_forms() {
        let inline: SchemaSource = serde_json::from_str(r#""a=continuous,s=sensitive""#).unwrap();
        assert_eq!(inline.resolve().unwrap().sensitive_column().unwrap(), "s");
        let map: SchemaSource =
            serde_json::from_str(r#"{"a": "continuous", "s": "sensitive"}"#).unwrap();
        assert_eq!(map.resolve().unwrap().roles.len(), 2);
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "fmc", "sweep", "--data", "d.csv", "--lambdas", "0,0.5,10", "--seeds", "1,2",
            "--algo", "em-minibatch", "--structure", "diag", "--penalty-form", "squared",
        ])
        .unwrap();
        let Command::Sweep(a) = cli.command else { panic!() };
        assert_eq!(a.lambdas.unwrap(), vec![0.0, 0.5, 10.0]);
        assert_eq!(a.run.algo, Some(Algorithm::EmMinibatch));
        assert_eq!(a.run.structure, Some(Structure::GaussianDiag));
    }
}
