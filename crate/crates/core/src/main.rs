use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use gustpost::domain::{load_archive, ArchiveManifest, Dataset, ForecastCase, ProbabilityForecast, ThresholdSet};
use gustpost::experiments::{
    joint_experiment, methods_experiment, persistence_experiment, threshold_csv, threshold_table, threshold_trend,
    training_period_experiment, ExperimentSettings, MethodsResult, RuntimeEntry,
};
use gustpost::pipeline::{
    align_forecasts, forecast_csv, raw_ensemble_probs, read_forecasts, reports_csv, train, verify_by_lead,
    LeadThresholdReport, Method, MethodOptions, TrainedModel,
};
use gustpost::synthgen::{generate_archive, load_truth, ScenarioConfig, ARCHIVE_FILE, MANIFEST_FILE, TRUTH_FILE};
use gustpost::verification::{
    reliability_svg, score_card, sharpness_histogram, write_score_card, BinnedReliability, MethodLeadReport,
    ProbabilityBins,
};
use gustpost::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "gustpost",
    version,
    about = "Postprocess ensemble wind-gust forecasts into exceedance probabilities"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
struct GlobalArgs {
    /// Seed for every random component.
    #[arg(long, global = true, env = "GUSTPOST_SEED", default_value_t = 1)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "GUSTPOST_WORKERS")]
    workers: Option<usize>,
    /// Single worker thread and sequential reductions.
    #[arg(long, global = true, env = "GUSTPOST_DETERMINISTIC")]
    deterministic: bool,
    /// Parent directory of the run directories.
    #[arg(long, global = true, env = "GUSTPOST_OUT", default_value = "runs")]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
enum Command {
    /// Generate a synthetic archive with its truth table.
    Generate(GenerateArgs),
    /// Train a postprocessing model.
    Train(TrainArgs),
    /// Write exceedance probabilities for archive cases.
    Predict(PredictArgs),
    /// Brier-score verification of a forecast table.
    Verify(VerifyArgs),
    /// Score card of several forecast tables against a reference.
    Scorecard(ScorecardArgs),
    /// Run an experiment preset end to end.
    Experiment(ExperimentArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Train(_) => "train",
            Command::Predict(_) => "predict",
            Command::Verify(_) => "verify",
            Command::Scorecard(_) => "scorecard",
            Command::Experiment(_) => "experiment",
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum MethodArg {
    Mosref,
    Emos,
    #[value(name = "emos_gb")]
    EmosGb,
    Drn,
    Bqn,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Mosref => Method::Mosref,
            MethodArg::Emos => Method::Emos,
            MethodArg::EmosGb => Method::EmosGb,
            MethodArg::Drn => Method::Drn,
            MethodArg::Bqn => Method::Bqn,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum ModeFlag {
    Persistence,
    #[value(name = "era_flags")]
    EraFlags,
    Joint,
    #[value(name = "post_change")]
    PostChange,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum ScenarioArg {
    #[value(name = "well_specified")]
    WellSpecified,
    Operational,
}

impl ScenarioArg {
    fn config(self, seed: u64) -> ScenarioConfig {
        let mut c = match self {
            ScenarioArg::WellSpecified => ScenarioConfig::well_specified(),
            ScenarioArg::Operational => ScenarioConfig::operational(),
        };
        c.seed = seed;
        c
    }
}

#[derive(Args, Debug, Serialize)]
struct GenerateArgs {
    #[arg(long, value_enum, env = "GUSTPOST_SCENARIO", default_value = "well_specified")]
    scenario: ScenarioArg,
    #[arg(long)]
    stations: Option<usize>,
    #[arg(long)]
    days: Option<u32>,
    /// Lead times in hours, comma-separated.
    #[arg(long, value_delimiter = ',')]
    leads: Vec<u32>,
    /// Run hours, comma-separated.
    #[arg(long, value_delimiter = ',')]
    runs: Vec<u32>,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Archive directory (archive.csv + manifest.toml) or archive CSV.
    #[arg(long, env = "GUSTPOST_ARCHIVE")]
    archive: PathBuf,
    #[arg(long, value_enum, env = "GUSTPOST_METHOD")]
    method: MethodArg,
    /// Comma-separated: persistence, era_flags, joint, post_change.
    #[arg(long, value_enum, value_delimiter = ',', env = "GUSTPOST_MODE")]
    mode: Vec<ModeFlag>,
    #[arg(long, value_delimiter = ',', env = "GUSTPOST_THRESHOLDS")]
    thresholds: Vec<f64>,
    /// Train on days before this one (counted from the first archive day).
    #[arg(long)]
    until_day: Option<i64>,
    /// Maximum epochs of the neural methods.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct PredictArgs {
    #[arg(long, env = "GUSTPOST_ARCHIVE")]
    archive: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_delimiter = ',', env = "GUSTPOST_THRESHOLDS")]
    thresholds: Vec<f64>,
    #[arg(long)]
    from_day: Option<i64>,
}

#[derive(Args, Debug, Serialize)]
struct VerifyArgs {
    #[arg(long, env = "GUSTPOST_ARCHIVE")]
    archive: PathBuf,
    /// Forecast table with station_id, init_time, lead_h, run and p_<t> columns.
    #[arg(long)]
    forecasts: PathBuf,
    #[arg(long, env = "GUSTPOST_BINS", default_value_t = 10)]
    bins: usize,
}

#[derive(Args, Debug, Serialize)]
struct ScorecardArgs {
    #[arg(long, env = "GUSTPOST_ARCHIVE")]
    archive: PathBuf,
    /// NAME=PATH, repeatable.
    #[arg(long = "forecasts", required = true)]
    forecasts: Vec<String>,
    /// Reference: "raw" or one of the forecast names.
    #[arg(long, default_value = "raw")]
    reference: String,
    #[arg(long, default_value_t = 25.0)]
    threshold: f64,
    #[arg(long, env = "GUSTPOST_BINS", default_value_t = 10)]
    bins: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum ExperimentName {
    Persistence,
    #[value(name = "training-period")]
    TrainingPeriod,
    Joint,
    Methods,
    Thresholds,
}

#[derive(Args, Debug, Serialize)]
struct ExperimentArgs {
    #[arg(value_enum)]
    name: ExperimentName,
    /// Archive directory; a scenario preset is generated when absent.
    #[arg(long, env = "GUSTPOST_ARCHIVE")]
    archive: Option<PathBuf>,
    #[arg(long, value_enum)]
    scenario: Option<ScenarioArg>,
    /// Method of the training-period and joint presets.
    #[arg(long, value_enum, env = "GUSTPOST_METHOD")]
    method: Option<MethodArg>,
    /// Methods of the methods and thresholds presets.
    #[arg(long, value_enum, value_delimiter = ',')]
    methods: Vec<MethodArg>,
    #[arg(long, default_value_t = 600)]
    split_day: i64,
    #[arg(long, value_delimiter = ',')]
    leads: Vec<u32>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 500)]
    resamples: usize,
    #[arg(long, value_delimiter = ',', env = "GUSTPOST_THRESHOLDS")]
    thresholds: Vec<f64>,
    #[arg(long, env = "GUSTPOST_BINS", default_value_t = 10)]
    bins: usize,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("GUSTPOST_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
        std::process::exit(1);
    }
}

struct RunDir {
    path: PathBuf,
    started: Instant,
    runtime: Vec<RuntimeEntry>,
    extra: BTreeMap<String, serde_json::Value>,
}

impl RunDir {
    fn create(global: &GlobalArgs, command: &Command) -> Result<Self> {
        let config = json!({
            "command": command.name(),
            "global": global,
            "args": command,
            "version": env!("CARGO_PKG_VERSION"),
        });
        let text = serde_json::to_string_pretty(&config)?;
        let hash = hex8(text.as_bytes());
        let path = global.out.join(format!("{}-{}-{}", command.name(), global.seed, hash));
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        let argv: Vec<String> = std::env::args().collect();
        let echoed = json!({ "config": config, "argv": argv });
        write(&path.join("config.json"), &serde_json::to_string_pretty(&echoed)?)?;
        Ok(RunDir {
            path,
            started: Instant::now(),
            runtime: Vec::new(),
            extra: BTreeMap::new(),
        })
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn finish(self, workers: usize) -> Result<()> {
        let runtime = json!({
            "wall_seconds": self.started.elapsed().as_secs_f64(),
            "workers": workers,
            "jobs": self.runtime,
            "details": self.extra,
        });
        write(&self.file("runtime.json"), &serde_json::to_string_pretty(&runtime)?)?;
        println!("{}", self.path.display());
        Ok(())
    }
}

fn hex8(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .take(4)
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Archive {
    data: Dataset,
    dir: PathBuf,
    rejected: usize,
}

fn open_archive(path: &Path) -> Result<Archive> {
    let (csv, dir) = if path.is_dir() {
        (path.join(ARCHIVE_FILE), path.to_path_buf())
    } else {
        (
            path.to_path_buf(),
            path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        )
    };
    if !csv.exists() {
        return Err(Error::InvalidArgument(format!(
            "archive {} does not exist",
            csv.display()
        )));
    }
    let manifest = ArchiveManifest::load(dir.join(MANIFEST_FILE))?;
    let report = load_archive(&csv, &manifest)?;
    for r in report.rejected.iter().take(10) {
        log::warn!("archive row {} rejected: {}", r.row, r.reason);
    }
    Ok(Archive {
        data: report.dataset,
        dir,
        rejected: report.rejected.len(),
    })
}

fn day0(data: &Dataset) -> i64 {
    data.cases.iter().map(|c| c.init_day()).min().unwrap_or(0)
}

fn threshold_set(values: &[f64], fallback: &ThresholdSet) -> Result<ThresholdSet> {
    if values.is_empty() {
        Ok(fallback.clone())
    } else {
        ThresholdSet::new(values.to_vec())
    }
}

fn configure_workers(global: &GlobalArgs) -> Result<usize> {
    let n = if global.deterministic {
        1
    } else {
        global.workers.unwrap_or(0)
    };
    if global.workers == Some(0) {
        return Err(Error::InvalidArgument("--workers must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    Ok(rayon::current_num_threads())
}

fn run(cli: Cli) -> Result<()> {
    let workers = configure_workers(&cli.global)?;
    let global = &cli.global;
    match &cli.command {
        Command::Generate(a) => {
            let mut cfg = a.scenario.config(global.seed);
            if let Some(s) = a.stations {
                cfg.stations = s;
            }
            if let Some(d) = a.days {
                cfg.days = d;
            }
            if !a.leads.is_empty() {
                cfg.lead_times = a.leads.clone();
            }
            if !a.runs.is_empty() {
                cfg.runs = a.runs.clone();
            }
            cfg.validate()?;
            let mut run = RunDir::create(global, &cli.command)?;
            let start = Instant::now();
            let archive = generate_archive(&cfg)?;
            archive.write(&run.path)?;
            run.runtime.push(RuntimeEntry {
                label: "generate".into(),
                train_samples: archive.dataset.cases.len(),
                seconds: start.elapsed().as_secs_f64(),
            });
            run.finish(workers)
        }
        Command::Train(a) => {
            let archive = open_archive(&a.archive)?;
            let method = Method::from(a.method);
            let mut options = MethodOptions {
                persistence: a.mode.contains(&ModeFlag::Persistence),
                era_flags: a.mode.contains(&ModeFlag::EraFlags),
                joint: a.mode.contains(&ModeFlag::Joint),
                post_change_only: a.mode.contains(&ModeFlag::PostChange),
                seed: global.seed,
                thresholds: threshold_set(&a.thresholds, &archive.data.manifest.thresholds)?,
                ..Default::default()
            };
            if let Some(e) = a.epochs {
                options.network.max_epochs = e;
                options.network.patience = options.network.patience.min(e.saturating_sub(1));
            }
            options.validate(method)?;
            let d0 = day0(&archive.data);
            let cases: Vec<&ForecastCase> = archive
                .data
                .cases
                .iter()
                .filter(|c| a.until_day.is_none_or(|u| c.init_day() - d0 < u))
                .collect();
            let mut run = RunDir::create(global, &cli.command)?;
            let start = Instant::now();
            let model = train(method, &options, &cases, &archive.data.manifest)?;
            run.runtime.push(RuntimeEntry {
                label: method.as_str().into(),
                train_samples: model.training_rows().unwrap_or(cases.len()),
                seconds: start.elapsed().as_secs_f64(),
            });
            model.save(run.file("model.json"))?;
            write(&run.file("options.json"), &serde_json::to_string_pretty(&options)?)?;
            if let TrainedModel::Drn(m) | TrainedModel::Bqn(m) = &model {
                m.write_logs(&run.path)?;
            }
            run.extra.insert("rejected_rows".into(), json!(archive.rejected));
            run.finish(workers)
        }
        Command::Predict(a) => {
            let archive = open_archive(&a.archive)?;
            let model = TrainedModel::load(&a.model)?;
            let fallback = match &model {
                TrainedModel::Mosref(m) => m.config.thresholds.clone(),
                _ => archive.data.manifest.thresholds.clone(),
            };
            let thresholds = threshold_set(&a.thresholds, &fallback)?;
            let d0 = day0(&archive.data);
            let mut run = RunDir::create(global, &cli.command)?;
            let start = Instant::now();
            let candidates: Vec<&ForecastCase> = archive
                .data
                .cases
                .iter()
                .filter(|c| a.from_day.is_none_or(|f| c.init_day() - d0 >= f))
                .collect();
            // Cases lacking inputs the model needs are skipped and counted.
            let results: Vec<Result<ProbabilityForecast>> = {
                use rayon::prelude::*;
                candidates.par_iter().map(|c| model.predict(c, &thresholds)).collect()
            };
            let mut cases = Vec::new();
            let mut forecasts = Vec::new();
            let mut skipped = 0usize;
            for (c, r) in candidates.iter().zip(results) {
                match r {
                    Ok(f) => {
                        cases.push(*c);
                        forecasts.push(f);
                    }
                    Err(Error::MissingPersistence(_)) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            write(
                &run.file("forecasts.csv"),
                &forecast_csv(&cases, &forecasts, &thresholds),
            )?;
            run.runtime.push(RuntimeEntry {
                label: "predict".into(),
                train_samples: cases.len(),
                seconds: start.elapsed().as_secs_f64(),
            });
            run.extra.insert("skipped_missing_persistence".into(), json!(skipped));
            run.finish(workers)
        }
        Command::Verify(a) => {
            let archive = open_archive(&a.archive)?;
            let (thresholds, rows) = read_forecasts(&a.forecasts)?;
            let bins = ProbabilityBins::equal(a.bins)?;
            let (cases, forecasts) = cases_for_rows(&archive.data, &rows)?;
            let run = RunDir::create(global, &cli.command)?;
            let raw: Vec<ProbabilityForecast> = cases.iter().map(|c| raw_ensemble_probs(c, &thresholds)).collect();
            let reports = verify_by_lead("forecast", &cases, &forecasts, Some(&raw), &thresholds, &bins)?;
            let raw_reports = verify_by_lead("raw", &cases, &raw, Some(&raw), &thresholds, &bins)?;
            write(&run.file("reports.csv"), &reports_csv(&reports))?;
            write(&run.file("reports.json"), &serde_json::to_string_pretty(&reports)?)?;
            let pooled: Vec<LeadThresholdReport> = reports.iter().chain(&raw_reports).cloned().collect();
            let table = threshold_table(&pooled);
            write(&run.file("summary.csv"), &threshold_csv(&table))?;
            write_diagrams(&run.path, "forecast", &cases, &forecasts, &thresholds, 0, &bins)?;
            run.finish(workers)
        }
        Command::Scorecard(a) => {
            let archive = open_archive(&a.archive)?;
            let bins = ProbabilityBins::equal(a.bins)?;
            let mut inputs = Vec::new();
            for spec in &a.forecasts {
                let (name, path) = spec
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidArgument(format!("--forecasts expects NAME=PATH, got `{spec}`")))?;
                inputs.push((name.to_string(), read_forecasts(path)?));
            }
            if a.reference != "raw" && !inputs.iter().any(|(n, _)| *n == a.reference) {
                return Err(Error::InvalidArgument(format!(
                    "reference `{}` is not among the forecasts",
                    a.reference
                )));
            }
            let run = RunDir::create(global, &cli.command)?;
            let mut reports = Vec::new();
            let mut raw_done = false;
            for (name, (thresholds, rows)) in &inputs {
                let k = thresholds.index_of(a.threshold).ok_or_else(|| {
                    Error::InvalidArgument(format!("{name} has no column for threshold {}", a.threshold))
                })?;
                let single = ThresholdSet::new(vec![a.threshold])?;
                let (cases, forecasts) = cases_for_rows(&archive.data, rows)?;
                let f: Vec<ProbabilityForecast> = forecasts
                    .iter()
                    .map(|f| ProbabilityForecast::new(vec![f.probabilities[k]]))
                    .collect();
                reports.extend(verify_by_lead(name, &cases, &f, None, &single, &bins)?);
                if !raw_done {
                    let raw: Vec<ProbabilityForecast> = cases.iter().map(|c| raw_ensemble_probs(c, &single)).collect();
                    reports.extend(verify_by_lead("raw", &cases, &raw, None, &single, &bins)?);
                    raw_done = true;
                }
            }
            let input: Vec<MethodLeadReport> = reports
                .into_iter()
                .map(|r| MethodLeadReport {
                    method: r.method,
                    lead: r.lead,
                    report: r.report,
                })
                .collect();
            let cells = score_card(&input, &a.reference)?;
            write_score_card(&cells, &run.path, &format!("scorecard_t{}", a.threshold))?;
            run.finish(workers)
        }
        Command::Experiment(a) => run_experiment(global, &cli.command, a, workers),
    }
}

/// Archive cases matching the forecast rows, in row order. Rows without an
/// observation are dropped.
fn cases_for_rows<'a>(
    data: &'a Dataset,
    rows: &[gustpost::pipeline::ForecastRow],
) -> Result<(Vec<&'a ForecastCase>, Vec<ProbabilityForecast>)> {
    let index: HashMap<(&str, i64, u32, u32), &ForecastCase> = data
        .cases
        .iter()
        .map(|c| ((c.station_id.as_str(), c.init_time, c.lead, c.run), c))
        .collect();
    let mut cases = Vec::new();
    for r in rows {
        let c = index
            .get(&(r.station_id.as_str(), r.init_time, r.lead, r.run))
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "forecast row {} {} lead {} has no archive case",
                    r.station_id, r.init_time, r.lead
                ))
            })?;
        if c.observation.is_some() {
            cases.push(*c);
        }
    }
    let forecasts = align_forecasts(&cases, rows)?;
    Ok((cases, forecasts))
}

fn write_diagrams(
    dir: &Path,
    name: &str,
    cases: &[&ForecastCase],
    forecasts: &[ProbabilityForecast],
    thresholds: &ThresholdSet,
    k: usize,
    bins: &ProbabilityBins,
) -> Result<()> {
    let t = thresholds.as_slice()[k];
    let o: Vec<f64> = cases
        .iter()
        .map(|c| if c.observation.unwrap_or(0.0) > t { 1.0 } else { 0.0 })
        .collect();
    let f: Vec<f64> = forecasts.iter().map(|f| f.probabilities[k]).collect();
    if f.is_empty() {
        return Ok(());
    }
    let rel = BinnedReliability::new(&f, &o, bins)?;
    let base_rate = o.iter().sum::<f64>() / o.len() as f64;
    write(&dir.join(format!("reliability_{name}_t{t}.csv")), &rel.to_csv())?;
    write(
        &dir.join(format!("reliability_{name}_t{t}.svg")),
        &reliability_svg(&rel, base_rate),
    )?;
    let sh = sharpness_histogram(&f, bins)?;
    write(&dir.join(format!("sharpness_{name}_t{t}.csv")), &sh.to_csv())?;
    write(&dir.join(format!("sharpness_{name}_t{t}.svg")), &sh.to_svg(true))?;
    Ok(())
}

fn run_experiment(global: &GlobalArgs, command: &Command, a: &ExperimentArgs, workers: usize) -> Result<()> {
    let default_scenario = match a.name {
        ExperimentName::Methods | ExperimentName::Thresholds => ScenarioArg::WellSpecified,
        _ => ScenarioArg::Operational,
    };
    if a.archive.is_some() && a.scenario.is_some() {
        return Err(Error::InvalidArgument("use either --archive or --scenario".into()));
    }
    let method = a.method.map(Method::from).unwrap_or(Method::Drn);
    match a.name {
        ExperimentName::Joint if !method.is_neural() => {
            return Err(Error::InvalidArgument(format!(
                "joint training needs drn or bqn, not {method}"
            )));
        }
        ExperimentName::TrainingPeriod if method == Method::Emos => {
            return Err(Error::InvalidArgument(
                "emos takes no era flags; use emos_gb, drn or bqn".into(),
            ));
        }
        _ => {}
    }
    let (data, truth, source) = match &a.archive {
        Some(p) => {
            let archive = open_archive(p)?;
            let truth_path = archive.dir.join(TRUTH_FILE);
            let truth = if truth_path.exists() {
                Some(load_truth(&truth_path)?)
            } else {
                None
            };
            (archive.data, truth, json!({ "archive": p }))
        }
        None => {
            let cfg = a.scenario.unwrap_or(default_scenario).config(global.seed);
            let g = generate_archive(&cfg)?;
            (g.dataset, Some(g.truth), json!({ "scenario": cfg }))
        }
    };
    let mut settings = ExperimentSettings {
        seed: global.seed,
        split_day: a.split_day,
        leads: if a.leads.is_empty() {
            None
        } else {
            Some(a.leads.clone())
        },
        bins: a.bins,
        resamples: a.resamples,
        thresholds: threshold_set(&a.thresholds, &data.manifest.thresholds)?,
        ..Default::default()
    };
    settings.primary_threshold = settings.thresholds.as_slice()[0];
    if let Some(e) = a.epochs {
        settings.network.max_epochs = e;
        settings.network.patience = settings.network.patience.min(e.saturating_sub(1));
    }
    let methods: Vec<Method> = if a.methods.is_empty() {
        Method::TRAINABLE.to_vec()
    } else {
        a.methods.iter().map(|&m| Method::from(m)).collect()
    };

    let mut run = RunDir::create(global, command)?;
    write(&run.file("source.json"), &serde_json::to_string_pretty(&source)?)?;
    write(&run.file("settings.json"), &serde_json::to_string_pretty(&settings)?)?;
    match a.name {
        ExperimentName::Persistence => {
            let r = persistence_experiment(&data, &settings)?;
            write(&run.file("persistence.csv"), &r.to_csv())?;
            write(&run.file("reports.csv"), &reports_csv(&r.reports))?;
            write(&run.file("result.json"), &serde_json::to_string_pretty(&r)?)?;
            run.runtime = r.runtime;
        }
        ExperimentName::TrainingPeriod => {
            let r = training_period_experiment(&data, &settings, method)?;
            write(&run.file("training_period.csv"), &r.to_csv())?;
            write(&run.file("reports.csv"), &reports_csv(&r.reports))?;
            write(&run.file("result.json"), &serde_json::to_string_pretty(&r)?)?;
            write(
                &run.file("summary.json"),
                &serde_json::to_string_pretty(
                    &json!({ "worst_difference_full_flags_minus_post_change": r.worst_difference() }),
                )?,
            )?;
            run.runtime = r.runtime;
        }
        ExperimentName::Joint => {
            let r = joint_experiment(&data, &settings, method)?;
            write(&run.file("joint.csv"), &r.to_csv())?;
            write(&run.file("reports.csv"), &reports_csv(&r.reports))?;
            write(&run.file("result.json"), &serde_json::to_string_pretty(&r)?)?;
            write(
                &run.file("summary.json"),
                &serde_json::to_string_pretty(&json!({
                    "joint_rows": r.joint_rows,
                    "row_factor": r.row_factor(),
                    "max_abs_bs_difference": r.max_abs_difference(),
                }))?,
            )?;
            run.runtime = r.runtime;
        }
        ExperimentName::Methods | ExperimentName::Thresholds => {
            let r = methods_experiment(&data, truth.as_deref(), &settings, &methods)?;
            write_methods(&run.path, &r, &settings)?;
            if a.name == ExperimentName::Thresholds {
                let rows = threshold_table(&r.reports);
                let names: Vec<&str> = methods.iter().map(|m| m.as_str()).collect();
                let trend = threshold_trend(&rows, &names, 200);
                write(&run.file("thresholds.csv"), &threshold_csv(&rows))?;
                write(&run.file("trend.json"), &serde_json::to_string_pretty(&trend)?)?;
            }
            run.runtime = r.runtime;
        }
    }
    run.finish(workers)
}

fn write_methods(dir: &Path, r: &MethodsResult, settings: &ExperimentSettings) -> Result<()> {
    write(&dir.join("methods.csv"), &r.to_csv())?;
    write(&dir.join("reports.csv"), &reports_csv(&r.reports))?;
    write(&dir.join("result.json"), &serde_json::to_string_pretty(r)?)?;
    write_score_card(
        &r.score_card,
        dir,
        &format!("scorecard_t{}", settings.primary_threshold),
    )?;
    for d in &r.sharpness {
        let stem = format!("{}_lead{:02}_t{}", d.method, d.lead, d.threshold);
        write(&dir.join(format!("sharpness_{stem}.csv")), &d.sharpness.to_csv())?;
        write(&dir.join(format!("sharpness_{stem}.svg")), &d.sharpness.to_svg(true))?;
        if let Some(rep) = r
            .reports
            .iter()
            .find(|x| x.method == d.method && x.lead == d.lead && x.threshold == d.threshold)
        {
            write(
                &dir.join(format!("reliability_{stem}.csv")),
                &rep.report.reliability.to_csv(),
            )?;
            write(
                &dir.join(format!("reliability_{stem}.svg")),
                &reliability_svg(&rep.report.reliability, rep.report.base_rate),
            )?;
        }
    }
    Ok(())
}
