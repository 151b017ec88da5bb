//! Experiment presets on synthetic archives: persistence predictors,
//! training-period composition, joint vs. per-lead networks, method
//! comparison and the threshold dependence of skill.
//!
//! Every preset trains on the days before `split_day` and verifies on the
//! rest. Test cases need an observation and complete persistence values so
//! that all variants are scored on the same cases.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{tau_grid, PredictiveDistribution};
use crate::domain::{Dataset, ForecastCase, ProbabilityForecast, ThresholdSet, SECONDS_PER_DAY};
use crate::error::{Error, Result};
use crate::neural::{NetworkConfig, NeuralModel};
use crate::pipeline::{
    predict_all, raw_ensemble_probs, train, verify_by_lead, LeadThresholdReport, Method, MethodOptions, TrainedModel,
};
use crate::synthgen::{bayes_scores, BayesScore, TruthRow};
use crate::verification::{
    block_bootstrap_difference, brier_skill, score_card, sharpness_histogram, ConfidenceInterval, MethodLeadReport,
    ProbabilityBins, ScoreCardCell, SharpnessHistogram, DEFAULT_BINS, DEFAULT_RESAMPLES,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSettings {
    pub seed: u64,
    /// First test day, counted from the first archive day.
    pub split_day: i64,
    /// Restricts training and verification to these leads.
    pub leads: Option<Vec<u32>>,
    pub network: NetworkConfig,
    pub bins: usize,
    pub resamples: usize,
    pub thresholds: ThresholdSet,
    /// Threshold of the per-lead summaries and bootstrap intervals.
    pub primary_threshold: f64,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings {
            seed: 1,
            split_day: 600,
            leads: None,
            network: NetworkConfig::default(),
            bins: DEFAULT_BINS,
            resamples: DEFAULT_RESAMPLES,
            thresholds: ThresholdSet::default(),
            primary_threshold: 25.0,
        }
    }
}

impl ExperimentSettings {
    fn primary_index(&self) -> Result<usize> {
        self.thresholds.index_of(self.primary_threshold).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "primary threshold {} not in threshold set",
                self.primary_threshold
            ))
        })
    }

    fn bins(&self) -> Result<ProbabilityBins> {
        ProbabilityBins::equal(self.bins)
    }

    fn options(&self) -> MethodOptions {
        MethodOptions {
            seed: self.seed,
            thresholds: self.thresholds.clone(),
            network: self.network.clone(),
            ..Default::default()
        }
    }
}

/// Wall time and sample count of one training job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeEntry {
    pub label: String,
    pub train_samples: usize,
    pub seconds: f64,
}

pub struct TrainTest<'a> {
    pub train: Vec<&'a ForecastCase>,
    pub test: Vec<&'a ForecastCase>,
}

pub fn split_by_day<'a>(data: &'a Dataset, split_day: i64, leads: Option<&[u32]>) -> TrainTest<'a> {
    let day0 = data
        .cases
        .iter()
        .map(|c| c.init_time)
        .min()
        .unwrap_or(0)
        .div_euclid(SECONDS_PER_DAY);
    let keep = |c: &ForecastCase| leads.is_none_or(|l| l.contains(&c.lead));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in data.cases.iter().filter(|c| keep(c)) {
        if c.init_time.div_euclid(SECONDS_PER_DAY) - day0 < split_day {
            train.push(c);
        } else if c.observation.is_some() && c.persistence.iter().all(Option::is_some) {
            test.push(c);
        }
    }
    TrainTest { train, test }
}

fn timed_train(
    label: &str,
    method: Method,
    options: &MethodOptions,
    cases: &[&ForecastCase],
    data: &Dataset,
    runtime: &mut Vec<RuntimeEntry>,
) -> Result<TrainedModel> {
    let start = Instant::now();
    let model = train(method, options, cases, &data.manifest)?;
    log::info!("trained {label} in {:.1}s", start.elapsed().as_secs_f64());
    runtime.push(RuntimeEntry {
        label: label.to_string(),
        train_samples: model.training_rows().unwrap_or(cases.len()),
        seconds: start.elapsed().as_secs_f64(),
    });
    Ok(model)
}

/// Verification of one model on the test cases.
pub struct Evaluation {
    pub label: String,
    pub forecasts: Vec<ProbabilityForecast>,
    pub reports: Vec<LeadThresholdReport>,
}

impl Evaluation {
    pub fn primary_bs(&self, threshold: f64) -> BTreeMap<u32, f64> {
        self.reports
            .iter()
            .filter(|r| r.threshold == threshold)
            .map(|r| (r.lead, r.report.bs))
            .collect()
    }
}

fn evaluate(
    label: &str,
    model: &TrainedModel,
    test: &[&ForecastCase],
    raw: &[ProbabilityForecast],
    settings: &ExperimentSettings,
) -> Result<Evaluation> {
    let forecasts = predict_all(model, test, &settings.thresholds)?;
    let reports = verify_by_lead(
        label,
        test,
        &forecasts,
        Some(raw),
        &settings.thresholds,
        &settings.bins()?,
    )?;
    Ok(Evaluation {
        label: label.to_string(),
        forecasts,
        reports,
    })
}

fn squared_errors(test: &[&ForecastCase], forecasts: &[ProbabilityForecast], k: usize, threshold: f64) -> Vec<f64> {
    test.iter()
        .zip(forecasts)
        .map(|(c, f)| {
            let o = if c.observation.unwrap_or(0.0) > threshold {
                1.0
            } else {
                0.0
            };
            (f.probabilities[k] - o).powi(2)
        })
        .collect()
}

/// Per-lead comparison of two variants scored on the same cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub lead: u32,
    pub n: usize,
    pub bs_a: f64,
    pub bs_b: f64,
    /// bs_b - bs_a with a day-block bootstrap interval.
    pub difference: ConfidenceInterval,
}

fn paired_rows(
    test: &[&ForecastCase],
    a: &Evaluation,
    b: &Evaluation,
    settings: &ExperimentSettings,
) -> Result<Vec<PairedRow>> {
    let k = settings.primary_index()?;
    let t = settings.primary_threshold;
    let ea = squared_errors(test, &a.forecasts, k, t);
    let eb = squared_errors(test, &b.forecasts, k, t);
    let mut by_lead: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, c) in test.iter().enumerate() {
        by_lead.entry(c.lead).or_default().push(i);
    }
    by_lead
        .into_iter()
        .map(|(lead, idx)| {
            let days: Vec<i64> = idx.iter().map(|&i| test[i].init_day()).collect();
            let xa: Vec<f64> = idx.iter().map(|&i| ea[i]).collect();
            let xb: Vec<f64> = idx.iter().map(|&i| eb[i]).collect();
            let ci =
                block_bootstrap_difference(&days, &xb, &xa, settings.resamples, 0.95, settings.seed ^ lead as u64)?;
            Ok(PairedRow {
                lead,
                n: idx.len(),
                bs_a: xa.iter().sum::<f64>() / xa.len() as f64,
                bs_b: xb.iter().sum::<f64>() / xb.len() as f64,
                difference: ci,
            })
        })
        .collect()
}

fn paired_csv(a: &str, b: &str, rows: &[PairedRow]) -> String {
    let mut s = format!("lead_h,n,bs_{a},bs_{b},difference,ci_lower,ci_upper\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.lead, r.n, r.bs_a, r.bs_b, r.difference.estimate, r.difference.lower, r.difference.upper
        );
    }
    s
}

// ---- persistence -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistenceResult {
    pub threshold: f64,
    /// a = DRN without persistence, b = DRN with persistence.
    pub rows: Vec<PairedRow>,
    pub reports: Vec<LeadThresholdReport>,
    #[serde(skip)]
    pub runtime: Vec<RuntimeEntry>,
}

impl PersistenceResult {
    pub fn to_csv(&self) -> String {
        paired_csv("without", "with", &self.rows)
    }
}

/// DRN with and without the persistence predictors, per lead. Leads default
/// to the first and last of the grid.
pub fn persistence_experiment(data: &Dataset, settings: &ExperimentSettings) -> Result<PersistenceResult> {
    let leads = settings.leads.clone().unwrap_or_else(|| {
        let l = &data.manifest.lead_times;
        vec![l[0], l[l.len() - 1]]
    });
    let split = split_by_day(data, settings.split_day, Some(&leads));
    let raw: Vec<ProbabilityForecast> = split
        .test
        .iter()
        .map(|c| raw_ensemble_probs(c, &settings.thresholds))
        .collect();
    let mut runtime = Vec::new();
    let mut evals = Vec::new();
    for (label, persistence) in [("drn", false), ("drn_persistence", true)] {
        let opts = MethodOptions {
            persistence,
            era_flags: true,
            ..settings.options()
        };
        let model = timed_train(label, Method::Drn, &opts, &split.train, data, &mut runtime)?;
        evals.push(evaluate(label, &model, &split.test, &raw, settings)?);
    }
    let rows = paired_rows(&split.test, &evals[0], &evals[1], settings)?;
    Ok(PersistenceResult {
        threshold: settings.primary_threshold,
        rows,
        reports: evals.into_iter().flat_map(|e| e.reports).collect(),
        runtime,
    })
}

// ---- training period ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPeriodRow {
    pub lead: u32,
    pub bs_full_flags: f64,
    pub bs_full_no_flags: f64,
    pub bs_post_change: f64,
    /// bs_full_flags - bs_post_change.
    pub flags_vs_post_change: ConfidenceInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPeriodResult {
    pub method: Method,
    pub threshold: f64,
    pub rows: Vec<TrainingPeriodRow>,
    pub reports: Vec<LeadThresholdReport>,
    #[serde(skip)]
    pub runtime: Vec<RuntimeEntry>,
}

impl TrainingPeriodResult {
    /// Largest full-with-flags minus post-change difference over leads.
    pub fn worst_difference(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.flags_vs_post_change.estimate)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lead_h,bs_full_flags,bs_full_no_flags,bs_post_change,difference,ci_lower,ci_upper\n");
        for r in &self.rows {
            let d = &r.flags_vs_post_change;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.lead, r.bs_full_flags, r.bs_full_no_flags, r.bs_post_change, d.estimate, d.lower, d.upper
            );
        }
        s
    }
}

/// Full-period training with and without era flags against training only
/// on the cases since the most recent model change.
pub fn training_period_experiment(
    data: &Dataset,
    settings: &ExperimentSettings,
    method: Method,
) -> Result<TrainingPeriodResult> {
    if method == Method::Emos || method == Method::Raw {
        return Err(Error::InvalidArgument(format!("{method} takes no era flags")));
    }
    let split = split_by_day(data, settings.split_day, settings.leads.as_deref());
    let raw: Vec<ProbabilityForecast> = split
        .test
        .iter()
        .map(|c| raw_ensemble_probs(c, &settings.thresholds))
        .collect();
    let mut runtime = Vec::new();
    let variants = [
        ("full_flags", true, false),
        ("full_no_flags", false, false),
        ("post_change", true, true),
    ];
    let mut evals = Vec::new();
    for (label, era_flags, post_change_only) in variants {
        let opts = MethodOptions {
            era_flags,
            post_change_only,
            ..settings.options()
        };
        let label = format!("{method}_{label}");
        let model = timed_train(&label, method, &opts, &split.train, data, &mut runtime)?;
        evals.push(evaluate(&label, &model, &split.test, &raw, settings)?);
    }
    let t = settings.primary_threshold;
    let paired = paired_rows(&split.test, &evals[2], &evals[0], settings)?;
    let no_flags = evals[1].primary_bs(t);
    let rows = paired
        .into_iter()
        .map(|p| TrainingPeriodRow {
            lead: p.lead,
            bs_full_flags: p.bs_b,
            bs_full_no_flags: no_flags[&p.lead],
            bs_post_change: p.bs_a,
            flags_vs_post_change: p.difference,
        })
        .collect();
    Ok(TrainingPeriodResult {
        method,
        threshold: t,
        rows,
        reports: evals.into_iter().flat_map(|e| e.reports).collect(),
        runtime,
    })
}

// ---- joint vs. per lead --------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointResult {
    pub method: Method,
    pub threshold: f64,
    /// a = per-lead networks, b = joint network.
    pub rows: Vec<PairedRow>,
    pub joint_rows: usize,
    /// Training rows of each (lead, run) network.
    pub per_lead_rows: Vec<usize>,
    pub reports: Vec<LeadThresholdReport>,
    #[serde(skip)]
    pub runtime: Vec<RuntimeEntry>,
}

impl JointResult {
    pub fn row_factor(&self) -> f64 {
        let mean = self.per_lead_rows.iter().sum::<usize>() as f64 / self.per_lead_rows.len().max(1) as f64;
        self.joint_rows as f64 / mean
    }

    pub fn max_abs_difference(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.difference.estimate.abs())
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        paired_csv("per_lead", "joint", &self.rows)
    }
}

fn row_counts(model: &TrainedModel) -> Vec<usize> {
    match model {
        TrainedModel::Drn(m) | TrainedModel::Bqn(m) => m.networks.iter().map(|n| n.n_train + n.n_validation).collect(),
        _ => Vec::new(),
    }
}

pub fn joint_experiment(data: &Dataset, settings: &ExperimentSettings, method: Method) -> Result<JointResult> {
    if !method.is_neural() {
        return Err(Error::InvalidArgument(format!(
            "joint training needs drn or bqn, not {method}"
        )));
    }
    let split = split_by_day(data, settings.split_day, settings.leads.as_deref());
    let raw: Vec<ProbabilityForecast> = split
        .test
        .iter()
        .map(|c| raw_ensemble_probs(c, &settings.thresholds))
        .collect();
    let mut runtime = Vec::new();
    let base = MethodOptions {
        era_flags: true,
        ..settings.options()
    };
    let per_lead = timed_train(
        &format!("{method}_per_lead"),
        method,
        &base,
        &split.train,
        data,
        &mut runtime,
    )?;
    let joint_opts = MethodOptions { joint: true, ..base };
    let joint = timed_train(
        &format!("{method}_joint"),
        method,
        &joint_opts,
        &split.train,
        data,
        &mut runtime,
    )?;
    let ea = evaluate(&format!("{method}_per_lead"), &per_lead, &split.test, &raw, settings)?;
    let eb = evaluate(&format!("{method}_joint"), &joint, &split.test, &raw, settings)?;
    let rows = paired_rows(&split.test, &ea, &eb, settings)?;
    Ok(JointResult {
        method,
        threshold: settings.primary_threshold,
        rows,
        joint_rows: row_counts(&joint).iter().sum(),
        per_lead_rows: row_counts(&per_lead),
        reports: ea.reports.into_iter().chain(eb.reports).collect(),
        runtime,
    })
}

// ---- method comparison ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagramSet {
    pub method: String,
    pub lead: u32,
    pub threshold: f64,
    pub sharpness: SharpnessHistogram,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodsResult {
    pub threshold: f64,
    /// Reports of each method and of the raw ensemble ("raw") and, when a
    /// truth table is supplied, of the true probabilities ("truth").
    pub reports: Vec<LeadThresholdReport>,
    pub bayes: Vec<BayesScore>,
    pub score_card: Vec<ScoreCardCell>,
    pub sharpness: Vec<DiagramSet>,
    /// Forecast vectors increasing somewhere over thresholds, per method.
    pub monotonicity_violations: BTreeMap<String, usize>,
    #[serde(skip)]
    pub runtime: Vec<RuntimeEntry>,
    #[serde(skip)]
    pub models: Vec<TrainedModel>,
}

impl MethodsResult {
    /// BS at the primary threshold, per method and lead.
    pub fn primary_bs(&self) -> BTreeMap<String, BTreeMap<u32, f64>> {
        let mut out: BTreeMap<String, BTreeMap<u32, f64>> = BTreeMap::new();
        for r in self.reports.iter().filter(|r| r.threshold == self.threshold) {
            out.entry(r.method.clone()).or_default().insert(r.lead, r.report.bs);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let bs = self.primary_bs();
        let leads: Vec<u32> = bs
            .values()
            .next()
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default();
        let mut s = String::from("lead_h");
        for m in bs.keys() {
            let _ = write!(s, ",bs_{m}");
        }
        s.push('\n');
        for l in leads {
            let _ = write!(s, "{l}");
            for per in bs.values() {
                let _ = write!(s, ",{}", per.get(&l).map(|v| v.to_string()).unwrap_or_default());
            }
            s.push('\n');
        }
        s
    }
}

/// Options each method is trained with in the comparison.
pub fn comparison_options(method: Method, settings: &ExperimentSettings, multi_era: bool) -> MethodOptions {
    MethodOptions {
        persistence: method == Method::Mosref,
        era_flags: multi_era && method != Method::Emos,
        ..settings.options()
    }
}

/// Trains every method on the same split and verifies it against the raw
/// ensemble and, if available, the true probabilities.
pub fn methods_experiment(
    data: &Dataset,
    truth: Option<&[TruthRow]>,
    settings: &ExperimentSettings,
    methods: &[Method],
) -> Result<MethodsResult> {
    let split = split_by_day(data, settings.split_day, settings.leads.as_deref());
    let th = &settings.thresholds;
    let k = settings.primary_index()?;
    let bins = settings.bins()?;
    let raw: Vec<ProbabilityForecast> = split.test.iter().map(|c| raw_ensemble_probs(c, th)).collect();
    let mut reports = verify_by_lead("raw", &split.test, &raw, Some(&raw), th, &bins)?;
    let mut bayes = Vec::new();
    if let Some(truth) = truth {
        let rows = crate::synthgen::truth_for(truth, &split.test)?;
        if rows.iter().any(|r| r.probabilities.len() != th.len()) {
            return Err(Error::InvalidArgument(
                "truth table thresholds differ from the experiment's".into(),
            ));
        }
        let f: Vec<ProbabilityForecast> = rows
            .iter()
            .map(|r| ProbabilityForecast::new(r.probabilities.clone()))
            .collect();
        reports.extend(verify_by_lead("truth", &split.test, &f, Some(&raw), th, &bins)?);
        bayes = bayes_scores(truth, &split.test, th)?;
    }
    let multi_era = data.manifest.eras.len() > 1;
    let mut runtime = Vec::new();
    let mut models = Vec::new();
    let mut violations = BTreeMap::new();
    let mut forecasts_by_method = vec![("raw".to_string(), raw.clone())];
    for &m in methods {
        let opts = comparison_options(m, settings, multi_era);
        let model = timed_train(m.as_str(), m, &opts, &split.train, data, &mut runtime)?;
        let e = evaluate(m.as_str(), &model, &split.test, &raw, settings)?;
        violations.insert(
            m.as_str().to_string(),
            e.forecasts.iter().filter(|f| !f.is_nonincreasing()).count(),
        );
        reports.extend(e.reports);
        forecasts_by_method.push((m.as_str().to_string(), e.forecasts));
        models.push(model);
    }
    let mut sharpness = Vec::new();
    let leads: Vec<u32> = data.manifest.lead_times.clone();
    let diagram_leads: Vec<u32> = [3, 15].into_iter().filter(|l| leads.contains(l)).collect();
    for (name, f) in &forecasts_by_method {
        for &lead in &diagram_leads {
            let p: Vec<f64> = split
                .test
                .iter()
                .zip(f)
                .filter(|(c, _)| c.lead == lead)
                .map(|(_, f)| f.probabilities[k])
                .collect();
            if p.is_empty() {
                continue;
            }
            sharpness.push(DiagramSet {
                method: name.clone(),
                lead,
                threshold: settings.primary_threshold,
                sharpness: sharpness_histogram(&p, &bins)?,
            });
        }
    }
    let card_input: Vec<MethodLeadReport> = reports
        .iter()
        .filter(|r| r.threshold == settings.primary_threshold && r.method != "truth")
        .map(|r| MethodLeadReport {
            method: r.method.clone(),
            lead: r.lead,
            report: r.report.clone(),
        })
        .collect();
    let card = score_card(&card_input, "raw")?;
    Ok(MethodsResult {
        threshold: settings.primary_threshold,
        reports,
        bayes,
        score_card: card,
        sharpness,
        monotonicity_violations: violations,
        runtime,
        models,
    })
}

// ---- thresholds ------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub method: String,
    pub threshold: f64,
    pub n: usize,
    pub events: usize,
    pub bs: f64,
    pub bs_raw: f64,
    pub bss_raw: Option<f64>,
}

/// Brier scores pooled over all leads, per method and threshold.
pub fn threshold_table(reports: &[LeadThresholdReport]) -> Vec<ThresholdRow> {
    let mut pooled: BTreeMap<(String, u64), (f64, usize, usize, f64)> = BTreeMap::new();
    for r in reports {
        let e = pooled
            .entry((r.method.clone(), r.threshold.to_bits()))
            .or_insert((0.0, 0, 0, r.threshold));
        e.0 += r.report.bs * r.report.n as f64;
        e.1 += r.report.n;
        e.2 += r.events;
    }
    let raw: BTreeMap<u64, f64> = pooled
        .iter()
        .filter(|((m, _), _)| m == "raw")
        .map(|((_, t), v)| (*t, v.0 / v.1 as f64))
        .collect();
    let mut rows: Vec<ThresholdRow> = pooled
        .into_iter()
        .map(|((method, tb), (sum, n, events, threshold))| {
            let bs = sum / n as f64;
            let bs_raw = raw.get(&tb).copied().unwrap_or(f64::NAN);
            ThresholdRow {
                method,
                threshold,
                n,
                events,
                bs,
                bs_raw,
                bss_raw: brier_skill(bs, bs_raw).ok(),
            }
        })
        .collect();
    rows.sort_by(|a, b| a.method.cmp(&b.method).then(a.threshold.total_cmp(&b.threshold)));
    rows
}

pub fn threshold_csv(rows: &[ThresholdRow]) -> String {
    let mut s = String::from("method,threshold,n,events,bs,bs_raw,bss_raw\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.method,
            r.threshold,
            r.n,
            r.events,
            r.bs,
            r.bs_raw,
            r.bss_raw.map(|v| v.to_string()).unwrap_or_default()
        );
    }
    s
}

/// Shape of skill against threshold over the thresholds with at least
/// `min_events` events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTrend {
    pub thresholds: Vec<f64>,
    /// Per method: the skill does not increase from one threshold to the next.
    pub decreasing: BTreeMap<String, bool>,
    /// Method order by skill at each threshold.
    pub rankings: Vec<Vec<String>>,
    pub consistent_ranking: bool,
}

pub fn threshold_trend(rows: &[ThresholdRow], methods: &[&str], min_events: usize) -> ThresholdTrend {
    let mut thresholds: Vec<f64> = rows
        .iter()
        .filter(|r| r.method == "raw" && r.events >= min_events)
        .map(|r| r.threshold)
        .collect();
    thresholds.sort_by(f64::total_cmp);
    let skill = |m: &str, t: f64| {
        rows.iter()
            .find(|r| r.method == m && r.threshold == t)
            .and_then(|r| r.bss_raw)
            .unwrap_or(f64::NAN)
    };
    let decreasing = methods
        .iter()
        .map(|m| {
            let s: Vec<f64> = thresholds.iter().map(|&t| skill(m, t)).collect();
            (m.to_string(), s.windows(2).all(|w| w[1] <= w[0]))
        })
        .collect();
    let rankings: Vec<Vec<String>> = thresholds
        .iter()
        .map(|&t| {
            let mut ms: Vec<&str> = methods.to_vec();
            ms.sort_by(|a, b| skill(b, t).total_cmp(&skill(a, t)));
            ms.into_iter().map(String::from).collect()
        })
        .collect();
    let consistent_ranking = rankings.windows(2).all(|w| w[0] == w[1]);
    ThresholdTrend {
        thresholds,
        decreasing,
        rankings,
        consistent_ranking,
    }
}

// ---- property scans ----------------------------------------------------------------

/// Evaluates every BQN network on `count` random inputs (test cases with
/// shifted, rescaled ensembles) and counts quantile functions that decrease
/// somewhere on a fine grid. Returns (checked, violations).
pub fn bqn_monotonicity_scan(
    model: &NeuralModel,
    cases: &[&ForecastCase],
    count: usize,
    seed: u64,
) -> Result<(usize, usize)> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("no cases to perturb".into()));
    }
    let taus = tau_grid(199);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    let mut violations = 0;
    for net in &model.networks {
        let own: Vec<&ForecastCase> = cases
            .iter()
            .copied()
            .filter(|c| net.lead.is_none_or(|l| l == c.lead) && net.run.is_none_or(|r| r == c.run))
            .collect();
        let pool = if own.is_empty() { cases } else { &own[..] };
        for _ in 0..count {
            let mut c = pool[rng.random_range(0..pool.len())].clone();
            let shift = rng.random_range(-15.0..25.0);
            let stretch = rng.random_range(0.2..3.0);
            let m = c.ensemble_mean();
            c.ensemble
                .iter_mut()
                .for_each(|v| *v = (m + shift + stretch * (*v - m)).max(0.0));
            c.extra_predictors
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-3.0..3.0));
            let PredictiveDistribution::Bernstein(q) = net.predict(&c)? else {
                return Err(Error::InvalidArgument("monotonicity scan needs a BQN model".into()));
            };
            let qs: Vec<f64> = taus.iter().map(|&t| q.quantile(t)).collect::<Result<_>>()?;
            checked += 1;
            if qs.windows(2).any(|w| w[1] < w[0]) {
                violations += 1;
            }
        }
    }
    Ok((checked, violations))
}
