//! Method dispatch, batch prediction, forecast files and per-lead
//! verification tables.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{exceedance_prob, PredictiveDistribution};
use crate::domain::{ArchiveManifest, ForecastCase, ProbabilityForecast, ThresholdSet};
use crate::emos::{fit_emos, fit_emos_gb, EmosConfig, EmosGbConfig, EmosGbModel, EmosModel, TrainingWindow};
use crate::error::{Error, Result};
use crate::features::FeatureRecipe;
use crate::mosref::{fit_mos, MosConfig, MosModel};
use crate::neural::{train_neural, Head, NetworkConfig, NeuralModel, TrainingMode};
use crate::verification::{brier_decomposition, brier_skill, resolution_skill, BrierReport, ProbabilityBins};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Member exceedance frequencies of the raw ensemble.
    Raw,
    Mosref,
    Emos,
    EmosGb,
    Drn,
    Bqn,
}

impl Method {
    pub const TRAINABLE: [Method; 5] = [Method::Mosref, Method::Emos, Method::EmosGb, Method::Drn, Method::Bqn];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Raw => "raw",
            Method::Mosref => "mosref",
            Method::Emos => "emos",
            Method::EmosGb => "emos_gb",
            Method::Drn => "drn",
            Method::Bqn => "bqn",
        }
    }

    pub fn is_neural(self) -> bool {
        matches!(self, Method::Drn | Method::Bqn)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            Method::Raw,
            Method::Mosref,
            Method::Emos,
            Method::EmosGb,
            Method::Drn,
            Method::Bqn,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`")))
    }
}

/// p_k = fraction of members strictly above t_k.
pub fn raw_ensemble_probs(case: &ForecastCase, thresholds: &ThresholdSet) -> ProbabilityForecast {
    let n = case.ensemble.len().max(1) as f64;
    ProbabilityForecast::new(
        thresholds
            .as_slice()
            .iter()
            .map(|&t| case.ensemble.iter().filter(|&&m| m > t).count() as f64 / n)
            .collect(),
    )
}

/// Method-independent training options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOptions {
    pub persistence: bool,
    pub era_flags: bool,
    pub joint: bool,
    /// Restricts training to cases since the most recent model change.
    pub post_change_only: bool,
    /// Use the archive's extra predictor columns.
    pub extra_predictors: bool,
    pub seed: u64,
    pub thresholds: ThresholdSet,
    /// Architecture and optimizer settings for the neural methods; the head,
    /// mode, seed and recipe are filled in from the other options.
    pub network: NetworkConfig,
}

impl Default for MethodOptions {
    fn default() -> Self {
        MethodOptions {
            persistence: false,
            era_flags: false,
            joint: false,
            post_change_only: false,
            extra_predictors: true,
            seed: 1,
            thresholds: ThresholdSet::default(),
            network: NetworkConfig::default(),
        }
    }
}

impl MethodOptions {
    pub fn validate(&self, method: Method) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.joint && !method.is_neural() {
            return bad(format!("joint mode is only available for drn and bqn, not {method}"));
        }
        if method == Method::Emos && (self.persistence || self.era_flags) {
            return bad("emos uses ensemble mean and spread only; use emos_gb for extra predictors".into());
        }
        if method == Method::Raw && (self.persistence || self.era_flags || self.joint) {
            return bad("the raw ensemble takes no mode flags".into());
        }
        Ok(())
    }

    fn recipe(&self, manifest: &ArchiveManifest) -> FeatureRecipe {
        FeatureRecipe {
            use_persistence: self.persistence,
            use_era_flags: self.era_flags,
            extra_predictor_names: if self.extra_predictors {
                manifest.predictors.clone()
            } else {
                Vec::new()
            },
            ..Default::default()
        }
    }

    fn window(&self) -> TrainingWindow {
        if self.post_change_only {
            TrainingWindow::PostLastChange
        } else {
            TrainingWindow::FullWithFlags
        }
    }

    pub fn network_config(&self, method: Method, manifest: &ArchiveManifest) -> NetworkConfig {
        NetworkConfig {
            head: if method == Method::Bqn { Head::Bqn } else { Head::Drn },
            mode: if self.joint {
                TrainingMode::Joint
            } else {
                TrainingMode::PerLead
            },
            seed: self.seed,
            recipe: self.recipe(manifest),
            ..self.network.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", content = "model", rename_all = "snake_case")]
pub enum TrainedModel {
    Raw,
    Mosref(MosModel),
    Emos(EmosModel),
    EmosGb(EmosGbModel),
    Drn(NeuralModel),
    Bqn(NeuralModel),
}

impl TrainedModel {
    pub fn method(&self) -> Method {
        match self {
            TrainedModel::Raw => Method::Raw,
            TrainedModel::Mosref(_) => Method::Mosref,
            TrainedModel::Emos(_) => Method::Emos,
            TrainedModel::EmosGb(_) => Method::EmosGb,
            TrainedModel::Drn(_) => Method::Drn,
            TrainedModel::Bqn(_) => Method::Bqn,
        }
    }

    /// The predictive distribution, for methods that emit one.
    pub fn distribution(&self, case: &ForecastCase) -> Result<Option<PredictiveDistribution>> {
        Ok(match self {
            TrainedModel::Raw => Some(PredictiveDistribution::EnsembleEmpirical {
                members: case.ensemble.clone(),
            }),
            TrainedModel::Mosref(_) => None,
            TrainedModel::Emos(m) => Some(PredictiveDistribution::TruncatedLogistic(m.predict(case)?)),
            TrainedModel::EmosGb(m) => Some(PredictiveDistribution::TruncatedLogistic(m.predict(case)?)),
            TrainedModel::Drn(m) | TrainedModel::Bqn(m) => Some(m.predict(case)?),
        })
    }

    pub fn predict(&self, case: &ForecastCase, thresholds: &ThresholdSet) -> Result<ProbabilityForecast> {
        match self {
            TrainedModel::Raw => Ok(raw_ensemble_probs(case, thresholds)),
            TrainedModel::Mosref(m) => {
                if &m.config.thresholds != thresholds {
                    return Err(Error::InvalidArgument(
                        "mosref model was fitted for a different threshold set".into(),
                    ));
                }
                m.predict(case)
            }
            _ => {
                let d = self.distribution(case)?.expect("distribution method");
                Ok(exceedance_prob(&d, thresholds))
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let method = v.get("method").and_then(|m| m.as_str()).unwrap_or("");
        let inner = || -> Result<String> {
            Ok(serde_json::to_string(
                v.get("model").unwrap_or(&serde_json::Value::Null),
            )?)
        };
        // Each variant goes through its own loader so version checks apply.
        Ok(match method {
            "raw" => TrainedModel::Raw,
            "mosref" => TrainedModel::Mosref(MosModel::from_json(&inner()?)?),
            "emos" => TrainedModel::Emos(EmosModel::from_json(&inner()?)?),
            "emos_gb" => TrainedModel::EmosGb(EmosGbModel::from_json(&inner()?)?),
            "drn" => TrainedModel::Drn(NeuralModel::from_json(&inner()?)?),
            "bqn" => TrainedModel::Bqn(NeuralModel::from_json(&inner()?)?),
            other => return Err(Error::InvalidArgument(format!("unknown model method `{other}`"))),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Rows seen by the fitting procedure (training plus validation parts).
    pub fn training_rows(&self) -> Option<usize> {
        match self {
            TrainedModel::Drn(m) | TrainedModel::Bqn(m) => Some(m.training_rows()),
            _ => None,
        }
    }
}

pub fn train(
    method: Method,
    options: &MethodOptions,
    train: &[&ForecastCase],
    manifest: &ArchiveManifest,
) -> Result<TrainedModel> {
    options.validate(method)?;
    let window = options.window();
    let windowed = crate::emos::select_window(train, manifest, window);
    Ok(match method {
        Method::Raw => TrainedModel::Raw,
        Method::Mosref => TrainedModel::Mosref(fit_mos(
            &windowed,
            manifest,
            &MosConfig {
                recipe: options.recipe(manifest),
                thresholds: options.thresholds.clone(),
                seed: options.seed,
                ..Default::default()
            },
        )?),
        Method::Emos => TrainedModel::Emos(fit_emos(
            train,
            manifest,
            &EmosConfig {
                window,
                ..Default::default()
            },
        )?),
        Method::EmosGb => TrainedModel::EmosGb(fit_emos_gb(
            train,
            manifest,
            &EmosGbConfig {
                recipe: options.recipe(manifest),
                window,
                ..Default::default()
            },
        )?),
        Method::Drn => TrainedModel::Drn(train_neural(
            &windowed,
            manifest,
            &options.network_config(method, manifest),
        )?),
        Method::Bqn => TrainedModel::Bqn(train_neural(
            &windowed,
            manifest,
            &options.network_config(method, manifest),
        )?),
    })
}

/// Forecasts for `cases` in order.
pub fn predict_all(
    model: &TrainedModel,
    cases: &[&ForecastCase],
    thresholds: &ThresholdSet,
) -> Result<Vec<ProbabilityForecast>> {
    cases.par_iter().map(|c| model.predict(c, thresholds)).collect()
}

// ---- forecast files --------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRow {
    pub station_id: String,
    pub init_time: i64,
    pub lead: u32,
    pub run: u32,
    pub probabilities: Vec<f64>,
}

pub fn forecast_csv(cases: &[&ForecastCase], forecasts: &[ProbabilityForecast], thresholds: &ThresholdSet) -> String {
    let mut s = String::from("station_id,init_time,lead_h,run");
    for t in thresholds.as_slice() {
        let _ = write!(s, ",p_{t}");
    }
    s.push('\n');
    for (c, f) in cases.iter().zip(forecasts) {
        let _ = write!(s, "{},{},{},{}", c.station_id, c.init_time, c.lead, c.run);
        for p in &f.probabilities {
            let _ = write!(s, ",{p}");
        }
        s.push('\n');
    }
    s
}

/// Reads a forecast table: key columns plus one `p_<threshold>` column per
/// threshold. Other columns are ignored, so truth tables load as forecasts.
pub fn read_forecasts(path: impl AsRef<Path>) -> Result<(ThresholdSet, Vec<ForecastRow>)> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(std::io::BufReader::new(file));
    let header = rdr.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let (cs, ci, cl, cr) = (col("station_id")?, col("init_time")?, col("lead_h")?, col("run")?);
    let mut pcols = Vec::new();
    let mut thresholds = Vec::new();
    for (i, h) in header.iter().enumerate() {
        if let Some(t) = h.strip_prefix("p_") {
            let t: f64 = t
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad threshold column `{h}`")))?;
            pcols.push(i);
            thresholds.push(t);
        }
    }
    if pcols.is_empty() {
        return Err(Error::MissingColumn("p_<threshold>".into()));
    }
    let thresholds = ThresholdSet::new(thresholds)?;
    let parse = |rec: &csv::StringRecord, i: usize| -> Result<f64> {
        rec[i]
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::InvalidArgument(format!("bad number `{}`", &rec[i])))
    };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let probabilities = pcols.iter().map(|&i| parse(&rec, i)).collect::<Result<Vec<_>>>()?;
        if probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument(format!(
                "probability outside [0, 1] in row for {}",
                &rec[cs]
            )));
        }
        rows.push(ForecastRow {
            station_id: rec[cs].to_string(),
            init_time: parse(&rec, ci)? as i64,
            lead: parse(&rec, cl)? as u32,
            run: parse(&rec, cr)? as u32,
            probabilities,
        });
    }
    Ok((thresholds, rows))
}

/// Aligns forecast rows with archive cases by key. Cases without a forecast
/// row are an error.
pub fn align_forecasts<'a>(cases: &[&'a ForecastCase], rows: &[ForecastRow]) -> Result<Vec<ProbabilityForecast>> {
    let index: HashMap<(&str, i64, u32, u32), &ForecastRow> = rows
        .iter()
        .map(|r| ((r.station_id.as_str(), r.init_time, r.lead, r.run), r))
        .collect();
    cases
        .iter()
        .map(|c| {
            index
                .get(&(c.station_id.as_str(), c.init_time, c.lead, c.run))
                .map(|r| ProbabilityForecast::new(r.probabilities.clone()))
                .ok_or_else(|| Error::InvalidArgument(format!("no forecast for {}", c.key())))
        })
        .collect()
}

// ---- verification tables -------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadThresholdReport {
    pub method: String,
    pub lead: u32,
    pub threshold: f64,
    pub events: usize,
    pub report: BrierReport,
    /// Skill against the raw ensemble, if computable.
    pub bss_raw: Option<f64>,
    pub res_skill_raw: Option<f64>,
}

/// Brier decompositions per (lead, threshold), pooling runs. Cases without an
/// observation are skipped. `reference` supplies raw-ensemble forecasts for
/// the skill columns.
pub fn verify_by_lead(
    method: &str,
    cases: &[&ForecastCase],
    forecasts: &[ProbabilityForecast],
    reference: Option<&[ProbabilityForecast]>,
    thresholds: &ThresholdSet,
    bins: &ProbabilityBins,
) -> Result<Vec<LeadThresholdReport>> {
    if cases.len() != forecasts.len() || reference.is_some_and(|r| r.len() != cases.len()) {
        return Err(Error::InvalidArgument("forecasts not aligned with cases".into()));
    }
    let mut by_lead: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, c) in cases.iter().enumerate() {
        if c.observation.is_some() {
            by_lead.entry(c.lead).or_default().push(i);
        }
    }
    let mut out = Vec::new();
    for (lead, idx) in by_lead {
        for (k, &t) in thresholds.as_slice().iter().enumerate() {
            let o: Vec<f64> = idx
                .iter()
                .map(|&i| if cases[i].observation.unwrap() > t { 1.0 } else { 0.0 })
                .collect();
            let f: Vec<f64> = idx.iter().map(|&i| forecasts[i].probabilities[k]).collect();
            let report = brier_decomposition(&f, &o, bins)?;
            let (bss_raw, res_skill_raw) = match reference {
                Some(r) => {
                    let fr: Vec<f64> = idx.iter().map(|&i| r[i].probabilities[k]).collect();
                    let rr = brier_decomposition(&fr, &o, bins)?;
                    (
                        brier_skill(report.bs, rr.bs).ok(),
                        resolution_skill(report.res, rr.res, rr.unc).ok(),
                    )
                }
                None => (None, None),
            };
            out.push(LeadThresholdReport {
                method: method.to_string(),
                lead,
                threshold: t,
                events: o.iter().filter(|&&v| v > 0.5).count(),
                report,
                bss_raw,
                res_skill_raw,
            });
        }
    }
    Ok(out)
}

pub fn reports_csv(reports: &[LeadThresholdReport]) -> String {
    let mut s = String::from("method,lead_h,threshold,n,events,bs,rel,res,unc,binned_bs,bss_raw,res_skill_raw\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in reports {
        let b = &r.report;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.lead,
            r.threshold,
            b.n,
            r.events,
            b.bs,
            b.rel,
            b.res,
            b.unc,
            b.binned_bs,
            opt(r.bss_raw),
            opt(r.res_skill_raw)
        );
    }
    s
}

/// Mean over thresholds of the squared probability error, per case.
pub fn case_brier(
    cases: &[&ForecastCase],
    forecasts: &[ProbabilityForecast],
    thresholds: &ThresholdSet,
) -> Vec<Option<f64>> {
    let k = thresholds.len() as f64;
    cases
        .iter()
        .zip(forecasts)
        .map(|(c, f)| {
            let y = c.observation?;
            Some(
                thresholds
                    .as_slice()
                    .iter()
                    .zip(&f.probabilities)
                    .map(|(&t, &p)| (p - if y > t { 1.0 } else { 0.0 }).powi(2))
                    .sum::<f64>()
                    / k,
            )
        })
        .collect()
}

/// Mean Brier score over thresholds, per lead.
pub fn mean_bs_by_lead(reports: &[LeadThresholdReport]) -> BTreeMap<u32, f64> {
    let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for r in reports {
        let e = acc.entry(r.lead).or_default();
        e.0 += r.report.bs;
        e.1 += 1;
    }
    acc.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect()
}
