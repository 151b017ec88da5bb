//! Synthetic forecast archives with known ground truth.
//!
//! Every station carries hourly latent processes: a weather anomaly, a scale
//! anomaly, optional extra predictors and a Gaussian copula driving the
//! observation quantile. All of them are AR(1) with the scenario's
//! hour-to-hour coefficient. Observations are truncated-logistic draws around
//! the station climatology plus diurnal cycle plus weather. The ensemble sees
//! the weather exactly but carries an era-dependent offset and dispersion
//! error, and never sees the extra predictors or the copula.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::distributions::TruncatedLogistic;
use crate::domain::{
    ArchiveManifest, Dataset, ForecastCase, ModelEra, Station, ThresholdSet, MANIFEST_VERSION, SECONDS_PER_DAY,
    SECONDS_PER_HOUR,
};
use crate::error::{Error, Result};

/// 2019-01-01T00:00:00Z
pub const DEFAULT_START: i64 = 1_546_300_800;
/// Generated gusts, members and persistence values are stored in steps of this.
pub const RESOLUTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EraSpec {
    pub name: String,
    pub start_day: u32,
    /// Mean of observation minus ensemble mean, kt.
    pub bias: f64,
    /// Ensemble standard deviation relative to the true predictive one.
    pub dispersion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtraPredictorSpec {
    pub name: String,
    /// Shift of the true gust location per unit of the (standard normal)
    /// predictor; zero makes it pure noise.
    pub effect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub stations: usize,
    pub days: u32,
    pub start_time: i64,
    pub runs: Vec<u32>,
    pub lead_times: Vec<u32>,
    pub ensemble_size: usize,
    pub eras: Vec<EraSpec>,
    pub diurnal_amplitude: f64,
    /// Lag-1 (hourly) coefficient shared by all latent processes.
    pub autocorrelation: f64,
    pub weather_sd: f64,
    pub scale_variability: f64,
    /// Station climatological location is drawn uniformly from this range.
    pub location_range: (f64, f64),
    pub scale_range: (f64, f64),
    /// Extra ensemble offset per kt of the centre above 15 kt.
    pub bias_slope: f64,
    pub extra_predictors: Vec<ExtraPredictorSpec>,
    pub missing_rate: f64,
    pub thresholds: ThresholdSet,
    pub seed: u64,
}

fn eras_default() -> Vec<EraSpec> {
    let e = |name: &str, start_day, bias, dispersion| EraSpec {
        name: name.into(),
        start_day,
        bias,
        dispersion,
    };
    vec![
        e("base", 0, -2.0, 0.55),
        e("kenda", 120, -1.0, 0.65),
        e("d2", 250, 0.0, 0.75),
        e("icon", 450, 1.5, 0.85),
    ]
}

impl ScenarioConfig {
    /// The gust distribution is exactly the family EMOS assumes; no
    /// model changes, no hour-to-hour dependence.
    pub fn well_specified() -> Self {
        ScenarioConfig {
            name: "well_specified".into(),
            stations: 50,
            days: 730,
            start_time: DEFAULT_START,
            runs: vec![0, 12],
            lead_times: (3..=21).collect(),
            ensemble_size: 20,
            eras: vec![EraSpec {
                name: "base".into(),
                start_day: 0,
                bias: -3.0,
                dispersion: 0.5,
            }],
            diurnal_amplitude: 3.0,
            autocorrelation: 0.0,
            weather_sd: 6.0,
            scale_variability: 0.25,
            location_range: (10.0, 20.0),
            scale_range: (2.0, 3.5),
            bias_slope: 0.1,
            extra_predictors: Vec::new(),
            missing_rate: 0.002,
            thresholds: ThresholdSet::default(),
            seed: 1,
        }
    }

    /// Model eras with shifting bias and dispersion, autocorrelated gusts
    /// and two extra predictors (one informative).
    pub fn operational() -> Self {
        ScenarioConfig {
            name: "operational".into(),
            eras: eras_default(),
            autocorrelation: 0.8,
            extra_predictors: vec![
                ExtraPredictorSpec {
                    name: "x_signal".into(),
                    effect: 1.5,
                },
                ExtraPredictorSpec {
                    name: "x_noise".into(),
                    effect: 0.0,
                },
            ],
            ..ScenarioConfig::well_specified()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "well_specified" => Ok(Self::well_specified()),
            "operational" => Ok(Self::operational()),
            other => Err(Error::InvalidArgument(format!(
                "unknown scenario preset '{other}' (expected well_specified or operational)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.days == 0 {
            return bad("scenario spans no days");
        }
        if self.stations == 0 || self.ensemble_size < 2 {
            return bad("need at least one station and two ensemble members");
        }
        if self.runs.is_empty() || self.lead_times.is_empty() {
            return bad("need runs and lead times");
        }
        if !(0.0..1.0).contains(&self.autocorrelation) {
            return bad("autocorrelation must lie in [0, 1)");
        }
        if self.eras.is_empty() || self.eras[0].start_day != 0 {
            return bad("the first era must start on day 0");
        }
        if self.eras.windows(2).any(|w| w[0].start_day >= w[1].start_day) {
            return bad("eras must be strictly ordered");
        }
        if self.eras.iter().any(|e| !(e.dispersion > 0.0)) {
            return bad("era dispersion factors must be positive");
        }
        if !(self.scale_range.0 > 0.0 && self.scale_range.0 <= self.scale_range.1) {
            return bad("scale range must be positive and ordered");
        }
        if self.location_range.0 > self.location_range.1 {
            return bad("location range must be ordered");
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad("missing rate must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn manifest(&self) -> ArchiveManifest {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0f57);
        let stations = (0..self.stations)
            .map(|i| Station {
                id: format!("S{:03}", i + 1),
                latitude: rng.random_range(47.5..54.5),
                longitude: rng.random_range(6.0..15.0),
                height: (rng.random_range(0.0..900.0f64)).round(),
                embedding_index: i,
            })
            .collect();
        ArchiveManifest {
            format_version: MANIFEST_VERSION,
            units: "kt".into(),
            ensemble_size: self.ensemble_size,
            runs: self.runs.clone(),
            lead_times: self.lead_times.clone(),
            thresholds: self.thresholds.clone(),
            predictors: self.extra_predictors.iter().map(|p| p.name.clone()).collect(),
            stations,
            eras: self
                .eras
                .iter()
                .map(|e| ModelEra {
                    name: e.name.clone(),
                    start: self.start_time + e.start_day as i64 * SECONDS_PER_DAY,
                    flag_name: format!("flag_{}", e.name),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub station_id: String,
    pub init_time: i64,
    pub lead: u32,
    pub run: u32,
    pub location: f64,
    pub scale: f64,
    /// Exact probability that the recorded observation exceeds each threshold.
    pub probabilities: Vec<f64>,
}

impl TruthRow {
    pub fn distribution(&self) -> TruncatedLogistic {
        TruncatedLogistic {
            location: self.location,
            scale: self.scale,
            lower_bound: 0.0,
        }
    }
}

pub struct GeneratedArchive {
    pub config: ScenarioConfig,
    pub dataset: Dataset,
    /// Aligned with `dataset.cases`.
    pub truth: Vec<TruthRow>,
}

fn quantize(v: f64) -> f64 {
    (v / RESOLUTION).round() * RESOLUTION
}

/// Cut-off on the unrounded value equivalent to `round(x) > t`.
fn rounded_exceedance_cut(t: f64) -> f64 {
    ((t / RESOLUTION + 1e-9).floor() + 0.5) * RESOLUTION
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

struct Ar1 {
    phi: f64,
    innovation: f64,
    value: f64,
}

impl Ar1 {
    fn new(rng: &mut ChaCha8Rng, phi: f64, sd: f64) -> Self {
        let z: f64 = StandardNormal.sample(rng);
        Ar1 {
            phi,
            innovation: sd * (1.0 - phi * phi).sqrt(),
            value: sd * z,
        }
    }

    fn series(mut self, rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len)
            .map(|_| {
                let v = self.value;
                let z: f64 = StandardNormal.sample(rng);
                self.value = self.phi * self.value + self.innovation * z;
                v
            })
            .collect()
    }
}

fn station_cases(cfg: &ScenarioConfig, manifest: &ArchiveManifest, s: usize) -> (Vec<ForecastCase>, Vec<TruthRow>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(s as u64 + 1));
    let max_run = *cfg.runs.iter().max().unwrap_or(&0) as usize;
    let max_lead = *cfg.lead_times.iter().max().unwrap_or(&0) as usize;
    let hours = cfg.days as usize * 24 + max_run + max_lead + 1;
    let phi = cfg.autocorrelation;

    let mu = rng.random_range(cfg.location_range.0..=cfg.location_range.1);
    let sigma = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1);
    let amplitude = cfg.diurnal_amplitude * rng.random_range(0.5..1.5);
    let peak = 14.0 + rng.random_range(-2.0..2.0);

    let weather = Ar1::new(&mut rng, phi, cfg.weather_sd).series(&mut rng, hours);
    let scale_anom = Ar1::new(&mut rng, phi, 1.0).series(&mut rng, hours);
    let copula = Ar1::new(&mut rng, phi, 1.0).series(&mut rng, hours);
    let extras: Vec<Vec<f64>> = cfg
        .extra_predictors
        .iter()
        .map(|_| Ar1::new(&mut rng, phi, 1.0).series(&mut rng, hours))
        .collect();

    let base: Vec<f64> = (0..hours)
        .map(|h| mu + amplitude * (2.0 * PI * ((h % 24) as f64 - peak) / 24.0).cos() + weather[h])
        .collect();
    let true_loc: Vec<f64> = (0..hours)
        .map(|h| {
            let shift: f64 = cfg
                .extra_predictors
                .iter()
                .zip(&extras)
                .map(|(e, x)| e.effect * x[h])
                .sum();
            (base[h] + shift).max(0.5)
        })
        .collect();
    let true_scale: Vec<f64> = (0..hours)
        .map(|h| sigma * (cfg.scale_variability * scale_anom[h]).exp())
        .collect();
    let obs: Vec<Option<f64>> = (0..hours)
        .map(|h| {
            let u = std_normal_cdf(copula[h]).clamp(1e-15, 1.0 - 1e-15);
            let v = TruncatedLogistic {
                location: true_loc[h],
                scale: true_scale[h],
                lower_bound: 0.0,
            }
            .quantile(u);
            let missing = rng.random_range(0.0..1.0) < cfg.missing_rate;
            (!missing).then(|| quantize(v))
        })
        .collect();
    let cuts: Vec<f64> = cfg
        .thresholds
        .as_slice()
        .iter()
        .map(|&t| rounded_exceedance_cut(t))
        .collect();
    let logistic_sd = PI / 3f64.sqrt();
    let station_id = manifest.stations[s].id.clone();

    let mut cases = Vec::new();
    let mut truth = Vec::new();
    let mut z = vec![0.0; cfg.ensemble_size];
    for day in 0..cfg.days as usize {
        let init_day_time = cfg.start_time + day as i64 * SECONDS_PER_DAY;
        let era_idx = manifest.era_index(init_day_time);
        let era = &cfg.eras[era_idx];
        for &run in &cfg.runs {
            let init_hour = day * 24 + run as usize;
            let init_time = init_day_time + run as i64 * SECONDS_PER_HOUR;
            for &lead in &cfg.lead_times {
                let v = init_hour + lead as usize;
                let mean = (base[v] - era.bias - cfg.bias_slope * (base[v] - 15.0)).max(0.3);
                let mut sd = era.dispersion * true_scale[v] * logistic_sd;
                for zi in z.iter_mut() {
                    *zi = StandardNormal.sample(&mut rng);
                }
                let zm = z.iter().sum::<f64>() / z.len() as f64;
                let zs = (z.iter().map(|x| (x - zm).powi(2)).sum::<f64>() / (z.len() - 1) as f64).sqrt();
                let zmin = z.iter().map(|x| (x - zm) / zs).fold(f64::INFINITY, f64::min);
                if mean + sd * zmin < 0.0 {
                    sd = 0.999 * mean / -zmin;
                }
                let ensemble: Vec<f64> = z
                    .iter()
                    .map(|x| quantize((mean + sd * (x - zm) / zs).max(0.0)))
                    .collect();
                let dist = TruncatedLogistic {
                    location: true_loc[v],
                    scale: true_scale[v],
                    lower_bound: 0.0,
                };
                cases.push(ForecastCase {
                    station_id: station_id.clone(),
                    station_index: s,
                    init_time,
                    lead,
                    run,
                    ensemble,
                    extra_predictors: extras.iter().map(|x| (x[v] * 1000.0).round() / 1000.0).collect(),
                    persistence: [obs[init_hour], obs[init_hour + 1], obs[init_hour + 2]],
                    observation: obs[v],
                    era: era_idx,
                });
                truth.push(TruthRow {
                    station_id: station_id.clone(),
                    init_time,
                    lead,
                    run,
                    location: dist.location,
                    scale: dist.scale,
                    probabilities: cuts.iter().map(|&c| dist.sf(c)).collect(),
                });
            }
        }
    }
    (cases, truth)
}

/// Generates the archive in memory; deterministic per seed.
pub fn generate_archive(config: &ScenarioConfig) -> Result<GeneratedArchive> {
    config.validate()?;
    let manifest = config.manifest();
    let parts: Vec<(Vec<ForecastCase>, Vec<TruthRow>)> = (0..config.stations)
        .into_par_iter()
        .map(|s| station_cases(config, &manifest, s))
        .collect();
    let mut cases = Vec::new();
    let mut truth = Vec::new();
    for (c, t) in parts {
        cases.extend(c);
        truth.extend(t);
    }
    Ok(GeneratedArchive {
        config: config.clone(),
        dataset: Dataset::new(manifest, cases)?,
        truth,
    })
}

pub const ARCHIVE_FILE: &str = "archive.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const TRUTH_FILE: &str = "truth.csv";
pub const SCENARIO_FILE: &str = "scenario.json";

impl GeneratedArchive {
    /// Writes archive CSV, manifest, truth table and the scenario config.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.dataset.write_archive(dir.join(ARCHIVE_FILE))?;
        self.dataset.manifest.save(dir.join(MANIFEST_FILE))?;
        write_truth(dir.join(TRUTH_FILE), &self.truth, &self.config.thresholds)?;
        let path = dir.join(SCENARIO_FILE);
        fs::write(&path, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

pub fn write_truth(path: impl AsRef<Path>, rows: &[TruthRow], thresholds: &ThresholdSet) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let mut header: Vec<String> = ["station_id", "init_time", "lead_h", "run", "location", "scale"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(thresholds.as_slice().iter().map(|t| format!("p_{t}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.station_id.clone(),
            r.init_time.to_string(),
            r.lead.to_string(),
            r.run.to_string(),
            r.location.to_string(),
            r.scale.to_string(),
        ];
        rec.extend(r.probabilities.iter().map(|p| p.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_truth(path: impl AsRef<Path>) -> Result<Vec<TruthRow>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(std::io::BufReader::new(file));
    let width = rdr.headers()?.len();
    if width < 7 {
        return Err(Error::MissingColumn("p_<threshold>".into()));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("truth table field '{}': {e}", &rec[i])))
        };
        rows.push(TruthRow {
            station_id: rec[0].to_string(),
            init_time: num(1)? as i64,
            lead: num(2)? as u32,
            run: num(3)? as u32,
            location: num(4)?,
            scale: num(5)?,
            probabilities: (6..width).map(num).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

type CaseId = (String, i64, u32, u32);

fn case_id(station: &str, init_time: i64, lead: u32, run: u32) -> CaseId {
    (station.to_string(), init_time, lead, run)
}

/// Truth probabilities for `cases`, looked up by key.
pub fn truth_for<'a>(truth: &'a [TruthRow], cases: &[&ForecastCase]) -> Result<Vec<&'a TruthRow>> {
    let index: HashMap<CaseId, &TruthRow> = truth
        .iter()
        .map(|t| (case_id(&t.station_id, t.init_time, t.lead, t.run), t))
        .collect();
    cases
        .iter()
        .map(|c| {
            index
                .get(&case_id(&c.station_id, c.init_time, c.lead, c.run))
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("no truth row for {}", c.key())))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesScore {
    pub lead: u32,
    pub n: usize,
    /// Brier score of the true probabilities, per threshold.
    pub brier: Vec<f64>,
    pub mean_brier: f64,
    pub crps: f64,
}

/// Scores of the true predictive distribution against the recorded
/// observations, per lead time. Cases without an observation are skipped.
pub fn bayes_scores(truth: &[TruthRow], cases: &[&ForecastCase], thresholds: &ThresholdSet) -> Result<Vec<BayesScore>> {
    let rows = truth_for(truth, cases)?;
    let k = thresholds.len();
    let mut acc: std::collections::BTreeMap<u32, (usize, Vec<f64>, f64)> = Default::default();
    for (c, t) in cases.iter().zip(rows) {
        let Some(y) = c.observation else { continue };
        if t.probabilities.len() != k {
            return Err(Error::FeatureLength {
                expected: k,
                found: t.probabilities.len(),
            });
        }
        let e = acc.entry(c.lead).or_insert_with(|| (0, vec![0.0; k], 0.0));
        e.0 += 1;
        for (j, &thr) in thresholds.as_slice().iter().enumerate() {
            let o = if y > thr { 1.0 } else { 0.0 };
            e.1[j] += (t.probabilities[j] - o).powi(2);
        }
        e.2 += t.distribution().crps(y);
    }
    Ok(acc
        .into_iter()
        .map(|(lead, (n, bs, crps))| {
            let brier: Vec<f64> = bs.iter().map(|v| v / n as f64).collect();
            BayesScore {
                lead,
                n,
                mean_brier: brier.iter().sum::<f64>() / k as f64,
                brier,
                crps: crps / n as f64,
            }
        })
        .collect())
}
