//! Core data types shared by every method: stations, model eras, forecast
//! cases, threshold sets, and the archive container with its CSV/manifest I/O.
//!
//! Times are UTC epoch seconds. A run is identified by its hour of day.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLDS: [f64; 8] = [25.0, 27.0, 33.0, 40.0, 47.0, 55.0, 63.0, 75.0];
pub const DEFAULT_ENSEMBLE_SIZE: usize = 20;
pub const MANIFEST_VERSION: u32 = 1;
pub const SECONDS_PER_HOUR: i64 = 3600;
pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    pub latitude: f64,
    pub longitude: f64,
    pub height: f64,
    /// Dense 0..S-1 enumeration; assigned from manifest order.
    #[serde(default)]
    pub embedding_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEra {
    pub name: String,
    /// First init time (epoch seconds) belonging to this era.
    pub start: i64,
    /// Name of the binary predictor that switches on at `start`. The first
    /// era has no flag of its own.
    pub flag_name: String,
}

/// Strictly increasing list of exceedance thresholds in kt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ThresholdSet(Vec<f64>);

impl ThresholdSet {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::InvalidArgument("threshold set is empty".into()));
        }
        if thresholds.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("non-finite threshold".into()));
        }
        if thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("thresholds must be strictly increasing".into()));
        }
        Ok(ThresholdSet(thresholds))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index_of(&self, threshold: f64) -> Option<usize> {
        self.0.iter().position(|&t| t == threshold)
    }
}

impl Default for ThresholdSet {
    fn default() -> Self {
        ThresholdSet(DEFAULT_THRESHOLDS.to_vec())
    }
}

impl TryFrom<Vec<f64>> for ThresholdSet {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        ThresholdSet::new(v)
    }
}

impl From<ThresholdSet> for Vec<f64> {
    fn from(t: ThresholdSet) -> Self {
        t.0
    }
}

impl std::str::FromStr for ThresholdSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let values = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidArgument(format!("bad threshold `{p}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        ThresholdSet::new(values)
    }
}

/// Exceedance probabilities aligned with a [`ThresholdSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityForecast {
    pub probabilities: Vec<f64>,
}

impl ProbabilityForecast {
    pub fn new(probabilities: Vec<f64>) -> Self {
        ProbabilityForecast { probabilities }
    }

    pub fn is_nonincreasing(&self) -> bool {
        self.probabilities.windows(2).all(|w| w[1] <= w[0])
    }

    /// Number of adjacent threshold pairs where the probability increases,
    /// and the largest such increase.
    pub fn monotonicity_violations(&self) -> (usize, f64) {
        self.probabilities
            .windows(2)
            .filter(|w| w[1] > w[0])
            .fold((0, 0.0), |(n, m), w| (n + 1, f64::max(m, w[1] - w[0])))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub format_version: u32,
    pub units: String,
    pub ensemble_size: usize,
    pub runs: Vec<u32>,
    pub lead_times: Vec<u32>,
    pub thresholds: ThresholdSet,
    /// Names of the extra predictor columns, in archive order.
    #[serde(default)]
    pub predictors: Vec<String>,
    pub stations: Vec<Station>,
    pub eras: Vec<ModelEra>,
}

impl ArchiveManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut manifest: ArchiveManifest = toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        manifest.validate()?;
        for (i, s) in manifest.stations.iter_mut().enumerate() {
            s.embedding_index = i;
        }
        Ok(manifest)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Manifest(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::FormatVersion {
                expected: MANIFEST_VERSION,
                found: self.format_version,
            });
        }
        if self.units != "kt" {
            return Err(Error::UnitMismatch {
                expected: "kt".into(),
                found: self.units.clone(),
            });
        }
        if self.ensemble_size == 0 {
            return Err(Error::Manifest("ensemble_size must be positive".into()));
        }
        if self.eras.is_empty() {
            return Err(Error::Manifest("at least one era is required".into()));
        }
        if self.eras.windows(2).any(|w| w[0].start >= w[1].start) {
            return Err(Error::Manifest("eras must be strictly ordered by start".into()));
        }
        let mut ids = HashSet::new();
        for s in &self.stations {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate station id `{}`", s.id)));
            }
        }
        if self.runs.iter().any(|&r| r >= 24) {
            return Err(Error::Manifest("run hours must be in 0..24".into()));
        }
        Ok(())
    }

    pub fn station_index(&self, id: &str) -> Option<usize> {
        self.stations.iter().position(|s| s.id == id)
    }

    /// Era containing `init_time`; times before the first era map to era 0.
    pub fn era_index(&self, init_time: i64) -> usize {
        self.eras.iter().rposition(|e| e.start <= init_time).unwrap_or(0)
    }

    /// Names of the binary era predictors, one per model change.
    pub fn era_flag_names(&self) -> Vec<String> {
        self.eras[1..].iter().map(|e| e.flag_name.clone()).collect()
    }

    pub fn era_flags(&self, init_time: i64) -> Vec<f64> {
        self.eras[1..]
            .iter()
            .map(|e| if init_time >= e.start { 1.0 } else { 0.0 })
            .collect()
    }

    /// Start of the most recent era.
    pub fn last_change(&self) -> i64 {
        self.eras.last().map(|e| e.start).unwrap_or(i64::MIN)
    }

    pub fn member_columns(&self) -> Vec<String> {
        (1..=self.ensemble_size).map(|i| format!("m{i:02}")).collect()
    }

    pub fn header(&self) -> Vec<String> {
        let mut cols: Vec<String> = ["station_id", "init_time", "lead_h", "run"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        cols.extend(self.member_columns());
        cols.extend(["obs", "pers0", "pers1", "pers2"].iter().map(|s| s.to_string()));
        cols.extend(self.predictors.iter().cloned());
        cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastCase {
    pub station_id: String,
    pub station_index: usize,
    pub init_time: i64,
    pub lead: u32,
    pub run: u32,
    pub ensemble: Vec<f64>,
    pub extra_predictors: Vec<f64>,
    /// Observations at init +0 h, +1 h, +2 h.
    pub persistence: [Option<f64>; 3],
    pub observation: Option<f64>,
    pub era: usize,
}

impl ForecastCase {
    pub fn ensemble_mean(&self) -> f64 {
        self.ensemble.iter().sum::<f64>() / self.ensemble.len() as f64
    }

    /// Sample standard deviation (n - 1 denominator); zero for one member.
    pub fn ensemble_sd(&self) -> f64 {
        let n = self.ensemble.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.ensemble_mean();
        let ss: f64 = self.ensemble.iter().map(|x| (x - m) * (x - m)).sum();
        (ss / (n - 1) as f64).sqrt()
    }

    pub fn valid_time(&self) -> i64 {
        self.init_time + self.lead as i64 * SECONDS_PER_HOUR
    }

    pub fn valid_hour(&self) -> u32 {
        (self.run + self.lead) % 24
    }

    /// Day index of the initialization, used as the bootstrap block.
    pub fn init_day(&self) -> i64 {
        self.init_time.div_euclid(SECONDS_PER_DAY)
    }

    pub fn key(&self) -> ModelKey {
        ModelKey {
            station: self.station_id.clone(),
            lead: self.lead,
            run: self.run,
        }
    }
}

/// Identifier for a local (station, lead time, run) model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelKey {
    pub station: String,
    pub lead: u32,
    pub run: u32,
}

impl std::fmt::Display for ModelKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/lead{}/run{:02}", self.station, self.lead, self.run)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowRejection {
    /// 1-based data row number (header excluded).
    pub row: usize,
    pub reason: String,
}

/// Immutable archive of forecast cases with its manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: ArchiveManifest,
    pub cases: Vec<ForecastCase>,
}

#[derive(Debug)]
pub struct LoadReport {
    pub dataset: Dataset,
    pub rejected: Vec<RowRejection>,
}

impl Dataset {
    pub fn new(manifest: ArchiveManifest, cases: Vec<ForecastCase>) -> Result<Self> {
        let mut keys = HashSet::with_capacity(cases.len());
        for c in &cases {
            if !keys.insert((c.station_index, c.init_time, c.lead)) {
                return Err(Error::DuplicateKey {
                    station: c.station_id.clone(),
                    init_time: c.init_time,
                    lead: c.lead,
                });
            }
        }
        Ok(Dataset { manifest, cases })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn refs(&self) -> Vec<&ForecastCase> {
        self.cases.iter().collect()
    }

    pub fn select<'a>(&'a self, pred: impl Fn(&ForecastCase) -> bool) -> Vec<&'a ForecastCase> {
        self.cases.iter().filter(|c| pred(c)).collect()
    }

    pub fn write_archive(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        w.write_record(self.manifest.header())?;
        let mut row: Vec<String> = Vec::new();
        for c in &self.cases {
            row.clear();
            row.push(c.station_id.clone());
            row.push(c.init_time.to_string());
            row.push(c.lead.to_string());
            row.push(c.run.to_string());
            row.extend(c.ensemble.iter().map(|v| v.to_string()));
            row.push(opt_to_string(c.observation));
            row.extend(c.persistence.iter().map(|p| opt_to_string(*p)));
            row.extend(c.extra_predictors.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn opt_to_string(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Reads an archive CSV. Rows violating field invariants are rejected and
/// reported; structural problems (missing column, duplicate key) are errors.
pub fn load_archive(path: impl AsRef<Path>, manifest: &ArchiveManifest) -> Result<LoadReport> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_archive(std::io::BufReader::new(file), manifest)
}

pub fn read_archive(reader: impl std::io::Read, manifest: &ArchiveManifest) -> Result<LoadReport> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let c_station = column("station_id")?;
    let c_init = column("init_time")?;
    let c_lead = column("lead_h")?;
    let c_run = column("run")?;
    let c_members = manifest
        .member_columns()
        .iter()
        .map(|m| column(m))
        .collect::<Result<Vec<_>>>()?;
    let c_obs = column("obs")?;
    let c_pers = [column("pers0")?, column("pers1")?, column("pers2")?];
    let c_extra = manifest
        .predictors
        .iter()
        .map(|p| column(p))
        .collect::<Result<Vec<_>>>()?;

    let mut cases = Vec::new();
    let mut rejected = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                rejected.push(RowRejection {
                    row,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let parsed = (|| -> std::result::Result<ForecastCase, String> {
            let field = |idx: usize| rec.get(idx).unwrap_or("").trim();
            let station_id = field(c_station).to_string();
            let station_index = manifest
                .station_index(&station_id)
                .ok_or_else(|| format!("unknown station `{station_id}`"))?;
            let init_time: i64 = field(c_init)
                .parse()
                .map_err(|_| format!("bad init_time `{}`", field(c_init)))?;
            let lead: u32 = field(c_lead)
                .parse()
                .map_err(|_| format!("bad lead_h `{}`", field(c_lead)))?;
            let run: u32 = field(c_run)
                .parse()
                .map_err(|_| format!("bad run `{}`", field(c_run)))?;
            if !manifest.lead_times.contains(&lead) {
                return Err(format!("lead {lead} not in lead-time grid"));
            }
            if !manifest.runs.contains(&run) {
                return Err(format!("run {run} not in manifest runs"));
            }
            let hour = init_time.rem_euclid(SECONDS_PER_DAY) / SECONDS_PER_HOUR;
            if hour != run as i64 || init_time.rem_euclid(SECONDS_PER_HOUR) != 0 {
                return Err(format!("init_time {init_time} inconsistent with run {run}"));
            }
            let ensemble = c_members
                .iter()
                .map(|&c| required_nonneg(field(c), "ensemble member"))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let observation = optional_nonneg(field(c_obs), "obs")?;
            let mut persistence = [None; 3];
            for (k, &c) in c_pers.iter().enumerate() {
                persistence[k] = optional_nonneg(field(c), "persistence")?;
            }
            let extra_predictors = c_extra
                .iter()
                .map(|&c| {
                    field(c)
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| format!("bad predictor value `{}`", field(c)))
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok(ForecastCase {
                station_id,
                station_index,
                init_time,
                lead,
                run,
                ensemble,
                extra_predictors,
                persistence,
                observation,
                era: manifest.era_index(init_time),
            })
        })();
        match parsed {
            Ok(c) => cases.push(c),
            Err(reason) => rejected.push(RowRejection { row, reason }),
        }
    }
    if !rejected.is_empty() {
        log::warn!("{} archive rows rejected", rejected.len());
    }
    let dataset = Dataset::new(manifest.clone(), cases)?;
    Ok(LoadReport { dataset, rejected })
}

fn required_nonneg(s: &str, what: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("bad {what} `{s}`"))?;
    if !v.is_finite() || v < 0.0 {
        return Err(format!("invalid {what} {v}: must be finite and nonnegative"));
    }
    Ok(v)
}

fn optional_nonneg(s: &str, what: &str) -> std::result::Result<Option<f64>, String> {
    if s.is_empty() {
        Ok(None)
    } else {
        required_nonneg(s, what).map(Some)
    }
}

/// Random disjoint split into (training, validation). The validation share is
/// `round(fraction * n)` cases drawn uniformly without stratification.
pub fn split_train_validation<'a>(
    cases: &[&'a ForecastCase],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<&'a ForecastCase>, Vec<&'a ForecastCase>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction {fraction} outside (0, 1)"
        )));
    }
    if cases.is_empty() {
        return Err(Error::InsufficientData {
            context: "train/validation split".into(),
            found: 0,
            required: 1,
        });
    }
    let mut order: Vec<usize> = (0..cases.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_val = ((cases.len() as f64) * fraction).round() as usize;
    let mut is_val = vec![false; cases.len()];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let mut train = Vec::with_capacity(cases.len() - n_val);
    let mut val = Vec::with_capacity(n_val);
    for (i, c) in cases.iter().enumerate() {
        if is_val[i] {
            val.push(*c);
        } else {
            train.push(*c);
        }
    }
    Ok((train, val))
}
