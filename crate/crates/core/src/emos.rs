//! Local EMOS with a zero-truncated logistic forecast distribution and its
//! gradient-boosted extension EMOS-GB. Both are fitted per (station, lead,
//! run) key by minimizing the mean CRPS.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{sigmoid, softplus, softplus_inv, TruncatedLogistic};
use crate::domain::{split_train_validation, ArchiveManifest, ForecastCase, ModelKey};
use crate::error::{Error, Result};
use crate::features::{FeatureRecipe, FittedRecipe};
use crate::optim::{bfgs, BfgsOptions};

pub const MODEL_VERSION: u32 = 1;
/// Additive floor of the softplus scale link.
pub const MIN_SCALE: f64 = 1e-6;
/// Scale used when a slice has no target variability.
pub const DEGENERATE_SCALE: f64 = 0.01;
/// Validation improvement needed to reset the boosting patience counter.
pub const MIN_RELATIVE_GAIN: f64 = 1e-5;

#[inline]
pub fn scale_link(eta: f64) -> f64 {
    softplus(eta) + MIN_SCALE
}

#[inline]
fn scale_link_inv(scale: f64) -> f64 {
    softplus_inv((scale - MIN_SCALE).max(1e-12))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingWindow {
    /// Only cases initialized since the most recent model change.
    PostLastChange,
    /// The whole archive period; era flags carry the model changes.
    FullWithFlags,
}

/// Restricts `cases` to the training window. The "last change" is the latest
/// era start not after the newest training case.
pub fn select_window<'a>(
    cases: &[&'a ForecastCase],
    manifest: &ArchiveManifest,
    window: TrainingWindow,
) -> Vec<&'a ForecastCase> {
    match window {
        TrainingWindow::FullWithFlags => cases.to_vec(),
        TrainingWindow::PostLastChange => {
            let newest = cases.iter().map(|c| c.init_time).max().unwrap_or(i64::MIN);
            let start = manifest
                .eras
                .iter()
                .map(|e| e.start)
                .filter(|&s| s <= newest)
                .max()
                .unwrap_or(i64::MIN);
            cases.iter().copied().filter(|c| c.init_time >= start).collect()
        }
    }
}

pub(crate) fn group_by_key<'a>(cases: &[&'a ForecastCase]) -> BTreeMap<ModelKey, Vec<&'a ForecastCase>> {
    let mut groups: BTreeMap<ModelKey, Vec<&ForecastCase>> = BTreeMap::new();
    for c in cases {
        if c.observation.is_some() {
            groups.entry(c.key()).or_default().push(c);
        }
    }
    groups
}

// ---- classic EMOS --------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmosConfig {
    pub min_cases: usize,
    pub window: TrainingWindow,
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for EmosConfig {
    fn default() -> Self {
        EmosConfig {
            min_cases: 100,
            window: TrainingWindow::PostLastChange,
            rel_tol: 1e-6,
            max_iter: 300,
        }
    }
}

/// location = a + b * ensemble mean; scale = softplus(c + d * ensemble sd).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmosParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    /// Slice had no target variability; parameters encode climatology.
    pub fallback: bool,
    pub n: usize,
    pub train_crps: f64,
}

impl EmosParams {
    pub fn distribution(&self, mean: f64, sd: f64) -> TruncatedLogistic {
        TruncatedLogistic {
            location: self.a + self.b * mean,
            scale: scale_link(self.c + self.d * sd),
            lower_bound: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmosRecord {
    pub key: ModelKey,
    pub params: EmosParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmosModel {
    pub format_version: u32,
    pub config: EmosConfig,
    pub records: Vec<EmosRecord>,
    #[serde(skip)]
    index: BTreeMap<ModelKey, usize>,
}

impl EmosModel {
    fn new(config: EmosConfig, records: Vec<EmosRecord>) -> Self {
        let index = records.iter().enumerate().map(|(i, r)| (r.key.clone(), i)).collect();
        EmosModel {
            format_version: MODEL_VERSION,
            config,
            records,
            index,
        }
    }

    pub fn params(&self, key: &ModelKey) -> Option<&EmosParams> {
        self.index.get(key).map(|&i| &self.records[i].params)
    }

    pub fn predict(&self, case: &ForecastCase) -> Result<TruncatedLogistic> {
        let key = case.key();
        let p = self.params(&key).ok_or_else(|| Error::NoModel(key.to_string()))?;
        Ok(p.distribution(case.ensemble_mean(), case.ensemble_sd()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: EmosModel = serde_json::from_str(text)?;
        if m.format_version != MODEL_VERSION {
            return Err(Error::FormatVersion {
                expected: MODEL_VERSION,
                found: m.format_version,
            });
        }
        Ok(EmosModel::new(m.config, m.records))
    }
}

/// Mean CRPS of EMOS parameters `theta = (a, b, c, d)` and its gradient.
pub fn emos_objective(theta: &[f64], rows: &[(f64, f64, f64)]) -> (f64, Vec<f64>) {
    let (a, b, c, d) = (theta[0], theta[1], theta[2], theta[3]);
    let mut total = 0.0;
    let mut g = vec![0.0; 4];
    for &(m, s, y) in rows {
        let eta = c + d * s;
        let dist = TruncatedLogistic {
            location: a + b * m,
            scale: scale_link(eta),
            lower_bound: 0.0,
        };
        let cg = dist.crps_grad(y);
        total += cg.crps;
        let ds = cg.d_scale * sigmoid(eta);
        g[0] += cg.d_location;
        g[1] += cg.d_location * m;
        g[2] += ds;
        g[3] += ds * s;
    }
    let n = rows.len() as f64;
    g.iter_mut().for_each(|v| *v /= n);
    (total / n, g)
}

fn fit_emos_slice(rows: &[(f64, f64, f64)], config: &EmosConfig) -> EmosParams {
    let n = rows.len();
    let ys: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let y_min = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let y_max = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if y_max - y_min <= 1e-9 * (1.0 + y_max.abs()) {
        let params = EmosParams {
            a: y_min,
            b: 0.0,
            c: scale_link_inv(DEGENERATE_SCALE),
            d: 0.0,
            fallback: true,
            n,
            train_crps: 0.0,
        };
        let crps = rows
            .iter()
            .map(|&(m, s, y)| params.distribution(m, s).crps(y))
            .sum::<f64>()
            / n as f64;
        return EmosParams {
            train_crps: crps,
            ..params
        };
    }
    let resid: Vec<f64> = rows.iter().map(|&(m, _, y)| y - m).collect();
    let rm = resid.iter().sum::<f64>() / n as f64;
    let rsd = (resid.iter().map(|r| (r - rm).powi(2)).sum::<f64>() / n as f64).sqrt();
    let x0 = [0.0, 1.0, scale_link_inv(rsd.max(1e-3)), 0.0];
    let opts = BfgsOptions {
        rel_tol: config.rel_tol,
        max_iter: config.max_iter,
    };
    let best = bfgs(|t| emos_objective(t, rows), &x0, opts);
    EmosParams {
        a: best.x[0],
        b: best.x[1],
        c: best.x[2],
        d: best.x[3],
        fallback: false,
        n,
        train_crps: best.value,
    }
}

/// Fits one EMOS model per (station, lead, run) key found in `train` after
/// applying the configured training window.
pub fn fit_emos(train: &[&ForecastCase], manifest: &ArchiveManifest, config: &EmosConfig) -> Result<EmosModel> {
    let window = select_window(train, manifest, config.window);
    let groups = group_by_key(&window);
    if groups.is_empty() {
        return Err(Error::InsufficientData {
            context: "EMOS training".into(),
            found: 0,
            required: config.min_cases,
        });
    }
    for (key, cases) in &groups {
        if cases.len() < config.min_cases {
            return Err(Error::InsufficientData {
                context: format!("EMOS key {key}"),
                found: cases.len(),
                required: config.min_cases,
            });
        }
    }
    let groups: Vec<(ModelKey, Vec<&ForecastCase>)> = groups.into_iter().collect();
    let records: Vec<EmosRecord> = groups
        .par_iter()
        .map(|(key, cases)| {
            let rows: Vec<(f64, f64, f64)> = cases
                .iter()
                .map(|c| (c.ensemble_mean(), c.ensemble_sd(), c.observation.unwrap_or(0.0)))
                .collect();
            let params = fit_emos_slice(&rows, config);
            if params.fallback {
                log::warn!("EMOS key {key}: degenerate targets, climatological fallback");
            }
            EmosRecord {
                key: key.clone(),
                params,
            }
        })
        .collect();
    Ok(EmosModel::new(config.clone(), records))
}

// ---- EMOS-GB ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostConfig {
    pub step_size: f64,
    pub max_iterations: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    /// Refit on training plus validation cases for the selected number of
    /// iterations.
    pub refit: bool,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig {
            step_size: 0.1,
            max_iterations: 1000,
            patience: 30,
            validation_fraction: 0.2,
            seed: 1,
            refit: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmosGbConfig {
    pub recipe: FeatureRecipe,
    pub boost: BoostConfig,
    pub min_cases: usize,
    pub window: TrainingWindow,
}

impl Default for EmosGbConfig {
    fn default() -> Self {
        EmosGbConfig {
            recipe: FeatureRecipe {
                use_era_flags: true,
                ..Default::default()
            },
            boost: BoostConfig::default(),
            min_cases: 500,
            window: TrainingWindow::FullWithFlags,
        }
    }
}

/// Additive predictors over standardized covariates for the response divided
/// by `response_scale`. Index 0 is the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedTlogis {
    pub response_scale: f64,
    pub location: Vec<f64>,
    pub scale: Vec<f64>,
    pub iterations: usize,
    pub best_iteration: usize,
    pub train_curve: Vec<f64>,
    pub validation_curve: Vec<f64>,
}

impl BoostedTlogis {
    fn linear(coefs: &[f64], x: &[f64]) -> f64 {
        coefs[0] + coefs[1..].iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }

    pub fn distribution(&self, x: &[f64]) -> TruncatedLogistic {
        TruncatedLogistic {
            location: self.response_scale * Self::linear(&self.location, x),
            scale: self.response_scale * scale_link(Self::linear(&self.scale, x)),
            lower_bound: 0.0,
        }
    }
}

fn mean_crps(loc: &[f64], eta: &[f64], y: &[f64]) -> f64 {
    let total: f64 = (0..y.len())
        .map(|i| {
            TruncatedLogistic {
                location: loc[i],
                scale: scale_link(eta[i]),
                lower_bound: 0.0,
            }
            .crps(y[i])
        })
        .sum();
    total / y.len() as f64
}

/// Intercept-only CRPS fit: the climatological truncated logistic.
pub fn climatological_fit(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let m = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    if sd <= 1e-9 * (1.0 + m.abs()) {
        return (m, scale_link_inv(DEGENERATE_SCALE));
    }
    let obj = |t: &[f64]| {
        let mut g = vec![0.0; 2];
        let mut total = 0.0;
        for &v in y {
            let cg = TruncatedLogistic {
                location: t[0],
                scale: scale_link(t[1]),
                lower_bound: 0.0,
            }
            .crps_grad(v);
            total += cg.crps;
            g[0] += cg.d_location;
            g[1] += cg.d_scale * sigmoid(t[1]);
        }
        g.iter_mut().for_each(|x| *x /= n);
        (total / n, g)
    };
    let r = bfgs(
        obj,
        &[m, scale_link_inv(sd * 3f64.sqrt() / std::f64::consts::PI)],
        BfgsOptions::default(),
    );
    (r.x[0], r.x[1])
}

/// Component-wise gradient boosting of location and scale predictors on
/// standardized covariates `x` (columns), minimizing the mean CRPS. Each
/// iteration moves both predictors along the single covariate (or the
/// intercept) that best fits the negative gradient. Early stopping tracks
/// the validation CRPS; the best iteration is returned.
pub fn boost_tlogis(
    x: &[Vec<f64>],
    y: &[f64],
    x_val: &[Vec<f64>],
    y_val: &[f64],
    config: &BoostConfig,
) -> BoostedTlogis {
    let p = x.len();
    let n = y.len();
    // CRPS is scale equivariant; boosting on y / sd(y) keeps step sizes
    // comparable across climates.
    let response_scale = {
        let m = y.iter().sum::<f64>() / n.max(1) as f64;
        let sd = (y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n.max(1) as f64).sqrt();
        if sd > 1e-9 * (1.0 + m.abs()) {
            sd
        } else {
            1.0
        }
    };
    let y: Vec<f64> = y.iter().map(|v| v / response_scale).collect();
    let y_val: Vec<f64> = y_val.iter().map(|v| v / response_scale).collect();
    let (y, y_val) = (&y[..], &y_val[..]);
    let (mu0, eta0) = climatological_fit(y);
    let mut loc_coefs = vec![0.0; p + 1];
    let mut scale_coefs = vec![0.0; p + 1];
    loc_coefs[0] = mu0;
    scale_coefs[0] = eta0;
    let mut loc = vec![mu0; n];
    let mut eta = vec![eta0; n];
    let mut loc_val = vec![mu0; y_val.len()];
    let mut eta_val = vec![eta0; y_val.len()];
    let col_ss: Vec<f64> = x.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>()).collect();

    let mut train_loss = mean_crps(&loc, &eta, y);
    let mut train_curve = vec![train_loss];
    let mut validation_curve = Vec::new();
    let has_val = !y_val.is_empty();
    let mut best_val = if has_val {
        mean_crps(&loc_val, &eta_val, y_val)
    } else {
        train_loss
    };
    if has_val {
        validation_curve.push(best_val);
    }
    let mut best = (loc_coefs.clone(), scale_coefs.clone(), 0usize);
    let mut since_best = 0;
    let mut iterations = 0;

    let mut g_loc = vec![0.0; n];
    let mut g_eta = vec![0.0; n];
    for iter in 1..=config.max_iterations {
        for i in 0..n {
            let cg = TruncatedLogistic {
                location: loc[i],
                scale: scale_link(eta[i]),
                lower_bound: 0.0,
            }
            .crps_grad(y[i]);
            g_loc[i] = -cg.d_location;
            g_eta[i] = -cg.d_scale * sigmoid(eta[i]);
        }
        // least-squares fit of the negative gradient on each candidate column
        let best_column = |g: &[f64]| -> (usize, f64) {
            let mean = g.iter().sum::<f64>() / n as f64;
            let mut choice = (0usize, mean, mean * mean * n as f64);
            for j in 0..p {
                if col_ss[j] <= 0.0 {
                    continue;
                }
                let xg: f64 = x[j].iter().zip(g).map(|(a, b)| a * b).sum();
                let coef = xg / col_ss[j];
                let gain = coef * xg;
                if gain > choice.2 {
                    choice = (j + 1, coef, gain);
                }
            }
            (choice.0, choice.1)
        };
        let (jl, cl) = best_column(&g_loc);
        let (js, cs) = best_column(&g_eta);

        let column = |j: usize, i: usize, cols: &[Vec<f64>]| if j == 0 { 1.0 } else { cols[j - 1][i] };
        let mut nu = config.step_size;
        let mut accepted = false;
        for _ in 0..10 {
            let trial_loc: Vec<f64> = (0..n).map(|i| loc[i] + nu * cl * column(jl, i, x)).collect();
            let trial_eta: Vec<f64> = (0..n).map(|i| eta[i] + nu * cs * column(js, i, x)).collect();
            let loss = mean_crps(&trial_loc, &trial_eta, y);
            if loss <= train_loss {
                loc = trial_loc;
                eta = trial_eta;
                train_loss = loss;
                accepted = true;
                break;
            }
            nu *= 0.5;
        }
        if !accepted {
            break;
        }
        iterations = iter;
        loc_coefs[jl] += nu * cl;
        scale_coefs[js] += nu * cs;
        train_curve.push(train_loss);
        if has_val {
            for i in 0..y_val.len() {
                loc_val[i] += nu * cl * column(jl, i, x_val);
                eta_val[i] += nu * cs * column(js, i, x_val);
            }
            let v = mean_crps(&loc_val, &eta_val, y_val);
            validation_curve.push(v);
            if v < best_val * (1.0 - MIN_RELATIVE_GAIN) {
                best_val = v;
                best = (loc_coefs.clone(), scale_coefs.clone(), iter);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    break;
                }
            }
        } else {
            best = (loc_coefs.clone(), scale_coefs.clone(), iter);
        }
    }
    BoostedTlogis {
        response_scale,
        location: best.0,
        scale: best.1,
        iterations,
        best_iteration: best.2,
        train_curve,
        validation_curve,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmosGbRecord {
    pub key: ModelKey,
    pub covariate_means: Vec<f64>,
    /// Zero marks a covariate that was constant for this key.
    pub covariate_sds: Vec<f64>,
    pub model: BoostedTlogis,
    pub n: usize,
}

impl EmosGbRecord {
    fn standardize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.covariate_means.iter().zip(&self.covariate_sds))
            .map(|(v, (m, s))| if *s > 0.0 { (v - m) / s } else { 0.0 })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmosGbModel {
    pub format_version: u32,
    pub config: EmosGbConfig,
    pub recipe: FittedRecipe,
    pub records: Vec<EmosGbRecord>,
    #[serde(skip)]
    index: BTreeMap<ModelKey, usize>,
}

impl EmosGbModel {
    fn new(config: EmosGbConfig, recipe: FittedRecipe, records: Vec<EmosGbRecord>) -> Self {
        let index = records.iter().enumerate().map(|(i, r)| (r.key.clone(), i)).collect();
        EmosGbModel {
            format_version: MODEL_VERSION,
            config,
            recipe,
            records,
            index,
        }
    }

    pub fn record(&self, key: &ModelKey) -> Option<&EmosGbRecord> {
        self.index.get(key).map(|&i| &self.records[i])
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.recipe.feature_names()
    }

    pub fn predict(&self, case: &ForecastCase) -> Result<TruncatedLogistic> {
        let key = case.key();
        let rec = self.record(&key).ok_or_else(|| Error::NoModel(key.to_string()))?;
        let raw = self.recipe.unscaled_features(case)?;
        Ok(rec.model.distribution(&rec.standardize(&raw)))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: EmosGbModel = serde_json::from_str(text)?;
        if m.format_version != MODEL_VERSION {
            return Err(Error::FormatVersion {
                expected: MODEL_VERSION,
                found: m.format_version,
            });
        }
        Ok(EmosGbModel::new(m.config, m.recipe, m.records))
    }
}

fn columns(rows: &[Vec<f64>], p: usize) -> Vec<Vec<f64>> {
    (0..p).map(|j| rows.iter().map(|r| r[j]).collect()).collect()
}

pub fn fit_emos_gb(train: &[&ForecastCase], manifest: &ArchiveManifest, config: &EmosGbConfig) -> Result<EmosGbModel> {
    let window = select_window(train, manifest, config.window);
    let usable: Vec<&ForecastCase> = window.iter().copied().filter(|c| config.recipe.accepts(c)).collect();
    let recipe = config.recipe.fit(manifest, &usable)?;
    let groups = group_by_key(&usable);
    if groups.is_empty() {
        return Err(Error::InsufficientData {
            context: "EMOS-GB training".into(),
            found: 0,
            required: config.min_cases,
        });
    }
    for (key, cases) in &groups {
        if cases.len() < config.min_cases {
            return Err(Error::InsufficientData {
                context: format!("EMOS-GB key {key}"),
                found: cases.len(),
                required: config.min_cases,
            });
        }
    }
    let p = recipe.len();
    let groups: Vec<(ModelKey, Vec<&ForecastCase>)> = groups.into_iter().collect();
    let records = groups
        .par_iter()
        .enumerate()
        .map(|(k, (key, cases))| -> Result<EmosGbRecord> {
            let (tr, va) = split_train_validation(
                cases,
                config.boost.validation_fraction,
                config.boost.seed.wrapping_add(k as u64),
            )?;
            let raw_tr: Vec<Vec<f64>> = tr.iter().map(|c| recipe.unscaled_features(c)).collect::<Result<_>>()?;
            let raw_va: Vec<Vec<f64>> = va.iter().map(|c| recipe.unscaled_features(c)).collect::<Result<_>>()?;
            let n = raw_tr.len() as f64;
            let mut means = vec![0.0; p];
            let mut sds = vec![0.0; p];
            for j in 0..p {
                let m = raw_tr.iter().map(|r| r[j]).sum::<f64>() / n;
                let sd = (raw_tr.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n).sqrt();
                means[j] = m;
                sds[j] = if sd > 1e-12 * (1.0 + m.abs()) { sd } else { 0.0 };
            }
            let mut rec = EmosGbRecord {
                key: key.clone(),
                covariate_means: means,
                covariate_sds: sds,
                model: BoostedTlogis {
                    response_scale: 1.0,
                    location: vec![],
                    scale: vec![],
                    iterations: 0,
                    best_iteration: 0,
                    train_curve: vec![],
                    validation_curve: vec![],
                },
                n: cases.len(),
            };
            let x_tr = columns(&raw_tr.iter().map(|r| rec.standardize(r)).collect::<Vec<_>>(), p);
            let x_va = columns(&raw_va.iter().map(|r| rec.standardize(r)).collect::<Vec<_>>(), p);
            let y_tr: Vec<f64> = tr.iter().map(|c| c.observation.unwrap_or(0.0)).collect();
            let y_va: Vec<f64> = va.iter().map(|c| c.observation.unwrap_or(0.0)).collect();
            let fit = boost_tlogis(&x_tr, &y_tr, &x_va, &y_va, &config.boost);
            rec.model = if config.boost.refit && !y_va.is_empty() && fit.best_iteration > 0 {
                let x_all: Vec<Vec<f64>> = x_tr.iter().zip(&x_va).map(|(a, b)| [&a[..], &b[..]].concat()).collect();
                let y_all = [&y_tr[..], &y_va[..]].concat();
                let full = BoostConfig {
                    max_iterations: fit.best_iteration,
                    ..config.boost.clone()
                };
                BoostedTlogis {
                    validation_curve: fit.validation_curve,
                    best_iteration: fit.best_iteration,
                    ..boost_tlogis(&x_all, &y_all, &[], &[], &full)
                }
            } else {
                fit
            };
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EmosGbModel::new(config.clone(), recipe, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::tests::manifest_fixture;
    use crate::domain::SECONDS_PER_DAY;
    use crate::optim::golden_section;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tlogis_draw(rng: &mut ChaCha8Rng, loc: f64, scale: f64) -> f64 {
        let d = TruncatedLogistic::new(loc, scale, 0.0).unwrap();
        d.quantile(rng.random_range(1e-12..1.0))
    }

    fn cases_from(rows: &[(Vec<f64>, f64)]) -> Vec<ForecastCase> {
        rows.iter()
            .enumerate()
            .map(|(i, (ens, y))| ForecastCase {
                station_id: "S001".into(),
                station_index: 0,
                init_time: i as i64 * SECONDS_PER_DAY,
                lead: 6,
                run: 0,
                ensemble: ens.clone(),
                extra_predictors: vec![0.0],
                persistence: [None; 3],
                observation: Some(*y),
                era: 0,
            })
            .collect()
    }

    fn full_window() -> EmosConfig {
        EmosConfig {
            window: TrainingWindow::FullWithFlags,
            ..Default::default()
        }
    }

    #[test]
    fn recovers_known_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<(Vec<f64>, f64)> = (0..5000)
            .map(|_| {
                let center = rng.random_range(1.0..40.0);
                let ens: Vec<f64> = (0..20).map(|_| center + rng.random_range(-2.0..2.0)).collect();
                let m = ens.iter().sum::<f64>() / 20.0;
                (ens, tlogis_draw(&mut rng, 2.0 + 0.9 * m, 0.5))
            })
            .collect();
        let cases = cases_from(&rows);
        let refs: Vec<&ForecastCase> = cases.iter().collect();
        let model = fit_emos(&refs, &manifest_fixture(), &full_window()).unwrap();
        let p = &model.records[0].params;
        assert!((p.a - 2.0).abs() < 0.05, "a = {}", p.a);
        assert!((p.b - 0.9).abs() < 0.05, "b = {}", p.b);
        // spread carries no signal here, so the scale is the constant 0.5
        let d = p.distribution(20.0, 1.15);
        assert!((d.scale - 0.5).abs() < 0.05, "{}", d.scale);
    }

    #[test]
    fn constant_bias_is_absorbed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<(Vec<f64>, f64)> = (0..300)
            .map(|_| {
                let ens: Vec<f64> = (0..20).map(|_| rng.random_range(5.0..25.0)).collect();
                let m = ens.iter().sum::<f64>() / 20.0;
                (ens, m + 5.0)
            })
            .collect();
        let cases = cases_from(&rows);
        let refs: Vec<&ForecastCase> = cases.iter().collect();
        let model = fit_emos(&refs, &manifest_fixture(), &full_window()).unwrap();
        for c in &cases[..20] {
            let d = model.predict(c).unwrap();
            assert!((d.location - (c.ensemble_mean() + 5.0)).abs() < 0.01);
            assert!(d.scale < 0.05, "scale {}", d.scale);
        }
    }

    #[test]
    fn beats_identity_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<(Vec<f64>, f64)> = (0..800)
            .map(|_| {
                let ens: Vec<f64> = (0..20).map(|_| rng.random_range(5.0..25.0)).collect();
                let m = ens.iter().sum::<f64>() / 20.0;
                (ens, tlogis_draw(&mut rng, 0.8 * m + 3.0, 2.0))
            })
            .collect();
        let cases = cases_from(&rows);
        let refs: Vec<&ForecastCase> = cases.iter().collect();
        let model = fit_emos(&refs, &manifest_fixture(), &full_window()).unwrap();
        // baseline a = 0, b = 1, d = 0 with the scale optimized on its own
        let crps_at = |scale: f64| {
            cases
                .iter()
                .map(|c| {
                    TruncatedLogistic::new(c.ensemble_mean(), scale, 0.0)
                        .unwrap()
                        .crps(c.observation.unwrap())
                })
                .sum::<f64>()
                / cases.len() as f64
        };
        let s = golden_section(crps_at, 0.01, 20.0, 1e-8);
        assert!(model.records[0].params.train_crps <= crps_at(s));
    }

    #[test]
    fn degenerate_slice_falls_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<(Vec<f64>, f64)> = (0..150)
            .map(|_| ((0..20).map(|_| rng.random_range(5.0..25.0)).collect(), 12.0))
            .collect();
        let cases = cases_from(&rows);
        let refs: Vec<&ForecastCase> = cases.iter().collect();
        let model = fit_emos(&refs, &manifest_fixture(), &full_window()).unwrap();
        let p = &model.records[0].params;
        assert!(p.fallback);
        let d = model.predict(&cases[0]).unwrap();
        assert_eq!(d.location, 12.0);
        assert!((d.scale - DEGENERATE_SCALE).abs() < 1e-9);
    }

    #[test]
    fn unseen_key_and_small_slice_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<(Vec<f64>, f64)> = (0..120)
            .map(|_| {
                (
                    (0..20).map(|_| rng.random_range(5.0..25.0)).collect(),
                    rng.random_range(0.0..30.0),
                )
            })
            .collect();
        let cases = cases_from(&rows);
        let refs: Vec<&ForecastCase> = cases.iter().collect();
        let model = fit_emos(&refs, &manifest_fixture(), &full_window()).unwrap();
        let mut other = cases[0].clone();
        other.station_id = "S999".into();
        assert!(matches!(model.predict(&other), Err(Error::NoModel(_))));
        assert!(matches!(
            fit_emos(&refs[..50], &manifest_fixture(), &full_window()),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn fit_is_deterministic_and_serializes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rows: Vec<(Vec<f64>, f64)> = (0..200)
            .map(|_| {
                (
                    (0..20).map(|_| rng.random_range(5.0..25.0)).collect(),
                    rng.random_range(0.0..30.0),
                )
            })
            .collect();
        let cases = cases_from(&rows);
        let refs: Vec<&ForecastCase> = cases.iter().collect();
        let a = fit_emos(&refs, &manifest_fixture(), &full_window()).unwrap();
        let b = fit_emos(&refs, &manifest_fixture(), &full_window()).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let back = EmosModel::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back.predict(&cases[3]).unwrap(), a.predict(&cases[3]).unwrap());
    }

    #[test]
    fn post_change_window_keeps_latest_era() {
        let m = manifest_fixture();
        let rows: Vec<(Vec<f64>, f64)> = (0..40).map(|_| (vec![1.0; 20], 1.0)).collect();
        let cases = cases_from(&rows);
        let refs: Vec<&ForecastCase> = cases.iter().collect();
        let w = select_window(&refs, &m, TrainingWindow::PostLastChange);
        assert_eq!(w.len(), 10);
        assert!(w.iter().all(|c| c.init_time >= 30 * SECONDS_PER_DAY));
        let w = select_window(&refs[..25], &m, TrainingWindow::PostLastChange);
        assert!(w.iter().all(|c| c.init_time >= 20 * SECONDS_PER_DAY));
    }

    // ---- boosting --------------------------------------------------------

    fn standardized_normal_columns(rng: &mut ChaCha8Rng, p: usize, n: usize) -> Vec<Vec<f64>> {
        use rand_distr::{Distribution, StandardNormal};
        (0..p)
            .map(|_| (0..n).map(|_| StandardNormal.sample(rng)).collect())
            .collect()
    }

    #[test]
    fn boosting_concentrates_on_the_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (p, n) = (8, 3000);
        let x = standardized_normal_columns(&mut rng, p, n);
        let y: Vec<f64> = (0..n)
            .map(|i| tlogis_draw(&mut rng, 20.0 + 3.0 * x[3][i], 1.5))
            .collect();
        let xv = standardized_normal_columns(&mut rng, p, 800);
        let yv: Vec<f64> = (0..800)
            .map(|i| tlogis_draw(&mut rng, 20.0 + 3.0 * xv[3][i], 1.5))
            .collect();
        let m = boost_tlogis(&x, &y, &xv, &yv, &BoostConfig::default());
        let l1: f64 = m.location[1..].iter().map(|c| c.abs()).sum();
        assert!(m.location[4].abs() >= 0.9 * l1, "{:?}", m.location);
        // training CRPS never increases
        assert!(m.train_curve.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_iterations_is_climatology() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = standardized_normal_columns(&mut rng, 3, 500);
        let y: Vec<f64> = (0..500).map(|_| tlogis_draw(&mut rng, 15.0, 3.0)).collect();
        let cfg = BoostConfig {
            max_iterations: 0,
            ..Default::default()
        };
        let m = boost_tlogis(&x, &y, &[], &[], &cfg);
        assert_eq!(&m.location[1..], &[0.0; 3]);
        assert_eq!(&m.scale[1..], &[0.0; 3]);
        let (mu, eta) = climatological_fit(&y);
        let d = m.distribution(&[0.3, -1.0, 2.0]);
        assert!(
            (d.location - mu).abs() < 1e-3 && (d.scale - scale_link(eta)).abs() < 1e-3,
            "{d:?} {mu} {eta}"
        );
        let crps = |l: f64, s: f64| {
            y.iter()
                .map(|&v| TruncatedLogistic::new(l, s, 0.0).unwrap().crps(v))
                .sum::<f64>()
        };
        assert!((crps(d.location, d.scale) - crps(mu, scale_link(eta))).abs() < 1e-6 * crps(mu, scale_link(eta)));
    }

    #[test]
    fn era_flag_coefficient_tracks_bias_jump() {
        let m = manifest_fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // 60 days span all four eras; the ensemble overforecasts by 3 kt from day 30
        let mut cases = Vec::new();
        for day in 0..60i64 {
            for rep in 0..20i64 {
                let truth = rng.random_range(8.0..28.0);
                let bias = if day >= 30 { 3.0 } else { 0.0 };
                let ens: Vec<f64> = (0..20).map(|_| truth + bias + rng.random_range(-1.0..1.0)).collect();
                cases.push(ForecastCase {
                    station_id: "S001".into(),
                    station_index: 0,
                    init_time: day * SECONDS_PER_DAY + rep,
                    lead: 3,
                    run: 0,
                    ensemble: ens,
                    extra_predictors: vec![0.0],
                    persistence: [None; 3],
                    observation: Some(tlogis_draw(&mut rng, truth, 1.0)),
                    era: 0,
                });
            }
        }
        let refs: Vec<&ForecastCase> = cases.iter().collect();
        let model = fit_emos_gb(&refs, &m, &EmosGbConfig::default()).unwrap();
        let names = model.covariate_names();
        let rec = &model.records[0];
        let flag = names.iter().position(|n| n == "flag_icon").unwrap();
        assert!(
            rec.model.location[flag + 1] < 0.0,
            "{:?} {:?}",
            names,
            rec.model.location
        );
    }
}
