//! Two-stage MOS reference in the spirit of ModelMIX: per-key linear
//! regression of the gust speed (persistence included), then global logistic
//! regressions of threshold exceedance on the corrected speed. Rare
//! thresholds are fitted per cluster of stations with similar climatology.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{ArchiveManifest, ForecastCase, ModelKey, ProbabilityForecast, ThresholdSet};
use crate::emos::group_by_key;
use crate::error::{Error, Result};
use crate::features::{FeatureRecipe, FittedRecipe};
use crate::optim::{cholesky, cholesky_solve};

pub const MODEL_VERSION: u32 = 1;
pub const LOGIT_CLIP: f64 = 15.0;
const PIVOT_TOL: f64 = 1e-10;

// ---- linear stage ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    /// Intercept first, then one coefficient per column.
    pub coefs: Vec<f64>,
    /// Ridge penalty that was needed; zero for a plain least-squares fit.
    pub ridge: f64,
}

impl LinearFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.coefs[0] + self.coefs[1..].iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }
}

/// Weighted least squares with an intercept. The ridge path is only entered
/// when the centered normal equations are numerically rank deficient; it
/// starts at `ridge_rel * trace / p` and grows tenfold until the
/// factorization succeeds; a few refinement sweeps then remove the ridge bias.
pub fn fit_linear(x: &[Vec<f64>], y: &[f64], w: Option<&[f64]>, ridge_rel: f64) -> Result<LinearFit> {
    let n = y.len();
    if n == 0 || x.len() != n {
        return Err(Error::InvalidArgument("linear fit needs matching nonempty rows".into()));
    }
    let p = x[0].len();
    let weight = |i: usize| w.map_or(1.0, |w| w[i]);
    let sw: f64 = (0..n).map(weight).sum();
    let xm: Vec<f64> = (0..p)
        .map(|j| (0..n).map(|i| weight(i) * x[i][j]).sum::<f64>() / sw)
        .collect();
    let ym = (0..n).map(|i| weight(i) * y[i]).sum::<f64>() / sw;
    let mut a = vec![0.0; p * p];
    let mut b = vec![0.0; p];
    for i in 0..n {
        let wi = weight(i);
        let r = y[i] - ym;
        for j in 0..p {
            let dj = x[i][j] - xm[j];
            b[j] += wi * dj * r;
            for k in 0..=j {
                a[j * p + k] += wi * dj * (x[i][k] - xm[k]);
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            a[k * p + j] = a[j * p + k];
        }
    }
    let mut ridge = 0.0;
    let beta = if p == 0 {
        Vec::new()
    } else {
        let trace: f64 = (0..p).map(|j| a[j * p + j]).sum();
        let mut lambda = ridge_rel * trace.max(f64::MIN_POSITIVE) / p as f64;
        let mut l = cholesky(&a, p, PIVOT_TOL);
        while l.is_none() {
            let mut ar = a.clone();
            for j in 0..p {
                ar[j * p + j] += lambda;
            }
            l = cholesky(&ar, p, 0.0);
            ridge = lambda;
            lambda *= 10.0;
            if !lambda.is_finite() {
                return Err(Error::InvalidArgument("linear design cannot be stabilized".into()));
            }
        }
        let l = l.unwrap_or_default();
        let mut beta = cholesky_solve(&l, p, &b);
        if ridge > 0.0 {
            log::warn!("rank-deficient linear design, ridge {ridge:.3e}");
            // iterated ridge: converges to the minimum-norm least-squares solution
            for _ in 0..8 {
                let rhs: Vec<f64> = b.iter().zip(&beta).map(|(bj, cj)| bj + ridge * cj).collect();
                beta = cholesky_solve(&l, p, &rhs);
            }
        }
        beta
    };
    let intercept = ym - beta.iter().zip(&xm).map(|(c, m)| c * m).sum::<f64>();
    let mut coefs = vec![intercept];
    coefs.extend(beta);
    Ok(LinearFit { coefs, ridge })
}

// ---- logistic stage ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub means: Vec<f64>,
    /// Zero marks a constant input that carries no coefficient.
    pub sds: Vec<f64>,
    /// Intercept first, on standardized inputs.
    pub coefs: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Fitted logits reached the clipping bound or the Hessian degenerated.
    pub separated: bool,
}

impl LogisticFit {
    pub fn logit(&self, x: &[f64]) -> f64 {
        let mut eta = self.coefs[0];
        for j in 0..x.len() {
            if self.sds[j] > 0.0 {
                eta += self.coefs[j + 1] * (x[j] - self.means[j]) / self.sds[j];
            }
        }
        eta.clamp(-LOGIT_CLIP, LOGIT_CLIP)
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        1.0 / (1.0 + (-self.logit(x)).exp())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbabilityModel {
    Logistic(LogisticFit),
    /// Laplace-smoothed event rate for groups with a single outcome class.
    Constant {
        probability: f64,
    },
}

impl ProbabilityModel {
    pub fn probability(&self, x: &[f64]) -> f64 {
        match self {
            ProbabilityModel::Logistic(f) => f.probability(x),
            ProbabilityModel::Constant { probability } => *probability,
        }
    }
}

fn weighted_deviance(eta: &[f64], y: &[bool], w: &[f64]) -> f64 {
    eta.iter()
        .zip(y)
        .zip(w)
        .map(|((&e, &o), &wi)| {
            let z = if o { -e } else { e };
            // log(1 + exp(z))
            wi * if z > 0.0 {
                z + (-z).exp().ln_1p()
            } else {
                z.exp().ln_1p()
            }
        })
        .sum()
}

/// Maximum-likelihood logistic regression by iteratively reweighted least
/// squares. Inputs are standardized internally. Outcome groups containing a
/// single class yield a Laplace-smoothed constant.
pub fn fit_logistic(x: &[Vec<f64>], y: &[bool], w: Option<&[f64]>) -> Result<ProbabilityModel> {
    let n = y.len();
    if n == 0 || x.len() != n {
        return Err(Error::InvalidArgument(
            "logistic fit needs matching nonempty rows".into(),
        ));
    }
    let events = y.iter().filter(|&&o| o).count();
    if events == 0 || events == n {
        return Ok(ProbabilityModel::Constant {
            probability: (events as f64 + 1.0) / (n as f64 + 2.0),
        });
    }
    let p = x[0].len();
    let ones = vec![1.0; n];
    let w = w.unwrap_or(&ones);
    let sw: f64 = w.iter().sum();
    let mut means = vec![0.0; p];
    let mut sds = vec![0.0; p];
    for j in 0..p {
        let m = (0..n).map(|i| w[i] * x[i][j]).sum::<f64>() / sw;
        let v = (0..n).map(|i| w[i] * (x[i][j] - m).powi(2)).sum::<f64>() / sw;
        means[j] = m;
        sds[j] = if v.sqrt() > 1e-12 * (1.0 + m.abs()) {
            v.sqrt()
        } else {
            0.0
        };
    }
    let active: Vec<usize> = (0..p).filter(|&j| sds[j] > 0.0).collect();
    let q = active.len() + 1;
    let design: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut r = Vec::with_capacity(q);
            r.push(1.0);
            r.extend(active.iter().map(|&j| (x[i][j] - means[j]) / sds[j]));
            r
        })
        .collect();
    let rate = (0..n).filter(|&i| y[i]).map(|i| w[i]).sum::<f64>() / sw;
    let mut beta = vec![0.0; q];
    beta[0] = (rate / (1.0 - rate)).ln();
    let eta_of = |beta: &[f64]| -> Vec<f64> {
        design
            .iter()
            .map(|r| r.iter().zip(beta).map(|(a, b)| a * b).sum())
            .collect()
    };
    let mut eta = eta_of(&beta);
    let mut dev = weighted_deviance(&eta, y, w);
    let mut converged = false;
    let mut separated = false;
    let mut iterations = 0;
    for iter in 0..100 {
        iterations = iter + 1;
        let mut h = vec![0.0; q * q];
        let mut g = vec![0.0; q];
        for i in 0..n {
            let pi = 1.0 / (1.0 + (-eta[i]).exp());
            let r = (if y[i] { 1.0 } else { 0.0 }) - pi;
            let wi = w[i] * pi * (1.0 - pi);
            for a in 0..q {
                g[a] += w[i] * r * design[i][a];
                for b in 0..=a {
                    h[a * q + b] += wi * design[i][a] * design[i][b];
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                h[b * q + a] = h[a * q + b];
            }
        }
        let Some(l) = cholesky(&h, q, 1e-14) else {
            separated = true;
            break;
        };
        let delta = cholesky_solve(&l, q, &g);
        let mut step = 1.0;
        let mut next = None;
        for _ in 0..30 {
            let trial: Vec<f64> = beta.iter().zip(&delta).map(|(b, d)| b + step * d).collect();
            let te = eta_of(&trial);
            let td = weighted_deviance(&te, y, w);
            if td <= dev + 1e-12 * dev.abs().max(1.0) {
                next = Some((trial, te, td));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, te, td)) = next else {
            converged = true;
            break;
        };
        let change = trial.iter().zip(&beta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        beta = trial;
        eta = te;
        dev = td;
        if change < 1e-8 {
            converged = true;
            break;
        }
        if eta.iter().any(|e| e.abs() > 3.0 * LOGIT_CLIP) {
            separated = true;
            break;
        }
    }
    if eta.iter().any(|e| e.abs() > LOGIT_CLIP) {
        separated = true;
    }
    let mut coefs = vec![0.0; p + 1];
    coefs[0] = beta[0];
    for (k, &j) in active.iter().enumerate() {
        coefs[j + 1] = beta[k + 1];
    }
    Ok(ProbabilityModel::Logistic(LogisticFit {
        means,
        sds,
        coefs,
        iterations,
        converged,
        separated,
    }))
}

// ---- clustering ---------------------------------------------------------------

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// k-means with k-means++ seeding. Returns the cluster index of every point.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 1 {
        return Err(Error::InvalidArgument("cluster count must be at least 1".into()));
    }
    if k > points.len() {
        return Err(Error::InvalidArgument(format!(
            "cluster count {k} exceeds {} stations",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..points.len())];
    while chosen.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| {
                chosen
                    .iter()
                    .map(|&c| sq_dist(p, &points[c]))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut pick = d.iter().rposition(|&v| v > 0.0).unwrap_or(0);
            for (i, &v) in d.iter().enumerate() {
                if v > 0.0 && u < v {
                    pick = i;
                    break;
                }
                u -= v;
            }
            pick
        } else {
            (0..points.len()).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
    }
    let mut centers: Vec<Vec<f64>> = chosen.iter().map(|&c| points[c].clone()).collect();
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                .unwrap_or(0);
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == c)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            for (j, v) in center.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    Ok(assign)
}

/// Clusters stations by their observed exceedance frequency per threshold.
pub fn cluster_stations(
    train: &[&ForecastCase],
    thresholds: &ThresholdSet,
    k: usize,
    seed: u64,
) -> Result<BTreeMap<String, usize>> {
    let mut clim: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for c in train {
        let Some(obs) = c.observation else { continue };
        let e = clim
            .entry(c.station_id.clone())
            .or_insert_with(|| (vec![0.0; thresholds.len()], 0));
        for (k, &t) in thresholds.as_slice().iter().enumerate() {
            if obs > t {
                e.0[k] += 1.0;
            }
        }
        e.1 += 1;
    }
    let ids: Vec<String> = clim.keys().cloned().collect();
    let points: Vec<Vec<f64>> = clim
        .values()
        .map(|(v, n)| v.iter().map(|x| x / *n as f64).collect())
        .collect();
    let assign = kmeans(&points, k, seed)?;
    Ok(ids.into_iter().zip(assign).collect())
}

// ---- model -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosConfig {
    pub recipe: FeatureRecipe,
    pub thresholds: ThresholdSet,
    pub min_cases: usize,
    pub min_events: usize,
    /// Thresholds at or above this are fitted per station cluster.
    pub cluster_cutoff: f64,
    pub clusters: usize,
    pub seed: u64,
    /// Optional sample weight per era, in manifest order.
    pub era_weights: Option<Vec<f64>>,
    pub ridge_rel: f64,
}

impl Default for MosConfig {
    fn default() -> Self {
        MosConfig {
            recipe: FeatureRecipe {
                use_persistence: true,
                use_era_flags: true,
                ..Default::default()
            },
            thresholds: ThresholdSet::default(),
            min_cases: 50,
            min_events: 30,
            cluster_cutoff: 33.0,
            clusters: 4,
            seed: 1,
            era_weights: None,
            ridge_rel: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRecord {
    pub key: ModelKey,
    pub fit: LinearFit,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdStage {
    pub threshold: f64,
    pub events: usize,
    pub global: ProbabilityModel,
    /// Per-cluster fits; `None` means the cluster uses the global fit.
    pub per_cluster: Option<Vec<Option<ProbabilityModel>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosModel {
    pub format_version: u32,
    pub config: MosConfig,
    pub recipe: FittedRecipe,
    pub linear: Vec<LinearRecord>,
    pub clusters: BTreeMap<String, usize>,
    pub stages: Vec<ThresholdStage>,
    #[serde(skip)]
    index: BTreeMap<ModelKey, usize>,
}

/// Logistic-stage inputs: corrected speed, lead time (h) and run hour.
fn logistic_inputs(speed: f64, case: &ForecastCase) -> Vec<f64> {
    vec![speed, case.lead as f64, case.run as f64]
}

impl MosModel {
    fn build_index(&mut self) {
        self.index = self
            .linear
            .iter()
            .enumerate()
            .map(|(i, r)| (r.key.clone(), i))
            .collect();
    }

    pub fn corrected_speed(&self, case: &ForecastCase) -> Result<f64> {
        let key = case.key();
        let i = *self.index.get(&key).ok_or_else(|| Error::NoModel(key.to_string()))?;
        let x = self.recipe.unscaled_features(case)?;
        Ok(self.linear[i].fit.predict(&x))
    }

    fn stage_probability(&self, stage: &ThresholdStage, station: &str, x: &[f64]) -> f64 {
        let cluster_fit = stage
            .per_cluster
            .as_ref()
            .and_then(|fits| self.clusters.get(station).and_then(|&c| fits.get(c)))
            .and_then(|f| f.as_ref());
        cluster_fit.unwrap_or(&stage.global).probability(x)
    }

    /// Per-threshold probabilities. No monotonicity repair is applied.
    pub fn predict(&self, case: &ForecastCase) -> Result<ProbabilityForecast> {
        let speed = self.corrected_speed(case)?;
        let x = logistic_inputs(speed, case);
        Ok(ProbabilityForecast::new(
            self.stages
                .iter()
                .map(|s| self.stage_probability(s, &case.station_id, &x))
                .collect(),
        ))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut m: MosModel = serde_json::from_str(text)?;
        if m.format_version != MODEL_VERSION {
            return Err(Error::FormatVersion {
                expected: MODEL_VERSION,
                found: m.format_version,
            });
        }
        m.build_index();
        Ok(m)
    }
}

fn case_weight(config: &MosConfig, case: &ForecastCase) -> f64 {
    config
        .era_weights
        .as_ref()
        .and_then(|w| w.get(case.era).copied())
        .unwrap_or(1.0)
}

pub fn fit_mos(train: &[&ForecastCase], manifest: &ArchiveManifest, config: &MosConfig) -> Result<MosModel> {
    if let Some(w) = &config.era_weights {
        if w.len() != manifest.eras.len() || w.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "era weights must be positive, one per era".into(),
            ));
        }
    }
    let usable: Vec<&ForecastCase> = train.iter().copied().filter(|c| config.recipe.accepts(c)).collect();
    let recipe = config.recipe.fit(manifest, &usable)?;
    let groups: Vec<(ModelKey, Vec<&ForecastCase>)> = group_by_key(&usable).into_iter().collect();
    if groups.is_empty() {
        return Err(Error::InsufficientData {
            context: "MOS training".into(),
            found: 0,
            required: config.min_cases,
        });
    }
    for (key, cases) in &groups {
        if cases.len() < config.min_cases {
            return Err(Error::InsufficientData {
                context: format!("MOS key {key}"),
                found: cases.len(),
                required: config.min_cases,
            });
        }
    }
    let linear = groups
        .par_iter()
        .map(|(key, cases)| -> Result<LinearRecord> {
            let x: Vec<Vec<f64>> = cases
                .iter()
                .map(|c| recipe.unscaled_features(c))
                .collect::<Result<_>>()?;
            let y: Vec<f64> = cases.iter().map(|c| c.observation.unwrap_or(0.0)).collect();
            let w: Vec<f64> = cases.iter().map(|c| case_weight(config, c)).collect();
            let fit = fit_linear(&x, &y, Some(&w), config.ridge_rel)?;
            if fit.ridge > 0.0 {
                log::warn!("MOS key {key}: ridge {:.3e} applied", fit.ridge);
            }
            Ok(LinearRecord {
                key: key.clone(),
                fit,
                n: cases.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut model = MosModel {
        format_version: MODEL_VERSION,
        config: config.clone(),
        recipe,
        linear,
        clusters: BTreeMap::new(),
        stages: Vec::new(),
        index: BTreeMap::new(),
    };
    model.build_index();

    let rows: Vec<(&ForecastCase, Vec<f64>, f64)> = groups
        .iter()
        .flat_map(|(_, cases)| cases.iter().copied())
        .map(|c| -> Result<_> {
            let s = model.corrected_speed(c)?;
            Ok((c, logistic_inputs(s, c), case_weight(config, c)))
        })
        .collect::<Result<_>>()?;
    let needs_clusters = config.thresholds.as_slice().iter().any(|&t| t >= config.cluster_cutoff);
    if needs_clusters {
        let k = config.clusters.min(
            groups
                .iter()
                .map(|(k, _)| &k.station)
                .collect::<std::collections::BTreeSet<_>>()
                .len(),
        );
        model.clusters = cluster_stations(&usable, &config.thresholds, k, config.seed)?;
    }
    let n_clusters = model.clusters.values().copied().max().map_or(0, |m| m + 1);
    let xs: Vec<Vec<f64>> = rows.iter().map(|r| r.1.clone()).collect();
    let ws: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let stages = config
        .thresholds
        .as_slice()
        .par_iter()
        .map(|&t| -> Result<ThresholdStage> {
            let y: Vec<bool> = rows.iter().map(|r| r.0.observation.unwrap_or(0.0) > t).collect();
            let events = y.iter().filter(|&&o| o).count();
            let global = fit_logistic(&xs, &y, Some(&ws))?;
            let per_cluster = if t >= config.cluster_cutoff && n_clusters > 0 {
                let mut fits = Vec::with_capacity(n_clusters);
                for c in 0..n_clusters {
                    let idx: Vec<usize> = (0..rows.len())
                        .filter(|&i| model.clusters.get(&rows[i].0.station_id) == Some(&c))
                        .collect();
                    let ev = idx.iter().filter(|&&i| y[i]).count();
                    if ev < config.min_events {
                        log::info!("threshold {t}: cluster {c} has {ev} events, using the global fit");
                        fits.push(None);
                        continue;
                    }
                    let cx: Vec<Vec<f64>> = idx.iter().map(|&i| xs[i].clone()).collect();
                    let cy: Vec<bool> = idx.iter().map(|&i| y[i]).collect();
                    let cw: Vec<f64> = idx.iter().map(|&i| ws[i]).collect();
                    fits.push(Some(fit_logistic(&cx, &cy, Some(&cw))?));
                }
                Some(fits)
            } else {
                None
            };
            if let ProbabilityModel::Logistic(f) = &global {
                if f.separated {
                    log::warn!("threshold {t}: logistic fit separated, logits clipped");
                }
            }
            Ok(ThresholdStage {
                threshold: t,
                events,
                global,
                per_cluster,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    model.stages = stages;
    Ok(model)
}
