//! Feed-forward networks with station embeddings for distributional
//! regression. The DRN head emits truncated-logistic parameters, the BQN
//! head the coefficients of a monotone Bernstein quantile function.
//!
//! Parameters live in one flat vector (embedding table first, then weights
//! and biases per dense layer) so the optimizer and the finite-difference
//! checks treat every tensor alike.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{
    sigmoid, softplus, softplus_inv, tau_grid, BernsteinQuantile, PinballBasis, PredictiveDistribution,
    TruncatedLogistic, DEFAULT_BERNSTEIN_DEGREE,
};
use crate::domain::{split_train_validation, ArchiveManifest, ForecastCase};
use crate::error::{Error, Result};
use crate::features::{FeatureRecipe, FittedRecipe, TargetMode};

pub const MODEL_VERSION: u32 = 1;
/// Additive floor on the standardized predictive scale.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Elu,
    Tanh,
}

impl Activation {
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Relu => a.max(0.0),
            Activation::Elu => {
                if a > 0.0 {
                    a
                } else {
                    a.exp_m1()
                }
            }
            Activation::Tanh => a.tanh(),
        }
    }

    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if a > 0.0 {
                    1.0
                } else {
                    a.exp()
                }
            }
            Activation::Tanh => 1.0 - a.tanh().powi(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Drn,
    Bqn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// One network per (lead, run); features exclude time encodings.
    PerLead,
    /// One network for all leads and runs, trained on the ensemble-mean bias.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub hidden_layers: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub head: Head,
    pub mode: TrainingMode,
    pub bernstein_degree: usize,
    pub quantile_levels: usize,
    pub validation_fraction: f64,
    /// Networks trained with consecutive seeds; predictions average their
    /// distribution parameters.
    pub aggregate: usize,
    pub recipe: FeatureRecipe,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden_layers: vec![64, 32],
            embedding_dim: 10,
            activation: Activation::Relu,
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            seed: 1,
            head: Head::Drn,
            mode: TrainingMode::PerLead,
            bernstein_degree: DEFAULT_BERNSTEIN_DEGREE,
            quantile_levels: 99,
            validation_fraction: 0.2,
            aggregate: 1,
            recipe: FeatureRecipe::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.hidden_layers.contains(&0) || self.embedding_dim == 0 || self.batch_size == 0 {
            return bad("layer, embedding and batch sizes must be at least 1");
        }
        if self.max_epochs == 0 || self.patience >= self.max_epochs {
            return bad("patience must be smaller than max_epochs");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.head == Head::Bqn && (self.bernstein_degree < 1 || self.quantile_levels == 0) {
            return bad("BQN needs degree >= 1 and at least one quantile level");
        }
        if self.aggregate == 0 {
            return bad("aggregate must be at least 1");
        }
        Ok(())
    }

    /// The recipe actually used: joint mode forces the bias target and the
    /// lead/valid-hour encodings.
    pub fn effective_recipe(&self) -> FeatureRecipe {
        let mut r = self.recipe.clone();
        match self.mode {
            TrainingMode::Joint => {
                r.target_mode = TargetMode::EnsembleMeanBias;
                r.include_time = true;
            }
            TrainingMode::PerLead => {
                r.target_mode = TargetMode::RawGust;
            }
        }
        r
    }

    fn outputs(&self) -> usize {
        match self.head {
            Head::Drn => 2,
            Head::Bqn => self.bernstein_degree + 1,
        }
    }
}

// ---- network -------------------------------------------------------------

/// Dense network over [features | station embedding].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub n_stations: usize,
    pub embedding_dim: usize,
    pub n_features: usize,
    /// Layer widths including input and output.
    pub sizes: Vec<usize>,
    pub activation: Activation,
}

struct Cache {
    /// Input of each dense layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn new(
        n_stations: usize,
        embedding_dim: usize,
        n_features: usize,
        hidden: &[usize],
        outputs: usize,
        activation: Activation,
    ) -> Self {
        let mut sizes = vec![n_features + embedding_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(outputs);
        Mlp {
            n_stations,
            embedding_dim,
            n_features,
            sizes,
            activation,
        }
    }

    fn embedding_len(&self) -> usize {
        self.n_stations * self.embedding_dim
    }

    /// Offset of layer `l`'s weight matrix and its bias vector.
    fn offsets(&self, l: usize) -> (usize, usize) {
        let mut off = self.embedding_len();
        for k in 0..l {
            off += self.sizes[k] * self.sizes[k + 1] + self.sizes[k + 1];
        }
        (off, off + self.sizes[l] * self.sizes[l + 1])
    }

    pub fn n_params(&self) -> usize {
        let layers = self.sizes.len() - 1;
        let (w, _) = self.offsets(layers - 1);
        w + self.sizes[layers - 1] * self.sizes[layers] + self.sizes[layers]
    }

    pub fn outputs(&self) -> usize {
        *self.sizes.last().unwrap_or(&0)
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params()];
        for v in p[..self.embedding_len()].iter_mut() {
            *v = rng.random_range(-0.05..0.05);
        }
        for l in 0..self.sizes.len() - 1 {
            let (w, b) = self.offsets(l);
            let limit = (6.0 / (self.sizes[l] + self.sizes[l + 1]) as f64).sqrt();
            for v in p[w..b].iter_mut() {
                *v = rng.random_range(-limit..limit);
            }
        }
        p
    }

    fn weight<'a>(&self, params: &'a [f64], l: usize) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
        let (w, b) = self.offsets(l);
        let (rows, cols) = (self.sizes[l], self.sizes[l + 1]);
        (
            ArrayView2::from_shape((rows, cols), &params[w..b]).expect("weight shape"),
            ArrayView1::from_shape(cols, &params[b..b + cols]).expect("bias shape"),
        )
    }

    /// Sets the output-layer bias.
    pub fn set_output_bias(&self, params: &mut [f64], bias: &[f64]) {
        let l = self.sizes.len() - 2;
        let (_, b) = self.offsets(l);
        params[b..b + bias.len()].copy_from_slice(bias);
    }

    fn forward(&self, params: &[f64], x: ArrayView2<f64>, stations: &[usize]) -> (Array2<f64>, Cache) {
        let n = x.nrows();
        let d = self.embedding_dim;
        let mut z = Array2::<f64>::zeros((n, self.n_features + d));
        z.slice_mut(s![.., ..self.n_features]).assign(&x);
        for (i, &st) in stations.iter().enumerate() {
            let e = &params[st * d..(st + 1) * d];
            for k in 0..d {
                z[[i, self.n_features + k]] = e[k];
            }
        }
        let layers = self.sizes.len() - 1;
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers - 1);
        let mut h = z;
        for l in 0..layers {
            let (w, b) = self.weight(params, l);
            let mut a = h.dot(&w);
            a += &b;
            inputs.push(h);
            if l + 1 < layers {
                let act = self.activation;
                h = a.mapv(|v| act.apply(v));
                pre.push(a);
            } else {
                h = a;
            }
        }
        (h, Cache { inputs, pre })
    }

    /// Accumulates d loss / d params into `grad` given d loss / d output.
    fn backward(&self, params: &[f64], cache: &Cache, stations: &[usize], d_out: Array2<f64>, grad: &mut [f64]) {
        let layers = self.sizes.len() - 1;
        let mut delta = d_out;
        for l in (0..layers).rev() {
            let (w_off, b_off) = self.offsets(l);
            let (rows, cols) = (self.sizes[l], self.sizes[l + 1]);
            let gw = cache.inputs[l].t().dot(&delta);
            for (g, v) in grad[w_off..b_off].iter_mut().zip(gw.iter()) {
                *g += v;
            }
            let gb = delta.sum_axis(Axis(0));
            for (g, v) in grad[b_off..b_off + cols].iter_mut().zip(gb.iter()) {
                *g += v;
            }
            let (w, _) = self.weight(params, l);
            let mut d_in = delta.dot(&w.t());
            debug_assert_eq!(d_in.ncols(), rows);
            if l > 0 {
                let act = self.activation;
                d_in.zip_mut_with(&cache.pre[l - 1], |g, &a| *g *= act.derivative(a));
                delta = d_in;
            } else {
                let d = self.embedding_dim;
                for (i, &st) in stations.iter().enumerate() {
                    for k in 0..d {
                        grad[st * d + k] += d_in[[i, self.n_features + k]];
                    }
                }
                break;
            }
        }
    }
}

// ---- heads ----------------------------------------------------------------

/// Head geometry on the standardized target scale.
#[derive(Debug, Clone)]
struct HeadSpec {
    head: Head,
    /// Lower truncation of the DRN distribution on the standardized scale.
    lower: f64,
    basis: Option<PinballBasis>,
}

impl HeadSpec {
    fn new(head: Head, lower: f64, degree: usize, levels: usize) -> Result<Self> {
        let basis = match head {
            Head::Drn => None,
            Head::Bqn => Some(PinballBasis::new(tau_grid(levels), degree)?),
        };
        Ok(HeadSpec { head, lower, basis })
    }

    fn initial_bias(&self, outputs: usize) -> Vec<f64> {
        match self.head {
            Head::Drn => vec![0.0, softplus_inv(0.5)],
            Head::Bqn => {
                let d = outputs - 1;
                let mut b = vec![softplus_inv(5.0 / d as f64); outputs];
                b[0] = -2.5;
                b
            }
        }
    }

    /// Sum of per-sample losses; fills `d_out` with d(mean loss)/d output.
    fn loss_grad(&self, out: &Array2<f64>, y: &[f64], d_out: &mut Array2<f64>) -> f64 {
        let n = y.len() as f64;
        let mut total = 0.0;
        match self.head {
            Head::Drn => {
                for (i, &yi) in y.iter().enumerate() {
                    let (o1, o2) = (out[[i, 0]], out[[i, 1]]);
                    let g = TruncatedLogistic {
                        location: o1,
                        scale: softplus(o2) + SCALE_FLOOR,
                        lower_bound: self.lower,
                    }
                    .crps_grad(yi);
                    total += g.crps;
                    d_out[[i, 0]] = g.d_location / n;
                    d_out[[i, 1]] = g.d_scale * sigmoid(o2) / n;
                }
            }
            Head::Bqn => {
                let basis = self.basis.as_ref().expect("BQN basis");
                let m = out.ncols();
                let mut alpha = vec![0.0; m];
                let mut ga = vec![0.0; m];
                for (i, &yi) in y.iter().enumerate() {
                    let row = out.row(i);
                    coefficients_into(row, &mut alpha);
                    ga.iter_mut().for_each(|g| *g = 0.0);
                    total += basis.loss_grad(&alpha, yi, &mut ga);
                    // alpha_j = o_0 + sum_{k<=j, k>=1} softplus(o_k)
                    let mut tail = 0.0;
                    for j in (0..m).rev() {
                        tail += ga[j];
                        d_out[[i, j]] = if j == 0 { tail } else { tail * sigmoid(row[j]) } / n;
                    }
                }
            }
        }
        total
    }
}

fn coefficients_into(row: ArrayView1<f64>, alpha: &mut [f64]) {
    let mut acc = row[0];
    alpha[0] = acc;
    for j in 1..row.len() {
        acc += softplus(row[j]);
        alpha[j] = acc;
    }
}

// ---- training data ----------------------------------------------------------------

struct TrainingData {
    x: Array2<f64>,
    stations: Vec<usize>,
    y: Vec<f64>,
}

/// Target standardization: u = (t - center) / spread, where `t` is the
/// recipe's unstandardized target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaling {
    pub center: f64,
    pub spread: f64,
}

fn scaling_for(recipe: &FittedRecipe) -> TargetScaling {
    match recipe.recipe.target_mode {
        TargetMode::RawGust => TargetScaling {
            center: recipe.target_mean,
            spread: recipe.target_sd,
        },
        TargetMode::EnsembleMeanBias => TargetScaling {
            center: 0.0,
            spread: recipe.target_sd,
        },
    }
}

fn build_data(recipe: &FittedRecipe, scaling: TargetScaling, cases: &[&ForecastCase]) -> Result<TrainingData> {
    let p = recipe.len();
    let mut x = Array2::<f64>::zeros((cases.len(), p));
    let mut stations = Vec::with_capacity(cases.len());
    let mut y = Vec::with_capacity(cases.len());
    for (i, c) in cases.iter().enumerate() {
        let f = recipe.features(c)?;
        for (j, v) in f.into_iter().enumerate() {
            x[[i, j]] = v;
        }
        stations.push(c.station_index);
        let obs = c
            .observation
            .ok_or_else(|| Error::MissingObservation(c.station_id.clone()))?;
        y.push((recipe.unstandardized_target(c, obs) - scaling.center) / scaling.spread);
    }
    Ok(TrainingData { x, stations, y })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberWeights {
    pub seed: u64,
    pub params: Vec<f64>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,validation_loss\n");
    for e in log {
        let _ = writeln!(s, "{},{},{}", e.epoch, e.train_loss, e.validation_loss);
    }
    s
}

fn mean_loss(mlp: &Mlp, spec: &HeadSpec, params: &[f64], data: &TrainingData) -> f64 {
    let chunk = 1024;
    let n = data.y.len();
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let (out, _) = mlp.forward(params, data.x.slice(s![start..end, ..]), &data.stations[start..end]);
        let mut d = Array2::zeros(out.raw_dim());
        total += spec.loss_grad(&out, &data.y[start..end], &mut d);
        start = end;
    }
    total / n as f64
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-7;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
        }
    }
}

fn train_member(
    mlp: &Mlp,
    spec: &HeadSpec,
    config: &NetworkConfig,
    seed: u64,
    train: &TrainingData,
    val: &TrainingData,
) -> Result<MemberWeights> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = mlp.init(&mut rng);
    mlp.set_output_bias(&mut params, &spec.initial_bias(mlp.outputs()));
    let mut adam = Adam::new(params.len(), config.learning_rate);
    let mut grad = vec![0.0; params.len()];
    let n = train.y.len();
    let mut order: Vec<usize> = (0..n).collect();
    let p = train.x.ncols();
    let bs = config.batch_size;
    let mut xb = Array2::<f64>::zeros((bs, p));
    let mut sb = vec![0usize; bs];
    let mut yb = vec![0.0; bs];

    let mut best = (params.clone(), 0usize, f64::INFINITY);
    let mut log = Vec::new();
    let mut since_best = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch, chunk) in order.chunks(bs).enumerate() {
            let m = chunk.len();
            for (r, &i) in chunk.iter().enumerate() {
                xb.row_mut(r).assign(&train.x.row(i));
                sb[r] = train.stations[i];
                yb[r] = train.y[i];
            }
            let xv = xb.slice(s![..m, ..]);
            let (out, cache) = mlp.forward(&params, xv, &sb[..m]);
            let mut d_out = Array2::zeros(out.raw_dim());
            let loss = spec.loss_grad(&out, &yb[..m], &mut d_out);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            epoch_loss += loss;
            grad.iter_mut().for_each(|g| *g = 0.0);
            mlp.backward(&params, &cache, &sb[..m], d_out, &mut grad);
            adam.step(&mut params, &grad);
        }
        let validation_loss = mean_loss(mlp, spec, &params, val);
        if !validation_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
            });
        }
        log.push(EpochLog {
            epoch,
            train_loss: epoch_loss / n as f64,
            validation_loss,
        });
        if validation_loss < best.2 {
            best = (params.clone(), epoch, validation_loss);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    Ok(MemberWeights {
        seed,
        params: best.0,
        log,
        best_epoch: best.1,
        best_validation_loss: best.2,
    })
}

// ---- trained model -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedNetwork {
    pub format_version: u32,
    pub config: NetworkConfig,
    pub recipe: FittedRecipe,
    pub recipe_hash: String,
    pub station_ids: Vec<String>,
    /// Set in per-lead mode.
    pub lead: Option<u32>,
    pub run: Option<u32>,
    pub mlp: Mlp,
    pub scaling: TargetScaling,
    pub lower: f64,
    pub members: Vec<MemberWeights>,
    pub n_train: usize,
    pub n_validation: usize,
}

impl TrainedNetwork {
    pub fn best_validation_loss(&self) -> f64 {
        self.members.iter().map(|m| m.best_validation_loss).sum::<f64>() / self.members.len() as f64
    }

    fn raw_outputs(&self, case: &ForecastCase) -> Result<Vec<Array2<f64>>> {
        let st = self
            .station_ids
            .iter()
            .position(|s| *s == case.station_id)
            .ok_or_else(|| Error::UnknownStation(case.station_id.clone()))?;
        let f = self.recipe.features(case)?;
        if f.len() != self.mlp.n_features {
            return Err(Error::FeatureLength {
                expected: self.mlp.n_features,
                found: f.len(),
            });
        }
        let x = Array2::from_shape_vec((1, f.len()), f).expect("row shape");
        Ok(self
            .members
            .iter()
            .map(|m| self.mlp.forward(&m.params, x.view(), &[st]).0)
            .collect())
    }

    pub fn predict(&self, case: &ForecastCase) -> Result<PredictiveDistribution> {
        let outs = self.raw_outputs(case)?;
        let k = outs.len() as f64;
        let sc = self.scaling;
        let bias_mode = self.recipe.recipe.target_mode == TargetMode::EnsembleMeanBias;
        match self.config.head {
            Head::Drn => {
                let loc = outs.iter().map(|o| o[[0, 0]]).sum::<f64>() / k;
                let scale = outs.iter().map(|o| softplus(o[[0, 1]]) + SCALE_FLOOR).sum::<f64>() / k;
                if bias_mode {
                    Ok(PredictiveDistribution::BiasShiftedLogistic {
                        ensemble_mean: case.ensemble_mean(),
                        bias_location: sc.center + sc.spread * loc,
                        bias_scale: sc.spread * scale,
                    })
                } else {
                    Ok(PredictiveDistribution::TruncatedLogistic(TruncatedLogistic {
                        location: sc.center + sc.spread * loc,
                        scale: sc.spread * scale,
                        lower_bound: 0.0,
                    }))
                }
            }
            Head::Bqn => {
                let m = self.mlp.outputs();
                let mut mean = vec![0.0; m];
                let mut alpha = vec![0.0; m];
                for o in &outs {
                    coefficients_into(o.row(0), &mut alpha);
                    for j in 0..m {
                        mean[j] += alpha[j] / k;
                    }
                }
                let shift = if bias_mode { case.ensemble_mean() } else { 0.0 };
                let coefs: Vec<f64> = mean
                    .iter()
                    .map(|a| (shift + sc.center + sc.spread * a).max(0.0))
                    .collect();
                Ok(PredictiveDistribution::Bernstein(BernsteinQuantile::new(coefs)?))
            }
        }
    }

    pub fn log_csv(&self) -> String {
        log_csv(&self.members[0].log)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: TrainedNetwork = serde_json::from_str(text)?;
        if m.format_version != MODEL_VERSION {
            return Err(Error::FormatVersion {
                expected: MODEL_VERSION,
                found: m.format_version,
            });
        }
        if m.recipe.hash() != m.recipe_hash {
            return Err(Error::InvalidArgument("network file recipe hash mismatch".into()));
        }
        for mem in &m.members {
            if mem.params.len() != m.mlp.n_params() {
                return Err(Error::FeatureLength {
                    expected: m.mlp.n_params(),
                    found: mem.params.len(),
                });
            }
        }
        Ok(m)
    }
}

/// Trains one network on `train`, early-stopping on `validation`. The feature
/// recipe is fitted on `train` only.
pub fn train_network(
    train: &[&ForecastCase],
    validation: &[&ForecastCase],
    manifest: &ArchiveManifest,
    config: &NetworkConfig,
) -> Result<TrainedNetwork> {
    config.validate()?;
    let recipe_cfg = config.effective_recipe();
    fn usable<'a>(cases: &[&'a ForecastCase], recipe: &FeatureRecipe) -> Vec<&'a ForecastCase> {
        cases
            .iter()
            .copied()
            .filter(|c| c.observation.is_some() && recipe.accepts(c))
            .collect()
    }
    let train = usable(train, &recipe_cfg);
    let validation = usable(validation, &recipe_cfg);
    if validation.is_empty() {
        return Err(Error::InsufficientData {
            context: "network validation set".into(),
            found: 0,
            required: 1,
        });
    }
    if train.is_empty() {
        return Err(Error::InsufficientData {
            context: "network training set".into(),
            found: 0,
            required: 1,
        });
    }
    let recipe = recipe_cfg.fit(manifest, &train)?;
    let scaling = scaling_for(&recipe);
    let lower = match recipe.recipe.target_mode {
        TargetMode::RawGust => -scaling.center / scaling.spread,
        TargetMode::EnsembleMeanBias => f64::NEG_INFINITY,
    };
    let spec = HeadSpec::new(config.head, lower, config.bernstein_degree, config.quantile_levels)?;
    let td = build_data(&recipe, scaling, &train)?;
    let vd = build_data(&recipe, scaling, &validation)?;
    let mlp = Mlp::new(
        manifest.stations.len(),
        config.embedding_dim,
        recipe.len(),
        &config.hidden_layers,
        config.outputs(),
        config.activation,
    );
    let members = (0..config.aggregate as u64)
        .map(|k| train_member(&mlp, &spec, config, config.seed.wrapping_add(k), &td, &vd))
        .collect::<Result<Vec<_>>>()?;
    let single = |v: Vec<u32>| -> Option<u32> {
        let mut v = v;
        v.sort();
        v.dedup();
        (v.len() == 1).then(|| v[0])
    };
    let (lead, run) = match config.mode {
        TrainingMode::PerLead => (
            single(train.iter().map(|c| c.lead).collect()),
            single(train.iter().map(|c| c.run).collect()),
        ),
        TrainingMode::Joint => (None, None),
    };
    Ok(TrainedNetwork {
        format_version: MODEL_VERSION,
        config: config.clone(),
        recipe_hash: recipe.hash(),
        recipe,
        station_ids: manifest.stations.iter().map(|s| s.id.clone()).collect(),
        lead,
        run,
        mlp,
        scaling,
        lower,
        members,
        n_train: train.len(),
        n_validation: validation.len(),
    })
}

/// Splits `cases` into training and validation parts, then trains.
pub fn train_with_split(
    cases: &[&ForecastCase],
    manifest: &ArchiveManifest,
    config: &NetworkConfig,
) -> Result<TrainedNetwork> {
    let (tr, va) = split_train_validation(cases, config.validation_fraction, config.seed)?;
    train_network(&tr, &va, manifest, config)
}

/// Networks for every (lead, run) in per-lead mode, or a single joint one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralModel {
    pub mode: TrainingMode,
    pub networks: Vec<TrainedNetwork>,
    #[serde(skip)]
    index: BTreeMap<(u32, u32), usize>,
}

impl NeuralModel {
    fn new(mode: TrainingMode, networks: Vec<TrainedNetwork>) -> Self {
        let index = networks
            .iter()
            .enumerate()
            .filter_map(|(i, n)| Some(((n.lead?, n.run?), i)))
            .collect();
        NeuralModel { mode, networks, index }
    }

    pub fn network_for(&self, case: &ForecastCase) -> Result<&TrainedNetwork> {
        match self.mode {
            TrainingMode::Joint => self
                .networks
                .first()
                .ok_or_else(|| Error::NoModel("joint network".into())),
            TrainingMode::PerLead => self
                .index
                .get(&(case.lead, case.run))
                .map(|&i| &self.networks[i])
                .ok_or_else(|| Error::NoModel(format!("lead {} run {:02}", case.lead, case.run))),
        }
    }

    pub fn predict(&self, case: &ForecastCase) -> Result<PredictiveDistribution> {
        self.network_for(case)?.predict(case)
    }

    pub fn training_rows(&self) -> usize {
        self.networks.iter().map(|n| n.n_train + n.n_validation).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: NeuralModel = serde_json::from_str(text)?;
        let networks = m
            .networks
            .into_iter()
            .map(|n| TrainedNetwork::from_json(&serde_json::to_string(&n)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(NeuralModel::new(m.mode, networks))
    }

    pub fn write_logs(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for n in &self.networks {
            let name = match (n.lead, n.run) {
                (Some(l), Some(r)) => format!("training_log_lead{l:02}_run{r:02}.csv"),
                _ => "training_log.csv".to_string(),
            };
            let path = dir.join(name);
            std::fs::write(&path, n.log_csv()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Trains per the configured mode: one network per (lead, run) group in
/// parallel, or one joint network over everything.
pub fn train_neural(
    cases: &[&ForecastCase],
    manifest: &ArchiveManifest,
    config: &NetworkConfig,
) -> Result<NeuralModel> {
    match config.mode {
        TrainingMode::Joint => Ok(NeuralModel::new(
            TrainingMode::Joint,
            vec![train_with_split(cases, manifest, config)?],
        )),
        TrainingMode::PerLead => {
            let mut groups: BTreeMap<(u32, u32), Vec<&ForecastCase>> = BTreeMap::new();
            for c in cases {
                groups.entry((c.lead, c.run)).or_default().push(c);
            }
            let groups: Vec<Vec<&ForecastCase>> = groups.into_values().collect();
            let nets = groups
                .par_iter()
                .map(|g| train_with_split(g, manifest, config))
                .collect::<Result<Vec<_>>>()?;
            Ok(NeuralModel::new(TrainingMode::PerLead, nets))
        }
    }
}

// ---- gradient probes ---------------------------------------------------------------

/// Relative error ||g - g_fd|| / max(||g||, ||g_fd||) between the analytic
/// gradient of the mean loss and central finite differences, for a random
/// small network, random weights and a random batch.
pub fn gradient_check(head: Head, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_st, emb, p, batch) = (5, 3, 4, 8);
    let degree = 6;
    let outputs = if head == Head::Drn { 2 } else { degree + 1 };
    let act = [Activation::Relu, Activation::Elu, Activation::Tanh][rng.random_range(0..3)];
    let mlp = Mlp::new(n_st, emb, p, &[12, 7], outputs, act);
    let mut params = mlp.init(&mut rng);
    for v in params.iter_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    let lower = if rng.random_bool(0.5) {
        f64::NEG_INFINITY
    } else {
        rng.random_range(-3.0..-0.5)
    };
    let spec = HeadSpec::new(head, lower, degree, 19)?;
    let x = Array2::from_shape_fn((batch, p), |_| rng.random_range(-2.0..2.0));
    let stations: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n_st)).collect();
    let y: Vec<f64> = (0..batch).map(|_| rng.random_range(0.0..3.0)).collect();
    let loss_at = |prm: &[f64]| -> f64 {
        let (out, _) = mlp.forward(prm, x.view(), &stations);
        let mut d = Array2::zeros(out.raw_dim());
        spec.loss_grad(&out, &y, &mut d) / batch as f64
    };
    let (out, cache) = mlp.forward(&params, x.view(), &stations);
    let mut d_out = Array2::zeros(out.raw_dim());
    spec.loss_grad(&out, &y, &mut d_out);
    let mut g = vec![0.0; params.len()];
    mlp.backward(&params, &cache, &stations, d_out, &mut g);
    let h = 1e-6;
    let mut fd = vec![0.0; params.len()];
    let mut work = params.clone();
    for i in 0..params.len() {
        work[i] = params[i] + h;
        let up = loss_at(&work);
        work[i] = params[i] - h;
        let down = loss_at(&work);
        work[i] = params[i];
        fd[i] = (up - down) / (2.0 * h);
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
    Ok(norm(&diff) / norm(&g).max(norm(&fd)).max(1e-300))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::tests::manifest_fixture;
    use crate::domain::SECONDS_PER_DAY;

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            for head in [Head::Drn, Head::Bqn] {
                let e = gradient_check(head, seed).unwrap();
                assert!(e <= 1e-4, "{head:?} seed {seed}: {e}");
            }
        }
    }

    #[test]
    fn zero_weights_emit_output_bias() {
        let mlp = Mlp::new(3, 2, 4, &[8, 5], 2, Activation::Relu);
        let mut params = vec![0.0; mlp.n_params()];
        mlp.set_output_bias(&mut params, &[0.7, -0.2]);
        let x = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f64);
        let (out, _) = mlp.forward(&params, x.view(), &[0, 1, 2, 0]);
        for i in 0..4 {
            assert_eq!((out[[i, 0]], out[[i, 1]]), (0.7, -0.2));
        }
    }

    fn synthetic(n: usize, seed: u64, constant: Option<f64>) -> Vec<ForecastCase> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let centre = rng.random_range(5.0..30.0);
                let ens: Vec<f64> = (0..20).map(|_| centre + rng.random_range(-2.0..2.0)).collect();
                let m = ens.iter().sum::<f64>() / 20.0;
                let obs = constant.unwrap_or_else(|| {
                    TruncatedLogistic::new(m + 1.0, 1.5, 0.0)
                        .unwrap()
                        .quantile(rng.random_range(0.0..1.0))
                });
                ForecastCase {
                    station_id: if i % 2 == 0 { "S001".into() } else { "S002".into() },
                    station_index: i % 2,
                    init_time: (i / 2) as i64 * SECONDS_PER_DAY,
                    lead: 6,
                    run: 0,
                    ensemble: ens,
                    extra_predictors: vec![0.0],
                    persistence: [None; 3],
                    observation: Some(obs),
                    era: 0,
                }
            })
            .collect()
    }

    fn quick(head: Head) -> NetworkConfig {
        NetworkConfig {
            hidden_layers: vec![16, 8],
            embedding_dim: 2,
            max_epochs: 30,
            patience: 5,
            head,
            bernstein_degree: 8,
            quantile_levels: 19,
            learning_rate: 3e-3,
            ..Default::default()
        }
    }

    #[test]
    fn constant_target_collapses_scale() {
        let cases = synthetic(600, 1, Some(12.0));
        let refs: Vec<&ForecastCase> = cases.iter().collect();
        let net = train_with_split(&refs, &manifest_fixture(), &quick(Head::Drn)).unwrap();
        let d = net.predict(&cases[0]).unwrap().as_truncated_logistic().unwrap();
        let width = d.quantile(0.95) - d.quantile(0.05);
        assert!(width < 0.5, "width {width}");
    }

    #[test]
    fn best_checkpoint_and_determinism() {
        let cases = synthetic(800, 2, None);
        let refs: Vec<&ForecastCase> = cases.iter().collect();
        let a = train_with_split(&refs, &manifest_fixture(), &quick(Head::Drn)).unwrap();
        let b = train_with_split(&refs, &manifest_fixture(), &quick(Head::Drn)).unwrap();
        assert_eq!(a.log_csv(), b.log_csv());
        assert_eq!(a.members[0].params, b.members[0].params);
        let m = &a.members[0];
        let min = m.log.iter().map(|e| e.validation_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(m.best_validation_loss, min);
        let back = TrainedNetwork::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back.predict(&cases[1]).unwrap(), a.predict(&cases[1]).unwrap());
    }

    #[test]
    fn bqn_quantiles_are_monotone() {
        let cases = synthetic(600, 3, None);
        let refs: Vec<&ForecastCase> = cases.iter().collect();
        let net = train_with_split(&refs, &manifest_fixture(), &quick(Head::Bqn)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..2000 {
            let mut c = cases[rng.random_range(0..cases.len())].clone();
            let shift = rng.random_range(-10.0..10.0);
            c.ensemble.iter_mut().for_each(|v| *v = (*v + shift).max(0.0));
            let PredictiveDistribution::Bernstein(q) = net.predict(&c).unwrap() else {
                panic!()
            };
            let taus = tau_grid(50);
            let qs: Vec<f64> = taus.iter().map(|t| q.quantile(*t).unwrap()).collect();
            assert!(qs.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn unknown_station_and_empty_validation_error() {
        let cases = synthetic(300, 5, None);
        let refs: Vec<&ForecastCase> = cases.iter().collect();
        let net = train_with_split(&refs, &manifest_fixture(), &quick(Head::Drn)).unwrap();
        let mut c = cases[0].clone();
        c.station_id = "S404".into();
        assert!(matches!(net.predict(&c), Err(Error::UnknownStation(_))));
        assert!(matches!(
            train_network(&refs, &[], &manifest_fixture(), &quick(Head::Drn)),
            Err(Error::InsufficientData { .. })
        ));
        let bad = NetworkConfig {
            patience: 30,
            ..quick(Head::Drn)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn joint_mode_predicts_bias_shifted_logistic() {
        let mut cases = synthetic(600, 6, None);
        for (i, c) in cases.iter_mut().enumerate() {
            c.lead = [3, 9, 15][i % 3];
        }
        let refs: Vec<&ForecastCase> = cases.iter().collect();
        let cfg = NetworkConfig {
            mode: TrainingMode::Joint,
            ..quick(Head::Drn)
        };
        let model = train_neural(&refs, &manifest_fixture(), &cfg).unwrap();
        assert_eq!(model.networks.len(), 1);
        let names = model.networks[0].recipe.feature_names();
        assert!(names.contains(&"lead_h".to_string()) && names.contains(&"hour_sin".to_string()));
        match model.predict(&cases[0]).unwrap() {
            PredictiveDistribution::BiasShiftedLogistic {
                ensemble_mean,
                bias_scale,
                ..
            } => {
                assert_eq!(ensemble_mean, cases[0].ensemble_mean());
                assert!(bias_scale > 0.0);
            }
            other => panic!("{other:?}"),
        }
    }
}
