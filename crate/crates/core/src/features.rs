//! Predictor assembly from forecast cases: ensemble summaries, optional
//! valid-hour/lead encodings, era flags, persistence observations, and a
//! standardizer fitted on training data only.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{ArchiveManifest, ForecastCase};
use crate::error::{Error, Result};

pub const RECIPE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    RawGust,
    EnsembleMeanBias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecipe {
    pub use_persistence: bool,
    pub use_era_flags: bool,
    pub extra_predictor_names: Vec<String>,
    pub target_mode: TargetMode,
    /// Lead time and cyclic valid hour; only meaningful when one model
    /// covers several lead times.
    pub include_time: bool,
}

impl Default for FeatureRecipe {
    fn default() -> Self {
        FeatureRecipe {
            use_persistence: false,
            use_era_flags: false,
            extra_predictor_names: Vec::new(),
            target_mode: TargetMode::RawGust,
            include_time: false,
        }
    }
}

impl FeatureRecipe {
    /// Column names before any zero-variance columns are dropped.
    pub fn raw_feature_names(&self, manifest: &ArchiveManifest) -> Vec<String> {
        let mut names = vec!["ens_mean".to_string(), "ens_sd".to_string()];
        names.extend(self.extra_predictor_names.iter().cloned());
        if self.include_time {
            names.extend(["lead_h", "hour_sin", "hour_cos"].iter().map(|s| s.to_string()));
        }
        if self.use_era_flags {
            names.extend(manifest.era_flag_names());
        }
        if self.use_persistence {
            names.extend(["pers0", "pers1", "pers2"].iter().map(|s| s.to_string()));
        }
        names
    }

    /// Whether `case` carries every input this recipe needs.
    pub fn accepts(&self, case: &ForecastCase) -> bool {
        !self.use_persistence || case.persistence.iter().all(Option::is_some)
    }

    /// Fits the standardizer and target moments on `train`. Validation and
    /// test rows must never be passed here.
    pub fn fit(&self, manifest: &ArchiveManifest, train: &[&ForecastCase]) -> Result<FittedRecipe> {
        let extra_indices = self
            .extra_predictor_names
            .iter()
            .map(|n| {
                manifest
                    .predictors
                    .iter()
                    .position(|p| p == n)
                    .ok_or_else(|| Error::UnknownPredictor(n.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let names = self.raw_feature_names(manifest);
        let mut fitted = FittedRecipe {
            format_version: RECIPE_VERSION,
            recipe: self.clone(),
            extra_indices,
            era_starts: manifest.eras[1..].iter().map(|e| e.start).collect(),
            raw_names: names.clone(),
            retained: (0..names.len()).collect(),
            means: vec![0.0; names.len()],
            sds: vec![1.0; names.len()],
            dropped: Vec::new(),
            target_mean: 0.0,
            target_sd: 1.0,
        };
        let rows: Vec<Vec<f64>> = train
            .iter()
            .filter(|c| self.accepts(c))
            .map(|c| fitted.raw_features(c))
            .collect::<Result<_>>()?;
        if rows.is_empty() {
            return Err(Error::InsufficientData {
                context: "feature standardization".into(),
                found: 0,
                required: 1,
            });
        }
        let n = rows.len() as f64;
        let mut retained = Vec::new();
        let mut means = Vec::new();
        let mut sds = Vec::new();
        for j in 0..names.len() {
            let m = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let v = rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n;
            let sd = v.sqrt();
            if sd > 1e-12 * (1.0 + m.abs()) {
                retained.push(j);
                means.push(m);
                sds.push(sd);
            } else {
                log::info!("dropping zero-variance feature `{}`", names[j]);
                fitted.dropped.push(names[j].clone());
            }
        }
        fitted.retained = retained;
        fitted.means = means;
        fitted.sds = sds;

        let targets: Vec<f64> = train
            .iter()
            .filter_map(|c| c.observation.map(|o| fitted.unstandardized_target(c, o)))
            .collect();
        if !targets.is_empty() {
            let m = targets.iter().sum::<f64>() / targets.len() as f64;
            let v = targets.iter().map(|t| (t - m).powi(2)).sum::<f64>() / targets.len() as f64;
            fitted.target_mean = m;
            fitted.target_sd = if v.sqrt() > 1e-9 { v.sqrt() } else { 1.0 };
        }
        Ok(fitted)
    }
}

/// A recipe with its training-set standardizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedRecipe {
    pub format_version: u32,
    pub recipe: FeatureRecipe,
    extra_indices: Vec<usize>,
    era_starts: Vec<i64>,
    pub raw_names: Vec<String>,
    /// Indices into `raw_names` of the features kept after the variance check.
    pub retained: Vec<usize>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub dropped: Vec<String>,
    /// Training moments of the unstandardized target.
    pub target_mean: f64,
    pub target_sd: f64,
}

impl FittedRecipe {
    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.retained.iter().map(|&j| self.raw_names[j].clone()).collect()
    }

    pub fn raw_features(&self, case: &ForecastCase) -> Result<Vec<f64>> {
        let r = &self.recipe;
        let mut v = Vec::with_capacity(self.raw_names.len());
        v.push(case.ensemble_mean());
        v.push(case.ensemble_sd());
        for &i in &self.extra_indices {
            let x = case
                .extra_predictors
                .get(i)
                .copied()
                .ok_or_else(|| Error::UnknownPredictor(r.extra_predictor_names[v.len() - 2].clone()))?;
            v.push(x);
        }
        if r.include_time {
            let angle = 2.0 * PI * case.valid_hour() as f64 / 24.0;
            v.push(case.lead as f64);
            v.push(angle.sin());
            v.push(angle.cos());
        }
        if r.use_era_flags {
            v.extend(
                self.era_starts
                    .iter()
                    .map(|&s| if case.init_time >= s { 1.0 } else { 0.0 }),
            );
        }
        if r.use_persistence {
            for p in &case.persistence {
                v.push(p.ok_or_else(|| Error::MissingPersistence(case.station_id.clone()))?);
            }
        }
        Ok(v)
    }

    /// Retained features without standardization.
    pub fn unscaled_features(&self, case: &ForecastCase) -> Result<Vec<f64>> {
        let raw = self.raw_features(case)?;
        Ok(self.retained.iter().map(|&j| raw[j]).collect())
    }

    /// Standardized retained features.
    pub fn features(&self, case: &ForecastCase) -> Result<Vec<f64>> {
        let raw = self.raw_features(case)?;
        Ok(self
            .retained
            .iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(&j, (m, s))| (raw[j] - m) / s)
            .collect())
    }

    pub fn unstandardized_target(&self, case: &ForecastCase, obs: f64) -> f64 {
        match self.recipe.target_mode {
            TargetMode::RawGust => obs,
            TargetMode::EnsembleMeanBias => obs - case.ensemble_mean(),
        }
    }

    /// Training target: the observation (raw mode) or the bias of the
    /// ensemble mean divided by its training sd (bias mode, not centered).
    pub fn target(&self, case: &ForecastCase) -> Result<f64> {
        let obs = case
            .observation
            .ok_or_else(|| Error::MissingObservation(case.station_id.clone()))?;
        let t = self.unstandardized_target(case, obs);
        Ok(match self.recipe.target_mode {
            TargetMode::RawGust => t,
            TargetMode::EnsembleMeanBias => t / self.target_sd,
        })
    }

    /// Maps a value on the target scale back to gust speed in kt.
    pub fn inverse_target(&self, case: &ForecastCase, value: f64) -> f64 {
        match self.recipe.target_mode {
            TargetMode::RawGust => value,
            TargetMode::EnsembleMeanBias => case.ensemble_mean() + self.target_sd * value,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: FittedRecipe = serde_json::from_str(text)?;
        if r.format_version != RECIPE_VERSION {
            return Err(Error::FormatVersion {
                expected: RECIPE_VERSION,
                found: r.format_version,
            });
        }
        Ok(r)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// SHA-256 of the serialized recipe, stored alongside network weights.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).unwrap_or_default();
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::tests::manifest_fixture;
    use crate::domain::SECONDS_PER_DAY;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn case(day: i64, members: Vec<f64>, obs: Option<f64>) -> ForecastCase {
        ForecastCase {
            station_id: "S001".into(),
            station_index: 0,
            init_time: day * SECONDS_PER_DAY,
            lead: 6,
            run: 0,
            ensemble: members,
            extra_predictors: vec![0.5],
            persistence: [Some(9.0), Some(10.0), Some(11.0)],
            observation: obs,
            era: 0,
        }
    }

    #[test]
    fn constant_ensemble_summaries() {
        let m = manifest_fixture();
        let c = case(0, vec![10.0; 20], Some(12.0));
        let fitted = FeatureRecipe::default()
            .fit(&m, &[&c, &case(1, vec![11.0; 20], Some(3.0))])
            .unwrap();
        let raw = fitted.raw_features(&c).unwrap();
        assert_eq!(raw[0], 10.0);
        assert_eq!(raw[1], 0.0);
    }

    #[test]
    fn era_flags_step_function() {
        let m = manifest_fixture();
        let recipe = FeatureRecipe {
            use_era_flags: true,
            ..Default::default()
        };
        let cases: Vec<ForecastCase> = (0..40).map(|d| case(d, vec![d as f64; 20], Some(1.0))).collect();
        let refs: Vec<&ForecastCase> = cases.iter().collect();
        let fitted = recipe.fit(&m, &refs).unwrap();
        let raw = fitted.raw_features(&cases[25]).unwrap();
        assert_eq!(&raw[2..5], &[1.0, 1.0, 0.0]);
        // flags are nondecreasing in init time
        for w in cases.windows(2) {
            let a = fitted.raw_features(&w[0]).unwrap();
            let b = fitted.raw_features(&w[1]).unwrap();
            assert!(a[2..].iter().zip(&b[2..]).all(|(x, y)| x <= y));
        }
    }

    #[test]
    fn standardized_columns_have_unit_moments() {
        let m = manifest_fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cases: Vec<ForecastCase> = (0..500)
            .map(|d| {
                let mut c = case(
                    d,
                    (0..20).map(|_| rng.random_range(0.0..30.0)).collect(),
                    Some(rng.random_range(0.0..40.0)),
                );
                c.extra_predictors = vec![rng.random_range(-3.0..3.0)];
                c.persistence = [
                    Some(rng.random_range(0.0..20.0)),
                    Some(rng.random_range(0.0..20.0)),
                    Some(1.0),
                ];
                c
            })
            .collect();
        let refs: Vec<&ForecastCase> = cases.iter().collect();
        let recipe = FeatureRecipe {
            use_persistence: true,
            use_era_flags: true,
            extra_predictor_names: vec!["x1".into()],
            ..Default::default()
        };
        let fitted = recipe.fit(&m, &refs).unwrap();
        // pers2 is constant and dropped
        assert!(fitted.dropped.contains(&"pers2".to_string()));
        let rows: Vec<Vec<f64>> = refs.iter().map(|c| fitted.features(c).unwrap()).collect();
        let n = rows.len() as f64;
        for j in 0..fitted.len() {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let sd = (rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-10, "{}", fitted.feature_names()[j]);
            assert!((sd - 1.0).abs() < 1e-10);
        }
        assert!(rows.iter().all(|r| r.len() == fitted.len()));
    }

    #[test]
    fn missing_persistence_and_unknown_predictor() {
        let m = manifest_fixture();
        let mut c = case(0, vec![10.0; 20], Some(1.0));
        let recipe = FeatureRecipe {
            use_persistence: true,
            ..Default::default()
        };
        let fitted = recipe.fit(&m, &[&c]).unwrap();
        c.persistence[1] = None;
        assert!(matches!(fitted.features(&c), Err(Error::MissingPersistence(_))));

        let bad = FeatureRecipe {
            extra_predictor_names: vec!["nope".into()],
            ..Default::default()
        };
        assert!(matches!(bad.fit(&m, &[&c]), Err(Error::UnknownPredictor(_))));
    }

    #[test]
    fn targets_in_both_modes() {
        let m = manifest_fixture();
        let c = case(0, vec![30.0; 20], Some(30.0));
        let bias = FeatureRecipe {
            target_mode: TargetMode::EnsembleMeanBias,
            ..Default::default()
        };
        let fitted = bias.fit(&m, &[&c]).unwrap();
        assert_eq!(fitted.unstandardized_target(&c, 30.0), 0.0);

        let raw = FeatureRecipe::default().fit(&m, &[&c]).unwrap();
        let c2 = case(1, vec![10.0; 20], Some(17.4));
        assert_eq!(raw.target(&c2).unwrap(), 17.4);

        let mut no_obs = c2.clone();
        no_obs.observation = None;
        assert!(matches!(raw.target(&no_obs), Err(Error::MissingObservation(_))));
    }

    #[test]
    fn bias_mode_round_trip() {
        let m = manifest_fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cases: Vec<ForecastCase> = (0..200)
            .map(|d| {
                case(
                    d,
                    (0..20).map(|_| rng.random_range(5.0..25.0)).collect(),
                    Some(rng.random_range(0.0..40.0)),
                )
            })
            .collect();
        let refs: Vec<&ForecastCase> = cases.iter().collect();
        let fitted = FeatureRecipe {
            target_mode: TargetMode::EnsembleMeanBias,
            ..Default::default()
        }
        .fit(&m, &refs)
        .unwrap();
        for c in &cases {
            let t = fitted.target(c).unwrap();
            let back = fitted.inverse_target(c, t);
            assert!((back - c.observation.unwrap()).abs() < 1e-9);
        }
        let mut exact = cases[0].clone();
        exact.observation = Some(exact.ensemble_mean());
        assert_eq!(fitted.target(&exact).unwrap(), 0.0);
    }

    #[test]
    fn joint_mode_adds_cyclic_hour() {
        let m = manifest_fixture();
        let mut a = case(0, vec![10.0, 12.0], Some(1.0));
        a.lead = 3;
        let mut b = a.clone();
        b.lead = 21;
        b.init_time += SECONDS_PER_DAY;
        let recipe = FeatureRecipe {
            include_time: true,
            ..Default::default()
        };
        let fitted = recipe.fit(&m, &[&a, &b]).unwrap();
        let raw = fitted.raw_features(&b).unwrap();
        assert_eq!(raw[2], 21.0);
        let angle = 2.0 * PI * 21.0 / 24.0;
        assert!((raw[3] - angle.sin()).abs() < 1e-15 && (raw[4] - angle.cos()).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip_and_hash() {
        let m = manifest_fixture();
        let c = case(0, vec![10.0, 12.0], Some(1.0));
        let fitted = FeatureRecipe::default().fit(&m, &[&c]).unwrap();
        let back = FittedRecipe::from_json(&fitted.to_json().unwrap()).unwrap();
        assert_eq!(back, fitted);
        assert_eq!(back.hash(), fitted.hash());
        assert_eq!(fitted.hash().len(), 64);
    }
}
