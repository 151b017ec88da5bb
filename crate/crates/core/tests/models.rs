use gustpost::distributions::{default_tau_grid, pinball, PredictiveDistribution};
use gustpost::domain::ForecastCase;
use gustpost::pipeline::{train, Method, MethodOptions};
use gustpost::synthgen::{generate_archive, ExtraPredictorSpec, GeneratedArchive, ScenarioConfig, TruthRow};

fn archive(stations: usize, days: u32, extras: Vec<ExtraPredictorSpec>) -> GeneratedArchive {
    let cfg = ScenarioConfig {
        stations,
        days,
        lead_times: vec![9],
        runs: vec![0],
        extra_predictors: extras,
        seed: 3,
        ..ScenarioConfig::well_specified()
    };
    generate_archive(&cfg).unwrap()
}

/// Observed cases split at `day`, with the truth rows of the held-out part.
fn split(a: &GeneratedArchive, day: i64) -> (Vec<&ForecastCase>, Vec<(&ForecastCase, &TruthRow)>) {
    let d0 = a.dataset.cases.iter().map(|c| c.init_day()).min().unwrap();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, t) in a.dataset.cases.iter().zip(&a.truth) {
        if c.observation.is_none() {
            continue;
        }
        if c.init_day() - d0 < day {
            train.push(c);
        } else {
            test.push((c, t));
        }
    }
    (train, test)
}

fn mean_crps(model: &gustpost::pipeline::TrainedModel, test: &[(&ForecastCase, &TruthRow)]) -> f64 {
    let total: f64 = test
        .iter()
        .map(|(c, _)| {
            let d = model.distribution(c).unwrap().unwrap();
            d.as_truncated_logistic().unwrap().crps(c.observation.unwrap())
        })
        .sum();
    total / test.len() as f64
}

fn bayes_crps(test: &[(&ForecastCase, &TruthRow)]) -> f64 {
    test.iter()
        .map(|(c, t)| t.distribution().crps(c.observation.unwrap()))
        .sum::<f64>()
        / test.len() as f64
}

#[test]
fn boosting_uses_informative_extras() {
    let extras = vec![
        ExtraPredictorSpec {
            name: "x_signal".into(),
            effect: 2.0,
        },
        ExtraPredictorSpec {
            name: "x_noise".into(),
            effect: 0.0,
        },
    ];
    let a = archive(6, 720, extras);
    let (train_cases, test) = split(&a, 560);
    let options = MethodOptions::default();
    let emos = train(Method::Emos, &options, &train_cases, &a.dataset.manifest).unwrap();
    let gb = train(Method::EmosGb, &options, &train_cases, &a.dataset.manifest).unwrap();
    let (c_emos, c_gb) = (mean_crps(&emos, &test), mean_crps(&gb, &test));
    assert!(c_gb <= c_emos + 1e-6, "emos_gb {c_gb} vs emos {c_emos}");
}

#[test]
fn drn_crps_close_to_bayes() {
    let a = archive(80, 730, Vec::new());
    let (train_cases, test) = split(&a, 625);
    assert!(train_cases.len() >= 49_000, "{}", train_cases.len());
    let model = train(
        Method::Drn,
        &MethodOptions::default(),
        &train_cases,
        &a.dataset.manifest,
    )
    .unwrap();
    let (got, bayes) = (mean_crps(&model, &test), bayes_crps(&test));
    assert!(got <= 1.05 * bayes, "drn {got} vs bayes {bayes}");
}

#[test]
fn bqn_pinball_close_to_bayes() {
    let a = archive(80, 730, Vec::new());
    let (train_cases, test) = split(&a, 625);
    let model = train(
        Method::Bqn,
        &MethodOptions::default(),
        &train_cases,
        &a.dataset.manifest,
    )
    .unwrap();
    let taus = default_tau_grid();
    let mut got = 0.0;
    let mut bayes = 0.0;
    for (c, t) in &test {
        let y = c.observation.unwrap();
        let Some(PredictiveDistribution::Bernstein(q)) = model.distribution(c).unwrap() else {
            panic!("bqn must emit a quantile function");
        };
        got += q.pinball_loss_mean(y, &taus).unwrap();
        let d = t.distribution();
        bayes += taus.iter().map(|&tau| pinball(y - d.quantile(tau), tau)).sum::<f64>() / taus.len() as f64;
    }
    assert!(got <= 1.05 * bayes, "bqn {got} vs bayes {bayes}");
}

#[test]
fn raw_model_has_no_distribution_for_mos() {
    let a = archive(3, 200, Vec::new());
    let (train_cases, test) = split(&a, 150);
    let options = MethodOptions {
        persistence: true,
        ..Default::default()
    };
    let mos = train(Method::Mosref, &options, &train_cases, &a.dataset.manifest).unwrap();
    let (c, _) = test
        .iter()
        .find(|(c, _)| c.persistence.iter().all(|p| p.is_some()))
        .unwrap();
    assert!(mos.distribution(c).unwrap().is_none());
    let p = mos.predict(c, &options.thresholds).unwrap();
    assert!(p.probabilities.iter().all(|v| (0.0..=1.0).contains(v)));
}
