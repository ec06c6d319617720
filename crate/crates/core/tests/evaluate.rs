use std::collections::BTreeMap;

use proptest::prelude::*;
use recovery_core::curves::RecoveryShape;
use recovery_core::data::PatientRecord;
use recovery_core::evaluate::{
    cross_validate, evaluate_model, fit_average_shape, kfold_split, one_sided_ztest, AverageShape, AverageValue,
    CvPredictions, EvalError, ModelPredictor, Predictor, TimewiseRegression, TrainedPredictor, TruthOracle,
};
use recovery_core::model::{HyperConfig, PatientParams};
use recovery_core::sampler::SamplerConfig;
use recovery_core::simulate::{simulate_study, StudySpec};
use recovery_core::SURVEY_MONTHS;

fn rec(id: &str, age: f64, s: f64, obs: &[(u32, f64)]) -> PatientRecord {
    PatientRecord {
        id: id.into(),
        age,
        pre_treatment: s,
        observations: obs.iter().copied().collect(),
        extra: BTreeMap::new(),
    }
}

fn ids(data: &[PatientRecord]) -> Vec<String> {
    data.iter().map(|r| r.id.clone()).collect()
}

fn quick_model() -> ModelPredictor {
    ModelPredictor {
        hyper: HyperConfig::default(),
        config: SamplerConfig { n_chains: 2, n_warmup: 60, n_keep: 60, ..Default::default() },
    }
}

#[test]
fn test_fold_observations_never_reach_training() {
    let data = simulate_study(&StudySpec::standard(30, 3)).unwrap().records;
    let folds = kfold_split(&ids(&data), 3, 4).unwrap();
    let victim = folds[0][0].clone();
    let mut edited = data.clone();
    let r = edited.iter_mut().find(|r| r.id == victim).unwrap();
    r.observations.retain(|&m, _| m <= 4);

    let predictors: Vec<Box<dyn Predictor>> = vec![
        Box::new(AverageValue { scaled: true }),
        Box::new(TimewiseRegression { scaled: true }),
        Box::new(AverageShape),
        Box::new(quick_model()),
    ];
    for p in &predictors {
        let before = cross_validate(p.as_ref(), &folds, &data, 9).unwrap();
        let after = cross_validate(p.as_ref(), &folds, &edited, 9).unwrap();
        for id in &folds[0] {
            for (m, v) in &after.predictions[id] {
                assert_eq!(before.predictions[id][m], *v, "{} changed for {id} at {m}", p.label());
            }
        }
    }
}

#[test]
fn truth_predictor_on_noiseless_data_has_zero_loss() {
    let truth: BTreeMap<String, PatientParams> =
        (0..6).map(|i| (format!("p{i}"), PatientParams { a: 0.1 * i as f64, b: 0.5, c: 3.0 + i as f64 })).collect();
    let data: Vec<PatientRecord> = truth
        .iter()
        .map(|(id, pp)| {
            let obs: Vec<(u32, f64)> = SURVEY_MONTHS.iter().map(|&m| (m, pp.f(0.8, f64::from(m)))).collect();
            rec(id, 60.0, 0.8, &obs)
        })
        .collect();
    let folds = kfold_split(&ids(&data), 3, 0).unwrap();
    let curve = evaluate_model(&TruthOracle { truth }, &folds, &data, 0).unwrap();
    assert_eq!(curve.points.len(), SURVEY_MONTHS.len());
    assert!(curve.points.iter().all(|p| p.mean == 0.0));
}

struct Failing;

impl Predictor for Failing {
    fn label(&self) -> String {
        "failing".into()
    }
    fn train(&self, train: &[PatientRecord], _seed: u64) -> Result<Box<dyn TrainedPredictor>, EvalError> {
        if train.iter().any(|r| r.id == "p0") {
            Ok(Box::new(TruthOracle { truth: BTreeMap::new() }))
        } else {
            Err(EvalError::EmptyGrid)
        }
    }
}

#[test]
fn failing_fold_is_named() {
    let data: Vec<_> = (0..4).map(|i| rec(&format!("p{i}"), 60.0, 0.5, &[(1, 0.2)])).collect();
    let folds = vec![vec!["p0".to_string(), "p1".into()], vec!["p2".into(), "p3".into()]];
    match cross_validate(&Failing, &folds, &data, 0) {
        Err(EvalError::Fold { fold, .. }) => assert_eq!(fold, 0),
        other => panic!("expected a fold error, got {other:?}"),
    }
}

#[test]
fn regression_separates_classes_better_than_average() {
    let mut data = Vec::new();
    for i in 0..20 {
        let (age, level) = if i % 2 == 0 { (45.0, 0.2) } else { (75.0, 0.8) };
        let obs: Vec<(u32, f64)> = SURVEY_MONTHS.iter().map(|&m| (m, level + 0.01 * (i % 3) as f64)).collect();
        data.push(rec(&format!("p{i}"), age, 0.9, &obs));
    }
    let months: Vec<u32> = SURVEY_MONTHS.to_vec();
    let loss = |p: &dyn Predictor| {
        let t = p.train(&data, 0).unwrap();
        data.iter()
            .map(|r| {
                let pred = t.predict(r, &months).unwrap();
                pred.iter().zip(r.observations.values()).map(|(a, b)| (a - b).abs()).sum::<f64>()
            })
            .sum::<f64>()
    };
    let reg = loss(&TimewiseRegression { scaled: false });
    let avg = loss(&AverageValue { scaled: false });
    assert!(reg < 0.2 * avg, "regression {reg} vs average {avg}");
}

#[test]
fn bias_only_regression_is_constant_per_month() {
    let data: Vec<_> =
        (0..5).map(|i| rec(&format!("p{i}"), 60.0, 0.5, &[(1, 0.1 * i as f64 + 0.1), (2, 0.3)])).collect();
    let t = TimewiseRegression { scaled: false }.train(&data, 0).unwrap();
    let a = t.predict(&rec("x", 61.0, 0.45, &[]), &[1, 2]).unwrap();
    let b = t.predict(&rec("y", 64.0, 0.59, &[]), &[1, 2]).unwrap();
    assert_eq!(a, b);
    assert!((a[0] - 0.3).abs() < 1e-3 && (a[1] - 0.3).abs() < 1e-3);
}

#[test]
fn average_shape_round_trip() {
    let shape = RecoveryShape::new(0.4, 0.7, 5.0).unwrap();
    let data: Vec<_> = (0..4)
        .map(|i| {
            let s = 0.3 + 0.2 * i as f64;
            let obs: Vec<(u32, f64)> =
                SURVEY_MONTHS.iter().map(|&m| (m, s * shape.eval_unchecked(f64::from(m)))).collect();
            rec(&format!("p{i}"), 60.0, s, &obs)
        })
        .collect();
    let (a, b, c) = fit_average_shape(&data).unwrap();
    assert!((a - 0.4).abs() < 1e-3 && (b - 0.7).abs() < 1e-3 && (c - 5.0).abs() < 1e-3, "{a} {b} {c}");

    let flat: Vec<_> = (0..3).map(|i| rec(&format!("f{i}"), 60.0, 0.5, &[(1, 0.5), (2, 0.5), (4, 0.5)])).collect();
    assert_eq!(fit_average_shape(&flat).unwrap().0, 0.0);
    assert!(fit_average_shape(&[]).is_err());
}

#[test]
fn ztest_hand_case() {
    // Two groups of 100 with sample sd exactly 0.1 around 0.6 and 0.5.
    let spread = |m: f64| -> Vec<f64> {
        let d = 0.1 * (99.0f64 / 100.0).sqrt();
        (0..100).map(|i| if i % 2 == 0 { m + d } else { m - d }).collect()
    };
    let t = one_sided_ztest(&spread(0.6), &spread(0.5)).unwrap();
    assert!((t.z - 7.0711).abs() < 1e-3, "{}", t.z);
    assert!((t.p_value - 7.7e-13).abs() < 0.05e-13, "{}", t.p_value);
}

proptest! {
    #[test]
    fn loss_is_symmetric(values in prop::collection::vec((0.0..=1.0f64, 0.0..=1.0f64), 1..30)) {
        let mk = |pick: fn(&(f64, f64)) -> f64| -> (Vec<PatientRecord>, CvPredictions) {
            let mut cv = CvPredictions::default();
            let data = values.iter().enumerate().map(|(i, v)| {
                let id = format!("p{i}");
                cv.predictions.insert(id.clone(), [(1u32, if pick(v) == v.0 { v.1 } else { v.0 })].into());
                rec(&id, 60.0, 1.0, &[(1, pick(v))])
            }).collect();
            (data, cv)
        };
        let (d1, p1) = mk(|v| v.0);
        let (d2, p2) = mk(|v| v.1);
        let a = p1.loss_curve("a", &d1).pooled();
        let b = p2.loss_curve("b", &d2).pooled();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn average_shape_stays_in_bounds(values in prop::collection::vec(0.0..=1.0f64, 4)) {
        let obs: Vec<(u32, f64)> = [1u32, 4, 12, 48].iter().copied().zip(values.iter().copied()).collect();
        let (a, b, c) = fit_average_shape(&[rec("p", 60.0, 1.0, &obs)]).unwrap();
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) && c > 0.0);
    }
}
