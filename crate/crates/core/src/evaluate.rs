//! Cross-validated evaluation: fold splits, absolute-error loss curves, the
//! baseline predictors, the model predictor, grid search and the one-sided
//! two-sample z-test.
//!
//! A predictor is trained on the records of the training folds and then
//! asked for values at a test patient's observed months. The test record it
//! sees has its observations removed, so nothing from the test fold leaks
//! into a prediction.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curves::{fit_shape, CurveError, RecoveryShape};
use crate::data::{
    bin_age, bin_init, class_index, scaled_observations, to_dataset, DataError, FeatureSpec, PatientRecord,
};
use crate::model::{self, logistic, FitError, HyperConfig, ModelError, PatientParams};
use crate::predict::{PosteriorPredictive, PredictError};
use crate::sampler::{quantile_sorted, SamplerConfig};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid folds: {0}")]
    Folds(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error("month {0} has no training data")]
    MissingMonth(u32),
    #[error("no truth for patient `{0}`")]
    UnknownPatient(String),
    #[error("fold {fold}: {source}")]
    Fold { fold: usize, source: Box<EvalError> },
    #[error("z-test: {0}")]
    ZTest(String),
    #[error("empty hyperparameter grid")]
    EmptyGrid,
    #[error("singular least-squares system at month {0}")]
    Singular(u32),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Shuffles `ids` and deals them into `k` folds whose sizes differ by at
/// most one.
pub fn kfold_split(ids: &[String], k: usize, seed: u64) -> Result<Vec<Vec<String>>, EvalError> {
    if k == 0 || k > ids.len() {
        return Err(EvalError::Folds(format!("cannot split {} patients into {k} folds", ids.len())));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, id) in shuffled.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeLoss {
    pub month: u32,
    pub mean: f64,
    /// Standard error of the mean; 0 with a single error.
    pub stderr: f64,
    pub n: usize,
}

/// Mean absolute error per observed month.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub label: String,
    pub points: Vec<TimeLoss>,
}

impl LossCurve {
    pub fn from_errors(label: impl Into<String>, errors: &BTreeMap<u32, Vec<f64>>) -> Self {
        let points = errors
            .iter()
            .filter(|(_, e)| !e.is_empty())
            .map(|(&month, e)| {
                let n = e.len();
                let mean = e.iter().sum::<f64>() / n as f64;
                let stderr = if n > 1 {
                    (e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt()
                } else {
                    0.0
                };
                TimeLoss { month, mean, stderr, n }
            })
            .collect();
        Self { label: label.into(), points }
    }

    /// Mean over every individual error.
    pub fn pooled(&self) -> f64 {
        self.pooled_from(0)
    }

    /// Mean over the errors at months `>= from`; NaN when there are none.
    pub fn pooled_from(&self, from: u32) -> f64 {
        let (sum, n) = self
            .points
            .iter()
            .filter(|p| p.month >= from)
            .fold((0.0, 0), |(s, n), p| (s + p.mean * p.n as f64, n + p.n));
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }

    pub fn at(&self, month: u32) -> Option<&TimeLoss> {
        self.points.iter().find(|p| p.month == month)
    }
}

/// Long format: `model,month,loss,stderr,n`.
pub fn write_loss_csv<W: Write>(curves: &[LossCurve], w: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["model", "month", "loss", "stderr", "n"])?;
    for c in curves {
        for p in &c.points {
            w.write_record([
                c.label.clone(),
                p.month.to_string(),
                p.mean.to_string(),
                p.stderr.to_string(),
                p.n.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Trains on a set of records.
pub trait Predictor: Sync {
    fn label(&self) -> String;
    fn train(&self, train: &[PatientRecord], seed: u64) -> Result<Box<dyn TrainedPredictor>, EvalError>;
}

pub trait TrainedPredictor {
    /// Absolute values at `months` for a patient whose observations have
    /// been removed.
    fn predict(&self, patient: &PatientRecord, months: &[u32]) -> Result<Vec<f64>, EvalError>;

    fn max_rhat(&self) -> Option<f64> {
        None
    }
}

/// Held-out predictions keyed by patient id and month.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CvPredictions {
    pub predictions: BTreeMap<String, BTreeMap<u32, f64>>,
    /// Convergence of each fold's fit, where the predictor reports one.
    pub fold_rhat: Vec<Option<f64>>,
}

impl CvPredictions {
    pub fn loss_curve(&self, label: impl Into<String>, data: &[PatientRecord]) -> LossCurve {
        let mut errors: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for r in data {
            let Some(pred) = self.predictions.get(&r.id) else { continue };
            for (m, y) in &r.observations {
                if let Some(p) = pred.get(m) {
                    errors.entry(*m).or_default().push((p - y).abs());
                }
            }
        }
        LossCurve::from_errors(label, &errors)
    }
}

fn strip(r: &PatientRecord) -> PatientRecord {
    PatientRecord { observations: BTreeMap::new(), ..r.clone() }
}

/// Trains on all folds but one and predicts the held-out patients' entire
/// series, for each fold in turn.
pub fn cross_validate<P: Predictor + ?Sized>(
    predictor: &P,
    folds: &[Vec<String>],
    data: &[PatientRecord],
    seed: u64,
) -> Result<CvPredictions, EvalError> {
    let by_id: BTreeMap<&str, &PatientRecord> = data.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut fold_of: BTreeMap<&str, usize> = BTreeMap::new();
    for (f, ids) in folds.iter().enumerate() {
        for id in ids {
            if !by_id.contains_key(id.as_str()) {
                return Err(EvalError::Folds(format!("unknown patient `{id}` in fold {f}")));
            }
            if fold_of.insert(id, f).is_some() {
                return Err(EvalError::Folds(format!("patient `{id}` appears in two folds")));
            }
        }
    }
    let mut out = CvPredictions::default();
    for (f, ids) in folds.iter().enumerate() {
        let wrap = |e: EvalError| EvalError::Fold { fold: f, source: Box::new(e) };
        let train: Vec<PatientRecord> =
            data.iter().filter(|r| fold_of.get(r.id.as_str()) != Some(&f)).cloned().collect();
        let trained = predictor.train(&train, seed.wrapping_add(f as u64)).map_err(wrap)?;
        out.fold_rhat.push(trained.max_rhat());
        for id in ids {
            let r = by_id[id.as_str()];
            let months: Vec<u32> = r.observations.keys().copied().collect();
            if months.is_empty() {
                continue;
            }
            let values = trained.predict(&strip(r), &months).map_err(wrap)?;
            out.predictions.insert(id.clone(), months.into_iter().zip(values).collect());
        }
    }
    Ok(out)
}

pub fn evaluate_model<P: Predictor + ?Sized>(
    predictor: &P,
    folds: &[Vec<String>],
    data: &[PatientRecord],
    seed: u64,
) -> Result<LossCurve, EvalError> {
    Ok(cross_validate(predictor, folds, data, seed)?.loss_curve(predictor.label(), data))
}

fn month_table(train: &[PatientRecord], scaled: bool) -> Result<BTreeMap<u32, Vec<f64>>, EvalError> {
    let mut table: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for r in train {
        let values = if scaled { scaled_observations(r)?.values } else { r.observations.clone() };
        for (m, v) in values {
            table.entry(m).or_default().push(v);
        }
    }
    Ok(table)
}

/// Per-month training mean of absolute values, or of scaled values times
/// the patient's own `S`.
#[derive(Debug, Clone, Copy)]
pub struct AverageValue {
    pub scaled: bool,
}

struct MonthLookup {
    values: BTreeMap<u32, f64>,
    scaled: bool,
}

impl TrainedPredictor for MonthLookup {
    fn predict(&self, patient: &PatientRecord, months: &[u32]) -> Result<Vec<f64>, EvalError> {
        let factor = if self.scaled { patient.pre_treatment } else { 1.0 };
        months.iter().map(|m| self.values.get(m).map(|v| v * factor).ok_or(EvalError::MissingMonth(*m))).collect()
    }
}

impl Predictor for AverageValue {
    fn label(&self) -> String {
        if self.scaled { "average scaled value" } else { "average value" }.into()
    }

    fn train(&self, train: &[PatientRecord], _seed: u64) -> Result<Box<dyn TrainedPredictor>, EvalError> {
        let values = month_table(train, self.scaled)?
            .into_iter()
            .map(|(m, v)| (m, v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        Ok(Box::new(MonthLookup { values, scaled: self.scaled }))
    }
}

/// Ridge added to a singular normal matrix.
pub const RIDGE: f64 = 1e-6;
/// Coefficient bound for the logistic least-squares fit.
pub const COEF_BOUND: f64 = 30.0;

/// Minimizes `sum (y - logistic(x . b))^2` with damped Gauss-Newton from
/// several starts, keeping every coefficient within `COEF_BOUND`.
pub fn fit_logistic_ls(xs: &[Vec<f64>], ys: &[f64], month: u32) -> Result<Vec<f64>, EvalError> {
    let k = xs[0].len();
    let sse = |b: &[f64]| -> f64 { xs.iter().zip(ys).map(|(x, y)| (y - logistic(dot(x, b))).powi(2)).sum() };
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let mut starts = vec![vec![0.0; k]];
    let mut intercept = vec![0.0; k];
    intercept[k - 1] = model::logit(mean.clamp(1e-3, 1.0 - 1e-3));
    starts.push(intercept);
    starts.push(linearized_start(xs, ys, month)?);

    let mut best: Option<(f64, Vec<f64>)> = None;
    for mut b in starts {
        let mut f = sse(&b);
        for _ in 0..200 {
            let mut jtj = DMatrix::<f64>::zeros(k, k);
            let mut jtr = DVector::<f64>::zeros(k);
            for (x, y) in xs.iter().zip(ys) {
                let p = logistic(dot(x, &b));
                let d = p * (1.0 - p);
                for a in 0..k {
                    jtr[a] += d * x[a] * (y - p);
                    for c in 0..k {
                        jtj[(a, c)] += d * d * x[a] * x[c];
                    }
                }
            }
            let step = solve_spd(jtj, &jtr).ok_or(EvalError::Singular(month))?;
            let mut t = 1.0;
            let mut improved = false;
            while t > 1e-10 {
                let cand: Vec<f64> =
                    b.iter().zip(step.iter()).map(|(bi, si)| (bi + t * si).clamp(-COEF_BOUND, COEF_BOUND)).collect();
                let fc = sse(&cand);
                if fc < f {
                    improved = f - fc > 1e-15 * f.max(1e-300);
                    b = cand;
                    f = fc;
                    break;
                }
                t *= 0.5;
            }
            if !improved {
                break;
            }
        }
        if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
            best = Some((f, b));
        }
    }
    Ok(best.map(|(_, b)| b).unwrap_or_default())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cholesky solve; on failure retries with [`RIDGE`] on the diagonal.
fn solve_spd(m: DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(c) = m.clone().cholesky() {
        return Some(c.solve(rhs));
    }
    let k = m.nrows();
    (m + DMatrix::<f64>::identity(k, k) * RIDGE).cholesky().map(|c| c.solve(rhs))
}

/// Ordinary least squares on clamped logits.
fn linearized_start(xs: &[Vec<f64>], ys: &[f64], month: u32) -> Result<Vec<f64>, EvalError> {
    let k = xs[0].len();
    let mut xtx = DMatrix::<f64>::zeros(k, k);
    let mut xtz = DVector::<f64>::zeros(k);
    for (x, y) in xs.iter().zip(ys) {
        let z = model::logit(y.clamp(1e-3, 1.0 - 1e-3));
        for a in 0..k {
            xtz[a] += x[a] * z;
            for c in 0..k {
                xtx[(a, c)] += x[a] * x[c];
            }
        }
    }
    let b = solve_spd(xtx, &xtz).ok_or(EvalError::Singular(month))?;
    Ok(b.iter().map(|v| v.clamp(-COEF_BOUND, COEF_BOUND)).collect())
}

/// Per-month logistic regression on the class features, fitted to
/// absolute values or to scaled values (then multiplied by `S`).
#[derive(Debug, Clone, Copy)]
pub struct TimewiseRegression {
    pub scaled: bool,
}

struct TrainedRegression {
    features: FeatureSpec,
    coefs: BTreeMap<u32, Vec<f64>>,
    scaled: bool,
}

impl TrainedPredictor for TrainedRegression {
    fn predict(&self, patient: &PatientRecord, months: &[u32]) -> Result<Vec<f64>, EvalError> {
        let x = self.features.encode_record(patient)?;
        let factor = if self.scaled { patient.pre_treatment } else { 1.0 };
        months
            .iter()
            .map(|m| {
                let b = self.coefs.get(m).ok_or(EvalError::MissingMonth(*m))?;
                Ok(factor * logistic(dot(&x, b)))
            })
            .collect()
    }
}

impl Predictor for TimewiseRegression {
    fn label(&self) -> String {
        if self.scaled { "scaled regression" } else { "regression" }.into()
    }

    fn train(&self, train: &[PatientRecord], _seed: u64) -> Result<Box<dyn TrainedPredictor>, EvalError> {
        let features = FeatureSpec::fit(train)?;
        let mut rows: BTreeMap<u32, (Vec<Vec<f64>>, Vec<f64>)> = BTreeMap::new();
        for r in train {
            let x = features.encode_record(r)?;
            let values = if self.scaled { scaled_observations(r)?.values } else { r.observations.clone() };
            for (m, y) in values {
                let e = rows.entry(m).or_default();
                e.0.push(x.clone());
                e.1.push(y);
            }
        }
        let coefs = rows
            .into_iter()
            .map(|(m, (xs, ys))| Ok((m, fit_logistic_ls(&xs, &ys, m)?)))
            .collect::<Result<_, EvalError>>()?;
        Ok(Box::new(TrainedRegression { features, coefs, scaled: self.scaled }))
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    quantile_sorted(values, 0.5)
}

/// Per-class, per-month median scaled value over the whole dataset, times
/// the patient's `S`. Uses every patient, test folds included. A class with
/// no value at a month falls back to the median over all classes.
#[derive(Debug, Clone)]
pub struct MedianByClass {
    by_class: BTreeMap<(usize, u32), f64>,
    global: BTreeMap<u32, f64>,
}

impl MedianByClass {
    pub fn new(all: &[PatientRecord]) -> Result<Self, EvalError> {
        let mut by_class: BTreeMap<(usize, u32), Vec<f64>> = BTreeMap::new();
        let mut global: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for r in all {
            let class = class_index(bin_age(r.age), bin_init(r.pre_treatment));
            for (m, v) in scaled_observations(r)?.values {
                by_class.entry((class, m)).or_default().push(v);
                global.entry(m).or_default().push(v);
            }
        }
        Ok(Self {
            by_class: by_class.into_iter().map(|(k, mut v)| (k, median(&mut v))).collect(),
            global: global.into_iter().map(|(k, mut v)| (k, median(&mut v))).collect(),
        })
    }
}

impl TrainedPredictor for MedianByClass {
    fn predict(&self, patient: &PatientRecord, months: &[u32]) -> Result<Vec<f64>, EvalError> {
        let class = class_index(bin_age(patient.age), bin_init(patient.pre_treatment));
        months
            .iter()
            .map(|m| {
                let v = self.by_class.get(&(class, *m)).or_else(|| self.global.get(m));
                v.map(|v| v * patient.pre_treatment).ok_or(EvalError::MissingMonth(*m))
            })
            .collect()
    }
}

impl Predictor for MedianByClass {
    fn label(&self) -> String {
        "median (in-sample)".into()
    }

    fn train(&self, _train: &[PatientRecord], _seed: u64) -> Result<Box<dyn TrainedPredictor>, EvalError> {
        Ok(Box::new(self.clone()))
    }
}

/// Predicts each patient's latent curve from known `(A, B, C)`.
#[derive(Debug, Clone)]
pub struct TruthOracle {
    pub truth: BTreeMap<String, PatientParams>,
}

impl TrainedPredictor for TruthOracle {
    fn predict(&self, patient: &PatientRecord, months: &[u32]) -> Result<Vec<f64>, EvalError> {
        let pp = self.truth.get(&patient.id).ok_or_else(|| EvalError::UnknownPatient(patient.id.clone()))?;
        Ok(months.iter().map(|&m| pp.f(patient.pre_treatment, f64::from(m))).collect())
    }
}

impl Predictor for TruthOracle {
    fn label(&self) -> String {
        "truth".into()
    }

    fn train(&self, _train: &[PatientRecord], _seed: u64) -> Result<Box<dyn TrainedPredictor>, EvalError> {
        Ok(Box::new(self.clone()))
    }
}

/// Fits a shape to the per-month means of the training set's scaled values.
pub fn fit_average_shape(train: &[PatientRecord]) -> Result<(f64, f64, f64), EvalError> {
    if train.is_empty() {
        return Err(DataError::EmptyTraining.into());
    }
    let points: Vec<(f64, f64)> = month_table(train, true)?
        .into_iter()
        .map(|(m, v)| (f64::from(m), v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    let fit = fit_shape(&points, true)?;
    Ok((fit.a, fit.b, fit.c))
}

/// `S * g(t)` for the shape fitted to the training average.
#[derive(Debug, Clone, Copy)]
pub struct AverageShape;

struct ShapeCurve(RecoveryShape);

impl TrainedPredictor for ShapeCurve {
    fn predict(&self, patient: &PatientRecord, months: &[u32]) -> Result<Vec<f64>, EvalError> {
        Ok(months.iter().map(|&m| patient.pre_treatment * self.0.eval_unchecked(f64::from(m))).collect())
    }
}

impl Predictor for AverageShape {
    fn label(&self) -> String {
        "average shape".into()
    }

    fn train(&self, train: &[PatientRecord], _seed: u64) -> Result<Box<dyn TrainedPredictor>, EvalError> {
        let (a, b, c) = fit_average_shape(train)?;
        Ok(Box::new(ShapeCurve(RecoveryShape::new(a, b, c)?)))
    }
}

/// Average shape moved inside the open intervals the model's logit and log
/// links need.
pub fn average_shape_prior(mu: (f64, f64, f64)) -> (f64, f64, f64) {
    const EPS: f64 = 1e-4;
    (mu.0.clamp(EPS, 1.0 - EPS), mu.1.clamp(EPS, 1.0 - EPS), mu.2.max(EPS))
}

/// The hierarchical model: fit on the training folds' scaled values, predict
/// the posterior-predictive median of `f(t)` for each test patient. Unset
/// `mu_*` come from the training folds' average shape.
#[derive(Debug, Clone)]
pub struct ModelPredictor {
    pub hyper: HyperConfig,
    pub config: SamplerConfig,
}

struct TrainedModel {
    features: FeatureSpec,
    posterior: PosteriorPredictive,
    seed: u64,
    max_rhat: Option<f64>,
}

/// FNV-1a, for per-patient prediction seeds.
fn id_hash(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl TrainedPredictor for TrainedModel {
    fn predict(&self, patient: &PatientRecord, months: &[u32]) -> Result<Vec<f64>, EvalError> {
        let x = self.features.encode_record(patient)?;
        let times: Vec<f64> = months.iter().map(|&m| f64::from(m)).collect();
        let band =
            self.posterior.band(&x, patient.pre_treatment, &times, &[0.5], false, self.seed ^ id_hash(&patient.id))?;
        Ok(band.values.into_iter().map(|v| v[0]).collect())
    }

    fn max_rhat(&self) -> Option<f64> {
        self.max_rhat
    }
}

impl Predictor for ModelPredictor {
    fn label(&self) -> String {
        "model".into()
    }

    fn train(&self, train: &[PatientRecord], seed: u64) -> Result<Box<dyn TrainedPredictor>, EvalError> {
        let features = FeatureSpec::fit(train)?;
        let (dataset, _) = to_dataset(train, &features)?;
        let mu =
            if self.hyper.has_average_shape() { None } else { Some(average_shape_prior(fit_average_shape(train)?)) };
        let hyper = self.hyper.resolve(mu)?;
        let config = SamplerConfig { seed, ..self.config.clone() };
        let samples = model::fit(&dataset, &hyper, &config, false)?;
        let max_rhat = (!samples.rhat.is_empty()).then(|| samples.max_rhat());
        let posterior = PosteriorPredictive::from_samples(&samples, &hyper)?;
        Ok(Box::new(TrainedModel { features, posterior, seed, max_rhat }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZTest {
    pub z: f64,
    /// Upper tail: evidence that group A's mean exceeds group B's.
    pub p_value: f64,
}

/// Unpaired two-sample z-test with standard error
/// `sqrt(var_a / n_a + var_b / n_b)` (sample variances).
pub fn one_sided_ztest(a: &[f64], b: &[f64]) -> Result<ZTest, EvalError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(EvalError::ZTest("each group needs at least 2 values".into()));
    }
    let moments = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0), n)
    };
    let (ma, va, na) = moments(a);
    let (mb, vb, nb) = moments(b);
    let se = (va / na + vb / nb).sqrt();
    if se <= 0.0 || !se.is_finite() {
        return Err(EvalError::ZTest("zero pooled variance".into()));
    }
    let z = (ma - mb) / se;
    let p_value = 0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2);
    Ok(ZTest { z, p_value })
}

/// Scaled values at `month` for the records selected by `keep`.
pub fn scaled_values_at(
    records: &[PatientRecord],
    month: u32,
    keep: impl Fn(&PatientRecord) -> bool,
) -> Result<Vec<f64>, EvalError> {
    let mut out = Vec::new();
    for r in records.iter().filter(|r| keep(r)) {
        if let Some(&v) = scaled_observations(r)?.values.get(&month) {
            out.push(v);
        }
    }
    Ok(out)
}

/// One evaluated grid cell; a failed cell keeps its error instead of a
/// curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub hyper: HyperConfig,
    pub curve: Option<LossCurve>,
    pub error: Option<String>,
}

impl GridRow {
    /// Pooled loss; infinite for a failed or empty cell.
    pub fn loss(&self) -> f64 {
        match &self.curve {
            Some(c) if c.pooled().is_finite() => c.pooled(),
            _ => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: usize,
    pub rows: Vec<GridRow>,
}

impl GridResult {
    pub fn best_hyper(&self) -> &HyperConfig {
        &self.rows[self.best].hyper
    }

    /// One row per grid cell per month:
    /// `phi_a,phi_b,phi_c,s_a,s_b,s_c,lambda_m,month,loss,stderr,error`.
    pub fn write_sensitivity_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record([
            "phi_a", "phi_b", "phi_c", "s_a", "s_b", "s_c", "lambda_m", "month", "loss", "stderr", "error",
        ])?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for row in &self.rows {
            let h = &row.hyper;
            let head = [opt(h.phi_a), opt(h.phi_b), opt(h.phi_c), opt(h.s_a), opt(h.s_b), opt(h.s_c), opt(h.lambda_m)];
            match &row.curve {
                Some(c) => {
                    for p in &c.points {
                        let mut rec = head.to_vec();
                        rec.extend([p.month.to_string(), p.mean.to_string(), p.stderr.to_string(), String::new()]);
                        w.write_record(&rec)?;
                    }
                }
                None => {
                    let mut rec = head.to_vec();
                    rec.extend([String::new(), String::new(), String::new(), row.error.clone().unwrap_or_default()]);
                    w.write_record(&rec)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluates every cell; the lowest pooled loss wins, earliest on ties.
pub fn grid_search<F>(grid: &[HyperConfig], mut evaluate: F) -> Result<GridResult, EvalError>
where
    F: FnMut(&HyperConfig) -> Result<LossCurve, EvalError>,
{
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let rows: Vec<GridRow> = grid
        .iter()
        .map(|h| match evaluate(h) {
            Ok(c) => GridRow { hyper: h.clone(), curve: Some(c), error: None },
            Err(e) => GridRow { hyper: h.clone(), curve: None, error: Some(e.to_string()) },
        })
        .collect();
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.loss() < rows[best].loss() {
            best = i;
        }
    }
    Ok(GridResult { best, rows })
}

/// Cross-validated grid search of the model predictor.
pub fn grid_search_cv(
    grid: &[HyperConfig],
    config: &SamplerConfig,
    folds: &[Vec<String>],
    data: &[PatientRecord],
    seed: u64,
) -> Result<GridResult, EvalError> {
    grid_search(grid, |h| {
        evaluate_model(&ModelPredictor { hyper: h.clone(), config: config.clone() }, folds, data, seed)
    })
}

/// Two one-at-a-time sweeps around `phi_a = phi_b = 0.3`, `phi_c = 0.8`,
/// `s = 1`, `lambda_m = 10`: tied `phi_a = phi_b`, then tied `s_a = s_b =
/// s_c`. The center appears once.
pub fn default_grid() -> Vec<HyperConfig> {
    let cell = |phi_ab: f64, s: f64| HyperConfig {
        phi_a: Some(phi_ab),
        phi_b: Some(phi_ab),
        phi_c: Some(0.8),
        s_a: Some(s),
        s_b: Some(s),
        s_c: Some(s),
        lambda_m: Some(10.0),
        ..Default::default()
    };
    let mut grid: Vec<HyperConfig> = [0.1, 0.2, 0.3, 0.4, 0.5].iter().map(|&p| cell(p, 1.0)).collect();
    grid.extend([0.25, 0.5, 2.0, 4.0].iter().map(|&s| cell(0.3, s)));
    grid
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, age: f64, s: f64, obs: &[(u32, f64)]) -> PatientRecord {
        PatientRecord {
            id: id.into(),
            age,
            pre_treatment: s,
            observations: obs.iter().copied().collect(),
            extra: BTreeMap::new(),
        }
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn folds_partition_ids() {
        let f = kfold_split(&ids(10), 5, 3).unwrap();
        assert!(f.iter().all(|f| f.len() == 2));
        let mut all: Vec<String> = f.concat();
        all.sort();
        let mut expect = ids(10);
        expect.sort();
        assert_eq!(all, expect);
        assert_eq!(f, kfold_split(&ids(10), 5, 3).unwrap());
        let g = kfold_split(&ids(13), 5, 0).unwrap();
        assert!(g.iter().all(|f| f.len() == 2 || f.len() == 3));
        assert!(kfold_split(&ids(4), 5, 0).is_err());
        assert!(kfold_split(&ids(4), 0, 0).is_err());
    }

    struct Constant(f64);

    impl TrainedPredictor for Constant {
        fn predict(&self, _p: &PatientRecord, months: &[u32]) -> Result<Vec<f64>, EvalError> {
            Ok(vec![self.0; months.len()])
        }
    }

    impl Predictor for Constant {
        fn label(&self) -> String {
            "constant".into()
        }
        fn train(&self, _t: &[PatientRecord], _s: u64) -> Result<Box<dyn TrainedPredictor>, EvalError> {
            Ok(Box::new(Constant(self.0)))
        }
    }

    #[test]
    fn constant_predictor_on_constant_data() {
        let data: Vec<_> = (0..6).map(|i| rec(&format!("p{i}"), 60.0, 1.0, &[(1, 0.5), (2, 0.5)])).collect();
        let folds = kfold_split(&ids(6), 3, 1).unwrap();
        let c = evaluate_model(&Constant(0.5), &folds, &data, 0).unwrap();
        assert_eq!(c.points.len(), 2);
        assert!(c.points.iter().all(|p| p.mean == 0.0 && p.n == 6));
        let c = evaluate_model(&Constant(0.7), &folds, &data, 0).unwrap();
        assert!((c.pooled() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn average_baselines() {
        let train = vec![rec("a", 60.0, 1.0, &[(1, 0.2)]), rec("b", 60.0, 1.0, &[(1, 0.4)])];
        let t = AverageValue { scaled: false }.train(&train, 0).unwrap();
        let target = rec("c", 60.0, 0.5, &[]);
        assert!((t.predict(&target, &[1]).unwrap()[0] - 0.3).abs() < 1e-15);
        let ts = AverageValue { scaled: true }.train(&train, 0).unwrap();
        assert!((ts.predict(&target, &[1]).unwrap()[0] - 0.15).abs() < 1e-15);
        assert!(matches!(t.predict(&target, &[2]), Err(EvalError::MissingMonth(2))));
    }

    #[test]
    fn regression_on_one_class_is_the_mean() {
        let train: Vec<_> = [0.2, 0.3, 0.5, 0.6]
            .iter()
            .enumerate()
            .map(|(i, &y)| rec(&format!("p{i}"), 60.0, 0.7, &[(4, y)]))
            .collect();
        let t = TimewiseRegression { scaled: false }.train(&train, 0).unwrap();
        let v = t.predict(&rec("q", 60.0, 0.7, &[]), &[4]).unwrap()[0];
        assert!((v - 0.4).abs() < 1e-3, "{v}");
    }

    #[test]
    fn median_by_class_is_local() {
        let mut data = vec![
            rec("a", 70.0, 1.0, &[(12, 0.2)]),
            rec("b", 70.0, 1.0, &[(12, 0.4)]),
            rec("c", 70.0, 1.0, &[(12, 0.9)]),
            rec("d", 40.0, 0.3, &[(12, 0.1)]),
        ];
        let m = MedianByClass::new(&data).unwrap();
        let target = rec("e", 72.0, 0.9, &[]);
        assert_eq!(m.predict(&target, &[12]).unwrap()[0], 0.4 * 0.9);
        data[3].observations.insert(12, 0.05);
        let m2 = MedianByClass::new(&data).unwrap();
        assert_eq!(m2.predict(&target, &[12]).unwrap(), m.predict(&target, &[12]).unwrap());
    }

    #[test]
    fn ztest_examples() {
        let a = [0.5, 0.6, 0.7];
        let t = one_sided_ztest(&a, &a).unwrap();
        assert_eq!(t.z, 0.0);
        assert!((t.p_value - 0.5).abs() < 1e-15);
        assert!(one_sided_ztest(&[1.0, 1.0], &[0.0, 0.0]).is_err());
        assert!(one_sided_ztest(&[1.0], &[0.0, 0.1]).is_err());
        let big = one_sided_ztest(&[10.0, 10.001, 9.999], &[0.0, 0.001, -0.001]).unwrap();
        assert!(big.p_value < 1e-6);
    }

    #[test]
    fn grid_keeps_failed_cells_and_breaks_ties_early() {
        let grid =
            vec![HyperConfig::default(), HyperConfig { s_a: Some(2.0), ..Default::default() }, HyperConfig::default()];
        let mut calls = 0;
        let r = grid_search(&grid, |h| {
            calls += 1;
            if h.s_a.is_some() {
                return Err(EvalError::EmptyGrid);
            }
            Ok(LossCurve { label: "x".into(), points: vec![TimeLoss { month: 1, mean: 0.1, stderr: 0.0, n: 1 }] })
        })
        .unwrap();
        assert_eq!(calls, 3);
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.best, 0);
        assert!(r.rows[1].error.is_some());
        assert!(grid_search(&[], |_| unreachable!()).is_err());
        let mut out = Vec::new();
        r.write_sensitivity_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 4);
    }

    #[test]
    fn default_grid_is_centered() {
        let g = default_grid();
        assert_eq!(g.len(), 9);
        let center = g.iter().filter(|h| h.phi_a == Some(0.3) && h.s_a == Some(1.0)).count();
        assert_eq!(center, 1);
    }

    #[test]
    fn flat_average_shape() {
        let train: Vec<_> =
            (0..3).map(|i| rec(&format!("p{i}"), 60.0, 0.5, &[(1, 0.5), (4, 0.5), (12, 0.5), (24, 0.5)])).collect();
        let (a, _, c) = fit_average_shape(&train).unwrap();
        assert!(a.abs() < 1e-9);
        assert!(c > 0.0);
    }
}
