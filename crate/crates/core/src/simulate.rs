//! Synthetic cohorts and the two simulation experiments: parameter recovery
//! as the cohort grows, and robustness as pure-noise patients are added.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{bin_age, bin_init, FeatureSpec, PatientRecord, N_FEATURES};
use crate::model::{
    self, bias_terms, Dataset, FitError, Hyperparameters, Observation, PatientData, PatientParams, SharedParams,
};
use crate::sampler::{quantiles, SamplerConfig};
use crate::SURVEY_MONTHS;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("parameter `{0}` missing from fit summary")]
    Missing(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub truth: SharedParams,
    pub hyper: Hyperparameters,
    pub n: usize,
    pub times: Vec<f64>,
    pub k: usize,
    pub seed: u64,
}

impl SimulationSpec {
    /// The simulation-study setting with `n` patients and one covariate.
    pub fn standard(n: usize, seed: u64) -> Self {
        Self {
            truth: SharedParams::simulation_truth(1),
            hyper: Hyperparameters::default(),
            n,
            times: SURVEY_MONTHS.iter().map(|&m| f64::from(m)).collect(),
            k: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n == 0 {
            return Err(SimError::Spec("N must be at least 1".into()));
        }
        if self.times.is_empty() || self.times[0] <= 0.0 || self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SimError::Spec("timepoints must be positive and strictly increasing".into()));
        }
        if self.truth.k() != self.k {
            return Err(SimError::Spec(format!("truth has {} covariates, spec says {}", self.truth.k(), self.k)));
        }
        self.truth.validate()?;
        self.hyper.validate()?;
        Ok(())
    }
}

/// A simulated cohort together with the latent per-patient truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub dataset: Dataset,
    pub patients: Vec<PatientParams>,
}

fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

/// Draws a cohort: standard-normal covariates, `(A, B, C)` from their
/// covariate-implied distributions, `S = 1`, and one mixture observation per
/// timepoint.
pub fn simulate_dataset(spec: &SimulationSpec) -> Result<SimulatedData, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    simulate_with_rng(spec, &mut rng)
}

pub fn simulate_with_rng<R: Rng + ?Sized>(spec: &SimulationSpec, rng: &mut R) -> Result<SimulatedData, SimError> {
    spec.validate()?;
    let bias = bias_terms(&spec.hyper)?;
    let mut patients = Vec::with_capacity(spec.n);
    let mut truth = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let x: Vec<f64> = (0..spec.k).map(|_| std_normal(rng)).collect();
        let pp = spec.truth.sample_patient(&x, &bias, rng)?;
        let obs = spec
            .times
            .iter()
            .map(|&t| Ok(Observation { t, y: spec.truth.sample_observation(pp.f(1.0, t), rng)? }))
            .collect::<Result<Vec<_>, SimError>>()?;
        patients.push(PatientData { id: format!("sim-{i}"), x, s: 1.0, obs });
        truth.push(pp);
    }
    Ok(SimulatedData { dataset: Dataset { k: spec.k, patients }, patients: truth })
}

/// Appends `m` patients whose every value is uniform on `(0, 1)`, with fresh
/// standard-normal covariates and `S = 1`.
pub fn contaminate<R: Rng + ?Sized>(dataset: &Dataset, m: usize, times: &[f64], rng: &mut R) -> Dataset {
    let mut out = dataset.clone();
    for j in 0..m {
        let x = (0..dataset.k).map(|_| std_normal(rng)).collect();
        let obs = times.iter().map(|&t| Observation { t, y: rng.random::<f64>() }).collect();
        out.patients.push(PatientData { id: format!("noise-{j}"), x, s: 1.0, obs });
    }
    out
}

/// A synthetic study in the two-file record format: ages, pre-treatment
/// levels and absolute values, with per-patient truth generated through the
/// class features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySpec {
    /// Coefficients over [`FeatureSpec`] columns, fitted on the whole cohort.
    pub truth: SharedParams,
    pub hyper: Hyperparameters,
    pub n: usize,
    /// Extra patients whose scaled values are uniform on `[0, 1]`.
    pub n_noise: usize,
    pub ages: (f64, f64),
    pub pre_treatment: (f64, f64),
    pub months: Vec<u32>,
    pub seed: u64,
}

impl StudySpec {
    /// Older patients and higher pre-treatment levels drop further and
    /// recover more slowly; moderate between-patient spread.
    pub fn standard(n: usize, seed: u64) -> Self {
        Self {
            truth: SharedParams {
                b_a: vec![0.3, 0.6, -0.2, -0.4, -0.6, 0.0],
                b_b: vec![0.2, 0.4, 0.2, 0.3, 0.4, 0.0],
                b_c: vec![0.2, 0.4, 0.0, 0.2, 0.3, 0.0],
                phi_a: 0.05,
                phi_b: 0.05,
                phi_c: 0.05,
                theta: 0.1,
                p: 0.3,
                phi_m: 0.02,
            },
            hyper: Hyperparameters::default(),
            n,
            n_noise: 0,
            ages: (45.0, 80.0),
            pre_treatment: (0.15, 1.0),
            months: SURVEY_MONTHS.to_vec(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n == 0 {
            return Err(SimError::Spec("N must be at least 1".into()));
        }
        if self.truth.k() != N_FEATURES {
            return Err(SimError::Spec(format!("truth must have {N_FEATURES} coefficients per curve parameter")));
        }
        let (lo, hi) = self.pre_treatment;
        if !(lo > 0.0 && lo < hi && hi <= 1.0) {
            return Err(SimError::Spec("pre-treatment range must lie in (0, 1]".into()));
        }
        if !(self.ages.0 > 0.0 && self.ages.0 < self.ages.1) {
            return Err(SimError::Spec("age range must be positive and nonempty".into()));
        }
        if self.months.is_empty() || self.months[0] == 0 || self.months.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SimError::Spec("months must be positive and strictly increasing".into()));
        }
        self.truth.validate()?;
        self.hyper.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedStudy {
    pub records: Vec<PatientRecord>,
    /// Latent `(A, B, C)` keyed by patient id.
    pub truth: BTreeMap<String, PatientParams>,
}

/// Scaled values come from the mixture around `g(t)`; recorded values are
/// those times `S`. Noise patients (`n0000`, ...) come last and have no
/// truth entry.
pub fn simulate_study(spec: &StudySpec) -> Result<SimulatedStudy, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let people: Vec<(f64, f64)> = (0..spec.n)
        .map(|_| {
            (rng.random_range(spec.ages.0..spec.ages.1), rng.random_range(spec.pre_treatment.0..spec.pre_treatment.1))
        })
        .collect();
    let features = FeatureSpec::fit_bins(&people.iter().map(|&(a, s)| (bin_age(a), bin_init(s))).collect::<Vec<_>>())
        .map_err(|e| SimError::Spec(e.to_string()))?;
    let bias = bias_terms(&spec.hyper)?;
    let mut records = Vec::with_capacity(spec.n);
    let mut truth = BTreeMap::new();
    for (i, &(age, s)) in people.iter().enumerate() {
        let x = features.encode(age, s).map_err(|e| SimError::Spec(e.to_string()))?;
        let pp = spec.truth.sample_patient(&x, &bias, &mut rng)?;
        let mut observations = BTreeMap::new();
        for &m in &spec.months {
            let y = spec.truth.sample_observation(pp.f(1.0, f64::from(m)), &mut rng)?;
            observations.insert(m, s * y);
        }
        let id = format!("p{i:04}");
        truth.insert(id.clone(), pp);
        records.push(PatientRecord { id, age, pre_treatment: s, observations, extra: BTreeMap::new() });
    }
    for i in 0..spec.n_noise {
        let age = rng.random_range(spec.ages.0..spec.ages.1);
        let s = rng.random_range(spec.pre_treatment.0..spec.pre_treatment.1);
        let observations = spec.months.iter().map(|&m| (m, s * rng.random::<f64>())).collect();
        records.push(PatientRecord {
            id: format!("n{i:04}"),
            age,
            pre_treatment: s,
            observations,
            extra: BTreeMap::new(),
        });
    }
    Ok(SimulatedStudy { records, truth })
}

/// Posterior summary of the shared parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    /// `name -> (q25, median, q75)`.
    pub quantiles: BTreeMap<String, (f64, f64, f64)>,
    /// Largest R-hat over all sampled parameters; `None` when not computed.
    pub max_rhat: Option<f64>,
}

impl FitSummary {
    pub fn median(&self, name: &str) -> Result<f64, SimError> {
        self.quantiles.get(name).map(|q| q.1).ok_or_else(|| SimError::Missing(name.into()))
    }
}

/// Produces a posterior summary for a dataset.
pub trait Fitter: Sync {
    fn fit(&self, dataset: &Dataset, hyper: &Hyperparameters, seed: u64) -> Result<FitSummary, SimError>;
}

/// The full MCMC fit.
#[derive(Debug, Clone)]
pub struct McmcFitter {
    pub config: SamplerConfig,
}

impl Fitter for McmcFitter {
    fn fit(&self, dataset: &Dataset, hyper: &Hyperparameters, seed: u64) -> Result<FitSummary, SimError> {
        let config = SamplerConfig { seed, ..self.config.clone() };
        let samples = model::fit(dataset, hyper, &config, false)?;
        let mut q = BTreeMap::new();
        for name in &samples.names {
            let v = quantiles(&samples.pooled(name).map_err(FitError::from)?, &[0.25, 0.5, 0.75])
                .map_err(FitError::from)?;
            q.insert(name.clone(), (v[0], v[1], v[2]));
        }
        let max_rhat = (!samples.rhat.is_empty()).then(|| samples.max_rhat());
        Ok(FitSummary { quantiles: q, max_rhat })
    }
}

/// Degenerate fitter whose posterior is a point mass at the truth; checks
/// the experiment bookkeeping.
#[derive(Debug, Clone)]
pub struct TruthFitter {
    pub truth: SharedParams,
}

impl Fitter for TruthFitter {
    fn fit(&self, _dataset: &Dataset, _hyper: &Hyperparameters, _seed: u64) -> Result<FitSummary, SimError> {
        let quantiles = self.truth.named_values().into_iter().map(|(n, v)| (n, (v, v, v))).collect();
        Ok(FitSummary { quantiles, max_rhat: None })
    }
}

/// Parameters reported by the experiments: every coefficient, the three
/// curve spreads, `theta`, `p` and `phi_m`. Fixed spreads are skipped.
pub fn reported_parameters(truth: &SharedParams, hyper: &Hyperparameters) -> Vec<(String, f64)> {
    let fixed = [("phi_a", hyper.phi_a.is_some()), ("phi_b", hyper.phi_b.is_some()), ("phi_c", hyper.phi_c.is_some())];
    truth.named_values().into_iter().filter(|(n, _)| !fixed.iter().any(|(f, is)| *is && n == f)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub parameter: String,
    /// Cohort size for the recovery experiment, noise count for the noise
    /// experiment.
    pub x: usize,
    pub replication: usize,
    /// Posterior median minus truth.
    pub error: f64,
    pub q25_error: f64,
    pub q75_error: f64,
    pub r_hat_max: Option<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    /// `"N"` or `"M"`.
    pub axis: String,
    pub rows: Vec<ErrorRow>,
}

pub const RHAT_THRESHOLD: f64 = 1.2;

impl ExperimentTable {
    /// Mean absolute error of the posterior median at one grid value.
    pub fn mae(&self, parameter: &str, x: usize) -> Option<f64> {
        let v: Vec<f64> =
            self.rows.iter().filter(|r| r.parameter == parameter && r.x == x).map(|r| r.error.abs()).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Signed error at one grid value (first replication).
    pub fn signed_error(&self, parameter: &str, x: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.parameter == parameter && r.x == x).map(|r| r.error)
    }

    pub fn parameters(&self) -> Vec<String> {
        let mut p: Vec<String> = Vec::new();
        for r in &self.rows {
            if !p.contains(&r.parameter) {
                p.push(r.parameter.clone());
            }
        }
        p
    }

    pub fn grid(&self) -> Vec<usize> {
        let mut g: Vec<usize> = self.rows.iter().map(|r| r.x).collect();
        g.sort_unstable();
        g.dedup();
        g
    }

    /// Largest R-hat over every fit in the table.
    pub fn max_rhat(&self) -> Option<f64> {
        self.rows.iter().filter_map(|r| r.r_hat_max).fold(None, |m, r| Some(m.map_or(r, |m: f64| m.max(r))))
    }

    pub fn all_converged(&self) -> bool {
        self.rows.iter().all(|r| r.converged)
    }

    /// Per-replication rows: `parameter, N|M, replication, error, r_hat_max`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["parameter", self.axis.as_str(), "replication", "error", "r_hat_max"])?;
        for r in &self.rows {
            out.write_record([
                r.parameter.clone(),
                r.x.to_string(),
                r.replication.to_string(),
                r.error.to_string(),
                r.r_hat_max.map_or(String::new(), |v| v.to_string()),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Plot-ready long format: one row per (parameter, grid value, statistic).
    pub fn write_long_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["parameter", "axis", "x", "statistic", "value"])?;
        for p in self.parameters() {
            for x in self.grid() {
                let rows: Vec<&ErrorRow> = self.rows.iter().filter(|r| r.parameter == p && r.x == x).collect();
                let n = rows.len() as f64;
                let stats = [
                    ("mae", rows.iter().map(|r| r.error.abs()).sum::<f64>() / n),
                    ("mean_error", rows.iter().map(|r| r.error).sum::<f64>() / n),
                    ("mean_q25_error", rows.iter().map(|r| r.q25_error).sum::<f64>() / n),
                    ("mean_q75_error", rows.iter().map(|r| r.q75_error).sum::<f64>() / n),
                ];
                for (s, v) in stats {
                    out.write_record([p.clone(), self.axis.clone(), x.to_string(), s.to_string(), v.to_string()])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn error_rows(
    summary: &FitSummary,
    truth: &[(String, f64)],
    x: usize,
    replication: usize,
) -> Result<Vec<ErrorRow>, SimError> {
    truth
        .iter()
        .map(|(name, t)| {
            let &(q25, med, q75) = summary.quantiles.get(name).ok_or_else(|| SimError::Missing(name.clone()))?;
            Ok(ErrorRow {
                parameter: name.clone(),
                x,
                replication,
                error: med - t,
                q25_error: q25 - t,
                q75_error: q75 - t,
                r_hat_max: summary.max_rhat,
                converged: summary.max_rhat.is_none_or(|r| r < RHAT_THRESHOLD),
            })
        })
        .collect()
}

/// Seed for one cell of an experiment grid.
fn cell_seed(base: u64, x: usize, replication: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((x as u64) << 20) ^ replication as u64
}

/// For each cohort size, simulates `replications` cohorts from `template`
/// (its `n` is ignored), fits each, and records posterior-median errors.
pub fn recovery_experiment<F: Fitter + ?Sized>(
    template: &SimulationSpec,
    ns: &[usize],
    replications: usize,
    fitter: &F,
) -> Result<ExperimentTable, SimError> {
    let truth = reported_parameters(&template.truth, &template.hyper);
    let mut rows = Vec::new();
    for &n in ns {
        for rep in 0..replications {
            let seed = cell_seed(template.seed, n, rep);
            let spec = SimulationSpec { n, seed, ..template.clone() };
            let sim = simulate_dataset(&spec)?;
            let summary = fitter.fit(&sim.dataset, &spec.hyper, seed ^ 0xF17)?;
            rows.extend(error_rows(&summary, &truth, n, rep)?);
        }
    }
    Ok(ExperimentTable { axis: "N".into(), rows })
}

/// One base cohort of `template.n` patients, contaminated with each count
/// of noise patients in turn and refitted.
pub fn noise_experiment<F: Fitter + ?Sized>(
    template: &SimulationSpec,
    ms: &[usize],
    fitter: &F,
) -> Result<ExperimentTable, SimError> {
    let truth = reported_parameters(&template.truth, &template.hyper);
    let base = simulate_dataset(template)?;
    let mut rows = Vec::new();
    for &m in ms {
        let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(template.seed, m, 0));
        let data = contaminate(&base.dataset, m, &template.times, &mut rng);
        let summary = fitter.fit(&data, &template.hyper, cell_seed(template.seed, m, 1))?;
        rows.extend(error_rows(&summary, &truth, m, 0)?);
    }
    Ok(ExperimentTable { axis: "M".into(), rows })
}
