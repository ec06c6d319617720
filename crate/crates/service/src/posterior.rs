//! On-disk fits: `samples.ndjson` plus a `summary.json` sidecar.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use recovery_core::data::FeatureSpec;
use recovery_core::model::Hyperparameters;
use recovery_core::predict::{PosteriorPredictive, PredictError};
use recovery_core::sampler::{BlockAcceptance, PosteriorSamples, SamplerConfig, SamplerError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SAMPLES_FILE: &str = "samples.ndjson";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Error)]
pub enum PosteriorError {
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("{0}: {1}")]
    Json(PathBuf, serde_json::Error),
    #[error("{path}: {source}")]
    Samples { path: PathBuf, source: SamplerError },
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error("samples hash {found} does not match fit id {expected}")]
    Mismatch { expected: String, found: String },
}

/// Everything needed to predict from a fit, plus its diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// First 16 hex digits of the SHA-256 of the samples file.
    pub fit_id: String,
    pub n_patients: usize,
    pub n_clipped: usize,
    pub removed: BTreeMap<String, usize>,
    pub hyper: Hyperparameters,
    pub features: FeatureSpec,
    pub sampler: SamplerConfig,
    /// `None` when R-hat is undefined (a single chain).
    pub max_rhat: Option<f64>,
    /// `None` marks an undefined value (a constant chain).
    pub rhat: BTreeMap<String, Option<f64>>,
    pub acceptance: Vec<AcceptanceRate>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRate {
    pub block: String,
    pub accepted: u64,
    pub proposed: u64,
    pub rate: Option<f64>,
}

impl From<&BlockAcceptance> for AcceptanceRate {
    fn from(b: &BlockAcceptance) -> Self {
        let rate = b.rate();
        Self {
            block: b.block.clone(),
            accepted: b.accepted,
            proposed: b.proposed,
            rate: rate.is_finite().then_some(rate),
        }
    }
}

impl FitReport {
    /// Diagnostics taken from `samples`; `fit_id` is set by [`write_fit`].
    pub fn new(
        samples: &PosteriorSamples,
        hyper: Hyperparameters,
        features: FeatureSpec,
        sampler: SamplerConfig,
    ) -> Self {
        Self {
            fit_id: String::new(),
            n_patients: 0,
            n_clipped: 0,
            removed: BTreeMap::new(),
            hyper,
            features,
            sampler,
            max_rhat: max_rhat(samples).filter(|r| r.is_finite()),
            rhat: samples.rhat.iter().map(|(k, &v)| (k.clone(), v.is_finite().then_some(v))).collect(),
            acceptance: samples.acceptance.iter().map(AcceptanceRate::from).collect(),
            warnings: samples.warnings.clone(),
        }
    }
}

pub fn fit_id(samples: &[u8]) -> String {
    hex::encode(&Sha256::digest(samples)[..8])
}

/// `max_rhat` of the samples, or `None` if no R-hat was computed.
pub fn max_rhat(samples: &PosteriorSamples) -> Option<f64> {
    (!samples.rhat.is_empty()).then(|| samples.max_rhat())
}

/// Writes both files into `dir` (created if missing) and fills in
/// `report.fit_id`.
pub fn write_fit(dir: &Path, samples: &PosteriorSamples, report: &mut FitReport) -> Result<(), PosteriorError> {
    fs::create_dir_all(dir).map_err(|e| PosteriorError::Io(dir.into(), e))?;
    let mut bytes = Vec::new();
    samples.write_ndjson(&mut bytes).map_err(|e| PosteriorError::Io(dir.join(SAMPLES_FILE), e))?;
    report.fit_id = fit_id(&bytes);
    let path = dir.join(SAMPLES_FILE);
    fs::write(&path, &bytes).map_err(|e| PosteriorError::Io(path, e))?;
    let path = dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(report).map_err(|e| PosteriorError::Json(path.clone(), e))?;
    fs::write(&path, text + "\n").map_err(|e| PosteriorError::Io(path, e))
}

/// A fit loaded for serving. Immutable once built.
#[derive(Debug)]
pub struct LoadedPosterior {
    pub report: FitReport,
    pub predictive: PosteriorPredictive,
}

impl LoadedPosterior {
    pub fn load(dir: &Path) -> Result<Self, PosteriorError> {
        let path = dir.join(SUMMARY_FILE);
        let text = fs::read_to_string(&path).map_err(|e| PosteriorError::Io(path.clone(), e))?;
        let report: FitReport = serde_json::from_str(&text).map_err(|e| PosteriorError::Json(path, e))?;
        let path = dir.join(SAMPLES_FILE);
        let bytes = fs::read(&path).map_err(|e| PosteriorError::Io(path.clone(), e))?;
        let found = fit_id(&bytes);
        if found != report.fit_id {
            return Err(PosteriorError::Mismatch { expected: report.fit_id, found });
        }
        let samples = PosteriorSamples::read_ndjson(bytes.as_slice())
            .map_err(|source| PosteriorError::Samples { path, source })?;
        let predictive = PosteriorPredictive::from_samples(&samples, &report.hyper)?;
        Ok(Self { report, predictive })
    }
}
