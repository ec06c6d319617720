//! Prediction requests and responses shared by the CLI and the HTTP server.

use recovery_core::data::{bin_age, bin_init, class_index, classes, ClassInfo, N_AGE_BINS, N_INIT_BINS};
use recovery_core::predict::{PredictError, DEFAULT_QUANTILES};
use recovery_core::SURVEY_MONTHS;
use serde::{Deserialize, Serialize};

use crate::posterior::LoadedPosterior;

/// Upper limits that keep one request cheap.
pub const MAX_TIMES: usize = 512;
pub const MAX_QUANTILES: usize = 64;
pub const MAX_DRAW_SAMPLE: usize = 500;

/// Covariates come from `age` and `pre_treatment`, or from explicit class
/// bins. `init_bin` defaults to the bin of `pre_treatment`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRequest {
    pub age: Option<f64>,
    pub age_bin: Option<usize>,
    pub init_bin: Option<usize>,
    pub pre_treatment: f64,
    /// Months; defaults to the survey schedule.
    pub times: Option<Vec<f64>>,
    pub quantiles: Option<Vec<f64>>,
    #[serde(default)]
    pub observation_noise: bool,
    #[serde(default)]
    pub seed: u64,
    /// Also return this many raw curves, evenly spaced over the draws.
    pub draw_sample: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResponse {
    pub fit_id: String,
    pub max_rhat: Option<f64>,
    pub class: ClassInfo,
    pub pre_treatment: f64,
    pub observation_noise: bool,
    pub n_draws: usize,
    pub times: Vec<f64>,
    pub quantiles: Vec<f64>,
    /// `values[i][j]`: quantile `j` of `f` at time `i`.
    pub values: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub draws: Option<Vec<Vec<f64>>>,
}

#[derive(Debug)]
pub enum ApiError {
    Invalid(Vec<FieldError>),
    Internal(String),
}

impl From<PredictError> for ApiError {
    fn from(e: PredictError) -> Self {
        match e {
            PredictError::Request { field, message } => ApiError::Invalid(vec![FieldError::new(field, message)]),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

struct Resolved {
    class: ClassInfo,
    times: Vec<f64>,
    quantiles: Vec<f64>,
}

fn check(req: &PredictionRequest) -> Result<Resolved, Vec<FieldError>> {
    let mut errors = Vec::new();
    let s = req.pre_treatment;
    if !(s > 0.0 && s <= 1.0) {
        errors.push(FieldError::new("pre_treatment", format!("{s} is outside (0, 1]")));
    }
    let age_bin = match (req.age, req.age_bin) {
        (Some(_), Some(_)) => {
            errors.push(FieldError::new("age", "give either age or age_bin, not both"));
            None
        }
        (None, None) => {
            errors.push(FieldError::new("age", "age or age_bin is required"));
            None
        }
        (Some(a), None) if !(a.is_finite() && a > 0.0) => {
            errors.push(FieldError::new("age", format!("{a} is not a positive number of years")));
            None
        }
        (Some(a), None) => Some(bin_age(a)),
        (None, Some(b)) if b >= N_AGE_BINS => {
            errors.push(FieldError::new("age_bin", format!("{b} is not below {N_AGE_BINS}")));
            None
        }
        (None, Some(b)) => Some(b),
    };
    let init_bin = match req.init_bin {
        Some(b) if b >= N_INIT_BINS => {
            errors.push(FieldError::new("init_bin", format!("{b} is not below {N_INIT_BINS}")));
            None
        }
        Some(b) => Some(b),
        None => Some(bin_init(s)),
    };

    let times = req.times.clone().unwrap_or_else(|| SURVEY_MONTHS.iter().map(|&m| f64::from(m)).collect());
    if times.is_empty() {
        errors.push(FieldError::new("times", "must not be empty"));
    } else if times.len() > MAX_TIMES {
        errors.push(FieldError::new("times", format!("at most {MAX_TIMES} values")));
    } else if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        errors.push(FieldError::new("times", "must be finite and nonnegative"));
    } else if times.windows(2).any(|w| w[1] <= w[0]) {
        errors.push(FieldError::new("times", "must be strictly increasing"));
    }

    let quantiles = req.quantiles.clone().unwrap_or_else(|| DEFAULT_QUANTILES.to_vec());
    if quantiles.is_empty() || quantiles.len() > MAX_QUANTILES {
        errors.push(FieldError::new("quantiles", format!("give between 1 and {MAX_QUANTILES} values")));
    } else if quantiles.iter().any(|q| !(0.0..=1.0).contains(q)) {
        errors.push(FieldError::new("quantiles", "values must lie in [0, 1]"));
    } else if quantiles.windows(2).any(|w| w[1] <= w[0]) {
        errors.push(FieldError::new("quantiles", "must be strictly increasing"));
    }

    if req.draw_sample.is_some_and(|n| n == 0 || n > MAX_DRAW_SAMPLE) {
        errors.push(FieldError::new("draw_sample", format!("must be between 1 and {MAX_DRAW_SAMPLE}")));
    }

    match (age_bin, init_bin, errors.is_empty()) {
        (Some(a), Some(i), true) => Ok(Resolved { class: classes()[class_index(a, i)].clone(), times, quantiles }),
        _ => Err(errors),
    }
}

/// Validates `req` and computes its quantile band. Deterministic in
/// `req.seed`.
pub fn predict(posterior: &LoadedPosterior, req: &PredictionRequest) -> Result<PredictionResponse, ApiError> {
    let r = check(req).map_err(ApiError::Invalid)?;
    let x = posterior
        .report
        .features
        .encode_bins(r.class.age_bin, r.class.init_bin)
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    let p = &posterior.predictive;
    let band = p.band(&x, req.pre_treatment, &r.times, &r.quantiles, req.observation_noise, req.seed)?;
    let draws = match req.draw_sample {
        Some(n) => {
            let all = p.curve_draws(&x, req.pre_treatment, &r.times, req.observation_noise, req.seed)?;
            let n = n.min(all.len());
            Some((0..n).map(|i| all[i * all.len() / n].clone()).collect())
        }
        None => None,
    };
    Ok(PredictionResponse {
        fit_id: posterior.report.fit_id.clone(),
        max_rhat: posterior.report.max_rhat,
        class: r.class,
        pre_treatment: req.pre_treatment,
        observation_noise: req.observation_noise,
        n_draws: p.n_draws(),
        times: band.times,
        quantiles: band.quantiles,
        values: band.values,
        draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req() -> PredictionRequest {
        PredictionRequest { age: Some(60.0), pre_treatment: 0.7, ..Default::default() }
    }

    fn fields(r: &PredictionRequest) -> Vec<String> {
        check(r).err().unwrap_or_default().into_iter().map(|e| e.field).collect()
    }

    #[test]
    fn defaults_resolve() {
        let r = check(&req()).unwrap();
        assert_eq!(r.class.index, class_index(1, 2));
        assert_eq!(r.times.len(), SURVEY_MONTHS.len());
        assert_eq!(r.quantiles, DEFAULT_QUANTILES.to_vec());
    }

    #[test]
    fn explicit_bins_override() {
        let r = check(&PredictionRequest { age: None, age_bin: Some(2), init_bin: Some(0), ..req() }).unwrap();
        assert_eq!(r.class.index, class_index(2, 0));
    }

    #[test]
    fn every_bad_field_is_reported() {
        let bad = PredictionRequest {
            age: Some(-3.0),
            init_bin: Some(4),
            pre_treatment: 1.5,
            times: Some(vec![2.0, 1.0]),
            quantiles: Some(vec![0.9, 0.1]),
            draw_sample: Some(0),
            ..Default::default()
        };
        assert_eq!(fields(&bad), ["pre_treatment", "age", "init_bin", "times", "quantiles", "draw_sample"]);
        assert_eq!(fields(&PredictionRequest { age_bin: Some(0), ..req() }), ["age"]);
        assert_eq!(fields(&PredictionRequest { age: None, ..req() }), ["age"]);
        assert_eq!(fields(&PredictionRequest { times: Some(vec![]), ..req() }), ["times"]);
    }
}
