//! Posterior-predictive recovery curves for a covariate profile.
//!
//! Each stored posterior draw of the shared parameters yields one curve: draw
//! `(A, B, C)` from their conditional distributions given the covariates and
//! evaluate `f(t)`. Bands are per-time quantiles over those curves.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{bias_terms, BiasTerms, Hyperparameters, ModelError, PatientParams, SharedParams};
use crate::sampler::{quantile_sorted, PosteriorSamples, SamplerError};

#[derive(Debug, Error)]
pub enum PredictError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Samples(#[from] SamplerError),
    #[error("invalid request: {field}: {message}")]
    Request { field: &'static str, message: String },
}

fn bad(field: &'static str, message: impl Into<String>) -> PredictError {
    PredictError::Request { field, message: message.into() }
}

pub const DEFAULT_QUANTILES: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];

/// Posterior draws of the shared parameters, ready for prediction.
#[derive(Debug, Clone)]
pub struct PosteriorPredictive {
    draws: Vec<SharedParams>,
    bias: BiasTerms,
    k: usize,
}

/// Per-time quantiles of `f(t)`; `values[i][j]` is quantile `j` at time `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveBand {
    pub times: Vec<f64>,
    pub quantiles: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl CurveBand {
    pub fn median(&self) -> Option<Vec<f64>> {
        let j = self.quantiles.iter().position(|&q| q == 0.5)?;
        Some(self.values.iter().map(|v| v[j]).collect())
    }
}

impl PosteriorPredictive {
    pub fn new(draws: Vec<SharedParams>, hyper: &Hyperparameters) -> Result<Self, PredictError> {
        if draws.is_empty() {
            return Err(SamplerError::Empty.into());
        }
        let k = draws[0].k();
        for d in &draws {
            d.validate()?;
        }
        Ok(Self { draws, bias: bias_terms(hyper)?, k })
    }

    /// Reads shared parameters named as the model's outputs (`b_a[0]`, ...,
    /// `phi_m`) from every stored draw. Spreads held fixed come from `hyper`.
    pub fn from_samples(samples: &PosteriorSamples, hyper: &Hyperparameters) -> Result<Self, PredictError> {
        let k = (0..).take_while(|j| samples.index(&format!("b_a[{j}]")).is_ok()).count();
        let col = |name: &str| samples.index(name);
        let cols_b =
            |g: &str| -> Result<Vec<usize>, SamplerError> { (0..k).map(|j| col(&format!("{g}[{j}]"))).collect() };
        let (ia, ib, ic) = (cols_b("b_a")?, cols_b("b_b")?, cols_b("b_c")?);
        let phi_col = |name: &str, fixed: Option<f64>| -> Result<Result<usize, f64>, SamplerError> {
            match fixed {
                Some(v) => Ok(Err(v)),
                None => col(name).map(Ok),
            }
        };
        let pa = phi_col("phi_a", hyper.phi_a)?;
        let pb = phi_col("phi_b", hyper.phi_b)?;
        let pc = phi_col("phi_c", hyper.phi_c)?;
        let (it, ip, im) = (col("theta")?, col("p")?, col("phi_m")?);
        let pick = |d: &[f64], c: &Result<usize, f64>| match c {
            Ok(i) => d[*i],
            Err(v) => *v,
        };
        let draws = samples
            .draws()
            .map(|d| SharedParams {
                b_a: ia.iter().map(|&i| d[i]).collect(),
                b_b: ib.iter().map(|&i| d[i]).collect(),
                b_c: ic.iter().map(|&i| d[i]).collect(),
                phi_a: pick(d, &pa),
                phi_b: pick(d, &pb),
                phi_c: pick(d, &pc),
                theta: d[it],
                p: d[ip],
                phi_m: d[im],
            })
            .collect();
        Self::new(draws, hyper)
    }

    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn draws(&self) -> &[SharedParams] {
        &self.draws
    }

    /// One `(A, B, C)` per posterior draw, deterministic in `seed`.
    pub fn patient_draws(&self, x: &[f64], seed: u64) -> Result<Vec<PatientParams>, PredictError> {
        if x.len() != self.k {
            return Err(bad("covariates", format!("expected {} values, got {}", self.k, x.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.draws.iter().map(|d| Ok(d.sample_patient(x, &self.bias, &mut rng)?)).collect()
    }

    /// Curves `f(t)` per draw (outer) and time (inner). `t = 0` gives `s`.
    /// With `observation_noise` each scaled value `g(t)` is replaced by a draw
    /// from the mixture likelihood around it, then multiplied by `s`.
    pub fn curve_draws(
        &self,
        x: &[f64],
        s: f64,
        times: &[f64],
        observation_noise: bool,
        seed: u64,
    ) -> Result<Vec<Vec<f64>>, PredictError> {
        validate_request(s, times)?;
        let patients = self.patient_draws(x, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b5e_7a7e);
        let mut out = Vec::with_capacity(patients.len());
        for (pp, shared) in patients.iter().zip(&self.draws) {
            let mut curve = Vec::with_capacity(times.len());
            for &t in times {
                let f = if t == 0.0 { s } else { pp.f(s, t) };
                curve.push(if observation_noise && t > 0.0 {
                    s * shared.sample_observation(pp.f(1.0, t), &mut rng)?
                } else {
                    f
                });
            }
            out.push(curve);
        }
        Ok(out)
    }

    pub fn band(
        &self,
        x: &[f64],
        s: f64,
        times: &[f64],
        quantiles: &[f64],
        observation_noise: bool,
        seed: u64,
    ) -> Result<CurveBand, PredictError> {
        if quantiles.is_empty() || quantiles.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return Err(bad("quantiles", "must be a nonempty list of values in [0, 1]"));
        }
        let curves = self.curve_draws(x, s, times, observation_noise, seed)?;
        let mut column = vec![0.0; curves.len()];
        let values = (0..times.len())
            .map(|i| {
                for (c, v) in curves.iter().zip(column.iter_mut()) {
                    *v = c[i];
                }
                column.sort_by(f64::total_cmp);
                quantiles.iter().map(|&q| quantile_sorted(&column, q)).collect()
            })
            .collect();
        Ok(CurveBand { times: times.to_vec(), quantiles: quantiles.to_vec(), values })
    }
}

pub fn validate_request(s: f64, times: &[f64]) -> Result<(), PredictError> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(bad("pre_treatment", format!("{s} is outside (0, 1]")));
    }
    if times.is_empty() {
        return Err(bad("times", "must not be empty"));
    }
    if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(bad("times", "must be finite and nonnegative"));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(bad("times", "must be strictly increasing"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sample_prior, Hyperparameters};

    fn predictive(n: usize) -> PosteriorPredictive {
        let hyper = Hyperparameters::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = (0..n).map(|_| sample_prior(&hyper, 2, &mut rng)).collect();
        PosteriorPredictive::new(draws, &hyper).unwrap()
    }

    #[test]
    fn band_is_ordered_and_enveloped() {
        let p = predictive(2000);
        let times = [0.0, 1.0, 2.0, 4.0, 12.0, 48.0];
        let band = p.band(&[0.3, -1.0], 0.8, &times, &DEFAULT_QUANTILES, false, 3).unwrap();
        assert_eq!(band.values[0], vec![0.8; 5]);
        for row in &band.values {
            assert!(row.windows(2).all(|w| w[0] <= w[1]));
            assert!(row.iter().all(|&v| (0.0..=0.8).contains(&v)));
        }
        for j in 0..5 {
            for i in 2..times.len() {
                assert!(band.values[i][j] >= band.values[i - 1][j]);
            }
        }
    }

    #[test]
    fn same_seed_same_band() {
        let p = predictive(500);
        let a = p.band(&[0.0, 1.0], 1.0, &[1.0, 24.0], &[0.5], true, 9).unwrap();
        let b = p.band(&[0.0, 1.0], 1.0, &[1.0, 24.0], &[0.5], true, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn request_validation() {
        let p = predictive(10);
        assert!(p.band(&[0.0, 0.0], 0.0, &[1.0], &[0.5], false, 0).is_err());
        assert!(p.band(&[0.0, 0.0], 1.1, &[1.0], &[0.5], false, 0).is_err());
        assert!(p.band(&[0.0, 0.0], 0.5, &[2.0, 1.0], &[0.5], false, 0).is_err());
        assert!(p.band(&[0.0, 0.0], 0.5, &[-1.0], &[0.5], false, 0).is_err());
        assert!(p.band(&[0.0], 0.5, &[1.0], &[0.5], false, 0).is_err());
        assert!(p.band(&[0.0, 0.0], 0.5, &[1.0], &[1.5], false, 0).is_err());
    }
}
