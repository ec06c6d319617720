//! The hierarchical recovery-curve model.
//!
//! Per patient `i` with covariates `x_i` and pre-treatment level `S_i`:
//!
//! ```text
//! A_i ~ beta_{m,phi}(logistic(z_A + b_A . x_i), phi_A)
//! B_i ~ beta_{m,phi}(logistic(z_B + b_B . x_i), phi_B)
//! C_i ~ gamma_{m,phi}(exp(z_C + b_C . x_i), phi_C)
//! f_i(t) = S_i (1 - A_i)(1 - B_i exp(-t / C_i))
//! y_i(t) ~ theta * bernoulli(p) + (1 - theta) * beta_{m,phi}(f_i(t), phi_M)
//! ```
//!
//! with `b ~ normal(0, s)` (standard deviation `s`), spreads drawn from
//! exponentials with rate `lambda` truncated to `(0, 1)`, and uniform `theta`,
//! `p`. The bias terms `z` centre every patient's prior at the average shape
//! `(mu_A, mu_B, mu_C)`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::curves::{shape_value, RecoveryShape};
use crate::dists::{ln_beta_mode_fast, ln_gamma_1p, DistError, ModeSpreadBeta, ModeSpreadGamma};
use crate::sampler::{Block, BlockTarget, Memo};

/// Modes handed to the observation beta are kept inside this margin of the
/// unit interval.
pub const MODE_CLAMP: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{name} = {value} is outside its domain ({expected})")]
    Domain { name: String, value: f64, expected: &'static str },
    #[error("dimension mismatch: covariates have length {covariates}, coefficients {coefficients}")]
    Dimension { covariates: usize, coefficients: usize },
    #[error("log posterior is not finite ({0}) at interior parameter values")]
    NonFinite(f64),
    #[error("unconstrained vector has length {got}, layout expects {expected}")]
    Layout { got: usize, expected: usize },
    #[error("hyperparameter config: {0}")]
    Config(String),
    #[error(transparent)]
    Dist(#[from] DistError),
}

fn domain(name: impl Into<String>, value: f64, expected: &'static str) -> ModelError {
    ModelError::Domain { name: name.into(), value, expected }
}

fn check_unit(name: &str, v: f64) -> Result<(), ModelError> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(domain(name, v, "(0, 1)"))
    }
}

fn check_pos(name: &str, v: f64) -> Result<(), ModelError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(domain(name, v, "> 0"))
    }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `ln(sigmoid(u))` and `ln(1 - sigmoid(u))` without cancellation.
#[inline]
fn ln_logistic_pair(u: f64) -> (f64, f64) {
    // ln sigmoid(u) = -softplus(-u); ln (1 - sigmoid(u)) = -softplus(u)
    (-softplus(-u), -softplus(u))
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Model hyperparameters. A `Some` spread is held fixed instead of sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub mu_a: f64,
    pub mu_b: f64,
    pub mu_c: f64,
    pub s_a: f64,
    pub s_b: f64,
    pub s_c: f64,
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub lambda_c: f64,
    pub lambda_m: f64,
    pub phi_a: Option<f64>,
    pub phi_b: Option<f64>,
    pub phi_c: Option<f64>,
}

impl Default for Hyperparameters {
    /// The simulation-study setting: average shape (0.4, 0.7, 5), unit prior
    /// scales, rate-10 spread priors, all spreads sampled.
    fn default() -> Self {
        Self {
            mu_a: 0.4,
            mu_b: 0.7,
            mu_c: 5.0,
            s_a: 1.0,
            s_b: 1.0,
            s_c: 1.0,
            lambda_a: 10.0,
            lambda_b: 10.0,
            lambda_c: 10.0,
            lambda_m: 10.0,
            phi_a: None,
            phi_b: None,
            phi_c: None,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<(), ModelError> {
        check_unit("mu_a", self.mu_a)?;
        check_unit("mu_b", self.mu_b)?;
        check_pos("mu_c", self.mu_c)?;
        for (n, v) in [("s_a", self.s_a), ("s_b", self.s_b), ("s_c", self.s_c)] {
            check_pos(n, v)?;
        }
        for (n, v) in [
            ("lambda_a", self.lambda_a),
            ("lambda_b", self.lambda_b),
            ("lambda_c", self.lambda_c),
            ("lambda_m", self.lambda_m),
        ] {
            check_pos(n, v)?;
        }
        for (n, v) in [("phi_a", self.phi_a), ("phi_b", self.phi_b), ("phi_c", self.phi_c)] {
            if let Some(v) = v {
                check_unit(n, v)?;
            }
        }
        Ok(())
    }

    pub fn with_average_shape(mut self, mu: (f64, f64, f64)) -> Self {
        (self.mu_a, self.mu_b, self.mu_c) = mu;
        self
    }
}

/// Flat key/value hyperparameter file. Missing `mu_*` keys are filled from
/// the data by the caller; missing `phi_*` keys select sampled spreads.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    pub mu_a: Option<f64>,
    pub mu_b: Option<f64>,
    pub mu_c: Option<f64>,
    pub s_a: Option<f64>,
    pub s_b: Option<f64>,
    pub s_c: Option<f64>,
    pub lambda_a: Option<f64>,
    pub lambda_b: Option<f64>,
    pub lambda_c: Option<f64>,
    pub lambda_m: Option<f64>,
    pub phi_a: Option<f64>,
    pub phi_b: Option<f64>,
    pub phi_c: Option<f64>,
}

impl HyperConfig {
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn has_average_shape(&self) -> bool {
        self.mu_a.is_some() && self.mu_b.is_some() && self.mu_c.is_some()
    }

    /// Resolves against defaults; `mu` overrides any `mu_*` left unset.
    pub fn resolve(&self, mu: Option<(f64, f64, f64)>) -> Result<Hyperparameters, ModelError> {
        let d = Hyperparameters::default();
        let (ma, mb, mc) = mu.unwrap_or((d.mu_a, d.mu_b, d.mu_c));
        let h = Hyperparameters {
            mu_a: self.mu_a.unwrap_or(ma),
            mu_b: self.mu_b.unwrap_or(mb),
            mu_c: self.mu_c.unwrap_or(mc),
            s_a: self.s_a.unwrap_or(d.s_a),
            s_b: self.s_b.unwrap_or(d.s_b),
            s_c: self.s_c.unwrap_or(d.s_c),
            lambda_a: self.lambda_a.unwrap_or(d.lambda_a),
            lambda_b: self.lambda_b.unwrap_or(d.lambda_b),
            lambda_c: self.lambda_c.unwrap_or(d.lambda_c),
            lambda_m: self.lambda_m.unwrap_or(d.lambda_m),
            phi_a: self.phi_a,
            phi_b: self.phi_b,
            phi_c: self.phi_c,
        };
        h.validate()?;
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasTerms {
    pub z_a: f64,
    pub z_b: f64,
    pub z_c: f64,
}

/// `z_A = logit(mu_A)`, `z_B = logit(mu_B)`, `z_C = ln(mu_C)`, so that zero
/// coefficients put every patient's modes at the average shape.
pub fn bias_terms(hyper: &Hyperparameters) -> Result<BiasTerms, ModelError> {
    check_unit("mu_a", hyper.mu_a)?;
    check_unit("mu_b", hyper.mu_b)?;
    check_pos("mu_c", hyper.mu_c)?;
    Ok(BiasTerms { z_a: logit(hyper.mu_a), z_b: logit(hyper.mu_b), z_c: hyper.mu_c.ln() })
}

fn dot(x: &[f64], b: &[f64]) -> Result<f64, ModelError> {
    if x.len() != b.len() {
        return Err(ModelError::Dimension { covariates: x.len(), coefficients: b.len() });
    }
    Ok(dot_unchecked(x, b))
}

#[inline]
fn dot_unchecked(x: &[f64], b: &[f64]) -> f64 {
    x.iter().zip(b).map(|(x, b)| x * b).sum()
}

pub fn mode_a(x: &[f64], b_a: &[f64], z_a: f64) -> Result<f64, ModelError> {
    Ok(logistic(z_a + dot(x, b_a)?))
}

pub fn mode_b(x: &[f64], b_b: &[f64], z_b: f64) -> Result<f64, ModelError> {
    Ok(logistic(z_b + dot(x, b_b)?))
}

pub fn mode_c(x: &[f64], b_c: &[f64], z_c: f64) -> Result<f64, ModelError> {
    Ok((z_c + dot(x, b_c)?).exp())
}

/// Population-level parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedParams {
    pub b_a: Vec<f64>,
    pub b_b: Vec<f64>,
    pub b_c: Vec<f64>,
    pub phi_a: f64,
    pub phi_b: f64,
    pub phi_c: f64,
    pub theta: f64,
    pub p: f64,
    pub phi_m: f64,
}

impl SharedParams {
    /// Simulation-study truth for `k` covariates: every coefficient of `b_A`,
    /// `b_B`, `b_C` set to 1, 2, 3; theta 0.1; p 0.3; all spreads 0.01.
    pub fn simulation_truth(k: usize) -> Self {
        Self {
            b_a: vec![1.0; k],
            b_b: vec![2.0; k],
            b_c: vec![3.0; k],
            phi_a: 0.01,
            phi_b: 0.01,
            phi_c: 0.01,
            theta: 0.1,
            p: 0.3,
            phi_m: 0.01,
        }
    }

    pub fn k(&self) -> usize {
        self.b_a.len()
    }

    /// `(name, value)` pairs using the sampler's output names.
    pub fn named_values(&self) -> Vec<(String, f64)> {
        let mut v = Vec::with_capacity(3 * self.k() + 6);
        for (g, b) in [("b_a", &self.b_a), ("b_b", &self.b_b), ("b_c", &self.b_c)] {
            v.extend(b.iter().enumerate().map(|(j, &x)| (format!("{g}[{j}]"), x)));
        }
        v.extend([
            ("phi_a".to_string(), self.phi_a),
            ("phi_b".to_string(), self.phi_b),
            ("phi_c".to_string(), self.phi_c),
            ("theta".to_string(), self.theta),
            ("p".to_string(), self.p),
            ("phi_m".to_string(), self.phi_m),
        ]);
        v
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let k = self.b_a.len();
        if self.b_b.len() != k || self.b_c.len() != k {
            return Err(ModelError::Dimension { covariates: k, coefficients: self.b_b.len().max(self.b_c.len()) });
        }
        for (n, v) in self.b_a.iter().chain(&self.b_b).chain(&self.b_c).map(|v| ("b", *v)) {
            if !v.is_finite() {
                return Err(domain(n, v, "finite"));
            }
        }
        for (n, v) in [
            ("phi_a", self.phi_a),
            ("phi_b", self.phi_b),
            ("phi_c", self.phi_c),
            ("theta", self.theta),
            ("p", self.p),
            ("phi_m", self.phi_m),
        ] {
            check_unit(n, v)?;
        }
        Ok(())
    }

    /// Conditional distributions of `(A, B, C)` for covariates `x`.
    pub fn patient_distributions(
        &self,
        x: &[f64],
        bias: &BiasTerms,
    ) -> Result<(ModeSpreadBeta, ModeSpreadBeta, ModeSpreadGamma), ModelError> {
        let ma = mode_a(x, &self.b_a, bias.z_a)?.clamp(MODE_CLAMP, 1.0 - MODE_CLAMP);
        let mb = mode_b(x, &self.b_b, bias.z_b)?.clamp(MODE_CLAMP, 1.0 - MODE_CLAMP);
        let mc = mode_c(x, &self.b_c, bias.z_c)?.clamp(f64::MIN_POSITIVE, f64::MAX);
        Ok((
            ModeSpreadBeta::new(ma, self.phi_a)?,
            ModeSpreadBeta::new(mb, self.phi_b)?,
            ModeSpreadGamma::new(mc, self.phi_c)?,
        ))
    }

    pub fn sample_patient<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        bias: &BiasTerms,
        rng: &mut R,
    ) -> Result<PatientParams, ModelError> {
        let (da, db, dc) = self.patient_distributions(x, bias)?;
        Ok(PatientParams { a: da.sample(rng), b: db.sample(rng), c: dc.sample(rng) })
    }

    /// One observation from the mixture likelihood at latent value `f`.
    pub fn sample_observation<R: Rng + ?Sized>(&self, f: f64, rng: &mut R) -> Result<f64, ModelError> {
        if rng.random::<f64>() < self.theta {
            Ok(if rng.random::<f64>() < self.p { 1.0 } else { 0.0 })
        } else {
            let m = f.clamp(MODE_CLAMP, 1.0 - MODE_CLAMP);
            Ok(ModeSpreadBeta::new(m, self.phi_m)?.sample(rng))
        }
    }
}

/// Per-patient curve parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl PatientParams {
    pub fn shape(&self) -> Result<RecoveryShape, crate::curves::CurveError> {
        RecoveryShape::new(self.a, self.b, self.c)
    }

    /// Latent function value `S * g(t)` for `t > 0`.
    #[inline]
    pub fn f(&self, s: f64, t: f64) -> f64 {
        s * shape_value(self.a, self.b, self.c, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientData {
    pub id: String,
    pub x: Vec<f64>,
    pub s: f64,
    pub obs: Vec<Observation>,
}

/// Model-ready data: covariates, pre-treatment level and observations per
/// patient. Values here are on the scale the model sees (scaled by `S` when
/// the caller models scaled values).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub k: usize,
    pub patients: Vec<PatientData>,
}

impl Dataset {
    pub fn new(k: usize, patients: Vec<PatientData>) -> Result<Self, ModelError> {
        let d = Self { k, patients };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for p in &self.patients {
            if p.x.len() != self.k {
                return Err(ModelError::Dimension { covariates: p.x.len(), coefficients: self.k });
            }
            if !(p.s > 0.0 && p.s <= 1.0) {
                return Err(domain(format!("S[{}]", p.id), p.s, "(0, 1]"));
            }
            for o in &p.obs {
                if !(o.t > 0.0 && o.t.is_finite()) {
                    return Err(domain(format!("t[{}]", p.id), o.t, "> 0"));
                }
                if !(0.0..=1.0).contains(&o.y) {
                    return Err(domain(format!("y[{}]", p.id), o.y, "[0, 1]"));
                }
            }
        }
        Ok(())
    }

    pub fn n_observations(&self) -> usize {
        self.patients.iter().map(|p| p.obs.len()).sum()
    }
}

/// Mixed discrete/continuous log likelihood of one observation.
///
/// `y` exactly 0 or 1 comes from the Bernoulli component only (the beta
/// density vanishes there), anything in between from the beta component.
pub fn log_likelihood_obs(y: f64, f: f64, theta: f64, p: f64, phi_m: f64) -> f64 {
    if y == 0.0 || y == 1.0 {
        theta.ln() + if y == 1.0 { p.ln() } else { (-p).ln_1p() }
    } else {
        let m = f.clamp(MODE_CLAMP, 1.0 - MODE_CLAMP);
        match ModeSpreadBeta::new(m, phi_m) {
            Ok(d) => (-theta).ln_1p() + d.ln_pdf(y),
            Err(_) => f64::NAN,
        }
    }
}

/// Log density of an exponential with rate `lambda` truncated to `(0, 1)`.
pub fn ln_truncated_exp(x: f64, lambda: f64) -> f64 {
    if !(x > 0.0 && x < 1.0) {
        return f64::NEG_INFINITY;
    }
    // ln(lambda / (1 - e^{-lambda})) computed stably for tiny rates.
    (lambda / -(-lambda).exp_m1()).ln() - lambda * x
}

/// Log density of `normal(0, sd)`.
pub fn ln_normal(x: f64, sd: f64) -> f64 {
    let z = x / sd;
    -0.5 * (2.0 * std::f64::consts::PI).ln() - sd.ln() - 0.5 * z * z
}

pub fn log_prior(shared: &SharedParams, hyper: &Hyperparameters) -> f64 {
    let mut lp = 0.0;
    for (b, s) in [(&shared.b_a, hyper.s_a), (&shared.b_b, hyper.s_b), (&shared.b_c, hyper.s_c)] {
        lp += b.iter().map(|&v| ln_normal(v, s)).sum::<f64>();
    }
    if hyper.phi_a.is_none() {
        lp += ln_truncated_exp(shared.phi_a, hyper.lambda_a);
    }
    if hyper.phi_b.is_none() {
        lp += ln_truncated_exp(shared.phi_b, hyper.lambda_b);
    }
    if hyper.phi_c.is_none() {
        lp += ln_truncated_exp(shared.phi_c, hyper.lambda_c);
    }
    lp + ln_truncated_exp(shared.phi_m, hyper.lambda_m)
}

/// Log density of a patient's `(A, B, C)` under its covariate-implied
/// distributions.
pub fn log_patient_conditional(
    patient: &PatientParams,
    x: &[f64],
    shared: &SharedParams,
    bias: &BiasTerms,
) -> Result<f64, ModelError> {
    let (da, db, dc) = shared.patient_distributions(x, bias)?;
    Ok(da.ln_pdf(patient.a) + db.ln_pdf(patient.b) + dc.ln_pdf(patient.c))
}

/// Unnormalised log posterior in constrained space.
pub fn log_posterior(
    shared: &SharedParams,
    patients: &[PatientParams],
    dataset: &Dataset,
    hyper: &Hyperparameters,
) -> Result<f64, ModelError> {
    if patients.len() != dataset.patients.len() {
        return Err(ModelError::Layout { got: patients.len(), expected: dataset.patients.len() });
    }
    let bias = bias_terms(hyper)?;
    let mut lp = log_prior(shared, hyper);
    for (pp, data) in patients.iter().zip(&dataset.patients) {
        lp += log_patient_conditional(pp, &data.x, shared, &bias)?;
        for o in &data.obs {
            lp += log_likelihood_obs(o.y, pp.f(data.s, o.t), shared.theta, shared.p, shared.phi_m);
        }
    }
    if lp.is_nan() || lp == f64::INFINITY {
        return Err(ModelError::NonFinite(lp));
    }
    if lp == f64::NEG_INFINITY {
        let interior = shared.validate().is_ok()
            && patients.iter().all(|p| p.a > 0.0 && p.a < 1.0 && p.b > 0.0 && p.b < 1.0 && p.c > 0.0);
        if interior {
            return Err(ModelError::NonFinite(lp));
        }
    }
    Ok(lp)
}

/// Draws shared parameters from the prior. Fixed spreads are copied from
/// the hyperparameters.
pub fn sample_prior<R: Rng + ?Sized>(hyper: &Hyperparameters, k: usize, rng: &mut R) -> SharedParams {
    use rand_distr::{Distribution, StandardNormal};
    let mut normal = |s: f64| -> Vec<f64> {
        (0..k).map(|_| s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect()
    };
    let b_a = normal(hyper.s_a);
    let b_b = normal(hyper.s_b);
    let b_c = normal(hyper.s_c);
    let mut trunc = |lambda: f64| -> f64 {
        // Inverse CDF of the truncated exponential.
        let u: f64 = rng.random::<f64>();
        let x = -(u * (-lambda).exp_m1()).ln_1p() / lambda;
        x.clamp(1e-12, 1.0 - 1e-12)
    };
    let phi_a = hyper.phi_a.unwrap_or_else(|| trunc(hyper.lambda_a));
    let phi_b = hyper.phi_b.unwrap_or_else(|| trunc(hyper.lambda_b));
    let phi_c = hyper.phi_c.unwrap_or_else(|| trunc(hyper.lambda_c));
    let phi_m = trunc(hyper.lambda_m);
    let theta = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
    let p = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
    SharedParams { b_a, b_b, b_c, phi_a, phi_b, phi_c, theta, p, phi_m }
}

/// Coordinate layout of the unconstrained parameter vector:
/// `b_A (k), b_B (k), b_C (k), [logit phi_A], [logit phi_B], [logit phi_C],
/// logit theta, logit p, logit phi_M`, then `logit A, logit B, ln C` per
/// patient. Fixed spreads have no coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub k: usize,
    pub n_patients: usize,
    pub free_phi: [bool; 3],
}

/// Index of a named scalar within the shared block, `None` if absent.
#[derive(Debug, Clone, Copy)]
struct SharedIdx {
    phi: [Option<usize>; 3],
    theta: usize,
    p: usize,
    phi_m: usize,
}

impl ParamLayout {
    pub fn new(k: usize, n_patients: usize, hyper: &Hyperparameters) -> Self {
        Self { k, n_patients, free_phi: [hyper.phi_a.is_none(), hyper.phi_b.is_none(), hyper.phi_c.is_none()] }
    }

    fn idx(&self) -> SharedIdx {
        let mut next = 3 * self.k;
        let mut phi = [None; 3];
        for (j, free) in self.free_phi.iter().enumerate() {
            if *free {
                phi[j] = Some(next);
                next += 1;
            }
        }
        SharedIdx { phi, theta: next, p: next + 1, phi_m: next + 2 }
    }

    pub fn shared_dim(&self) -> usize {
        3 * self.k + self.free_phi.iter().filter(|f| **f).count() + 3
    }

    pub fn dim(&self) -> usize {
        self.shared_dim() + 3 * self.n_patients
    }

    pub fn patient_offset(&self, i: usize) -> usize {
        self.shared_dim() + 3 * i
    }

    /// Names of the constrained parameters, one per coordinate.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dim());
        for g in ["b_a", "b_b", "b_c"] {
            for j in 0..self.k {
                names.push(format!("{g}[{j}]"));
            }
        }
        for (j, g) in ["phi_a", "phi_b", "phi_c"].iter().enumerate() {
            if self.free_phi[j] {
                names.push((*g).to_string());
            }
        }
        names.extend(["theta", "p", "phi_m"].map(String::from));
        for i in 0..self.n_patients {
            names.push(format!("a[{i}]"));
            names.push(format!("b[{i}]"));
            names.push(format!("c[{i}]"));
        }
        names
    }

    /// Names of the shared (population-level) parameters.
    pub fn shared_names(&self) -> Vec<String> {
        let mut n = self.names();
        n.truncate(self.shared_dim());
        n
    }
}

/// Maps constrained parameters to the unconstrained vector, returning
/// `ln |d constrained / d unconstrained|` alongside.
pub fn to_unconstrained(
    shared: &SharedParams,
    patients: &[PatientParams],
    layout: &ParamLayout,
) -> Result<(Vec<f64>, f64), ModelError> {
    if shared.k() != layout.k || patients.len() != layout.n_patients {
        return Err(ModelError::Layout { got: shared.k(), expected: layout.k });
    }
    let mut u = Vec::with_capacity(layout.dim());
    let mut log_jac = 0.0;
    let push_unit = |name: &str, v: f64, u: &mut Vec<f64>| -> Result<f64, ModelError> {
        check_unit(name, v)?;
        u.push(logit(v));
        Ok(v.ln() + (-v).ln_1p())
    };
    u.extend_from_slice(&shared.b_a);
    u.extend_from_slice(&shared.b_b);
    u.extend_from_slice(&shared.b_c);
    for (j, (n, v)) in
        [("phi_a", shared.phi_a), ("phi_b", shared.phi_b), ("phi_c", shared.phi_c)].into_iter().enumerate()
    {
        if layout.free_phi[j] {
            log_jac += push_unit(n, v, &mut u)?;
        }
    }
    log_jac += push_unit("theta", shared.theta, &mut u)?;
    log_jac += push_unit("p", shared.p, &mut u)?;
    log_jac += push_unit("phi_m", shared.phi_m, &mut u)?;
    for pp in patients {
        log_jac += push_unit("A", pp.a, &mut u)?;
        log_jac += push_unit("B", pp.b, &mut u)?;
        check_pos("C", pp.c)?;
        u.push(pp.c.ln());
        log_jac += pp.c.ln();
    }
    Ok((u, log_jac))
}

/// Inverse of [`to_unconstrained`]; fixed spreads come from `hyper`.
pub fn from_unconstrained(
    u: &[f64],
    layout: &ParamLayout,
    hyper: &Hyperparameters,
) -> Result<(SharedParams, Vec<PatientParams>), ModelError> {
    if u.len() != layout.dim() {
        return Err(ModelError::Layout { got: u.len(), expected: layout.dim() });
    }
    let k = layout.k;
    let idx = layout.idx();
    let fixed = [hyper.phi_a, hyper.phi_b, hyper.phi_c];
    let phi = |j: usize| -> Result<f64, ModelError> {
        match (idx.phi[j], fixed[j]) {
            (Some(i), _) => Ok(logistic(u[i])),
            (None, Some(v)) => Ok(v),
            (None, None) => Err(ModelError::Config("spread is neither sampled nor fixed".into())),
        }
    };
    let shared = SharedParams {
        b_a: u[0..k].to_vec(),
        b_b: u[k..2 * k].to_vec(),
        b_c: u[2 * k..3 * k].to_vec(),
        phi_a: phi(0)?,
        phi_b: phi(1)?,
        phi_c: phi(2)?,
        theta: logistic(u[idx.theta]),
        p: logistic(u[idx.p]),
        phi_m: logistic(u[idx.phi_m]),
    };
    let patients = (0..layout.n_patients)
        .map(|i| {
            let o = layout.patient_offset(i);
            PatientParams { a: logistic(u[o]), b: logistic(u[o + 1]), c: u[o + 2].exp() }
        })
        .collect();
    Ok((shared, patients))
}

/// Which group of coefficients a block touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Glm {
    A,
    B,
    C,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockRole {
    Coefficients(Glm),
    Spread(Glm),
    Theta,
    P,
    PhiM,
    Patient(usize),
    /// Moves coefficient `j` together with every patient's matching
    /// unconstrained parameter, shifted by `x_ij` times the same step.
    Shift(Glm, usize),
    /// Moves a free spread and scales every patient's matching
    /// unconstrained parameter about its mode by the change in spread scale.
    Rescale(Glm),
}

/// Per-spread constants reused across every patient in one evaluation.
#[derive(Debug, Clone, Copy)]
struct BetaConsts {
    s: f64,
    lg_total: f64,
}

impl BetaConsts {
    fn new(phi: f64) -> Self {
        let s = 1.0 / phi - 1.0;
        Self { s, lg_total: ln_gamma(2.0 + s) }
    }

    #[inline]
    fn ln_pdf(&self, x: f64, mode: f64) -> f64 {
        if !(x > 0.0 && x < 1.0) {
            return f64::NEG_INFINITY;
        }
        ln_beta_mode_fast(x, mode.clamp(MODE_CLAMP, 1.0 - MODE_CLAMP), self.s, self.lg_total)
    }
}

#[derive(Debug, Clone, Copy)]
struct GammaConsts {
    shape: f64,
    lg_shape: f64,
}

impl GammaConsts {
    fn new(phi: f64) -> Self {
        let shape = 1.0 / phi;
        Self { shape, lg_shape: ln_gamma(shape) }
    }

    /// Log density at `x = exp(log_x)` with mode `exp(log_mode)`.
    #[inline]
    fn ln_pdf_log(&self, log_x: f64, log_mode: f64) -> f64 {
        // rate = (shape - 1) / mode
        let ln_rate = (self.shape - 1.0).ln() - log_mode;
        let rate_x = (ln_rate + log_x).exp();
        let v = self.shape * ln_rate - self.lg_shape + (self.shape - 1.0) * log_x - rate_x;
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }
}

/// The hierarchical posterior as a block-structured sampling target over the
/// unconstrained vector (log density includes the transform Jacobian).
#[derive(Debug, Clone)]
pub struct PosteriorTarget {
    dataset: Dataset,
    hyper: Hyperparameters,
    bias: BiasTerms,
    layout: ParamLayout,
    idx: SharedIdx,
    blocks: Vec<(Block, BlockRole)>,
    /// Interior observations per patient as `(t, ln y, ln(1 - y))`.
    interior: Vec<Vec<(f64, f64, f64)>>,
    n_boundary: f64,
    n_interior: f64,
    n_ones: f64,
    n_zeros: f64,
    record_patients: bool,
}

impl PosteriorTarget {
    pub fn new(dataset: Dataset, hyper: Hyperparameters) -> Result<Self, ModelError> {
        dataset.validate()?;
        hyper.validate()?;
        let bias = bias_terms(&hyper)?;
        let layout = ParamLayout::new(dataset.k, dataset.patients.len(), &hyper);
        let idx = layout.idx();
        let k = layout.k;

        let mut blocks = Vec::new();
        let names = layout.names();
        for (g, glm) in [("b_a", Glm::A), ("b_b", Glm::B), ("b_c", Glm::C)].into_iter().enumerate() {
            if k > 0 {
                blocks.push((Block::coords(glm.0, (g * k..(g + 1) * k).collect()), BlockRole::Coefficients(glm.1)));
            }
        }
        for (j, glm) in [Glm::A, Glm::B, Glm::C].into_iter().enumerate() {
            if let Some(i) = idx.phi[j] {
                blocks.push((Block::coords(&names[i], vec![i]), BlockRole::Spread(glm)));
            }
        }
        blocks.push((Block::coords("theta", vec![idx.theta]), BlockRole::Theta));
        blocks.push((Block::coords("p", vec![idx.p]), BlockRole::P));
        blocks.push((Block::coords("phi_m", vec![idx.phi_m]), BlockRole::PhiM));
        for i in 0..layout.n_patients {
            let o = layout.patient_offset(i);
            blocks.push((Block::coords(format!("patient[{i}]"), vec![o, o + 1, o + 2]), BlockRole::Patient(i)));
        }
        for (g, glm) in [Glm::A, Glm::B, Glm::C].into_iter().enumerate() {
            for j in 0..k {
                let mut dir = vec![(g * k + j, 1.0)];
                for (i, p) in dataset.patients.iter().enumerate() {
                    if p.x[j] != 0.0 {
                        dir.push((layout.patient_offset(i) + g, p.x[j]));
                    }
                }
                let name = format!("shift_{}[{j}]", ["a", "b", "c"][g]);
                blocks.push((Block::direction(name, dir), BlockRole::Shift(glm, j)));
            }
        }
        for (g, glm) in [Glm::A, Glm::B, Glm::C].into_iter().enumerate() {
            if let Some(i) = idx.phi[g] {
                let mut coords = vec![i];
                coords.extend((0..layout.n_patients).map(|p| layout.patient_offset(p) + g));
                blocks
                    .push((Block::custom(format!("rescale_{}", ["a", "b", "c"][g]), coords), BlockRole::Rescale(glm)));
            }
        }

        let mut interior = Vec::with_capacity(dataset.patients.len());
        let (mut n_ones, mut n_zeros, mut n_interior) = (0.0, 0.0, 0.0);
        for p in &dataset.patients {
            let mut v = Vec::new();
            for o in &p.obs {
                if o.y == 1.0 {
                    n_ones += 1.0;
                } else if o.y == 0.0 {
                    n_zeros += 1.0;
                } else {
                    n_interior += 1.0;
                    v.push((o.t, o.y.ln(), (-o.y).ln_1p()));
                }
            }
            interior.push(v);
        }
        Ok(Self {
            dataset,
            hyper,
            bias,
            layout,
            idx,
            blocks,
            interior,
            n_boundary: n_ones + n_zeros,
            n_interior,
            n_ones,
            n_zeros,
            record_patients: true,
        })
    }

    /// Whether per-patient parameters are stored with each draw. Their
    /// running moments (and hence R-hat) are tracked either way.
    pub fn record_patients(mut self, yes: bool) -> Self {
        self.record_patients = yes;
        self
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn hyper(&self) -> &Hyperparameters {
        &self.hyper
    }

    pub fn bias(&self) -> &BiasTerms {
        &self.bias
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn decode(&self, u: &[f64]) -> Result<(SharedParams, Vec<PatientParams>), ModelError> {
        from_unconstrained(u, &self.layout, &self.hyper)
    }

    /// Chain starting point: shared coordinates uniform on `[-2, 2]`,
    /// patients at the modes implied by those shared values.
    pub fn initial_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut u = vec![0.0; self.layout.dim()];
        for v in u.iter_mut().take(self.layout.shared_dim()) {
            *v = rng.random_range(-2.0..=2.0);
        }
        self.fill_patient_modes(&mut u);
        u
    }

    /// Unconstrained point for given shared parameters with patients at
    /// their covariate-implied modes.
    pub fn point_at(&self, shared: &SharedParams) -> Result<Vec<f64>, ModelError> {
        let patients: Vec<_> = self
            .dataset
            .patients
            .iter()
            .map(|p| -> Result<PatientParams, ModelError> {
                let (da, db, dc) = shared.patient_distributions(&p.x, &self.bias)?;
                Ok(PatientParams { a: da.mode(), b: db.mode(), c: dc.mode() })
            })
            .collect::<Result<_, _>>()?;
        let mut s = shared.clone();
        let fixed = [self.hyper.phi_a, self.hyper.phi_b, self.hyper.phi_c];
        if let Some(v) = fixed[0] {
            s.phi_a = v;
        }
        if let Some(v) = fixed[1] {
            s.phi_b = v;
        }
        if let Some(v) = fixed[2] {
            s.phi_c = v;
        }
        Ok(to_unconstrained(&s, &patients, &self.layout)?.0)
    }

    fn fill_patient_modes(&self, u: &mut [f64]) {
        let k = self.layout.k;
        for (i, p) in self.dataset.patients.iter().enumerate() {
            let o = self.layout.patient_offset(i);
            let la = self.bias.z_a + dot_unchecked(&p.x, &u[0..k]);
            let lb = self.bias.z_b + dot_unchecked(&p.x, &u[k..2 * k]);
            let lc = self.bias.z_c + dot_unchecked(&p.x, &u[2 * k..3 * k]);
            let bound = logit(1.0 - 1e-9);
            u[o] = la.clamp(-bound, bound);
            u[o + 1] = lb.clamp(-bound, bound);
            u[o + 2] = lc.clamp(-700.0, 700.0);
        }
    }

    fn spread(&self, u: &[f64], j: usize) -> f64 {
        match self.idx.phi[j] {
            Some(i) => logistic(u[i]),
            None => [self.hyper.phi_a, self.hyper.phi_b, self.hyper.phi_c][j].expect("fixed spread"),
        }
    }

    fn coef<'a>(&self, u: &'a [f64], glm: Glm) -> &'a [f64] {
        let k = self.layout.k;
        let g = glm as usize;
        &u[g * k..(g + 1) * k]
    }

    fn z(&self, glm: Glm) -> f64 {
        match glm {
            Glm::A => self.bias.z_a,
            Glm::B => self.bias.z_b,
            Glm::C => self.bias.z_c,
        }
    }

    fn s_prior(&self, glm: Glm) -> f64 {
        match glm {
            Glm::A => self.hyper.s_a,
            Glm::B => self.hyper.s_b,
            Glm::C => self.hyper.s_c,
        }
    }

    fn lambda(&self, glm: Glm) -> f64 {
        match glm {
            Glm::A => self.hyper.lambda_a,
            Glm::B => self.hyper.lambda_b,
            Glm::C => self.hyper.lambda_c,
        }
    }

    /// Sum over patients of the conditional log density of one curve
    /// parameter given the GLM (constrained-space density, no Jacobian).
    fn glm_term(&self, u: &[f64], glm: Glm) -> f64 {
        let b = self.coef(u, glm);
        let z = self.z(glm);
        let phi = self.spread(u, glm as usize);
        let g = glm as usize;
        let mut total = 0.0;
        match glm {
            Glm::A | Glm::B => {
                let bc = BetaConsts::new(phi);
                for (i, p) in self.dataset.patients.iter().enumerate() {
                    let v = logistic(u[self.layout.patient_offset(i) + g]);
                    total += bc.ln_pdf(v, logistic(z + dot_unchecked(&p.x, b)));
                }
            }
            Glm::C => {
                let gc = GammaConsts::new(phi);
                for (i, p) in self.dataset.patients.iter().enumerate() {
                    let log_c = u[self.layout.patient_offset(i) + 2];
                    total += gc.ln_pdf_log(log_c, z + dot_unchecked(&p.x, b));
                }
            }
        }
        total
    }

    fn patient_hier(&self, u: &[f64], i: usize, a: &BetaConsts, b: &BetaConsts, c: &GammaConsts) -> f64 {
        let x = &self.dataset.patients[i].x;
        let o = self.layout.patient_offset(i);
        let k = self.layout.k;
        let la = self.bias.z_a + dot_unchecked(x, &u[0..k]);
        let lb = self.bias.z_b + dot_unchecked(x, &u[k..2 * k]);
        let lc = self.bias.z_c + dot_unchecked(x, &u[2 * k..3 * k]);
        a.ln_pdf(logistic(u[o]), logistic(la)) + b.ln_pdf(logistic(u[o + 1]), logistic(lb)) + c.ln_pdf_log(u[o + 2], lc)
    }

    /// Log Jacobian of patient `i`'s coordinates.
    fn patient_jac(&self, u: &[f64], i: usize) -> f64 {
        let o = self.layout.patient_offset(i);
        let (a1, a2) = ln_logistic_pair(u[o]);
        let (b1, b2) = ln_logistic_pair(u[o + 1]);
        a1 + a2 + b1 + b2 + u[o + 2]
    }

    /// Beta-component log density of patient `i`'s interior observations
    /// (mixture weight excluded).
    fn patient_lik(&self, u: &[f64], i: usize, m: &BetaConsts) -> f64 {
        let o = self.layout.patient_offset(i);
        let a = logistic(u[o]);
        let b = logistic(u[o + 1]);
        let c = u[o + 2].exp();
        let s = self.dataset.patients[i].s;
        let mut total = 0.0;
        for &(t, ly, l1y) in &self.interior[i] {
            let f = (s * shape_value(a, b, c, t)).clamp(MODE_CLAMP, 1.0 - MODE_CLAMP);
            let a1 = m.s * f;
            let b1 = m.s - a1;
            total += m.lg_total - ln_gamma_1p(a1) - ln_gamma_1p(b1) + a1 * ly + b1 * l1y;
        }
        total
    }

    fn patient_lik_memo(&self, u: &[f64], i: usize, m: &BetaConsts, memo: Option<&mut Memo>) -> f64 {
        match memo {
            None => self.patient_lik(u, i, m),
            Some(memo) => {
                let o = self.layout.patient_offset(i);
                let key = [u[o], u[o + 1], u[o + 2], u[self.idx.phi_m]];
                memo.get_or_insert_with(i, key, || self.patient_lik(u, i, m))
            }
        }
    }

    fn unit_jac(u: f64) -> f64 {
        let (a, b) = ln_logistic_pair(u);
        a + b
    }

    fn shared_consts(&self, u: &[f64]) -> (BetaConsts, BetaConsts, GammaConsts, BetaConsts) {
        (
            BetaConsts::new(self.spread(u, 0)),
            BetaConsts::new(self.spread(u, 1)),
            GammaConsts::new(self.spread(u, 2)),
            BetaConsts::new(logistic(u[self.idx.phi_m])),
        )
    }

    fn spread_prior(&self, u: &[f64], glm: Glm) -> f64 {
        let i = self.idx.phi[glm as usize].expect("free spread");
        ln_truncated_exp(logistic(u[i]), self.lambda(glm)) + Self::unit_jac(u[i])
    }

    fn coef_prior(&self, u: &[f64], glm: Glm) -> f64 {
        let s = self.s_prior(glm);
        self.coef(u, glm).iter().map(|&v| ln_normal(v, s)).sum()
    }
}

impl PosteriorTarget {
    fn block_density(&self, block: usize, u: &[f64], mut memo: Option<&mut Memo>) -> f64 {
        match self.blocks[block].1 {
            BlockRole::Coefficients(glm) => self.coef_prior(u, glm) + self.glm_term(u, glm),
            BlockRole::Spread(glm) => self.spread_prior(u, glm) + self.glm_term(u, glm),
            BlockRole::Theta => {
                let x = u[self.idx.theta];
                let (l, l1) = ln_logistic_pair(x);
                self.n_boundary * l + self.n_interior * l1 + l + l1
            }
            BlockRole::P => {
                let x = u[self.idx.p];
                let (l, l1) = ln_logistic_pair(x);
                self.n_ones * l + self.n_zeros * l1 + l + l1
            }
            BlockRole::PhiM => {
                let x = u[self.idx.phi_m];
                let cm = BetaConsts::new(logistic(x));
                let mut lp = ln_truncated_exp(logistic(x), self.hyper.lambda_m) + Self::unit_jac(x);
                for i in 0..self.layout.n_patients {
                    lp += self.patient_lik_memo(u, i, &cm, memo.as_deref_mut());
                }
                lp
            }
            BlockRole::Patient(i) => {
                let (ca, cb, cc, cm) = self.shared_consts(u);
                self.patient_hier(u, i, &ca, &cb, &cc)
                    + self.patient_jac(u, i)
                    + self.patient_lik_memo(u, i, &cm, memo.as_deref_mut())
            }
            BlockRole::Shift(glm, _) => self.coef_prior(u, glm) + self.glm_patients(u, glm, memo),
            BlockRole::Rescale(glm) => self.spread_prior(u, glm) + self.glm_patients(u, glm, memo),
        }
    }

    /// Every patient's hierarchical term for `glm` with its Jacobian, plus
    /// the likelihood.
    fn glm_patients(&self, u: &[f64], glm: Glm, mut memo: Option<&mut Memo>) -> f64 {
        let (ca, cb, cc, cm) = self.shared_consts(u);
        let mut lp = 0.0;
        for i in 0..self.layout.n_patients {
            let o = self.layout.patient_offset(i);
            let lin = self.z(glm) + dot_unchecked(&self.dataset.patients[i].x, self.coef(u, glm));
            lp += match glm {
                Glm::A => ca.ln_pdf(logistic(u[o]), logistic(lin)) + Self::unit_jac(u[o]),
                Glm::B => cb.ln_pdf(logistic(u[o + 1]), logistic(lin)) + Self::unit_jac(u[o + 1]),
                Glm::C => cc.ln_pdf_log(u[o + 2], lin) + u[o + 2],
            };
            lp += self.patient_lik_memo(u, i, &cm, memo.as_deref_mut());
        }
        lp
    }
}

impl BlockTarget for PosteriorTarget {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn blocks(&self) -> Vec<Block> {
        self.blocks.iter().map(|(b, _)| b.clone()).collect()
    }

    fn log_density(&self, u: &[f64]) -> f64 {
        let (ca, cb, cc, cm) = self.shared_consts(u);
        let mut lp = 0.0;
        for glm in [Glm::A, Glm::B, Glm::C] {
            lp += self.coef_prior(u, glm);
            if self.idx.phi[glm as usize].is_some() {
                lp += self.spread_prior(u, glm);
            }
        }
        let (it, ip, im) = (u[self.idx.theta], u[self.idx.p], u[self.idx.phi_m]);
        lp += Self::unit_jac(it) + Self::unit_jac(ip);
        lp += ln_truncated_exp(logistic(im), self.hyper.lambda_m) + Self::unit_jac(im);
        let (lt, l1t) = ln_logistic_pair(it);
        let (lpp, l1p) = ln_logistic_pair(ip);
        lp += self.n_boundary * lt + self.n_interior * l1t + self.n_ones * lpp + self.n_zeros * l1p;
        for i in 0..self.layout.n_patients {
            lp += self.patient_hier(u, i, &ca, &cb, &cc) + self.patient_jac(u, i) + self.patient_lik(u, i, &cm);
        }
        lp
    }

    fn block_log_density(&self, block: usize, u: &[f64]) -> f64 {
        self.block_density(block, u, None)
    }

    fn block_log_density_memo(&self, block: usize, u: &[f64], memo: &mut Memo) -> f64 {
        self.block_density(block, u, Some(memo))
    }

    /// The spread coordinate moves by `delta`. Each patient coordinate keeps
    /// its offset from the mode in units of the spread's scale: the logit
    /// of a beta draw has variance near `phi / (1 - phi)` and the log of a
    /// gamma draw near `phi`.
    fn custom_step(&self, block: usize, u: &mut [f64], delta: f64) -> f64 {
        let BlockRole::Rescale(glm) = self.blocks[block].1 else {
            panic!("block `{}` is not a custom block", self.blocks[block].0.name)
        };
        let g = glm as usize;
        let i = self.idx.phi[g].expect("free spread");
        let old = u[i];
        u[i] += delta;
        let ln_r = match glm {
            Glm::A | Glm::B => 0.5 * delta,
            Glm::C => 0.5 * (ln_logistic_pair(u[i]).0 - ln_logistic_pair(old).0),
        };
        let r = ln_r.exp();
        let z = self.z(glm);
        for (p, pd) in self.dataset.patients.iter().enumerate() {
            let o = self.layout.patient_offset(p) + g;
            let center = z + dot_unchecked(&pd.x, self.coef(u, glm));
            u[o] = center + (u[o] - center) * r;
        }
        self.layout.n_patients as f64 * ln_r
    }

    fn output_names(&self) -> Vec<String> {
        self.layout.names()
    }

    fn outputs(&self, u: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let sd = self.layout.shared_dim();
        out.extend_from_slice(&u[..3 * self.layout.k]);
        for &v in &u[3 * self.layout.k..sd] {
            out.push(logistic(v));
        }
        for i in 0..self.layout.n_patients {
            let o = self.layout.patient_offset(i);
            out.push(logistic(u[o]));
            out.push(logistic(u[o + 1]));
            out.push(u[o + 2].exp());
        }
    }

    fn stored_outputs(&self) -> usize {
        if self.record_patients {
            self.layout.dim()
        } else {
            self.layout.shared_dim()
        }
    }
}

/// Errors from [`fit`].
#[derive(Debug, Error)]
pub enum FitError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] crate::sampler::SamplerError),
}

/// Runs the sampler on the posterior of `dataset`. Chain `c` starts from a
/// point drawn with seed `config.seed + c`; per-patient draws are stored
/// only when `record_patients` is set.
pub fn fit(
    dataset: &Dataset,
    hyper: &Hyperparameters,
    config: &crate::sampler::SamplerConfig,
    record_patients: bool,
) -> Result<crate::sampler::PosteriorSamples, FitError> {
    use rand::SeedableRng;
    let target = PosteriorTarget::new(dataset.clone(), hyper.clone())?.record_patients(record_patients);
    let inits: Vec<Vec<f64>> = (0..config.n_chains)
        .map(|c| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(c as u64) ^ INIT_STREAM);
            target.initial_point(&mut rng)
        })
        .collect();
    Ok(crate::sampler::run_mcmc(&target, &inits, config)?)
}

/// Separates the initial-point stream from the chains' proposal streams.
const INIT_STREAM: u64 = 0x5eed_1417_0000_0000;
