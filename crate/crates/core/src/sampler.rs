//! Adaptive random-walk Metropolis-within-Gibbs over unconstrained blocks.
//!
//! Each block is updated in turn with a symmetric Gaussian proposal. During
//! warmup the per-block proposal scale follows a Robbins-Monro recursion on
//! its logarithm toward the target acceptance rate, and multi-coordinate
//! blocks learn a proposal covariance over doubling windows. Adaptation is
//! frozen for the kept phase.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("chain {chain}: log density of block `{block}` is not finite ({value}) at the initial point")]
    NonFiniteInit { chain: usize, block: String, value: f64 },
    #[error("initial point has length {got}, target dimension is {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("no draws")]
    Empty,
    #[error("R-hat needs at least 2 chains and 10 draws per chain (got {chains} x {draws})")]
    TooFewChains { chains: usize, draws: usize },
    #[error("draw file: {0}")]
    Io(String),
}

/// Coordinates moved together by one Metropolis update.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockKind {
    /// A Gaussian step over these coordinates.
    Coords(Vec<usize>),
    /// A scalar step `delta` applied as `x[i] += w * delta` for each `(i, w)`.
    Direction(Vec<(usize, f64)>),
    /// A scalar step handed to [`BlockTarget::custom_step`], which may
    /// change any of these coordinates.
    Custom(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub kind: BlockKind,
}

impl Block {
    pub fn coords(name: impl Into<String>, idx: Vec<usize>) -> Self {
        Self { name: name.into(), kind: BlockKind::Coords(idx) }
    }

    pub fn direction(name: impl Into<String>, dir: Vec<(usize, f64)>) -> Self {
        Self { name: name.into(), kind: BlockKind::Direction(dir) }
    }

    pub fn custom(name: impl Into<String>, idx: Vec<usize>) -> Self {
        Self { name: name.into(), kind: BlockKind::Custom(idx) }
    }

    /// Number of free dimensions of the proposal.
    pub fn dim(&self) -> usize {
        match &self.kind {
            BlockKind::Coords(idx) => idx.len(),
            BlockKind::Direction(_) | BlockKind::Custom(_) => 1,
        }
    }

    /// Adds `scale * z` to the block's coordinates; an empty `z` is all ones.
    ///
    /// # Panics
    /// On a [`BlockKind::Custom`] block, which only its target can move.
    pub fn apply_step(&self, x: &mut [f64], scale: f64, z: &[f64]) {
        let zj = |j: usize| if z.is_empty() { 1.0 } else { z[j] };
        match &self.kind {
            BlockKind::Coords(idx) => {
                for (j, &i) in idx.iter().enumerate() {
                    x[i] += scale * zj(j);
                }
            }
            BlockKind::Direction(dir) => {
                let d = scale * zj(0);
                for &(i, w) in dir {
                    x[i] += w * d;
                }
            }
            BlockKind::Custom(_) => panic!("block `{}` is moved by its target", self.name),
        }
    }

    fn save(&self, x: &[f64], buf: &mut Vec<f64>) {
        buf.clear();
        match &self.kind {
            BlockKind::Coords(idx) | BlockKind::Custom(idx) => buf.extend(idx.iter().map(|&i| x[i])),
            BlockKind::Direction(dir) => buf.extend(dir.iter().map(|&(i, _)| x[i])),
        }
    }

    fn restore(&self, x: &mut [f64], buf: &[f64]) {
        match &self.kind {
            BlockKind::Coords(idx) | BlockKind::Custom(idx) => idx.iter().zip(buf).for_each(|(&i, &v)| x[i] = v),
            BlockKind::Direction(dir) => dir.iter().zip(buf).for_each(|(&(i, _), &v)| x[i] = v),
        }
    }
}

/// A log density over an unconstrained vector, split into Gibbs blocks.
///
/// `block_log_density(b, x)` may drop any term that does not depend on the
/// coordinates of block `b`; the sampler only compares it against itself.
pub trait BlockTarget: Sync {
    fn dim(&self) -> usize;

    fn blocks(&self) -> Vec<Block>;

    fn log_density(&self, x: &[f64]) -> f64;

    fn block_log_density(&self, _block: usize, x: &[f64]) -> f64 {
        self.log_density(x)
    }

    /// Same value as [`BlockTarget::block_log_density`], free to reuse
    /// terms stored in the chain's memo table.
    fn block_log_density_memo(&self, block: usize, x: &[f64], _memo: &mut Memo) -> f64 {
        self.block_log_density(block, x)
    }

    /// Moves custom block `block` by the scalar `delta` and returns the log
    /// Jacobian determinant of the map. Stepping by `-delta` from the result
    /// must return to `x`, which keeps the proposal symmetric.
    fn custom_step(&self, block: usize, _x: &mut [f64], _delta: f64) -> f64 {
        panic!("target has no custom step for block {block}")
    }

    /// Names of the values written by [`BlockTarget::outputs`].
    fn output_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("x[{i}]")).collect()
    }

    /// Constrained-space values reported for `x`.
    fn outputs(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(x);
    }

    /// How many leading outputs are stored per draw; the rest only
    /// contribute running moments to the convergence diagnostic.
    fn stored_outputs(&self) -> usize {
        self.output_names().len()
    }
}

/// Per-chain memo of scalar terms keyed by slot and exact input bits. Each
/// slot remembers its two most recent entries, which covers the current and
/// proposed states of a Metropolis step.
#[derive(Debug, Default, Clone)]
pub struct Memo {
    slots: Vec<[Option<([u64; 4], f64)>; 2]>,
    next: Vec<u8>,
}

impl Memo {
    pub fn get_or_insert_with(&mut self, slot: usize, key: [f64; 4], f: impl FnOnce() -> f64) -> f64 {
        if slot >= self.slots.len() {
            self.slots.resize(slot + 1, [None, None]);
            self.next.resize(slot + 1, 0);
        }
        let bits = key.map(f64::to_bits);
        for (k, v) in self.slots[slot].iter().flatten() {
            if *k == bits {
                return *v;
            }
        }
        let v = f();
        let j = usize::from(self.next[slot]);
        self.slots[slot][j] = Some((bits, v));
        self.next[slot] ^= 1;
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_keep: usize,
    pub thinning: usize,
    pub seed: u64,
    pub target_accept: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_chains: 4, n_warmup: 2500, n_keep: 2500, thinning: 1, seed: 0, target_accept: 0.44 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.n_chains == 0 || self.n_keep == 0 || self.thinning == 0 {
            return Err(SamplerError::Config("n_chains, n_keep and thinning must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(SamplerError::Config(format!("target acceptance {} outside (0, 1)", self.target_accept)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAcceptance {
    pub block: String,
    /// Post-warmup proposals accepted, summed over chains.
    pub accepted: u64,
    pub proposed: u64,
}

impl BlockAcceptance {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// Running mean and sum of squared deviations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }
}

/// Non-split potential scale reduction from per-chain moments.
pub fn rhat_from_moments(chains: &[Moments]) -> Result<f64, SamplerError> {
    let m = chains.len();
    let n = chains.first().map_or(0, |c| c.n);
    if m < 2 || n < 10 || chains.iter().any(|c| c.n != n) {
        return Err(SamplerError::TooFewChains { chains: m, draws: n as usize });
    }
    let nf = n as f64;
    let grand = chains.iter().map(|c| c.mean).sum::<f64>() / m as f64;
    let b_over_n = chains.iter().map(|c| (c.mean - grand).powi(2)).sum::<f64>() / (m - 1) as f64;
    let w = chains.iter().map(Moments::variance).sum::<f64>() / m as f64;
    if w == 0.0 {
        return Ok(if b_over_n == 0.0 { ((nf - 1.0) / nf).sqrt() } else { f64::INFINITY });
    }
    let var_plus = (nf - 1.0) / nf * w + b_over_n;
    Ok((var_plus / w).sqrt())
}

/// Gelman-Rubin statistic of one scalar across chains of equal length.
pub fn gelman_rubin(chains: &[&[f64]]) -> Result<f64, SamplerError> {
    let moments: Vec<Moments> = chains
        .iter()
        .map(|c| {
            let mut m = Moments::default();
            c.iter().for_each(|&v| m.push(v));
            m
        })
        .collect();
    rhat_from_moments(&moments)
}

/// Type-7 quantile of sorted data: `h = (n - 1) q`, linear interpolation
/// between the order statistics at `floor(h)` and `floor(h) + 1`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty data");
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantiles(values: &[f64], qs: &[f64]) -> Result<Vec<f64>, SamplerError> {
    if values.is_empty() {
        return Err(SamplerError::Empty);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(qs.iter().map(|&q| quantile_sorted(&v, q)).collect())
}

/// Kept draws of the stored outputs, per chain, plus diagnostics for all
/// outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub names: Vec<String>,
    /// `chains[c][iter * names.len() + j]`.
    pub chains: Vec<Vec<f64>>,
    pub n_keep: usize,
    /// R-hat for every output (stored or not).
    pub rhat: BTreeMap<String, f64>,
    pub acceptance: Vec<BlockAcceptance>,
    pub warnings: Vec<String>,
}

impl PosteriorSamples {
    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn index(&self, name: &str) -> Result<usize, SamplerError> {
        self.names.iter().position(|n| n == name).ok_or_else(|| SamplerError::UnknownParameter(name.into()))
    }

    pub fn draw(&self, chain: usize, iter: usize) -> &[f64] {
        let d = self.names.len();
        &self.chains[chain][iter * d..(iter + 1) * d]
    }

    /// Every kept draw, chain-major.
    pub fn draws(&self) -> impl Iterator<Item = &[f64]> + '_ {
        let d = self.names.len().max(1);
        self.chains.iter().flat_map(move |c| c.chunks(d))
    }

    pub fn chain_values(&self, name: &str) -> Result<Vec<Vec<f64>>, SamplerError> {
        let j = self.index(name)?;
        let d = self.names.len();
        Ok(self.chains.iter().map(|c| c.iter().skip(j).step_by(d).copied().collect()).collect())
    }

    pub fn pooled(&self, name: &str) -> Result<Vec<f64>, SamplerError> {
        Ok(self.chain_values(name)?.concat())
    }

    pub fn quantiles(&self, name: &str, qs: &[f64]) -> Result<Vec<f64>, SamplerError> {
        quantiles(&self.pooled(name)?, qs)
    }

    pub fn median(&self, name: &str) -> Result<f64, SamplerError> {
        Ok(self.quantiles(name, &[0.5])?[0])
    }

    /// R-hat recomputed from stored draws.
    pub fn gelman_rubin(&self, name: &str) -> Result<f64, SamplerError> {
        let chains = self.chain_values(name)?;
        let refs: Vec<&[f64]> = chains.iter().map(Vec::as_slice).collect();
        gelman_rubin(&refs)
    }

    /// Largest R-hat over all outputs; NaN entries count as non-converged.
    pub fn max_rhat(&self) -> f64 {
        self.rhat.values().fold(f64::NEG_INFINITY, |m, &r| if r.is_nan() { f64::INFINITY } else { m.max(r) })
    }

    /// Largest R-hat over the stored outputs only.
    pub fn max_rhat_stored(&self) -> f64 {
        self.names.iter().filter_map(|n| self.rhat.get(n)).fold(f64::NEG_INFINITY, |m, &r| {
            if r.is_nan() {
                f64::INFINITY
            } else {
                m.max(r)
            }
        })
    }

    /// One JSON object per kept draw: `{"chain", "iter", "params": {..}}`.
    pub fn write_ndjson<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (c, chain) in self.chains.iter().enumerate() {
            for (i, draw) in chain.chunks(self.names.len()).enumerate() {
                let params: serde_json::Map<String, serde_json::Value> =
                    self.names.iter().zip(draw).map(|(n, v)| (n.clone(), serde_json::json!(v))).collect();
                let rec = serde_json::json!({ "chain": c, "iter": i, "params": params });
                writeln!(w, "{rec}")?;
            }
        }
        Ok(())
    }

    /// Reads the format of [`PosteriorSamples::write_ndjson`]. Parameter
    /// names come back sorted; diagnostics are recomputed from the draws.
    pub fn read_ndjson<R: BufRead>(r: R) -> Result<Self, SamplerError> {
        #[derive(Deserialize)]
        struct Rec {
            chain: usize,
            params: serde_json::Map<String, serde_json::Value>,
        }
        let mut names: Option<Vec<String>> = None;
        let mut chains: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line.map_err(|e| SamplerError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Rec =
                serde_json::from_str(&line).map_err(|e| SamplerError::Io(format!("line {}: {e}", lineno + 1)))?;
            let names = names.get_or_insert_with(|| rec.params.keys().cloned().collect());
            if rec.params.len() != names.len() {
                return Err(SamplerError::Io(format!("line {}: parameter set differs", lineno + 1)));
            }
            if chains.len() <= rec.chain {
                chains.resize(rec.chain + 1, Vec::new());
            }
            for n in names.iter() {
                let v =
                    rec.params.get(n).and_then(serde_json::Value::as_f64).ok_or_else(|| {
                        SamplerError::Io(format!("line {}: missing or non-numeric `{n}`", lineno + 1))
                    })?;
                chains[rec.chain].push(v);
            }
        }
        let names = names.ok_or(SamplerError::Empty)?;
        let n_keep = chains.first().map_or(0, |c| c.len() / names.len().max(1));
        if n_keep == 0 || chains.iter().any(|c| c.len() != n_keep * names.len()) {
            return Err(SamplerError::Io("chains are empty or of unequal length".into()));
        }
        let mut s = Self { names, chains, n_keep, rhat: BTreeMap::new(), acceptance: Vec::new(), warnings: Vec::new() };
        if s.n_chains() >= 2 && n_keep >= 10 {
            for n in s.names.clone() {
                let r = s.gelman_rubin(&n)?;
                s.rhat.insert(n, r);
            }
        }
        Ok(s)
    }
}

/// Proposal state of one block.
#[derive(Debug, Clone)]
struct Proposal {
    log_scale: f64,
    /// Lower Cholesky factor of the proposal shape (row-major, `d x d`).
    chol: Vec<f64>,
    d: usize,
    window: WindowMoments,
}

#[derive(Debug, Clone)]
struct WindowMoments {
    n: usize,
    mean: Vec<f64>,
    cross: Vec<f64>,
}

impl WindowMoments {
    fn new(d: usize) -> Self {
        Self { n: 0, mean: vec![0.0; d], cross: vec![0.0; d * d] }
    }

    fn push(&mut self, v: &[f64]) {
        self.n += 1;
        let d = self.mean.len();
        let n = self.n as f64;
        let delta: Vec<f64> = v.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl / n;
        }
        for i in 0..d {
            for j in 0..d {
                self.cross[i * d + j] += delta[i] * (v[j] - self.mean[j]);
            }
        }
    }
}

impl Proposal {
    fn new(d: usize) -> Self {
        let mut chol = vec![0.0; d * d];
        for i in 0..d {
            chol[i * d + i] = 1.0;
        }
        Self { log_scale: (0.5 / (d as f64).sqrt()).ln(), chol, d, window: WindowMoments::new(d) }
    }

    fn draw(&self, eps: &[f64], z: &mut Vec<f64>) {
        z.clear();
        for i in 0..self.d {
            z.push((0..=i).map(|j| self.chol[i * self.d + j] * eps[j]).sum());
        }
    }

    /// Replaces the proposal shape with the regularised window covariance.
    fn refit(&mut self) {
        let d = self.d;
        let n = self.window.n;
        if d > 1 && n >= 20 * d {
            let nf = n as f64;
            let shrink = 5.0 / (nf + 5.0);
            let mut cov = DMatrix::from_row_slice(d, d, &self.window.cross) / (nf - 1.0) * (nf / (nf + 5.0));
            for i in 0..d {
                cov[(i, i)] += 1e-3 * shrink;
            }
            if let Some(ch) = cov.cholesky() {
                let l = ch.l() * (2.38 / (d as f64).sqrt());
                for i in 0..d {
                    for j in 0..d {
                        self.chol[i * d + j] = l[(i, j)];
                    }
                }
                self.log_scale = 0.0;
            }
        }
        self.window = WindowMoments::new(d);
    }
}

fn is_window_end(t: usize, n_warmup: usize) -> bool {
    // Doubling windows of 100, 200, 400, ... warmup iterations, with the
    // final stretch left for scale adaptation only.
    let mut end = 100;
    while end + 100 <= n_warmup.saturating_sub(n_warmup / 10) {
        if t + 1 == end {
            return true;
        }
        end *= 2;
    }
    false
}

struct ChainResult {
    draws: Vec<f64>,
    moments: Vec<Moments>,
    accepted: Vec<u64>,
    proposed: Vec<u64>,
    nan_proposals: u64,
}

fn run_chain<T: BlockTarget + ?Sized>(
    target: &T,
    blocks: &[Block],
    init: &[f64],
    config: &SamplerConfig,
    chain: usize,
) -> ChainResult {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(chain as u64));
    let mut x = init.to_vec();
    let mut props: Vec<Proposal> = blocks.iter().map(|b| Proposal::new(b.dim())).collect();
    let n_stored = target.stored_outputs();
    let n_out = target.output_names().len();
    let mut draws = Vec::with_capacity(config.n_keep * n_stored);
    let mut moments = vec![Moments::default(); n_out];
    let mut accepted = vec![0u64; blocks.len()];
    let mut proposed = vec![0u64; blocks.len()];
    let mut nan_proposals = 0u64;
    let mut saved = Vec::new();
    let mut eps = Vec::new();
    let mut z = Vec::new();
    let mut out = Vec::with_capacity(n_out);
    let mut coords = Vec::new();
    let mut memo = Memo::default();
    let total = config.n_warmup + config.n_keep * config.thinning;

    for t in 0..total {
        let warm = t < config.n_warmup;
        for (bi, block) in blocks.iter().enumerate() {
            let p = &mut props[bi];
            let current = target.block_log_density_memo(bi, &x, &mut memo);
            eps.clear();
            eps.extend((0..p.d).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)));
            p.draw(&eps, &mut z);
            block.save(&x, &mut saved);
            let log_jac = match block.kind {
                BlockKind::Custom(_) => target.custom_step(bi, &mut x, p.log_scale.exp() * z[0]),
                _ => {
                    block.apply_step(&mut x, p.log_scale.exp(), &z);
                    0.0
                }
            };
            let proposal = target.block_log_density_memo(bi, &x, &mut memo) + log_jac;
            let log_u = rand::Rng::random::<f64>(&mut rng).ln();
            let accept = if proposal.is_nan() {
                nan_proposals += 1;
                false
            } else {
                log_u < proposal - current
            };
            if !accept {
                block.restore(&mut x, &saved);
            }
            if warm {
                let gain = (t as f64 + 1.0).powf(-0.6);
                p.log_scale += gain * (f64::from(u8::from(accept)) - config.target_accept);
                if p.d > 1 {
                    if let BlockKind::Coords(idx) = &block.kind {
                        coords.clear();
                        coords.extend(idx.iter().map(|&i| x[i]));
                        p.window.push(&coords);
                    }
                    if is_window_end(t, config.n_warmup) {
                        p.refit();
                    }
                }
            } else {
                proposed[bi] += 1;
                accepted[bi] += u64::from(accept);
            }
        }
        if !warm && (t - config.n_warmup + 1) % config.thinning == 0 {
            target.outputs(&x, &mut out);
            draws.extend_from_slice(&out[..n_stored]);
            for (m, &v) in moments.iter_mut().zip(&out) {
                m.push(v);
            }
        }
    }
    ChainResult { draws, moments, accepted, proposed, nan_proposals }
}

/// Runs one chain per initial point and merges the results.
pub fn run_mcmc<T: BlockTarget + ?Sized>(
    target: &T,
    inits: &[Vec<f64>],
    config: &SamplerConfig,
) -> Result<PosteriorSamples, SamplerError> {
    config.validate()?;
    if inits.len() != config.n_chains {
        return Err(SamplerError::Config(format!("{} initial points for {} chains", inits.len(), config.n_chains)));
    }
    let blocks = target.blocks();
    for (c, init) in inits.iter().enumerate() {
        if init.len() != target.dim() {
            return Err(SamplerError::Dimension { got: init.len(), expected: target.dim() });
        }
        for (bi, b) in blocks.iter().enumerate() {
            let v = target.block_log_density(bi, init);
            if !v.is_finite() {
                return Err(SamplerError::NonFiniteInit { chain: c, block: b.name.clone(), value: v });
            }
        }
    }

    let results: Vec<ChainResult> = std::thread::scope(|s| {
        let handles: Vec<_> = inits
            .iter()
            .enumerate()
            .map(|(c, init)| {
                let blocks = &blocks;
                s.spawn(move || run_chain(target, blocks, init, config, c))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("chain panicked")).collect()
    });

    let out_names = target.output_names();
    let n_stored = target.stored_outputs();
    let mut rhat = BTreeMap::new();
    if config.n_chains >= 2 && config.n_keep >= 10 {
        for (j, name) in out_names.iter().enumerate() {
            let m: Vec<Moments> = results.iter().map(|r| r.moments[j]).collect();
            rhat.insert(name.clone(), rhat_from_moments(&m)?);
        }
    }
    let mut warnings = Vec::new();
    let acceptance: Vec<BlockAcceptance> = blocks
        .iter()
        .enumerate()
        .map(|(bi, b)| BlockAcceptance {
            block: b.name.clone(),
            accepted: results.iter().map(|r| r.accepted[bi]).sum(),
            proposed: results.iter().map(|r| r.proposed[bi]).sum(),
        })
        .collect();
    for a in &acceptance {
        if a.proposed > 0 && a.accepted == 0 {
            warnings.push(format!("block `{}` accepted no proposals after warmup", a.block));
        }
    }
    let nan: u64 = results.iter().map(|r| r.nan_proposals).sum();
    if nan > 0 {
        warnings.push(format!("{nan} proposals had an undefined log density and were rejected"));
    }
    Ok(PosteriorSamples {
        names: out_names[..n_stored].to_vec(),
        chains: results.into_iter().map(|r| r.draws).collect(),
        n_keep: config.n_keep,
        rhat,
        acceptance,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Normal1;

    impl BlockTarget for Normal1 {
        fn dim(&self) -> usize {
            1
        }
        fn blocks(&self) -> Vec<Block> {
            vec![Block::coords("x", vec![0])]
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            -0.5 * x[0] * x[0]
        }
    }

    /// Beta(1.5, 1.5) on the logit scale with the transform Jacobian.
    struct LogitBeta;

    impl BlockTarget for LogitBeta {
        fn dim(&self) -> usize {
            1
        }
        fn blocks(&self) -> Vec<Block> {
            vec![Block::coords("y", vec![0])]
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            let p = 1.0 / (1.0 + (-x[0]).exp());
            // density 0.5 ln p + 0.5 ln(1-p), Jacobian ln p + ln(1-p)
            1.5 * (p.ln() + (1.0 - p).ln())
        }
        fn outputs(&self, x: &[f64], out: &mut Vec<f64>) {
            out.clear();
            out.push(1.0 / (1.0 + (-x[0]).exp()));
        }
    }

    /// Correlated 2-d Gaussian, sampled as one block.
    struct Corr2;

    impl BlockTarget for Corr2 {
        fn dim(&self) -> usize {
            2
        }
        fn blocks(&self) -> Vec<Block> {
            vec![Block::coords("xy", vec![0, 1])]
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            let r: f64 = 0.9;
            let (a, b) = (x[0], x[1]);
            -(a * a - 2.0 * r * a * b + b * b) / (2.0 * (1.0 - r * r))
        }
    }

    fn inits(n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|c| vec![c as f64 * 0.5 - 0.75; d]).collect()
    }

    #[test]
    fn standard_normal_moments() {
        let cfg = SamplerConfig { seed: 11, ..Default::default() };
        let s = run_mcmc(&Normal1, &inits(4, 1), &cfg).unwrap();
        let v = s.pooled("x[0]").unwrap();
        assert_eq!(v.len(), 10_000);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
        assert!(mean.abs() < 0.1, "{mean}");
        assert!(sd > 0.9 && sd < 1.1, "{sd}");
        assert!(s.max_rhat() < 1.05);
        let rate = s.acceptance[0].rate();
        assert!((rate - 0.44).abs() < 0.08, "{rate}");
    }

    #[test]
    fn logit_beta_mean() {
        let cfg = SamplerConfig { seed: 2, ..Default::default() };
        let s = run_mcmc(&LogitBeta, &inits(4, 1), &cfg).unwrap();
        let v = s.pooled("x[0]").unwrap();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
        assert!(v.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn correlated_block_learns_shape() {
        let cfg = SamplerConfig { seed: 5, ..Default::default() };
        let s = run_mcmc(&Corr2, &inits(4, 2), &cfg).unwrap();
        let a = s.pooled("x[0]").unwrap();
        let b = s.pooled("x[1]").unwrap();
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
        let vb = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n;
        let r = cov / (va * vb).sqrt();
        assert!((r - 0.9).abs() < 0.05, "{r}");
        let rate = s.acceptance[0].rate();
        assert!(rate > 0.15 && rate < 0.7, "{rate}");
    }

    #[test]
    fn same_seed_same_draws() {
        let cfg = SamplerConfig { n_warmup: 200, n_keep: 300, seed: 9, ..Default::default() };
        let a = run_mcmc(&Normal1, &inits(4, 1), &cfg).unwrap();
        let b = run_mcmc(&Normal1, &inits(4, 1), &cfg).unwrap();
        assert_eq!(a.chains, b.chains);
        let c = run_mcmc(&Normal1, &inits(4, 1), &SamplerConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.chains, c.chains);
    }

    #[test]
    fn thinning_keeps_requested_count() {
        let cfg = SamplerConfig { n_chains: 2, n_warmup: 50, n_keep: 40, thinning: 3, seed: 1, ..Default::default() };
        let s = run_mcmc(&Normal1, &inits(2, 1), &cfg).unwrap();
        assert!(s.chains.iter().all(|c| c.len() == 40));
    }

    struct Broken;

    impl BlockTarget for Broken {
        fn dim(&self) -> usize {
            2
        }
        fn blocks(&self) -> Vec<Block> {
            vec![Block::coords("fine", vec![0]), Block::coords("bad", vec![1])]
        }
        fn log_density(&self, _x: &[f64]) -> f64 {
            0.0
        }
        fn block_log_density(&self, b: usize, _x: &[f64]) -> f64 {
            if b == 1 {
                f64::NEG_INFINITY
            } else {
                0.0
            }
        }
    }

    #[test]
    fn non_finite_init_names_block() {
        let cfg = SamplerConfig { n_chains: 1, ..Default::default() };
        match run_mcmc(&Broken, &inits(1, 2), &cfg) {
            Err(SamplerError::NonFiniteInit { block, .. }) => assert_eq!(block, "bad"),
            other => panic!("{other:?}"),
        }
    }

    /// Every proposal lands at -inf, so nothing is ever accepted.
    struct Spike;

    impl BlockTarget for Spike {
        fn dim(&self) -> usize {
            1
        }
        fn blocks(&self) -> Vec<Block> {
            vec![Block::coords("spike", vec![0])]
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            if x[0] == 0.25 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        }
    }

    #[test]
    fn zero_acceptance_warns() {
        let cfg = SamplerConfig { n_chains: 2, n_warmup: 20, n_keep: 20, ..Default::default() };
        let s = run_mcmc(&Spike, &[vec![0.25], vec![0.25]], &cfg).unwrap();
        assert_eq!(s.warnings.len(), 1);
        assert!(s.warnings[0].contains("spike"));
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig { n_keep: 0, ..Default::default() }.validate().is_err());
        assert!(SamplerConfig { target_accept: 1.0, ..Default::default() }.validate().is_err());
        assert!(run_mcmc(&Normal1, &inits(3, 1), &SamplerConfig::default()).is_err());
    }

    #[test]
    fn memo_keeps_two_entries() {
        let mut m = Memo::default();
        let mut calls = 0;
        let mut get = |m: &mut Memo, k: f64| {
            m.get_or_insert_with(3, [k, 0.0, 0.0, 0.0], || {
                calls += 1;
                k * 2.0
            })
        };
        assert_eq!(get(&mut m, 1.0), 2.0);
        assert_eq!(get(&mut m, 2.0), 4.0);
        assert_eq!(get(&mut m, 1.0), 2.0);
        assert_eq!(get(&mut m, 3.0), 6.0);
        assert_eq!(get(&mut m, 2.0), 4.0);
        assert_eq!(get(&mut m, 1.0), 2.0);
        assert_eq!(calls, 4);
    }

    #[test]
    fn rhat_examples() {
        let c: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let r = gelman_rubin(&[&c, &c, &c, &c]).unwrap();
        assert!((r - (99.0f64 / 100.0).sqrt()).abs() < 1e-12);
        let zeros = vec![0.0; 50];
        let ones = vec![1.0; 50];
        assert!(gelman_rubin(&[&zeros, &ones]).unwrap() > 1.2);
        assert!(matches!(gelman_rubin(&[&c]), Err(SamplerError::TooFewChains { .. })));
        assert!(gelman_rubin(&[&c[..5], &c[..5]]).is_err());
    }

    #[test]
    fn quantile_examples() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(quantiles(&v, &[0.5]).unwrap(), vec![50.5]);
        assert_eq!(quantiles(&v, &[0.0, 1.0]).unwrap(), vec![1.0, 100.0]);
        assert_eq!(quantiles(&[3.0; 7], &[0.1, 0.5, 0.9]).unwrap(), vec![3.0; 3]);
        assert!(quantiles(&[], &[0.5]).is_err());
    }

    #[test]
    fn ndjson_round_trip() {
        let cfg = SamplerConfig { n_warmup: 50, n_keep: 30, seed: 4, ..Default::default() };
        let s = run_mcmc(&Normal1, &inits(4, 1), &cfg).unwrap();
        let mut buf = Vec::new();
        s.write_ndjson(&mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 120);
        let back = PosteriorSamples::read_ndjson(buf.as_slice()).unwrap();
        assert_eq!(back.chain_values("x[0]").unwrap(), s.chain_values("x[0]").unwrap());
        assert!((back.rhat["x[0]"] - s.rhat["x[0]"]).abs() < 1e-9);
    }
}
