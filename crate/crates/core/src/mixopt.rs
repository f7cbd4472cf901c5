//! Domain-weight estimation on the probability simplex.
//!
//! The raw rule is a temperature softmax of the per-domain log-likelihood
//! difference (LLD) between target and base. The adjusted rule first solves
//! `(JᵀJ) w = LLD`, where `J` stacks the gradients of the per-domain mean
//! log-likelihoods, then applies the same softmax. Both are the closed-form
//! maximizer of `πᵀw - τ·KL(π, prior)` with a uniform prior, which is also
//! one entropic mirror-descent step from the prior. A weight trajectory is
//! collapsed to fixed weights by its normalized geometric mean, the KL
//! barycenter `argmin_π Σ_t KL(π, π_t)`.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::EvalCorpus;
use crate::error::{contract, Error, Result};
use crate::llspace::DomainLLVector;
use crate::tinylm::ModelCheckpoint;

/// Tolerance on `Σ π = 1` accepted by [`DomainWeights::new`].
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A labelled point on the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DomainWeights {
    labels: Vec<String>,
    values: Vec<f64>,
}

impl DomainWeights {
    pub fn new(labels: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if labels.len() != values.len() || labels.is_empty() {
            return contract(format!(
                "{} labels for {} weights",
                labels.len(),
                values.len()
            ));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = labels.iter().find(|l| !seen.insert(l.as_str())) {
            return contract(format!("duplicate domain label {dup:?}"));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return contract(format!("domain weight {v} is not a finite non-negative number"));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return contract(format!("domain weights sum to {sum}, not 1"));
        }
        Ok(Self { labels, values })
    }

    pub fn uniform(labels: Vec<String>) -> Self {
        let k = labels.len();
        Self {
            labels,
            values: vec![1.0 / k as f64; k],
        }
    }

    /// Normalizes non-negative masses onto the simplex.
    pub fn from_masses(labels: Vec<String>, masses: &[f64]) -> Result<Self> {
        let total: f64 = masses.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return contract("masses must have a positive finite sum");
        }
        Self::new(labels, masses.iter().map(|m| m / total).collect())
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.values)
    }

    pub fn is_uniform(&self) -> bool {
        let u = 1.0 / self.k() as f64;
        self.values.iter().all(|&v| v == u)
    }

    fn same_labels(&self, other: &DomainWeights) -> Result<()> {
        if self.labels != other.labels {
            return contract(format!(
                "domain labels differ: {:?} vs {:?}",
                self.labels, other.labels
            ));
        }
        Ok(())
    }
}

impl<'de> Deserialize<'de> for DomainWeights {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            labels: Vec<String>,
            values: Vec<f64>,
        }
        let raw = Raw::deserialize(d)?;
        DomainWeights::new(raw.labels, raw.values).map_err(serde::de::Error::custom)
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Softmax temperature. `Infinite` is the uniform-weights sentinel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Temperature {
    Finite(f64),
    Infinite,
}

impl Temperature {
    pub fn finite(tau: f64) -> Result<Self> {
        if tau.is_infinite() && tau > 0.0 {
            return Ok(Self::Infinite);
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return contract(format!("temperature must be positive, got {tau}"));
        }
        Ok(Self::Finite(tau))
    }

    pub fn value(&self) -> f64 {
        match self {
            Self::Finite(t) => *t,
            Self::Infinite => f64::INFINITY,
        }
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self::Finite(1.0)
    }
}

impl fmt::Display for Temperature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Finite(t) => write!(f, "{t}"),
            Self::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Temperature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinity" | "Inf" | "∞" => Ok(Self::Infinite),
            other => {
                let v: f64 = other
                    .parse()
                    .map_err(|_| Error::Config(format!("cannot parse temperature {other:?}")))?;
                Self::finite(v)
            }
        }
    }
}

impl Serialize for Temperature {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Finite(t) => s.serialize_f64(*t),
            Self::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Temperature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Temperature::finite(v),
            Raw::Text(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

/// Per-domain log-likelihood difference `ℓ_tgt - ℓ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lld {
    pub labels: Vec<String>,
    pub values: Vec<f64>,
}

impl Lld {
    pub fn spread(&self) -> f64 {
        let max = self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        max - min
    }
}

/// Unconstrained weights `(JᵀJ)⁻¹ LLD` (or any score vector fed to the
/// regularized solve).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TildeWeights(pub Vec<f64>);

pub fn lld(target: &DomainLLVector, current: &DomainLLVector) -> Result<Lld> {
    if target.values.len() != current.values.len() {
        return contract(format!(
            "LL vectors have {} and {} domains",
            target.values.len(),
            current.values.len()
        ));
    }
    if target.normalized != current.normalized {
        return contract("cannot difference a token-normalized LL vector with an unnormalized one");
    }
    if target.eval_digest != current.eval_digest {
        return contract("LL vectors were computed on different evaluation corpora");
    }
    if target.labels != current.labels {
        return contract("LL vectors label their domains differently");
    }
    Ok(Lld {
        labels: target.labels.clone(),
        values: target
            .values
            .iter()
            .zip(&current.values)
            .map(|(t, c)| t - c)
            .collect(),
    })
}

/// `softmax(log_prior + scores / τ)` with max subtraction; τ = ∞ returns
/// the prior (exact uniform when the prior is `None`).
fn tempered_softmax(scores: &[f64], tau: Temperature, log_prior: Option<&[f64]>) -> Result<Vec<f64>> {
    if let Some(v) = scores.iter().find(|v| !v.is_finite()) {
        return contract(format!("non-finite score {v}"));
    }
    let k = scores.len();
    let logits: Vec<f64> = match tau {
        Temperature::Infinite => match log_prior {
            None => return Ok(vec![1.0 / k as f64; k]),
            Some(lp) => lp.to_vec(),
        },
        Temperature::Finite(t) => scores
            .iter()
            .enumerate()
            .map(|(i, s)| s / t + log_prior.map_or(0.0, |lp| lp[i]))
            .collect(),
    };
    Ok(softmax(&logits))
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Raw LLD rule: `π_k ∝ exp(LLD_k / τ)`.
pub fn raw_lld_weights(diff: &Lld, tau: Temperature) -> Result<DomainWeights> {
    let values = tempered_softmax(&diff.values, tau, None)?;
    DomainWeights::new(diff.labels.clone(), values)
}

/// `JᵀJ` for the per-domain mean log-likelihood gradients of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainJacobianGram {
    pub k: usize,
    /// Row-major `k x k`.
    pub gram: Vec<f64>,
    pub ridge_used: f64,
    pub model_step: u64,
    pub normalized: bool,
}

impl DomainJacobianGram {
    pub fn from_matrix(k: usize, gram: Vec<f64>) -> Result<Self> {
        if gram.len() != k * k {
            return contract(format!("gram has {} entries, expected {}", gram.len(), k * k));
        }
        for i in 0..k {
            for j in 0..i {
                let (a, b) = (gram[i * k + j], gram[j * k + i]);
                if (a - b).abs() > 1e-9 * a.abs().max(b.abs()).max(1.0) {
                    return contract(format!("gram is not symmetric at ({i}, {j})"));
                }
            }
        }
        Ok(Self {
            k,
            gram,
            ridge_used: 0.0,
            model_step: 0,
            normalized: true,
        })
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.gram[i * self.k + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.k).map(|i| self.at(i, i)).sum()
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.k, self.k, &self.gram)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self.matrix().symmetric_eigen().eigenvalues.iter().cloned().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ev
    }

    /// The same Gram divided by its mean diagonal entry.
    pub fn scaled_to_unit_diagonal(&self) -> Self {
        let s = self.trace() / self.k as f64;
        let mut out = self.clone();
        if s > 0.0 {
            out.gram.iter_mut().for_each(|g| *g /= s);
        }
        out
    }

    /// `(JᵀJ + ridge·I)⁻¹`, row-major, for adjustment-matrix heatmaps.
    pub fn regularized_inverse(&self, ridge: f64) -> Result<Vec<f64>> {
        let m = self.matrix() + DMatrix::identity(self.k, self.k) * ridge;
        let inv = m
            .try_inverse()
            .ok_or_else(|| Error::Contract("gram is singular at this ridge".into()))?;
        Ok(inv.transpose().as_slice().to_vec())
    }
}

/// Gradients of every domain's mean log-likelihood (token-normalized or
/// per-text, matching `normalize`), one vector of length `P` per domain.
pub fn domain_jacobian(
    model: &ModelCheckpoint,
    eval: &EvalCorpus,
    normalize: bool,
) -> Result<Vec<Vec<f64>>> {
    (0..eval.k())
        .map(|k| {
            let denom = if normalize {
                eval.texts
                    .iter()
                    .filter(|t| t.domain == k)
                    .map(|t| t.tokens.len())
                    .sum::<usize>() as f64
            } else {
                eval.per_domain_counts[k] as f64
            };
            let items: Vec<(&[u8], f64)> = eval
                .texts
                .iter()
                .filter(|t| t.domain == k)
                .map(|t| (t.tokens.as_slice(), 1.0 / denom))
                .collect();
            model.grad_weighted_log_prob(&items).map(|(g, _)| g)
        })
        .collect()
}

pub fn gram_from_columns(columns: &[Vec<f64>], model_step: u64, normalized: bool) -> DomainJacobianGram {
    let k = columns.len();
    let mut gram = vec![0.0; k * k];
    for i in 0..k {
        for j in i..k {
            let dot: f64 = columns[i].iter().zip(&columns[j]).map(|(a, b)| a * b).sum();
            gram[i * k + j] = dot;
            gram[j * k + i] = dot;
        }
    }
    DomainJacobianGram {
        k,
        gram,
        ridge_used: 0.0,
        model_step,
        normalized,
    }
}

/// The domain-level Gram matrix of a model on the evaluation corpus:
/// `K` gradient evaluations plus `K²` dot products of length `P`.
pub fn gram_matrix(model: &ModelCheckpoint, eval: &EvalCorpus, normalize: bool) -> Result<DomainJacobianGram> {
    let cols = domain_jacobian(model, eval, normalize)?;
    Ok(gram_from_columns(&cols, model.step, normalize))
}

const MAX_CONDITION: f64 = 1e12;

#[derive(Clone, Debug, PartialEq)]
pub struct AdjustedWeights {
    pub weights: DomainWeights,
    pub tilde: TildeWeights,
    pub ridge_used: f64,
}

/// Adjusted LLD rule: solve `(JᵀJ + ridge·I) w = LLD`, then `π = softmax(w/τ)`.
///
/// If the requested ridge leaves the system singular or with condition
/// number above 1e12, the ridge is raised by decades starting from
/// `1e-8 · trace / K` up to `trace / K`.
pub fn adjusted_lld_weights(
    diff: &Lld,
    gram: &DomainJacobianGram,
    tau: Temperature,
    ridge: f64,
) -> Result<AdjustedWeights> {
    let k = gram.k;
    if diff.values.len() != k {
        return contract(format!("LLD has {} domains, gram has {k}", diff.values.len()));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return contract(format!("ridge must be finite and non-negative, got {ridge}"));
    }
    let ev = gram.eigenvalues();
    let (lo, hi) = (ev[0], ev[k - 1]);
    let acceptable = |r: f64| lo + r > 0.0 && (hi + r) / (lo + r) < MAX_CONDITION;
    let scale = gram.trace() / k as f64;
    let mut candidates = vec![ridge];
    if scale > 0.0 && scale.is_finite() {
        candidates.extend((0..=8).map(|i| scale * 1e-8 * 10f64.powi(i)).filter(|&r| r > ridge));
    }
    let chosen = candidates.into_iter().find(|&r| acceptable(r)).ok_or_else(|| {
        Error::Contract(
            "Gram matrix is singular even at the largest ridge; use the raw LLD rule instead".into(),
        )
    })?;
    let m = gram.matrix() + DMatrix::identity(k, k) * chosen;
    let rhs = DVector::from_column_slice(&diff.values);
    let sol = m
        .cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::Contract("regularized Gram is not positive definite".into()))?;
    let tilde: Vec<f64> = sol.iter().cloned().collect();
    let values = tempered_softmax(&tilde, tau, None)?;
    Ok(AdjustedWeights {
        weights: DomainWeights::new(diff.labels.clone(), values)?,
        tilde: TildeWeights(tilde),
        ridge_used: chosen,
    })
}

fn check_prior(prior: &DomainWeights, tilde: &TildeWeights) -> Result<Vec<f64>> {
    if tilde.0.len() != prior.k() {
        return contract(format!(
            "tilde has {} entries, prior has {}",
            tilde.0.len(),
            prior.k()
        ));
    }
    if let Some(i) = prior.values().iter().position(|&p| p <= 0.0) {
        return contract(format!(
            "prior weight of {:?} is zero; KL to the prior is undefined off its support",
            prior.labels()[i]
        ));
    }
    Ok(prior.values().iter().map(|p| p.ln()).collect())
}

/// Maximizer of `πᵀw - τ·KL(π, prior)`: `π_k ∝ prior_k · exp(w_k / τ)`.
pub fn solve_regularized(tilde: &TildeWeights, tau: Temperature, prior: &DomainWeights) -> Result<DomainWeights> {
    let log_prior = check_prior(prior, tilde)?;
    let values = tempered_softmax(&tilde.0, tau, Some(&log_prior))?;
    DomainWeights::new(prior.labels().to_vec(), values)
}

/// One entropic mirror-ascent step of size `1/τ` from `prior` along `w`:
/// map to the dual with `∇h(π) = log π + 1`, move, and map back with
/// `π ∝ exp(z - 1)`.
pub fn mirror_descent_step(prior: &DomainWeights, tilde: &TildeWeights, tau: Temperature) -> Result<DomainWeights> {
    check_prior(prior, tilde)?;
    if let Some(v) = tilde.0.iter().find(|v| !v.is_finite()) {
        return contract(format!("non-finite score {v}"));
    }
    let step = 1.0 / tau.value();
    let dual: Vec<f64> = prior
        .values()
        .iter()
        .zip(&tilde.0)
        .map(|(p, w)| p.ln() + 1.0 + step * w)
        .collect();
    let max = dual.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let primal: Vec<f64> = dual.iter().map(|z| ((z - 1.0) - (max - 1.0)).exp()).collect();
    let total: f64 = primal.iter().sum();
    DomainWeights::new(
        prior.labels().to_vec(),
        primal.iter().map(|p| p / total).collect(),
    )
}

/// Weights estimated at a strictly increasing sequence of steps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightTrajectory {
    pub entries: Vec<(u64, DomainWeights)>,
}

impl WeightTrajectory {
    pub fn push(&mut self, step: u64, weights: DomainWeights) -> Result<()> {
        if let Some((last, prev)) = self.entries.last() {
            if step <= *last {
                return contract(format!("trajectory step {step} does not follow {last}"));
            }
            prev.same_labels(&weights)?;
        }
        self.entries.push((step, weights));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn steps(&self) -> Vec<u64> {
        self.entries.iter().map(|(s, _)| *s).collect()
    }

    fn labels(&self) -> Result<Vec<String>> {
        match self.entries.first() {
            Some((_, w)) => Ok(w.labels().to_vec()),
            None => contract("empty weight trajectory"),
        }
    }
}

/// Normalized geometric mean of the trajectory, computed in log space.
pub fn aggregate_geometric(traj: &WeightTrajectory) -> Result<DomainWeights> {
    let labels = traj.labels()?;
    let k = labels.len();
    let mut log_sum = vec![0.0; k];
    for (step, w) in &traj.entries {
        for (i, &v) in w.values().iter().enumerate() {
            if v <= 0.0 {
                return contract(format!(
                    "weight of {:?} at step {step} is zero; the geometric aggregate needs strictly positive weights",
                    labels[i]
                ));
            }
            log_sum[i] += v.ln();
        }
    }
    let n = traj.len() as f64;
    let log_mean: Vec<f64> = log_sum.iter().map(|s| s / n).collect();
    DomainWeights::new(labels, softmax(&log_mean))
}

/// Componentwise arithmetic mean of the trajectory.
pub fn aggregate_arithmetic(traj: &WeightTrajectory) -> Result<DomainWeights> {
    let labels = traj.labels()?;
    let mut mean = vec![0.0; labels.len()];
    for (_, w) in &traj.entries {
        for (m, v) in mean.iter_mut().zip(w.values()) {
            *m += v;
        }
    }
    let n = traj.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    DomainWeights::from_masses(labels, &mean)
}

/// `KL(p ‖ q)` in nats over raw probability slices, with `0·log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return contract("KL between vectors of different lengths");
    }
    let mut total = 0.0;
    for (i, (&a, &b)) in p.iter().zip(q).enumerate() {
        if a > 0.0 {
            if b <= 0.0 {
                return contract(format!("support violation at index {i}: p = {a}, q = 0"));
            }
            total += a * (a / b).ln();
        }
    }
    Ok(total.max(0.0))
}

pub fn jensen_shannon(p: &[f64], q: &[f64]) -> Result<f64> {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok(0.5 * kl_divergence(p, &m)? + 0.5 * kl_divergence(q, &m)?)
}

pub fn kl_simplex(p: &DomainWeights, q: &DomainWeights) -> Result<f64> {
    p.same_labels(q)?;
    kl_divergence(p.values(), q.values())
}

pub fn jsd(p: &DomainWeights, q: &DomainWeights) -> Result<f64> {
    p.same_labels(q)?;
    jensen_shannon(p.values(), q.values())
}

/// Pairwise JSD matrix of a weight trajectory, row-major.
pub fn pairwise_jsd(traj: &WeightTrajectory) -> Result<Vec<f64>> {
    let n = traj.len();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = jsd(&traj.entries[i].1, &traj.entries[j].1)?;
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    Ok(out)
}

/// First-order prediction of the expected change in the domain LL vector
/// after one SGD ascent step with mixture `pi`: `η · JᵀJ · π`.
pub fn predicted_ll_delta(gram: &DomainJacobianGram, pi: &DomainWeights, eta: f64) -> Result<Vec<f64>> {
    if pi.k() != gram.k {
        return contract(format!("weights have {} domains, gram has {}", pi.k(), gram.k));
    }
    Ok((0..gram.k)
        .map(|i| {
            eta * (0..gram.k)
                .map(|j| gram.at(i, j) * pi.values()[j])
                .sum::<f64>()
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimize {
    Min,
    Max,
}

/// Exhaustive search over the barycentric grid of spacing `grid_step`
/// (`K <= 3`). Points are visited in lexicographic order of their
/// coordinates and only a strict improvement replaces the incumbent, so
/// ties resolve to the lexicographically first point.
pub fn brute_force_simplex_opt<F>(k: usize, grid_step: f64, mode: Optimize, objective: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(1..=3).contains(&k) {
        return contract(format!("grid search supports K <= 3, got K = {k}"));
    }
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return contract(format!("grid step must lie in (0, 1], got {grid_step}"));
    }
    let n = (1.0 / grid_step).round() as usize;
    let nf = n as f64;
    let better = |a: f64, b: f64| match mode {
        Optimize::Min => a < b,
        Optimize::Max => a > b,
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut consider = |point: Vec<f64>| {
        let v = objective(&point);
        if v.is_nan() {
            return;
        }
        match &best {
            Some((b, _)) if !better(v, *b) => {}
            _ => best = Some((v, point)),
        }
    };
    match k {
        1 => consider(vec![1.0]),
        2 => {
            for i in 0..=n {
                consider(vec![i as f64 / nf, (n - i) as f64 / nf]);
            }
        }
        _ => {
            for i in 0..=n {
                for j in 0..=(n - i) {
                    consider(vec![i as f64 / nf, j as f64 / nf, (n - i - j) as f64 / nf]);
                }
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::Contract("objective was NaN on every grid point".into()))
}
