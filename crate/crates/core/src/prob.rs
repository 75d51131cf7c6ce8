//! Probability vectors over a small vocabulary, temperature scaling, seeded
//! sampling, and the divergences used for distillation with their gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `Σ p = 1` accepted by [`Distribution::new`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Floor applied to probabilities inside training losses and their gradients.
pub const PROB_FLOOR: f64 = 1e-12;

/// A probability vector indexed by token id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Validates `probs`: non-empty, finite, non-negative, summing to one.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty".into()));
        }
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "entries must be finite and >= 0: {probs:?}"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("sums to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        assert!(index < len, "one-hot index {index} out of range {len}");
        let mut probs = vec![0.0; len];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn uniform(len: usize) -> Self {
        assert!(len > 0);
        Self {
            probs: vec![1.0 / len as f64; len],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, token: usize) -> f64 {
        self.probs[token]
    }

    /// Lowest token id among the most likely tokens.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    /// Re-tempers the distribution: `p^(1/T)` renormalised, one-hot argmax at
    /// `T = 0`, and the distribution itself at `T = 1`.
    pub fn with_temperature(&self, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        if temperature == 0.0 {
            return Ok(Self::one_hot(self.len(), self.argmax()));
        }
        if temperature == 1.0 {
            return Ok(self.clone());
        }
        let logs: Vec<f64> = self
            .probs
            .iter()
            .map(|&p| if p > 0.0 { p.ln() / temperature } else { f64::NEG_INFINITY })
            .collect();
        Ok(Self {
            probs: softmax_slice(&logs),
        })
    }
}

impl TryFrom<Vec<f64>> for Distribution {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Self::new(probs)
    }
}

impl From<Distribution> for Vec<f64> {
    fn from(d: Distribution) -> Self {
        d.probs
    }
}

/// Unnormalised log-space scores for one context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Logits {
    values: Vec<f64>,
}

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLogits);
        }
        Ok(Self { values })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

impl TryFrom<Vec<f64>> for Logits {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<Logits> for Vec<f64> {
    fn from(l: Logits) -> Self {
        l.values
    }
}

/// Generalised Jensen-Shannon weight, strictly inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct JsdBeta(f64);

impl JsdBeta {
    pub fn new(beta: f64) -> Result<Self> {
        if beta > 0.0 && beta < 1.0 {
            Ok(Self(beta))
        } else {
            Err(Error::InvalidBeta(beta))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for JsdBeta {
    type Error = Error;

    fn try_from(beta: f64) -> Result<Self> {
        Self::new(beta)
    }
}

impl From<JsdBeta> for f64 {
    fn from(b: JsdBeta) -> Self {
        b.0
    }
}

/// Divergence `D(p ‖ q)` between a reference `p` (teacher) and `q` (student).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DivergenceKind {
    /// `KL(p ‖ q)`.
    Fkl,
    /// `KL(q ‖ p)`.
    Rkl,
    /// `β·KL(p ‖ m) + (1−β)·KL(q ‖ m)` with `m = βp + (1−β)q`.
    Jsd { beta: JsdBeta },
    /// Half the L1 distance.
    Tvd,
}

impl DivergenceKind {
    pub fn jsd(beta: f64) -> Result<Self> {
        Ok(Self::Jsd {
            beta: JsdBeta::new(beta)?,
        })
    }

    /// Short label used in file names and CSV cells.
    pub fn label(&self) -> String {
        match self {
            Self::Fkl => "fkl".into(),
            Self::Rkl => "rkl".into(),
            Self::Jsd { beta } => format!("jsd{}", beta.get()),
            Self::Tvd => "tvd".into(),
        }
    }
}

/// Scales `weights` to sum to one.
pub fn normalize(weights: &[f64]) -> Result<Distribution> {
    if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
        return Err(Error::InvalidWeights);
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidWeights);
    }
    Ok(Distribution {
        probs: weights.iter().map(|w| w / total).collect(),
    })
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature.is_finite() && temperature >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(temperature))
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted softmax; `-inf` entries map to exactly zero.
fn softmax_slice(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn softmax_with_temperature(logits: &Logits, temperature: f64) -> Result<Distribution> {
    check_temperature(temperature)?;
    if temperature == 0.0 {
        return Ok(Distribution::one_hot(logits.len(), argmax(logits.values())));
    }
    let scaled: Vec<f64> = logits.values().iter().map(|v| v / temperature).collect();
    Ok(Distribution {
        probs: softmax_slice(&scaled),
    })
}

/// Inverse-CDF lookup for a uniform draw `u ∈ [0, 1)`.
pub fn sample_with_uniform(dist: &Distribution, u: f64) -> usize {
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (token, &p) in dist.probs().iter().enumerate() {
        if p > 0.0 {
            cumulative += p;
            last_positive = token;
            if u < cumulative {
                return token;
            }
        }
    }
    // rounding left the cumulative sum just below u
    last_positive
}

/// Draws one token, consuming exactly one uniform from `rng`.
pub fn sample_token<R: Rng + ?Sized>(dist: &Distribution, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    sample_with_uniform(dist, u)
}

fn check_lengths(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() == q.len() {
        Ok(())
    } else {
        Err(Error::VocabMismatch {
            left: p.len(),
            right: q.len(),
        })
    }
}

/// `KL(a ‖ b)` with `0·log 0 = 0`; infinite when `b` misses part of `a`'s support.
fn kl(a: &[f64], b: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&ai, &bi) in a.iter().zip(b) {
        if ai > 0.0 {
            if bi <= 0.0 {
                return f64::INFINITY;
            }
            total += ai * (ai / bi).ln();
        }
    }
    total
}

pub(crate) fn divergence_slices(kind: DivergenceKind, p: &[f64], q: &[f64]) -> f64 {
    match kind {
        DivergenceKind::Fkl => kl(p, q),
        DivergenceKind::Rkl => kl(q, p),
        DivergenceKind::Jsd { beta } => {
            let b = beta.get();
            let m: Vec<f64> = p.iter().zip(q).map(|(pi, qi)| b * pi + (1.0 - b) * qi).collect();
            b * kl(p, &m) + (1.0 - b) * kl(q, &m)
        }
        DivergenceKind::Tvd => tvd_slices(p, q),
    }
}

pub(crate) fn tvd_slices(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Exact divergence; KL-type divergences return `f64::INFINITY` on support mismatch.
pub fn divergence(kind: DivergenceKind, p: &Distribution, q: &Distribution) -> Result<f64> {
    check_lengths(p.probs(), q.probs())?;
    Ok(divergence_slices(kind, p.probs(), q.probs()))
}

/// Total variation distance, `½·Σ|p − q|`.
pub fn tvd(p: &Distribution, q: &Distribution) -> Result<f64> {
    divergence(DivergenceKind::Tvd, p, q)
}

/// Divergence evaluated with `q` (and, for reverse KL, `p`) floored at
/// [`PROB_FLOOR`]. This is the loss whose gradient [`divergence_grad_q`] returns.
pub(crate) fn floored_divergence_slices(kind: DivergenceKind, p: &[f64], q: &[f64]) -> f64 {
    let qf: Vec<f64> = q.iter().map(|&v| v.max(PROB_FLOOR)).collect();
    match kind {
        DivergenceKind::Rkl => {
            let pf: Vec<f64> = p.iter().map(|&v| v.max(PROB_FLOOR)).collect();
            kl(&qf, &pf)
        }
        _ => divergence_slices(kind, p, &qf),
    }
}

pub(crate) fn divergence_grad_slices(kind: DivergenceKind, p: &[f64], q: &[f64]) -> Vec<f64> {
    p.iter()
        .zip(q)
        .map(|(&pc, &qc)| {
            let qf = qc.max(PROB_FLOOR);
            match kind {
                DivergenceKind::Fkl => -pc / qf,
                DivergenceKind::Rkl => (qf / pc.max(PROB_FLOOR)).ln() + 1.0,
                DivergenceKind::Jsd { beta } => {
                    let b = beta.get();
                    let m = b * pc + (1.0 - b) * qf;
                    (1.0 - b) * (qf / m).ln()
                }
                DivergenceKind::Tvd => {
                    let diff = qc - pc;
                    if diff.abs() <= PROB_FLOOR {
                        0.0
                    } else {
                        0.5 * diff.signum()
                    }
                }
            }
        })
        .collect()
}

/// `∂D(p ‖ q)/∂q_c`, treating `q` as an unconstrained vector.
pub fn divergence_grad_q(kind: DivergenceKind, p: &Distribution, q: &Distribution) -> Result<Vec<f64>> {
    check_lengths(p.probs(), q.probs())?;
    Ok(divergence_grad_slices(kind, p.probs(), q.probs()))
}

/// Pulls a gradient with respect to `q = softmax(z)` back to the logits `z`.
pub fn chain_rule_logit_grad(d_dq: &[f64], q: &Distribution) -> Result<Vec<f64>> {
    check_lengths(d_dq, q.probs())?;
    let mean: f64 = d_dq.iter().zip(q.probs()).map(|(g, qc)| g * qc).sum();
    Ok(d_dq
        .iter()
        .zip(q.probs())
        .map(|(g, qc)| qc * (g - mean))
        .collect())
}
