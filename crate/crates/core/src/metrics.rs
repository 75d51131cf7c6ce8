//! Acceptance rates, block efficiency and speedup.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{generate, Context, LanguageModel, Token};
use crate::oracle::enumerate_seq_dist;
use crate::prob::tvd;
use crate::specdec::DecodeTrace;

/// Token-level acceptance rate `β = Σ_c min(p_c, q_c)`.
pub fn expected_beta<T, D>(target: &T, draft: &D, context: Context<'_>, temperature: f64) -> Result<f64>
where
    T: LanguageModel + ?Sized,
    D: LanguageModel + ?Sized,
{
    let p = target.next_dist(context, temperature)?;
    let q = draft.next_dist(context, temperature)?;
    if p.len() != q.len() {
        return Err(Error::VocabMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(p.probs().iter().zip(q.probs()).map(|(a, b)| a.min(*b)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaEstimate {
    /// Accepted draft tokens over output tokens, summed across all traces.
    pub pooled: f64,
    /// Mean of the per-trace ratios.
    pub per_example_mean: f64,
}

pub fn empirical_alpha(traces: &[DecodeTrace]) -> Result<AlphaEstimate> {
    let nonempty: Vec<&DecodeTrace> = traces.iter().filter(|t| !t.output.is_empty()).collect();
    if nonempty.is_empty() {
        return Err(Error::EmptyTraces);
    }
    let accepted: usize = nonempty.iter().map(|t| t.accepted_draft_tokens()).sum();
    let tokens: usize = nonempty.iter().map(|t| t.output.len()).sum();
    let per_example_mean = nonempty
        .iter()
        .map(|t| t.accepted_draft_tokens() as f64 / t.output.len() as f64)
        .sum::<f64>()
        / nonempty.len() as f64;
    Ok(AlphaEstimate {
        pooled: accepted as f64 / tokens as f64,
        per_example_mean,
    })
}

/// Mean tokens emitted per block, counting the residual or bonus token.
pub fn empirical_tau(traces: &[DecodeTrace]) -> Result<f64> {
    let blocks = traces.iter().flat_map(|t| &t.blocks);
    let (count, emitted) = blocks.fold((0usize, 0usize), |(n, e), b| (n + 1, e + b.emitted()));
    if count == 0 {
        return Err(Error::EmptyTraces);
    }
    Ok(emitted as f64 / count as f64)
}

/// `τ = (1 − α^{γ+1}) / (1 − α)`, with the limit `γ + 1` at `α = 1`.
pub fn theoretical_tau(alpha: f64, gamma: usize) -> f64 {
    if alpha >= 1.0 {
        return gamma as f64 + 1.0;
    }
    // geometric sum; stable near 1 where the closed form cancels
    (0..=gamma).map(|k| alpha.powi(k as i32)).sum()
}

/// `τ / (cγ + 1)`.
pub fn speedup(tau: f64, c: f64, gamma: usize) -> f64 {
    tau / (c * gamma as f64 + 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AlphaMethod {
    Exact,
    MonteCarlo { samples: usize, seed: u64 },
}

/// `α = 1 − E_{y~p≤T}[Σ_t TVD(p_t, q_t)] / L_p`, either by enumerating whole
/// target sequences or by sampling them.
pub fn alpha_from_tvd<T, D>(target: &T, draft: &D, prompt: &[Token], t_max: usize, method: AlphaMethod) -> Result<f64>
where
    T: LanguageModel + ?Sized,
    D: LanguageModel + ?Sized,
{
    match method {
        AlphaMethod::Exact => {
            let seqs = enumerate_seq_dist(target, prompt, t_max)?;
            let mut tvd_sum = 0.0;
            for (y, prob) in seqs.iter() {
                for t in 0..y.len() {
                    let ctx = Context::new(prompt, &y[..t]);
                    tvd_sum += prob * tvd(&target.next_dist(ctx, 1.0)?, &draft.next_dist(ctx, 1.0)?)?;
                }
            }
            Ok(1.0 - tvd_sum / seqs.mean_len())
        }
        AlphaMethod::MonteCarlo { samples, seed } => {
            if samples == 0 {
                return Err(Error::Config("Monte Carlo budget must be positive".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tvd_sum = 0.0;
            let mut len_sum = 0usize;
            for _ in 0..samples {
                let y = generate(target, prompt, t_max, 1.0, &mut rng)?;
                for t in 0..y.len() {
                    let ctx = Context::new(prompt, &y[..t]);
                    tvd_sum += 1.0 - expected_beta(target, draft, ctx, 1.0)?;
                }
                len_sum += y.len();
            }
            Ok(1.0 - tvd_sum / len_sum as f64)
        }
    }
}

/// One summary row; field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub alpha_empirical: f64,
    pub alpha_tvd: f64,
    pub tau_empirical: f64,
    pub tau_theoretical: f64,
    pub speedup: f64,
    pub c: f64,
    pub gamma: usize,
    pub l_p: f64,
}

impl MetricsReport {
    /// Builds the report from decoding traces and an independently computed `α`.
    pub fn from_traces(traces: &[DecodeTrace], alpha_tvd: f64, gamma: usize, c: f64) -> Result<Self> {
        let alpha = empirical_alpha(traces)?;
        let tau = empirical_tau(traces)?;
        let l_p = traces.iter().map(|t| t.output.len()).sum::<usize>() as f64 / traces.len() as f64;
        Ok(Self {
            alpha_empirical: alpha.pooled,
            alpha_tvd,
            tau_empirical: tau,
            tau_theoretical: theoretical_tau(alpha_tvd, gamma),
            speedup: speedup(tau, c, gamma),
            c,
            gamma,
            l_p,
        })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.serialize(self)?;
        out.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
