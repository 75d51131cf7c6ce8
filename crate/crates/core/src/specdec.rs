//! Speculative decoding: draft a block with the small model, verify it against
//! the target in one pass, and resample the first rejected position.
//!
//! Lossy decoding relaxes only the acceptance threshold through a lenience
//! function; the residual distribution always uses the raw `p` and `q`.

use std::fmt;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{Context, LanguageModel, Token};
use crate::prob::{normalize, sample_token, Distribution};

/// Residual mass below which the residual distribution falls back to `p`.
pub const RESIDUAL_MASS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LenienceKind {
    None,
    Lin,
    Sq,
    Exp,
}

impl fmt::Display for LenienceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Lin => "lin",
            Self::Sq => "sq",
            Self::Exp => "exp",
        })
    }
}

/// Lenience function `f(p, ε)` and its parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLenience", into = "RawLenience")]
pub struct LenienceSpec {
    kind: LenienceKind,
    epsilon: f64,
}

#[derive(Serialize, Deserialize)]
struct RawLenience {
    kind: LenienceKind,
    #[serde(default = "one")]
    epsilon: f64,
}

fn one() -> f64 {
    1.0
}

impl TryFrom<RawLenience> for LenienceSpec {
    type Error = Error;

    fn try_from(raw: RawLenience) -> Result<Self> {
        Self::new(raw.kind, raw.epsilon)
    }
}

impl From<LenienceSpec> for RawLenience {
    fn from(s: LenienceSpec) -> Self {
        Self {
            kind: s.kind,
            epsilon: s.epsilon,
        }
    }
}

impl LenienceSpec {
    /// `ε` must lie in `(0, 1]`; kind `None` always uses `ε = 1`.
    pub fn new(kind: LenienceKind, epsilon: f64) -> Result<Self> {
        if kind == LenienceKind::None {
            return Ok(Self::lossless());
        }
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::Config(format!("lenience epsilon must lie in (0, 1], got {epsilon}")));
        }
        Ok(Self { kind, epsilon })
    }

    pub fn lossless() -> Self {
        Self {
            kind: LenienceKind::None,
            epsilon: 1.0,
        }
    }

    pub fn kind(&self) -> LenienceKind {
        self.kind
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `f(p, ε)`: `p/ε`, `p/ε²`, `p^ε`, or `p` itself.
    pub fn value(&self, p: f64) -> f64 {
        match self.kind {
            LenienceKind::None => p,
            LenienceKind::Lin => p / self.epsilon,
            LenienceKind::Sq => p / (self.epsilon * self.epsilon),
            LenienceKind::Exp => {
                if p > 0.0 {
                    p.powf(self.epsilon)
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn lenience_value(spec: &LenienceSpec, p: f64) -> f64 {
    spec.value(p)
}

/// `min(1, f(p, ε)/q)` for a token the draft proposed with probability `q > 0`.
pub fn acceptance_probability(lenience: &LenienceSpec, p: f64, q: f64) -> f64 {
    if q <= 0.0 {
        return 1.0;
    }
    (lenience.value(p) / q).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecConfig {
    pub gamma: usize,
    pub t_max: usize,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default = "LenienceSpec::lossless")]
    pub lenience: LenienceSpec,
}

impl SpecConfig {
    pub fn new(gamma: usize, t_max: usize, temperature: f64, lenience: LenienceSpec) -> Result<Self> {
        let config = Self {
            gamma,
            t_max,
            temperature,
            lenience,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn lossless(gamma: usize, t_max: usize) -> Result<Self> {
        Self::new(gamma, t_max, 1.0, LenienceSpec::lossless())
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma < 1 || self.t_max < 1 {
            return Err(Error::Config(format!(
                "gamma and t_max must be >= 1, got {} and {}",
                self.gamma, self.t_max
            )));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::InvalidTemperature(self.temperature));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionKind {
    /// Sampled from the residual after a rejection.
    Residual,
    /// Sampled from the target after a fully accepted block.
    Bonus,
    /// No extra token: the block ended at EOS or at the length budget.
    None,
}

impl fmt::Display for CorrectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Residual => "residual",
            Self::Bonus => "bonus",
            Self::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub proposed: Vec<Token>,
    pub n_accepted: usize,
    pub correction: Option<Token>,
    pub correction_kind: CorrectionKind,
}

impl BlockRecord {
    /// Tokens this block appended to the output.
    pub fn emitted(&self) -> usize {
        self.n_accepted + usize::from(self.correction.is_some())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub blocks: Vec<BlockRecord>,
    pub output: Vec<Token>,
    pub draft_calls: usize,
    pub target_calls: usize,
}

impl DecodeTrace {
    pub fn accepted_draft_tokens(&self) -> usize {
        self.blocks.iter().map(|b| b.n_accepted).sum()
    }
}

/// `normalize(max(0, p − q))`, or `p` when the residual has (numerically) no mass.
pub fn residual_dist(p: &Distribution, q: &Distribution) -> Result<Distribution> {
    if p.len() != q.len() {
        return Err(Error::VocabMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    let weights: Vec<f64> = p.probs().iter().zip(q.probs()).map(|(a, b)| (a - b).max(0.0)).collect();
    if weights.iter().sum::<f64>() < RESIDUAL_MASS_FLOOR {
        return Ok(p.clone());
    }
    normalize(&weights)
}

/// One draft-then-verify block starting after `generated`.
///
/// Random draws are consumed in a fixed order: one per drafted token, then
/// exactly `gamma` acceptance uniforms, then one draw for the residual or
/// bonus token when there is one.
pub fn spec_step<T, D, R>(
    target: &T,
    draft: &D,
    prompt: &[Token],
    generated: &[Token],
    config: &SpecConfig,
    rng: &mut R,
) -> Result<(Vec<Token>, BlockRecord)>
where
    T: LanguageModel + ?Sized,
    D: LanguageModel + ?Sized,
    R: Rng + ?Sized,
{
    let eos = target.vocab().eos();
    if generated.last() == Some(&eos) || generated.len() >= config.t_max {
        return Err(Error::Config("spec_step called on a finished sequence".into()));
    }
    let budget = (config.t_max - generated.len()).min(config.gamma);

    let mut context = generated.to_vec();
    let mut proposed = Vec::with_capacity(budget);
    let mut draft_dists = Vec::with_capacity(budget);
    for _ in 0..budget {
        let q = draft.next_dist(Context::new(prompt, &context), config.temperature)?;
        let token = sample_token(&q, rng);
        proposed.push(token);
        draft_dists.push(q);
        context.push(token);
        if token == eos {
            break;
        }
    }

    let uniforms: Vec<f64> = (0..config.gamma).map(|_| rng.random::<f64>()).collect();

    let mut n_accepted = proposed.len();
    for (i, (&token, q)) in proposed.iter().zip(&draft_dists).enumerate() {
        let p = target.next_dist(Context::new(prompt, &context[..generated.len() + i]), config.temperature)?;
        let threshold = config.lenience.value(p.prob(token)) / q.prob(token);
        if uniforms[i] > threshold {
            n_accepted = i;
            let residual = residual_dist(&p, q)?;
            let correction = sample_token(&residual, rng);
            let mut emitted = proposed[..i].to_vec();
            emitted.push(correction);
            return Ok((
                emitted,
                BlockRecord {
                    proposed,
                    n_accepted,
                    correction: Some(correction),
                    correction_kind: CorrectionKind::Residual,
                },
            ));
        }
    }

    let mut emitted = proposed.clone();
    let finished = emitted.last() == Some(&eos) || generated.len() + emitted.len() >= config.t_max;
    let (correction, correction_kind) = if finished {
        (None, CorrectionKind::None)
    } else {
        let p = target.next_dist(Context::new(prompt, &context), config.temperature)?;
        let token = sample_token(&p, rng);
        emitted.push(token);
        (Some(token), CorrectionKind::Bonus)
    };
    Ok((
        emitted,
        BlockRecord {
            proposed,
            n_accepted,
            correction,
            correction_kind,
        },
    ))
}

/// Repeats [`spec_step`] until EOS is emitted or the output reaches `t_max`.
/// Each block costs one (parallel) target call and one draft call per drafted token.
pub fn spec_decode<T, D, R>(target: &T, draft: &D, prompt: &[Token], config: &SpecConfig, rng: &mut R) -> Result<DecodeTrace>
where
    T: LanguageModel + ?Sized,
    D: LanguageModel + ?Sized,
    R: Rng + ?Sized,
{
    config.validate()?;
    if target.vocab() != draft.vocab() {
        return Err(Error::VocabMismatch {
            left: target.vocab().size(),
            right: draft.vocab().size(),
        });
    }
    let eos = target.vocab().eos();
    let mut trace = DecodeTrace::default();
    while trace.output.len() < config.t_max && trace.output.last() != Some(&eos) {
        let (emitted, block) = spec_step(target, draft, prompt, &trace.output, config, rng)?;
        trace.draft_calls += block.proposed.len();
        trace.target_calls += 1;
        trace.output.extend(emitted);
        trace.blocks.push(block);
    }
    Ok(trace)
}

/// Cost in target-forward-pass units, with each draft pass costing `c`.
pub fn simulated_cost(trace: &DecodeTrace, c: f64) -> f64 {
    trace.target_calls as f64 + c * trace.draft_calls as f64
}

/// Cost per emitted token relative to plain target decoding (one pass per token).
pub fn relative_latency(traces: &[DecodeTrace], c: f64) -> f64 {
    let cost: f64 = traces.iter().map(|t| simulated_cost(t, c)).sum();
    let tokens: usize = traces.iter().map(|t| t.output.len()).sum();
    cost / tokens as f64
}

#[derive(Debug, Serialize)]
struct TraceRow<'a> {
    example_id: usize,
    block_index: usize,
    proposed_len: usize,
    n_accepted: usize,
    correction_kind: &'a str,
}

/// One CSV row per block: `example_id,block_index,proposed_len,n_accepted,correction_kind`.
pub fn write_trace_csv<W: Write>(writer: W, traces: &[DecodeTrace]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    for (example_id, trace) in traces.iter().enumerate() {
        for (block_index, block) in trace.blocks.iter().enumerate() {
            let kind = block.correction_kind.to_string();
            out.serialize(TraceRow {
                example_id,
                block_index,
                proposed_len: block.proposed.len(),
                n_accepted: block.n_accepted,
                correction_kind: &kind,
            })?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{random_tabular_lm, TabularLM, Vocab};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    fn lenient(kind: LenienceKind, eps: f64) -> LenienceSpec {
        LenienceSpec::new(kind, eps).unwrap()
    }

    #[test]
    fn lenience_examples() {
        assert_eq!(lenient(LenienceKind::Lin, 1.0).value(0.37), 0.37);
        assert!((lenient(LenienceKind::Sq, 0.1).value(0.004) - 0.4).abs() < 1e-15);
        assert!((lenient(LenienceKind::Exp, 1e-12).value(0.3) - 1.0).abs() < 1e-11);
        assert_eq!(LenienceSpec::new(LenienceKind::None, 0.2).unwrap().epsilon(), 1.0);
        assert!(LenienceSpec::new(LenienceKind::Lin, 0.0).is_err());
        assert!(LenienceSpec::new(LenienceKind::Exp, 1.5).is_err());
    }

    #[test]
    fn lenience_monotonicity() {
        let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let eps: Vec<f64> = vec![1.0, 0.5, 0.2, 0.1, 1e-2, 1e-5];
        for kind in [LenienceKind::Lin, LenienceKind::Sq, LenienceKind::Exp] {
            for w in eps.windows(2) {
                let (hi, lo) = (lenient(kind, w[0]), lenient(kind, w[1]));
                for &p in &grid {
                    assert!(lo.value(p) >= hi.value(p));
                }
            }
            let spec = lenient(kind, 0.3);
            for w in grid.windows(2) {
                assert!(spec.value(w[1]) >= spec.value(w[0]));
            }
        }
    }

    #[test]
    fn residual_examples() {
        let r = residual_dist(&dist(&[0.6, 0.4]), &dist(&[0.9, 0.1])).unwrap();
        assert_eq!(r.probs(), &[0.0, 1.0]);
        let p = dist(&[0.3, 0.7]);
        assert_eq!(residual_dist(&p, &p).unwrap(), p);
        let r = residual_dist(&dist(&[0.5, 0.3, 0.2]), &dist(&[0.2, 0.5, 0.3])).unwrap();
        assert_eq!(r.probs(), &[1.0, 0.0, 0.0]);
    }

    fn tiny_pair(seed: u64) -> (TabularLM, TabularLM) {
        let vocab = Vocab::with_size(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            random_tabular_lm(vocab, 1, 1.0, 0.0, &mut rng).unwrap(),
            random_tabular_lm(vocab, 1, 1.0, 0.0, &mut rng).unwrap(),
        )
    }

    #[test]
    fn identical_models_accept_everything() {
        let (target, _) = tiny_pair(1);
        let config = SpecConfig::lossless(3, 40).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let trace = spec_decode(&target, &target, &[1], &config, &mut rng).unwrap();
            for b in &trace.blocks {
                assert_eq!(b.n_accepted, b.proposed.len());
                assert_ne!(b.correction_kind, CorrectionKind::Residual);
            }
        }
    }

    #[test]
    fn identical_models_without_eos_fill_blocks() {
        let vocab = Vocab::with_size(3).unwrap();
        let m = TabularLM::iid(vocab, dist(&[0.0, 0.4, 0.6])).unwrap();
        let config = SpecConfig::lossless(3, 12).unwrap();
        let trace = spec_decode(&m, &m, &[], &config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(trace.blocks.len(), 3);
        assert_eq!(trace.output.len(), 12);
        assert!(trace.blocks.iter().all(|b| b.emitted() == 4 && b.correction_kind == CorrectionKind::Bonus));
        assert_eq!(trace.target_calls, 3);
        assert_eq!(trace.draft_calls, 9);
        assert!((simulated_cost(&trace, 0.1) - 3.9).abs() < 1e-12);
    }

    #[test]
    fn single_block_cost() {
        let vocab = Vocab::with_size(3).unwrap();
        let m = TabularLM::iid(vocab, dist(&[0.0, 0.4, 0.6])).unwrap();
        let config = SpecConfig::lossless(3, 4).unwrap();
        let trace = spec_decode(&m, &m, &[], &config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(trace.blocks.len(), 1);
        assert_eq!(trace.output.len(), 4);
        assert!((simulated_cost(&trace, 0.1) - 1.3).abs() < 1e-12);
    }

    #[test]
    fn greedy_accepts_iff_target_argmax() {
        let (target, draft) = tiny_pair(4);
        let config = SpecConfig::new(3, 10, 0.0, LenienceSpec::lossless()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let trace = spec_decode(&target, &draft, &[2], &config, &mut rng).unwrap();
            let mut prefix: Vec<Token> = Vec::new();
            for b in &trace.blocks {
                for (i, &tok) in b.proposed.iter().enumerate() {
                    let mut ctx = prefix.clone();
                    ctx.extend(&b.proposed[..i]);
                    let best = target.next_dist(Context::new(&[2], &ctx), 1.0).unwrap().argmax();
                    if i < b.n_accepted {
                        assert_eq!(tok, best);
                    } else if i == b.n_accepted {
                        assert_ne!(tok, best);
                        assert_eq!(b.correction, Some(best));
                    }
                }
                prefix.extend(&b.proposed[..b.n_accepted]);
                prefix.extend(b.correction);
            }
            assert_eq!(prefix, trace.output);
        }
    }

    #[test]
    fn trace_invariants_hold() {
        let (target, draft) = tiny_pair(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for gamma in 1..=4 {
            for t_max in [1, 2, 5, 9] {
                let config = SpecConfig::lossless(gamma, t_max).unwrap();
                for _ in 0..100 {
                    let trace = spec_decode(&target, &draft, &[1], &config, &mut rng).unwrap();
                    assert!(trace.output.len() <= t_max);
                    assert_eq!(trace.output.len(), trace.blocks.iter().map(BlockRecord::emitted).sum::<usize>());
                    assert!(trace.output.iter().rev().skip(1).all(|&t| t != 0));
                    for b in &trace.blocks {
                        assert!(b.proposed.len() <= gamma && b.n_accepted <= b.proposed.len());
                        let full = b.n_accepted == b.proposed.len();
                        if b.correction_kind == CorrectionKind::Bonus {
                            assert!(full && b.proposed.len() == gamma);
                        }
                        assert_eq!(b.correction_kind == CorrectionKind::Residual, !full);
                    }
                }
            }
        }
    }

    #[test]
    fn decoding_is_deterministic_given_seed() {
        let (target, draft) = tiny_pair(8);
        let config = SpecConfig::new(3, 12, 1.0, lenient(LenienceKind::Sq, 0.5)).unwrap();
        let a = spec_decode(&target, &draft, &[1], &config, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = spec_decode(&target, &draft, &[1], &config, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lower_epsilon_never_turns_accept_into_reject() {
        // same seed, same draft samples and uniforms: acceptance can only grow
        let (target, draft) = tiny_pair(10);
        for seed in 0..200 {
            for kind in [LenienceKind::Lin, LenienceKind::Sq, LenienceKind::Exp] {
                let mut prev = 0;
                for eps in [1.0, 0.7, 0.3, 0.1] {
                    let config = SpecConfig::new(4, 4, 1.0, lenient(kind, eps)).unwrap();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let (_, block) = spec_step(&target, &draft, &[1], &[], &config, &mut rng).unwrap();
                    assert!(block.n_accepted >= prev);
                    prev = block.n_accepted;
                }
            }
        }
    }

    #[test]
    fn trace_csv_layout() {
        let vocab = Vocab::with_size(3).unwrap();
        let m = TabularLM::iid(vocab, dist(&[0.0, 0.4, 0.6])).unwrap();
        let config = SpecConfig::lossless(2, 5).unwrap();
        let trace = spec_decode(&m, &m, &[], &config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &[trace]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "example_id,block_index,proposed_len,n_accepted,correction_kind\n\
             0,0,2,2,bonus\n\
             0,1,2,2,none\n"
        );
    }
}
