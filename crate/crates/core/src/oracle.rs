//! Brute-force exact computations on tiny instances.
//!
//! Everything here enumerates sequences (or, for [`exact_alpha_markov`], the
//! finite set of context keys) instead of sampling, so results carry only
//! floating-point error. Size guards are hard limits: an oversized instance is
//! an error, never a silent approximation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{Context, LanguageModel, Token};
use crate::prob::{tvd, Distribution};
use crate::specdec::{acceptance_probability, residual_dist, SpecConfig};

/// Largest vocabulary / horizon [`enumerate_seq_dist`] accepts.
pub const MAX_ENUM_VOCAB: usize = 5;
pub const MAX_ENUM_LEN: usize = 5;

/// Limits for [`exact_specdec`].
pub const MAX_SPEC_VOCAB: usize = 4;
pub const MAX_SPEC_GAMMA: usize = 3;
pub const MAX_SPEC_LEN: usize = 4;

/// Residual rule used by the exact speculative-decoding recursion.
pub type ResidualFn = fn(&Distribution, &Distribution) -> Result<Distribution>;

/// Exact distribution over finished sequences.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SeqDist {
    probs: BTreeMap<Vec<Token>, f64>,
}

impl SeqDist {
    pub fn prob(&self, y: &[Token]) -> f64 {
        self.probs.get(y).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<Token>, f64)> + '_ {
        self.probs.iter().map(|(k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.probs.values().sum()
    }

    /// `E[|y|]`.
    pub fn mean_len(&self) -> f64 {
        self.probs.iter().map(|(y, p)| p * y.len() as f64).sum()
    }

    fn add(&mut self, y: Vec<Token>, p: f64) {
        if p > 0.0 {
            *self.probs.entry(y).or_insert(0.0) += p;
        }
    }

    /// Total variation distance; sequences of different length are distinct atoms.
    pub fn tv(&self, other: &SeqDist) -> f64 {
        let mut keys: Vec<&Vec<Token>> = self.probs.keys().chain(other.probs.keys()).collect();
        keys.sort();
        keys.dedup();
        0.5 * keys.into_iter().map(|k| (self.prob(k) - other.prob(k)).abs()).sum::<f64>()
    }
}

fn guard_enum(vocab: usize, t_max: usize) -> Result<()> {
    if vocab > MAX_ENUM_VOCAB || t_max > MAX_ENUM_LEN {
        return Err(Error::TooLarge(format!(
            "vocab {vocab} x length {t_max} exceeds {MAX_ENUM_VOCAB} x {MAX_ENUM_LEN}"
        )));
    }
    Ok(())
}

/// Which model samples a position in a pattern rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Target,
    Draft,
}

/// Depth-first rollout where position `t` is sampled from `pick(t)`; branches stop at
/// EOS or after `horizon` tokens. `visit` sees every live prefix with its mass.
fn rollout<'m>(
    models: [&'m dyn LanguageModel; 2],
    prompt: &[Token],
    horizon: usize,
    temperature: f64,
    pick: &dyn Fn(usize) -> Source,
    visit: &mut dyn FnMut(&[Token], f64) -> Result<()>,
) -> Result<SeqDist> {
    let eos = models[0].vocab().eos();
    let mut out = SeqDist::default();
    let mut stack: Vec<(Vec<Token>, f64)> = vec![(Vec::new(), 1.0)];
    while let Some((prefix, mass)) = stack.pop() {
        if prefix.len() == horizon || prefix.last() == Some(&eos) {
            out.add(prefix, mass);
            continue;
        }
        visit(&prefix, mass)?;
        let model = match pick(prefix.len()) {
            Source::Target => models[0],
            Source::Draft => models[1],
        };
        let dist = model.next_dist(Context::new(prompt, &prefix), temperature)?;
        for (token, &p) in dist.probs().iter().enumerate().rev() {
            if p > 0.0 {
                let mut next = prefix.clone();
                next.push(token);
                stack.push((next, mass * p));
            }
        }
    }
    Ok(out)
}

/// Exact `p≤T(y | x)` at temperature 1.
pub fn enumerate_seq_dist<M: LanguageModel + ?Sized>(model: &M, prompt: &[Token], t_max: usize) -> Result<SeqDist> {
    enumerate_seq_dist_at(model, prompt, t_max, 1.0)
}

pub fn enumerate_seq_dist_at<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[Token],
    t_max: usize,
    temperature: f64,
) -> Result<SeqDist> {
    guard_enum(model.vocab().size(), t_max)?;
    let m: &dyn LanguageModel = &WrapRef(model);
    rollout([m, m], prompt, t_max, temperature, &|_| Source::Target, &mut |_, _| Ok(()))
}

/// Rollout distribution sampling position `t` from the target when
/// `pattern[t]` is `Target` and from the draft otherwise.
pub fn mixed_pattern_dist<T, D>(prompt: &[Token], pattern: &[Source], target: &T, draft: &D) -> Result<SeqDist>
where
    T: LanguageModel + ?Sized,
    D: LanguageModel + ?Sized,
{
    guard_enum(target.vocab().size(), pattern.len())?;
    rollout(
        [&WrapRef(target), &WrapRef(draft)],
        prompt,
        pattern.len(),
        1.0,
        &|t| pattern[t],
        &mut |_, _| Ok(()),
    )
}

/// Adapter so `?Sized` generic models can be used as `&dyn LanguageModel`.
struct WrapRef<'a, M: ?Sized>(&'a M);

impl<M: LanguageModel + ?Sized> LanguageModel for WrapRef<'_, M> {
    fn vocab(&self) -> crate::lm::Vocab {
        self.0.vocab()
    }
    fn order(&self) -> usize {
        self.0.order()
    }
    fn dist_for_key(&self, key: &[Token]) -> Result<Distribution> {
        self.0.dist_for_key(key)
    }
    fn next_dist(&self, context: Context<'_>, temperature: f64) -> Result<Distribution> {
        self.0.next_dist(context, temperature)
    }
}

fn step_tvd<T, D>(target: &T, draft: &D, prompt: &[Token], prefix: &[Token]) -> Result<f64>
where
    T: LanguageModel + ?Sized,
    D: LanguageModel + ?Sized,
{
    let ctx = Context::new(prompt, prefix);
    tvd(&target.next_dist(ctx, 1.0)?, &draft.next_dist(ctx, 1.0)?)
}

/// `α(x)`, `L_p(x)` and the per-position `A_t(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactAlpha {
    pub alpha: f64,
    pub l_p: f64,
    pub a: Vec<f64>,
}

/// `A_t = E_{y~p≤T}[1{t ≤ |y|}·TVD(p_t, q_t)]`, `α = 1 − ΣA_t / L_p`, by enumeration.
pub fn exact_alpha<T, D>(target: &T, draft: &D, prompt: &[Token], t_max: usize) -> Result<ExactAlpha>
where
    T: LanguageModel + ?Sized,
    D: LanguageModel + ?Sized,
{
    guard_enum(target.vocab().size(), t_max)?;
    let mut a = vec![0.0; t_max];
    let mut l_p = 0.0;
    rollout(
        [&WrapRef(target), &WrapRef(draft)],
        prompt,
        t_max,
        1.0,
        &|_| Source::Target,
        &mut |prefix, mass| {
            a[prefix.len()] += mass * step_tvd(target, draft, prompt, prefix)?;
            l_p += mass;
            Ok(())
        },
    )?;
    let alpha = 1.0 - a.iter().sum::<f64>() / l_p;
    Ok(ExactAlpha { alpha, l_p, a })
}

/// Same quantities as [`exact_alpha`], propagated over context keys instead of
/// sequences. Exact for order-k tables and cheap when `(vocab+1)^k` is small.
pub fn exact_alpha_markov<T, D>(target: &T, draft: &D, prompt: &[Token], t_max: usize) -> Result<ExactAlpha>
where
    T: LanguageModel + ?Sized,
    D: LanguageModel + ?Sized,
{
    let vocab = target.vocab();
    let order = target.order().max(draft.order());
    let eos = vocab.eos();
    let mut states: BTreeMap<Vec<Token>, f64> = BTreeMap::new();
    states.insert(Context::new(prompt, &[]).key(order, vocab.bos()), 1.0);
    let mut a = vec![0.0; t_max];
    let mut l_p = 0.0;
    for slot in a.iter_mut() {
        let mut next: BTreeMap<Vec<Token>, f64> = BTreeMap::new();
        for (key, &mass) in &states {
            // the key alone is a complete context for both models
            let ctx = Context::new(key, &[]);
            let p = target.next_dist(ctx, 1.0)?;
            let q = draft.next_dist(ctx, 1.0)?;
            *slot += mass * tvd(&p, &q)?;
            l_p += mass;
            for (token, &pv) in p.probs().iter().enumerate() {
                if pv > 0.0 && token != eos {
                    let mut k = key.clone();
                    if order > 0 {
                        k.remove(0);
                        k.push(token);
                    }
                    *next.entry(k).or_insert(0.0) += mass * pv;
                }
            }
        }
        states = next;
    }
    let alpha = 1.0 - a.iter().sum::<f64>() / l_p;
    Ok(ExactAlpha { alpha, l_p, a })
}

/// `α` straight from its definition: `E_{y~p≤T}[Σ_t β_t] / L_p` with
/// `β_t = Σ_c min(p_c, q_c)`, summed along each enumerated sequence.
pub fn alpha_by_definition<T, D>(target: &T, draft: &D, prompt: &[Token], t_max: usize) -> Result<f64>
where
    T: LanguageModel + ?Sized,
    D: LanguageModel + ?Sized,
{
    let seqs = enumerate_seq_dist(target, prompt, t_max)?;
    let mut accepted = 0.0;
    for (y, prob) in seqs.iter() {
        for t in 0..y.len() {
            let ctx = Context::new(prompt, &y[..t]);
            let p = target.next_dist(ctx, 1.0)?;
            let q = draft.next_dist(ctx, 1.0)?;
            let beta: f64 = p.probs().iter().zip(q.probs()).map(|(a, b)| a.min(*b)).sum();
            accepted += prob * beta;
        }
    }
    Ok(accepted / seqs.mean_len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactEpsilon {
    pub epsilon: f64,
    pub e: Vec<f64>,
}

/// On-policy TVD loss `ε = E_{y~q≤T}[(1/|y|)·Σ_t TVD(p_t, q_t)]` and
/// `E_t = E_{y~q≤T}[1{t ≤ |y|}·TVD(p_t, q_t)]`.
pub fn exact_epsilon<T, D>(target: &T, draft: &D, prompt: &[Token], t_max: usize) -> Result<ExactEpsilon>
where
    T: LanguageModel + ?Sized,
    D: LanguageModel + ?Sized,
{
    guard_enum(target.vocab().size(), t_max)?;
    let mut e = vec![0.0; t_max];
    let seqs = rollout(
        [&WrapRef(target), &WrapRef(draft)],
        prompt,
        t_max,
        1.0,
        &|_| Source::Draft,
        &mut |prefix, mass| {
            e[prefix.len()] += mass * step_tvd(target, draft, prompt, prefix)?;
            Ok(())
        },
    )?;
    let mut epsilon = 0.0;
    for (y, prob) in seqs.iter() {
        let total: f64 = (0..y.len())
            .map(|t| step_tvd(target, draft, prompt, &y[..t]))
            .sum::<Result<f64>>()?;
        epsilon += prob * total / y.len() as f64;
    }
    Ok(ExactEpsilon { epsilon, e })
}

/// Everything the on-policy acceptance bound talks about, for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub alpha_exact: f64,
    /// `α` from the token-level acceptance rates, independent of the `A_t` route.
    pub alpha_definition: f64,
    pub l_p: f64,
    pub epsilon: f64,
    pub a: Vec<f64>,
    pub e: Vec<f64>,
    /// `1 − 2T²·ε / L_p`, the bound the proof derives.
    pub bound_value: f64,
    /// `1 − T²·ε / L_p`, the same bound with half the constant; recorded only.
    pub stated_bound_value: f64,
    /// `|A_t − TVD(M(PᵗP), M(Pᵗ⁻¹Q))|` then `|E_t − TVD(M(Qᵗ⁻¹P), M(Qᵗ))|`, for t = 1..T.
    pub lemma_residuals: Vec<f64>,
}

fn pattern(prefix: Source, prefix_len: usize, last: Source) -> Vec<Source> {
    let mut z = vec![prefix; prefix_len];
    z.push(last);
    z
}

pub fn oracle_report<T, D>(target: &T, draft: &D, prompt: &[Token], t_max: usize) -> Result<OracleReport>
where
    T: LanguageModel + ?Sized,
    D: LanguageModel + ?Sized,
{
    let alpha = exact_alpha(target, draft, prompt, t_max)?;
    let eps = exact_epsilon(target, draft, prompt, t_max)?;
    let alpha_definition = alpha_by_definition(target, draft, prompt, t_max)?;
    let mut lemma_residuals = Vec::with_capacity(2 * t_max);
    for t in 1..=t_max {
        let p_t = mixed_pattern_dist(prompt, &pattern(Source::Target, t - 1, Source::Target), target, draft)?;
        let p_q = mixed_pattern_dist(prompt, &pattern(Source::Target, t - 1, Source::Draft), target, draft)?;
        lemma_residuals.push((alpha.a[t - 1] - p_t.tv(&p_q)).abs());
    }
    for t in 1..=t_max {
        let q_p = mixed_pattern_dist(prompt, &pattern(Source::Draft, t - 1, Source::Target), target, draft)?;
        let q_t = mixed_pattern_dist(prompt, &pattern(Source::Draft, t - 1, Source::Draft), target, draft)?;
        lemma_residuals.push((eps.e[t - 1] - q_p.tv(&q_t)).abs());
    }
    let t = t_max as f64;
    Ok(OracleReport {
        alpha_exact: alpha.alpha,
        alpha_definition,
        l_p: alpha.l_p,
        epsilon: eps.epsilon,
        bound_value: 1.0 - 2.0 * t * t * eps.epsilon / alpha.l_p,
        stated_bound_value: 1.0 - t * t * eps.epsilon / alpha.l_p,
        a: alpha.a,
        e: eps.e,
        lemma_residuals,
    })
}

/// Tolerance used by [`check_bounds`].
pub const BOUND_TOLERANCE: f64 = 1e-10;

/// Slack of every checked relation; negative slack means a violation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundResiduals {
    /// `|α_definition − (1 − ΣA_t/L_p)|`.
    pub alpha_decomposition: f64,
    /// `ε − ΣE_t/T`.
    pub epsilon_gap: f64,
    /// `min_t (2·Σ_{k<t} E_k + E_t − A_t)`.
    pub position_min_slack: f64,
    /// `α − (1 − 2T²ε/L_p)`.
    pub theorem_slack: f64,
    /// `α − (1 − T²ε/L_p)`; recorded, not enforced.
    pub stated_theorem_slack: f64,
    /// Largest variational-form residual.
    pub max_variational: f64,
}

impl BoundResiduals {
    /// Largest equality residual: the α decomposition and the variational identities.
    pub fn max_lemma_residual(&self) -> f64 {
        self.alpha_decomposition.max(self.max_variational)
    }
}

/// Computes every slack without judging it; see [`check_bounds`].
pub fn bound_residuals(report: &OracleReport, t_max: usize) -> BoundResiduals {
    let t = t_max as f64;
    let sum_a: f64 = report.a.iter().sum();
    let sum_e: f64 = report.e.iter().sum();
    let mut position_min_slack = f64::INFINITY;
    let mut prefix_e = 0.0;
    for (a_t, e_t) in report.a.iter().zip(&report.e) {
        position_min_slack = position_min_slack.min(2.0 * prefix_e + e_t - a_t);
        prefix_e += e_t;
    }
    BoundResiduals {
        alpha_decomposition: (report.alpha_definition - (1.0 - sum_a / report.l_p)).abs(),
        epsilon_gap: report.epsilon - sum_e / t,
        position_min_slack,
        theorem_slack: report.alpha_exact - report.bound_value,
        stated_theorem_slack: report.alpha_exact - report.stated_bound_value,
        max_variational: report.lemma_residuals.iter().copied().fold(0.0, f64::max),
    }
}

/// Checks the acceptance-rate decomposition, the `ε ≥ ΣE_t/T` relation, the
/// per-position bound `A_t ≤ 2·Σ_{k<t} E_k + E_t`, and `α ≥ 1 − 2T²ε/L_p`.
pub fn check_bounds(report: &OracleReport, t_max: usize) -> Result<BoundResiduals> {
    let residuals = bound_residuals(report, t_max);
    let mut failures = Vec::new();
    if residuals.alpha_decomposition > BOUND_TOLERANCE {
        failures.push(format!("alpha decomposition residual {:e}", residuals.alpha_decomposition));
    }
    if residuals.epsilon_gap < -BOUND_TOLERANCE {
        failures.push(format!("epsilon below mean E_t by {:e}", -residuals.epsilon_gap));
    }
    if residuals.position_min_slack < -BOUND_TOLERANCE {
        failures.push(format!("A_t bound violated by {:e}", -residuals.position_min_slack));
    }
    if residuals.theorem_slack < -BOUND_TOLERANCE {
        failures.push(format!("acceptance bound violated by {:e}", -residuals.theorem_slack));
    }
    if residuals.max_variational > BOUND_TOLERANCE {
        failures.push(format!("variational residual {:e}", residuals.max_variational));
    }
    if failures.is_empty() {
        Ok(residuals)
    } else {
        Err(Error::BoundViolation(failures.join("; ")))
    }
}

/// Exact output distribution of speculative decoding plus expected trace counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactSpecDec {
    pub dist: SeqDist,
    pub expected_target_calls: f64,
    pub expected_draft_calls: f64,
    pub expected_accepted: f64,
}

impl ExactSpecDec {
    pub fn expected_len(&self) -> f64 {
        self.dist.mean_len()
    }

    /// Expected cost per token relative to plain target decoding.
    pub fn relative_latency(&self, c: f64) -> f64 {
        (self.expected_target_calls + c * self.expected_draft_calls) / self.expected_len()
    }

    /// Expected tokens per block (ratio of expectations).
    pub fn tau(&self) -> f64 {
        self.expected_len() / self.expected_target_calls
    }

    /// Accepted draft tokens per output token (ratio of expectations).
    pub fn alpha(&self) -> f64 {
        self.expected_accepted / self.expected_len()
    }
}

struct SpecRecursion<'a, T: ?Sized, D: ?Sized> {
    target: &'a T,
    draft: &'a D,
    prompt: &'a [Token],
    config: &'a SpecConfig,
    residual: ResidualFn,
    eos: Token,
    out: ExactSpecDec,
}

impl<T, D> SpecRecursion<'_, T, D>
where
    T: LanguageModel + ?Sized,
    D: LanguageModel + ?Sized,
{
    fn finished(&self, seq: &[Token]) -> bool {
        seq.len() >= self.config.t_max || seq.last() == Some(&self.eos)
    }

    fn block(&mut self, prefix: Vec<Token>, mass: f64) -> Result<()> {
        if self.finished(&prefix) {
            self.out.dist.add(prefix, mass);
            return Ok(());
        }
        self.out.expected_target_calls += mass;
        let budget = self.config.gamma.min(self.config.t_max - prefix.len());
        self.proposals(&prefix, &mut Vec::new(), &mut Vec::new(), 1.0, budget, mass)
    }

    fn proposals(
        &mut self,
        prefix: &[Token],
        proposal: &mut Vec<Token>,
        qs: &mut Vec<Distribution>,
        prob: f64,
        budget: usize,
        mass: f64,
    ) -> Result<()> {
        if proposal.len() == budget || proposal.last() == Some(&self.eos) {
            return self.verify(prefix, proposal, qs, mass * prob);
        }
        let mut ctx = prefix.to_vec();
        ctx.extend_from_slice(proposal);
        let q = self.draft.next_dist(Context::new(self.prompt, &ctx), self.config.temperature)?;
        for token in 0..q.len() {
            let qv = q.prob(token);
            if qv > 0.0 {
                proposal.push(token);
                qs.push(q.clone());
                self.proposals(prefix, proposal, qs, prob * qv, budget, mass)?;
                proposal.pop();
                qs.pop();
            }
        }
        Ok(())
    }

    fn verify(&mut self, prefix: &[Token], proposal: &[Token], qs: &[Distribution], mass: f64) -> Result<()> {
        self.out.expected_draft_calls += mass * proposal.len() as f64;
        let temperature = self.config.temperature;
        let mut reach = 1.0;
        for (n, (&token, q)) in proposal.iter().zip(qs).enumerate() {
            let mut ctx = prefix.to_vec();
            ctx.extend_from_slice(&proposal[..n]);
            let p = self.target.next_dist(Context::new(self.prompt, &ctx), temperature)?;
            let accept = acceptance_probability(&self.config.lenience, p.prob(token), q.prob(token));
            let reject = reach * (1.0 - accept);
            if reject > 0.0 {
                self.out.expected_accepted += mass * reject * n as f64;
                let residual = (self.residual)(&p, q)?;
                for (r, &pr) in residual.probs().iter().enumerate() {
                    if pr > 0.0 {
                        let mut next = ctx.clone();
                        next.push(r);
                        self.block(next, mass * reject * pr)?;
                    }
                }
            }
            reach *= accept;
            if reach == 0.0 {
                return Ok(());
            }
        }
        self.out.expected_accepted += mass * reach * proposal.len() as f64;
        let mut full = prefix.to_vec();
        full.extend_from_slice(proposal);
        if self.finished(&full) {
            self.out.dist.add(full, mass * reach);
            return Ok(());
        }
        let p = self.target.next_dist(Context::new(self.prompt, &full), temperature)?;
        for (b, &pb) in p.probs().iter().enumerate() {
            if pb > 0.0 {
                let mut next = full.clone();
                next.push(b);
                self.block(next, mass * reach * pb)?;
            }
        }
        Ok(())
    }
}

/// Exact speculative decoding outcome with a caller-supplied residual rule.
pub fn exact_specdec_with<T, D>(
    target: &T,
    draft: &D,
    prompt: &[Token],
    config: &SpecConfig,
    residual: ResidualFn,
) -> Result<ExactSpecDec>
where
    T: LanguageModel + ?Sized,
    D: LanguageModel + ?Sized,
{
    config.validate()?;
    let vocab = target.vocab().size();
    if vocab > MAX_SPEC_VOCAB || config.gamma > MAX_SPEC_GAMMA || config.t_max > MAX_SPEC_LEN {
        return Err(Error::TooLarge(format!(
            "vocab {vocab}, gamma {}, length {} exceed {MAX_SPEC_VOCAB}/{MAX_SPEC_GAMMA}/{MAX_SPEC_LEN}",
            config.gamma, config.t_max
        )));
    }
    let mut rec = SpecRecursion {
        target,
        draft,
        prompt,
        config,
        residual,
        eos: target.vocab().eos(),
        out: ExactSpecDec {
            dist: SeqDist::default(),
            expected_target_calls: 0.0,
            expected_draft_calls: 0.0,
            expected_accepted: 0.0,
        },
    };
    rec.block(Vec::new(), 1.0)?;
    Ok(rec.out)
}

pub fn exact_specdec<T, D>(target: &T, draft: &D, prompt: &[Token], config: &SpecConfig) -> Result<ExactSpecDec>
where
    T: LanguageModel + ?Sized,
    D: LanguageModel + ?Sized,
{
    exact_specdec_with(target, draft, prompt, config, residual_dist)
}

/// Exact output distribution of [`crate::specdec::spec_decode`].
pub fn exact_specdec_dist<T, D>(target: &T, draft: &D, prompt: &[Token], config: &SpecConfig) -> Result<SeqDist>
where
    T: LanguageModel + ?Sized,
    D: LanguageModel + ?Sized,
{
    Ok(exact_specdec(target, draft, prompt, config)?.dist)
}

/// Probability that speculative decoding emits exactly the finished sequence `y`.
///
/// Forward pass over the hidden position inside the current block: while
/// drafting, a token is emitted either as an accepted draft token (and the
/// block advances) or as a residual after a rejection (and a new block
/// starts); after a fully accepted block of `gamma` tokens the next token is
/// the target's bonus sample. No size guard: the cost is `O(|y|·gamma·vocab)`.
pub fn specdec_sequence_prob<T, D>(target: &T, draft: &D, prompt: &[Token], y: &[Token], config: &SpecConfig) -> Result<f64>
where
    T: LanguageModel + ?Sized,
    D: LanguageModel + ?Sized,
{
    let gamma = config.gamma;
    let t_max = config.t_max;
    let eos = target.vocab().eos();
    // state[i]: i draft tokens of the current block accepted so far; i == gamma is the bonus slot
    let mut state = vec![0.0; gamma + 1];
    state[0] = 1.0;
    for (t, &v) in y.iter().enumerate() {
        let ctx = Context::new(prompt, &y[..t]);
        let p = target.next_dist(ctx, config.temperature)?;
        let q = draft.next_dist(ctx, config.temperature)?;
        let accepted_mass: Vec<f64> = q
            .probs()
            .iter()
            .zip(p.probs())
            .map(|(&qv, &pv)| qv * acceptance_probability(&config.lenience, pv, qv))
            .collect();
        let reject_total = (1.0 - accepted_mass.iter().sum::<f64>()).max(0.0);
        let residual = residual_dist(&p, &q)?.prob(v);
        let mut next = vec![0.0; gamma + 1];
        for (i, &m) in state.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let block_len = gamma.min(t_max - (t - i));
            if i < block_len {
                let accept = m * accepted_mass[v];
                if i + 1 < block_len {
                    next[i + 1] += accept;
                } else if block_len == gamma && t + 1 < t_max && v != eos {
                    next[gamma] += accept;
                } else {
                    // block ends at EOS or at the budget: y must end here
                    next[0] += accept;
                }
                next[0] += m * reject_total * residual;
            } else {
                next[0] += m * p.prob(v);
            }
        }
        state = next;
    }
    Ok(state.iter().sum())
}

/// `p(y | x)` at the given temperature.
pub fn seq_prob_at<M: LanguageModel + ?Sized>(model: &M, prompt: &[Token], y: &[Token], temperature: f64) -> Result<f64> {
    let mut prob = 1.0;
    for t in 0..y.len() {
        prob *= model.next_dist(Context::new(prompt, &y[..t]), temperature)?.prob(y[t]);
        if prob == 0.0 {
            break;
        }
    }
    Ok(prob)
}
