//! Order-k tabular language models with exact next-token distributions.
//!
//! Token ids `0..vocab.size()` are output tokens, one of which is the
//! end-of-sequence marker. The id `vocab.size()` is reserved for BOS and only
//! ever appears as left padding inside a context key.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution as _, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{normalize, sample_token, softmax_with_temperature, Distribution, Logits};

pub type Token = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    eos: Token,
}

impl Vocab {
    pub fn new(size: usize, eos: Token) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!("vocab size must be >= 2, got {size}")));
        }
        if eos >= size {
            return Err(Error::Config(format!("EOS id {eos} outside vocab of size {size}")));
        }
        Ok(Self { size, eos })
    }

    /// Vocabulary with EOS at id 0.
    pub fn with_size(size: usize) -> Result<Self> {
        Self::new(size, 0)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos(&self) -> Token {
        self.eos
    }

    pub fn bos(&self) -> Token {
        self.size
    }
}

/// A prompt plus the tokens generated so far.
#[derive(Debug, Clone, Copy)]
pub struct Context<'a> {
    pub prompt: &'a [Token],
    pub generated: &'a [Token],
}

impl<'a> Context<'a> {
    pub fn new(prompt: &'a [Token], generated: &'a [Token]) -> Self {
        Self { prompt, generated }
    }

    /// Last `order` tokens of `prompt ++ generated`, left-padded with `bos`.
    pub fn key(&self, order: usize, bos: Token) -> Vec<Token> {
        let mut key = vec![bos; order];
        let total = self.prompt.len() + self.generated.len();
        for (slot, pos) in (total.saturating_sub(order)..total).rev().zip((0..order).rev()) {
            key[pos] = if slot < self.prompt.len() {
                self.prompt[slot]
            } else {
                self.generated[slot - self.prompt.len()]
            };
        }
        key
    }
}

/// Dense indexing of context keys: base `vocab + 1` digits, most significant first.
fn key_index(vocab: Vocab, key: &[Token]) -> Result<usize> {
    let base = vocab.size() + 1;
    key.iter().try_fold(0usize, |acc, &t| {
        if t > vocab.bos() {
            Err(Error::MissingContext(key.to_vec()))
        } else {
            Ok(acc * base + t)
        }
    })
}

fn index_key(vocab: Vocab, order: usize, mut index: usize) -> Vec<Token> {
    let base = vocab.size() + 1;
    let mut key = vec![0; order];
    for slot in key.iter_mut().rev() {
        *slot = index % base;
        index /= base;
    }
    key
}

fn row_count(vocab: Vocab, order: usize) -> usize {
    (vocab.size() + 1).pow(order as u32)
}

/// A model that exposes exact conditional next-token distributions.
pub trait LanguageModel {
    fn vocab(&self) -> Vocab;

    fn order(&self) -> usize;

    /// Untempered distribution stored for a context key.
    fn dist_for_key(&self, key: &[Token]) -> Result<Distribution>;

    fn next_dist(&self, context: Context<'_>, temperature: f64) -> Result<Distribution> {
        let key = context.key(self.order(), self.vocab().bos());
        self.dist_for_key(&key)?.with_temperature(temperature)
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn vocab(&self) -> Vocab {
        (**self).vocab()
    }
    fn order(&self) -> usize {
        (**self).order()
    }
    fn dist_for_key(&self, key: &[Token]) -> Result<Distribution> {
        (**self).dist_for_key(key)
    }
    fn next_dist(&self, context: Context<'_>, temperature: f64) -> Result<Distribution> {
        (**self).next_dist(context, temperature)
    }
}

/// Frozen table of next-token distributions keyed by the previous `order` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularLM {
    vocab: Vocab,
    order: usize,
    rows: Vec<Option<Distribution>>,
}

impl TabularLM {
    /// Builds a complete table by calling `row` for every context key.
    pub fn from_fn(vocab: Vocab, order: usize, mut row: impl FnMut(&[Token]) -> Distribution) -> Result<Self> {
        let rows = (0..row_count(vocab, order))
            .map(|i| {
                let d = row(&index_key(vocab, order, i));
                check_row_len(vocab, &d).map(|_| Some(d))
            })
            .collect::<Result<_>>()?;
        Ok(Self { vocab, order, rows })
    }

    /// Builds a possibly partial table; unlisted keys raise `MissingContext` when queried.
    pub fn from_rows(vocab: Vocab, order: usize, entries: Vec<(Vec<Token>, Distribution)>) -> Result<Self> {
        let mut rows = vec![None; row_count(vocab, order)];
        for (key, dist) in entries {
            if key.len() != order {
                return Err(Error::Config(format!("context {key:?} does not have length {order}")));
            }
            check_row_len(vocab, &dist)?;
            rows[key_index(vocab, &key)?] = Some(dist);
        }
        Ok(Self { vocab, order, rows })
    }

    /// Memoryless model emitting `dist` at every step.
    pub fn iid(vocab: Vocab, dist: Distribution) -> Result<Self> {
        Self::from_fn(vocab, 0, |_| dist.clone())
    }

    /// `(key, distribution)` pairs for every stored row, in key order.
    pub fn rows(&self) -> impl Iterator<Item = (Vec<Token>, &Distribution)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.as_ref().map(|d| (index_key(self.vocab, self.order, i), d)))
    }
}

fn check_row_len(vocab: Vocab, dist: &Distribution) -> Result<()> {
    if dist.len() == vocab.size() {
        Ok(())
    } else {
        Err(Error::VocabMismatch {
            left: vocab.size(),
            right: dist.len(),
        })
    }
}

impl LanguageModel for TabularLM {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn order(&self) -> usize {
        self.order
    }

    fn dist_for_key(&self, key: &[Token]) -> Result<Distribution> {
        let index = key_index(self.vocab, key)?;
        self.rows
            .get(index)
            .and_then(Option::as_ref)
            .cloned()
            .ok_or_else(|| Error::MissingContext(key.to_vec()))
    }
}

/// Trainable model: one row of logits per context key, `q = softmax(logits)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxLM {
    vocab: Vocab,
    order: usize,
    logits: Vec<Logits>,
}

/// Stand-in for `ln 0` when copying a table into logits.
const LOG_ZERO: f64 = -80.0;

impl SoftmaxLM {
    /// All-zero logits: uniform next-token distributions.
    pub fn uniform(vocab: Vocab, order: usize) -> Self {
        Self {
            vocab,
            order,
            logits: vec![Logits::zeros(vocab.size()); row_count(vocab, order)],
        }
    }

    /// Copies log-probabilities from a complete table.
    pub fn from_tabular(table: &TabularLM) -> Result<Self> {
        let logits = table
            .rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let dist = row
                    .as_ref()
                    .ok_or_else(|| Error::MissingContext(index_key(table.vocab, table.order, i)))?;
                Logits::new(dist.probs().iter().map(|&p| if p > 0.0 { p.ln().max(LOG_ZERO) } else { LOG_ZERO }).collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            vocab: table.vocab,
            order: table.order,
            logits,
        })
    }

    pub fn from_logits(vocab: Vocab, order: usize, entries: Vec<(Vec<Token>, Logits)>) -> Result<Self> {
        let mut model = Self::uniform(vocab, order);
        for (key, row) in entries {
            if row.len() != vocab.size() || key.len() != order {
                return Err(Error::VocabMismatch {
                    left: vocab.size(),
                    right: row.len(),
                });
            }
            let i = key_index(vocab, &key)?;
            model.logits[i] = row;
        }
        Ok(model)
    }

    /// Freezes the current parameters into a table.
    pub fn to_tabular(&self) -> Result<TabularLM> {
        TabularLM::from_fn(self.vocab, self.order, |key| {
            softmax_with_temperature(&self.logits[key_index(self.vocab, key).expect("valid key")], 1.0)
                .expect("finite logits")
        })
    }

    pub fn num_rows(&self) -> usize {
        self.logits.len()
    }

    pub fn row_index(&self, context: Context<'_>) -> Result<usize> {
        key_index(self.vocab, &context.key(self.order, self.vocab.bos()))
    }

    pub fn row(&self, index: usize) -> &Logits {
        &self.logits[index]
    }

    pub(crate) fn rows_mut(&mut self) -> &mut [Logits] {
        &mut self.logits
    }

    pub fn rows(&self) -> impl Iterator<Item = (Vec<Token>, &Logits)> + '_ {
        self.logits
            .iter()
            .enumerate()
            .map(|(i, l)| (index_key(self.vocab, self.order, i), l))
    }
}

impl LanguageModel for SoftmaxLM {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn order(&self) -> usize {
        self.order
    }

    fn dist_for_key(&self, key: &[Token]) -> Result<Distribution> {
        let index = key_index(self.vocab, key)?;
        softmax_with_temperature(&self.logits[index], 1.0)
    }

    fn next_dist(&self, context: Context<'_>, temperature: f64) -> Result<Distribution> {
        let index = self.row_index(context)?;
        softmax_with_temperature(&self.logits[index], temperature)
    }
}

/// Either model kind, as read from a model file.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Tabular(TabularLM),
    Softmax(SoftmaxLM),
}

impl LanguageModel for AnyModel {
    fn vocab(&self) -> Vocab {
        match self {
            Self::Tabular(m) => m.vocab(),
            Self::Softmax(m) => m.vocab(),
        }
    }

    fn order(&self) -> usize {
        match self {
            Self::Tabular(m) => m.order(),
            Self::Softmax(m) => m.order(),
        }
    }

    fn dist_for_key(&self, key: &[Token]) -> Result<Distribution> {
        match self {
            Self::Tabular(m) => m.dist_for_key(key),
            Self::Softmax(m) => m.dist_for_key(key),
        }
    }

    fn next_dist(&self, context: Context<'_>, temperature: f64) -> Result<Distribution> {
        match self {
            Self::Tabular(m) => m.next_dist(context, temperature),
            Self::Softmax(m) => m.next_dist(context, temperature),
        }
    }
}

impl From<TabularLM> for AnyModel {
    fn from(m: TabularLM) -> Self {
        Self::Tabular(m)
    }
}

impl From<SoftmaxLM> for AnyModel {
    fn from(m: SoftmaxLM) -> Self {
        Self::Softmax(m)
    }
}

#[derive(Serialize, Deserialize)]
struct ProbRow {
    context: Vec<Token>,
    probs: Distribution,
}

#[derive(Serialize, Deserialize)]
struct LogitRow {
    context: Vec<Token>,
    logits: Logits,
}

/// On-disk model format.
#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum ModelFile {
    Tabular {
        vocab_size: usize,
        eos: Token,
        order: usize,
        rows: Vec<ProbRow>,
    },
    Softmax {
        vocab_size: usize,
        eos: Token,
        order: usize,
        rows: Vec<LogitRow>,
    },
}

impl AnyModel {
    pub fn to_json(&self) -> Result<String> {
        let file = match self {
            Self::Tabular(m) => ModelFile::Tabular {
                vocab_size: m.vocab.size(),
                eos: m.vocab.eos(),
                order: m.order,
                rows: m
                    .rows()
                    .map(|(context, d)| ProbRow {
                        context,
                        probs: d.clone(),
                    })
                    .collect(),
            },
            Self::Softmax(m) => ModelFile::Softmax {
                vocab_size: m.vocab.size(),
                eos: m.vocab.eos(),
                order: m.order,
                rows: m
                    .rows()
                    .map(|(context, l)| LogitRow {
                        context,
                        logits: l.clone(),
                    })
                    .collect(),
            },
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(match serde_json::from_str::<ModelFile>(text)? {
            ModelFile::Tabular {
                vocab_size,
                eos,
                order,
                rows,
            } => Self::Tabular(TabularLM::from_rows(
                Vocab::new(vocab_size, eos)?,
                order,
                rows.into_iter().map(|r| (r.context, r.probs)).collect(),
            )?),
            ModelFile::Softmax {
                vocab_size,
                eos,
                order,
                rows,
            } => Self::Softmax(SoftmaxLM::from_logits(
                Vocab::new(vocab_size, eos)?,
                order,
                rows.into_iter().map(|r| (r.context, r.logits)).collect(),
            )?),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Samples a continuation of `prompt` until EOS or `t_max` tokens.
pub fn generate<M, R>(model: &M, prompt: &[Token], t_max: usize, temperature: f64, rng: &mut R) -> Result<Vec<Token>>
where
    M: LanguageModel + ?Sized,
    R: Rng + ?Sized,
{
    let eos = model.vocab().eos();
    let mut out = Vec::with_capacity(t_max);
    while out.len() < t_max {
        let dist = model.next_dist(Context::new(prompt, &out), temperature)?;
        let token = sample_token(&dist, rng);
        out.push(token);
        if token == eos {
            break;
        }
    }
    Ok(out)
}

/// `ln p(y | x)` at temperature 1; `-inf` when some step has probability zero.
pub fn seq_logprob<M: LanguageModel + ?Sized>(model: &M, prompt: &[Token], y: &[Token]) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..y.len() {
        let p = model.next_dist(Context::new(prompt, &y[..t]), 1.0)?.prob(y[t]);
        if p <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        total += p.ln();
    }
    Ok(total)
}

/// Random table: each row is a symmetric Dirichlet draw whose EOS mass is then
/// scaled by `exp(eos_bias)` and renormalised.
pub fn random_tabular_lm<R: Rng + ?Sized>(
    vocab: Vocab,
    order: usize,
    concentration: f64,
    eos_bias: f64,
    rng: &mut R,
) -> Result<TabularLM> {
    if !(concentration.is_finite() && concentration > 0.0) {
        return Err(Error::Config(format!("concentration must be > 0, got {concentration}")));
    }
    let gamma = Gamma::new(concentration, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let eos_scale = eos_bias.exp();
    TabularLM::from_fn(vocab, order, |_| {
        let mut w: Vec<f64> = (0..vocab.size()).map(|_| gamma.sample(rng)).collect();
        w[vocab.eos()] *= eos_scale;
        // every gamma draw can underflow for tiny concentrations
        normalize(&w).unwrap_or_else(|_| Distribution::uniform(vocab.size()))
    })
}

/// Row-wise mixture `λ·target + (1 − λ)·noise`.
pub fn blend_lm(target: &TabularLM, noise: &TabularLM, lambda: f64) -> Result<TabularLM> {
    if target.vocab != noise.vocab || target.order != noise.order {
        return Err(Error::VocabMismatch {
            left: row_count(target.vocab, target.order),
            right: row_count(noise.vocab, noise.order),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("blend weight must lie in [0, 1], got {lambda}")));
    }
    let rows = target
        .rows
        .iter()
        .zip(&noise.rows)
        .map(|(a, b)| match (a, b) {
            (Some(a), Some(b)) => {
                let mixed: Vec<f64> = a
                    .probs()
                    .iter()
                    .zip(b.probs())
                    .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
                    .collect();
                Some(Distribution::new(mixed).expect("mixture of distributions"))
            }
            _ => None,
        })
        .collect();
    Ok(TabularLM {
        vocab: target.vocab,
        order: target.order,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::enumerate_seq_dist;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn dist(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn context_keys_pad_with_bos() {
        let ctx = Context::new(&[5], &[]);
        assert_eq!(ctx.key(2, 9), vec![9, 5]);
        assert_eq!(Context::new(&[1, 2], &[3]).key(2, 9), vec![2, 3]);
        assert_eq!(Context::new(&[], &[]).key(1, 9), vec![9]);
        assert_eq!(Context::new(&[1, 2], &[3]).key(0, 9), Vec::<Token>::new());
    }

    #[test]
    fn key_index_round_trips() {
        let vocab = Vocab::with_size(4).unwrap();
        for i in 0..row_count(vocab, 2) {
            assert_eq!(key_index(vocab, &index_key(vocab, 2, i)).unwrap(), i);
        }
    }

    #[test]
    fn uniform_softmax_model() {
        let vocab = Vocab::with_size(4).unwrap();
        let m = SoftmaxLM::uniform(vocab, 1);
        let d = m.next_dist(Context::new(&[2], &[]), 1.0).unwrap();
        assert_eq!(d.probs(), &[0.25; 4]);
        let g = m.next_dist(Context::new(&[2], &[]), 0.0).unwrap();
        assert_eq!(g.probs(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn tabular_rows_returned_verbatim() {
        let vocab = Vocab::with_size(2).unwrap();
        let m = TabularLM::iid(vocab, dist(&[0.2, 0.8])).unwrap();
        assert_eq!(m.next_dist(Context::new(&[], &[1, 1]), 1.0).unwrap().probs(), &[0.2, 0.8]);
        assert_eq!(m.next_dist(Context::new(&[], &[]), 0.0).unwrap().probs(), &[0.0, 1.0]);
    }

    #[test]
    fn missing_rows_are_reported() {
        let vocab = Vocab::with_size(3).unwrap();
        let m = TabularLM::from_rows(vocab, 1, vec![(vec![3], dist(&[0.0, 0.5, 0.5]))]).unwrap();
        assert!(m.next_dist(Context::new(&[], &[]), 1.0).is_ok());
        assert!(matches!(m.next_dist(Context::new(&[1], &[]), 1.0), Err(Error::MissingContext(k)) if k == vec![1]));
    }

    #[test]
    fn generate_respects_eos_and_budget() {
        let vocab = Vocab::with_size(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stop = TabularLM::iid(vocab, dist(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(generate(&stop, &[1], 10, 1.0, &mut rng).unwrap(), vec![0]);
        let never = TabularLM::iid(vocab, dist(&[0.0, 0.5, 0.5])).unwrap();
        assert_eq!(generate(&never, &[1], 1, 1.0, &mut rng).unwrap().len(), 1);
        let m = random_tabular_lm(vocab, 1, 1.0, 0.0, &mut rng).unwrap();
        for _ in 0..500 {
            let y = generate(&m, &[1], 6, 1.0, &mut rng).unwrap();
            assert!(y.len() <= 6);
            assert!(y.iter().take(y.len() - 1).all(|&t| t != 0));
            assert!(y.last() == Some(&0) || y.len() == 6);
        }
    }

    #[test]
    fn seq_logprob_examples() {
        let vocab = Vocab::with_size(3).unwrap();
        let det = TabularLM::iid(vocab, dist(&[0.0, 0.0, 1.0])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = generate(&det, &[], 4, 0.0, &mut rng).unwrap();
        assert_eq!(seq_logprob(&det, &[], &y).unwrap(), 0.0);
        assert_eq!(seq_logprob(&det, &[], &[1]).unwrap(), f64::NEG_INFINITY);
        let coin = TabularLM::iid(vocab, dist(&[0.0, 0.5, 0.5])).unwrap();
        assert!((seq_logprob(&coin, &[], &[1, 2]).unwrap() - 0.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn seq_logprob_normalizes_over_enumeration() {
        let vocab = Vocab::with_size(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_tabular_lm(vocab, 1, 1.0, 0.0, &mut rng).unwrap();
        let seqs = enumerate_seq_dist(&m, &[1], 4).unwrap();
        let total: f64 = seqs.iter().map(|(y, _)| seq_logprob(&m, &[1], y).unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for (y, p) in seqs.iter() {
            assert!((seq_logprob(&m, &[1], y).unwrap().exp() - p).abs() < 1e-12);
        }
    }

    #[test]
    fn generate_matches_enumeration() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let vocab = Vocab::with_size(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_tabular_lm(vocab, 1, 1.0, 0.0, &mut rng).unwrap();
        let exact = enumerate_seq_dist(&m, &[2], 3).unwrap();
        let n = 100_000;
        let mut counts: BTreeMap<Vec<Token>, u64> = BTreeMap::new();
        for _ in 0..n {
            *counts.entry(generate(&m, &[2], 3, 1.0, &mut rng).unwrap()).or_default() += 1;
        }
        let mut stat = 0.0;
        for (y, p) in exact.iter() {
            let e = p * n as f64;
            let o = *counts.get(y).unwrap_or(&0) as f64;
            stat += (o - e).powi(2) / e;
        }
        let df = exact.len() as f64 - 1.0;
        let pval = 1.0 - ChiSquared::new(df).unwrap().cdf(stat);
        assert!(pval > 0.01, "chi2={stat} p={pval}");
    }

    #[test]
    fn random_tables_are_seeded_and_concentrate() {
        let vocab = Vocab::with_size(4).unwrap();
        let a = random_tabular_lm(vocab, 1, 0.5, 0.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = random_tabular_lm(vocab, 1, 0.5, 0.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let flat = random_tabular_lm(vocab, 1, 1e6, 0.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for (_, row) in flat.rows() {
            assert!(row.probs().iter().all(|p| (p - 0.25).abs() < 0.01));
        }
    }

    #[test]
    fn unbiased_rows_are_symmetric_in_aggregate() {
        let vocab = Vocab::with_size(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut mean = [0.0; 4];
        for _ in 0..1000 {
            let m = random_tabular_lm(vocab, 0, 1.0, 0.0, &mut rng).unwrap();
            let row = m.dist_for_key(&[]).unwrap();
            for (acc, p) in mean.iter_mut().zip(row.probs()) {
                *acc += p / 1000.0;
            }
        }
        // each entry ~ Beta(1, 3): sd 0.19, so the mean of 1000 has sd ~0.006
        assert!(mean.iter().all(|m| (m - 0.25).abs() < 0.025), "{mean:?}");
    }

    #[test]
    fn eos_bias_shifts_mass() {
        let vocab = Vocab::with_size(4).unwrap();
        let base = random_tabular_lm(vocab, 1, 1.0, 0.0, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let biased = random_tabular_lm(vocab, 1, 1.0, -3.0, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        for ((_, a), (_, b)) in base.rows().zip(biased.rows()) {
            assert!(b.prob(0) < a.prob(0));
        }
    }

    #[test]
    fn blend_rows() {
        let vocab = Vocab::with_size(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_tabular_lm(vocab, 1, 1.0, 0.0, &mut rng).unwrap();
        let n = random_tabular_lm(vocab, 1, 1.0, 0.0, &mut rng).unwrap();
        assert_eq!(blend_lm(&t, &n, 1.0).unwrap(), t);
        assert_eq!(blend_lm(&t, &n, 0.0).unwrap(), n);
        let half = blend_lm(&t, &n, 0.5).unwrap();
        for (((_, h), (_, a)), (_, b)) in half.rows().zip(t.rows()).zip(n.rows()) {
            for c in 0..3 {
                assert!((h.prob(c) - 0.5 * (a.prob(c) + b.prob(c))).abs() < 1e-15);
            }
        }
        let other = random_tabular_lm(vocab, 2, 1.0, 0.0, &mut rng).unwrap();
        assert!(matches!(blend_lm(&t, &other, 0.5), Err(Error::VocabMismatch { .. })));
    }

    #[test]
    fn softmax_copy_reproduces_table() {
        let vocab = Vocab::with_size(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_tabular_lm(vocab, 2, 0.3, 0.0, &mut rng).unwrap();
        let s = SoftmaxLM::from_tabular(&t).unwrap();
        for (key, row) in t.rows() {
            let q = s.dist_for_key(&key).unwrap();
            for c in 0..5 {
                assert!((q.prob(c) - row.prob(c)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn model_files_round_trip() {
        let vocab = Vocab::with_size(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = AnyModel::from(random_tabular_lm(vocab, 1, 0.7, 0.0, &mut rng).unwrap());
        let text = t.to_json().unwrap();
        let back = AnyModel::from_json(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_json().unwrap(), text);

        let mut s = SoftmaxLM::uniform(vocab, 1);
        s.rows_mut()[2].values_mut()[1] = 0.1 + 0.2;
        let s = AnyModel::from(s);
        assert_eq!(AnyModel::from_json(&s.to_json().unwrap()).unwrap(), s);
    }
}
