//! Knowledge distillation of a softmax-table draft toward a target.
//!
//! Each step draws one data source for the whole batch (fixed pairs, student
//! samples or teacher samples), then takes a plain gradient step on the
//! per-token averaged divergence between teacher and student.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{generate, Context, LanguageModel, SoftmaxLM, Token};
use crate::metrics::empirical_tau;
use crate::oracle::exact_alpha_markov;
use crate::prob::{
    chain_rule_logit_grad, divergence_grad_slices, floored_divergence_slices, DivergenceKind, Distribution,
};
use crate::specdec::{spec_decode, SpecConfig};

/// Data policy and divergence: the part of a configuration a preset fixes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    /// Probability that a batch comes from the fixed dataset.
    pub lambda1: f64,
    /// Probability that a non-fixed batch is sampled from the student.
    pub lambda2: f64,
    pub divergence: DivergenceKind,
    /// Replace the teacher distribution by the one-hot of the observed token.
    #[serde(default)]
    pub black_box: bool,
}

pub const PRESET_NAMES: [&str; 5] = ["SupervisedKD", "SeqKD", "ImitKD", "f-Distill", "GKD"];

pub fn preset(name: &str) -> Result<Objective> {
    let (lambda1, lambda2, divergence, black_box) = match name {
        "SupervisedKD" => (1.0, 0.0, DivergenceKind::Fkl, false),
        "SeqKD" => (0.0, 0.0, DivergenceKind::Fkl, true),
        "ImitKD" => (0.5, 1.0, DivergenceKind::Fkl, false),
        "f-Distill" => (0.0, 0.5, DivergenceKind::Tvd, false),
        "GKD" => (0.0, 1.0, DivergenceKind::Fkl, false),
        _ => return Err(Error::UnknownPreset(name.to_string())),
    };
    Ok(Objective {
        lambda1,
        lambda2,
        divergence,
        black_box,
    })
}

fn default_temperature() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KDConfig {
    #[serde(flatten)]
    pub objective: Objective,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default = "default_temperature")]
    pub gen_temperature: f64,
    pub t_max: usize,
    pub eval_every: usize,
    /// Block size used for the `τ` column of the history.
    pub eval_gamma: usize,
    /// Speculative decodes per held-out prompt when estimating `τ`.
    pub tau_decodes: usize,
    /// Teacher samples per held-out prompt in the frozen probe batch.
    pub probe_per_prompt: usize,
    pub eval_seed: u64,
}

impl KDConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.objective;
        if !(0.0..=1.0).contains(&o.lambda1) || !(0.0..=1.0).contains(&o.lambda2) {
            return Err(Error::Config(format!(
                "data fractions must lie in [0, 1], got {} and {}",
                o.lambda1, o.lambda2
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.t_max == 0 || self.eval_every == 0 || self.eval_gamma == 0 {
            return Err(Error::Config("batch_size, t_max, eval_every and eval_gamma must be >= 1".into()));
        }
        if !(self.gen_temperature.is_finite() && self.gen_temperature >= 0.0) {
            return Err(Error::InvalidTemperature(self.gen_temperature));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub prompt: Vec<Token>,
    pub output: Vec<Token>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedDataset {
    pub pairs: Vec<Example>,
}

/// Training and held-out prompts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompts {
    pub train: Vec<Vec<Token>>,
    pub eval: Vec<Vec<Token>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchSource {
    Fixed,
    Student,
    Teacher,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub source: BatchSource,
    pub examples: Vec<Example>,
}

/// Draws `u1` and `u2` once and fills the whole batch from the chosen source.
pub fn build_batch<T, S, R>(
    config: &KDConfig,
    fixed: &FixedDataset,
    student: &S,
    teacher: &T,
    prompts: &[Vec<Token>],
    rng: &mut R,
) -> Result<Batch>
where
    T: LanguageModel + ?Sized,
    S: LanguageModel + ?Sized,
    R: Rng + ?Sized,
{
    let objective = &config.objective;
    if objective.lambda1 > 0.0 && fixed.pairs.is_empty() {
        return Err(Error::MissingData);
    }
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let source = if u1 < objective.lambda1 {
        BatchSource::Fixed
    } else if u2 < objective.lambda2 {
        BatchSource::Student
    } else {
        BatchSource::Teacher
    };
    if source != BatchSource::Fixed && prompts.is_empty() {
        return Err(Error::Config("no training prompts".into()));
    }
    let mut examples = Vec::with_capacity(config.batch_size);
    for _ in 0..config.batch_size {
        let example = match source {
            BatchSource::Fixed => fixed.pairs[rng.random_range(0..fixed.pairs.len())].clone(),
            BatchSource::Student | BatchSource::Teacher => {
                let prompt = prompts[rng.random_range(0..prompts.len())].clone();
                let output = if source == BatchSource::Student {
                    generate(student, &prompt, config.t_max, config.gen_temperature, rng)?
                } else {
                    generate(teacher, &prompt, config.t_max, config.gen_temperature, rng)?
                };
                Example { prompt, output }
            }
        };
        examples.push(example);
    }
    Ok(Batch { source, examples })
}

fn teacher_target<T: LanguageModel + ?Sized>(
    teacher: &T,
    ctx: Context<'_>,
    observed: Token,
    black_box: bool,
) -> Result<Distribution> {
    if black_box {
        Ok(Distribution::one_hot(teacher.vocab().size(), observed))
    } else {
        teacher.next_dist(ctx, 1.0)
    }
}

/// Batch mean of `(1/|y|)·Σ_t D(p_t, q_t)`, both models at temperature 1.
pub fn kd_loss<T, S>(teacher: &T, student: &S, batch: &[Example], objective: &Objective) -> Result<f64>
where
    T: LanguageModel + ?Sized,
    S: LanguageModel + ?Sized,
{
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut total = 0.0;
    for ex in batch {
        if ex.output.is_empty() {
            continue;
        }
        let mut seq = 0.0;
        for t in 0..ex.output.len() {
            let ctx = Context::new(&ex.prompt, &ex.output[..t]);
            let p = teacher_target(teacher, ctx, ex.output[t], objective.black_box)?;
            let q = student.next_dist(ctx, 1.0)?;
            seq += floored_divergence_slices(objective.divergence, p.probs(), q.probs());
        }
        total += seq / ex.output.len() as f64;
    }
    Ok(total / batch.len() as f64)
}

/// Gradient of [`kd_loss`] with respect to every logit of the student.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    rows: Vec<Vec<f64>>,
}

impl Gradient {
    pub fn zeros(student: &SoftmaxLM) -> Self {
        Self {
            rows: vec![vec![0.0; student.vocab().size()]; student.num_rows()],
        }
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.rows[index]
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn norm(&self) -> f64 {
        self.rows.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }
}

pub fn kd_grad<T>(teacher: &T, student: &SoftmaxLM, batch: &[Example], objective: &Objective) -> Result<Gradient>
where
    T: LanguageModel + ?Sized,
{
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut grad = Gradient::zeros(student);
    let b = batch.len() as f64;
    for ex in batch {
        if ex.output.is_empty() {
            continue;
        }
        let scale = 1.0 / (b * ex.output.len() as f64);
        for t in 0..ex.output.len() {
            let ctx = Context::new(&ex.prompt, &ex.output[..t]);
            let p = teacher_target(teacher, ctx, ex.output[t], objective.black_box)?;
            let q = student.next_dist(ctx, 1.0)?;
            let d_dq = divergence_grad_slices(objective.divergence, p.probs(), q.probs());
            let d_dz = chain_rule_logit_grad(&d_dq, &q)?;
            let row = &mut grad.rows[student.row_index(ctx)?];
            for (acc, g) in row.iter_mut().zip(d_dz) {
                *acc += scale * g;
            }
        }
    }
    Ok(grad)
}

/// `θ ← θ − η·grad`; the student is left untouched if the update is invalid.
pub fn sgd_step(student: &mut SoftmaxLM, grad: &Gradient, learning_rate: f64) -> Result<()> {
    if grad.rows.len() != student.num_rows() || grad.rows.iter().any(|r| r.len() != student.vocab().size()) {
        return Err(Error::VocabMismatch {
            left: student.num_rows(),
            right: grad.rows.len(),
        });
    }
    let finite = student
        .rows()
        .zip(&grad.rows)
        .all(|((_, z), g)| z.values().iter().zip(g).all(|(a, b)| (a - learning_rate * b).is_finite()));
    if !finite {
        return Err(Error::NonFiniteLogits);
    }
    for (row, g) in student.rows_mut().iter_mut().zip(&grad.rows) {
        for (z, gz) in row.values_mut().iter_mut().zip(g) {
            *z -= learning_rate * gz;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub loss: f64,
    pub alpha: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EvalRecord>,
}

impl TrainHistory {
    pub fn first(&self) -> Option<&EvalRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&EvalRecord> {
        self.records.last()
    }

    /// CSV with columns `step,loss,alpha,tau`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        for r in &self.records {
            out.serialize(r)?;
        }
        if self.records.is_empty() {
            out.write_record(["step", "loss", "alpha", "tau"])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Mean exact `α` over prompts, via the context-state recursion.
pub fn mean_exact_alpha<T, D>(target: &T, draft: &D, prompts: &[Vec<Token>], t_max: usize) -> Result<f64>
where
    T: LanguageModel + ?Sized,
    D: LanguageModel + ?Sized,
{
    if prompts.is_empty() {
        return Err(Error::Config("no held-out prompts".into()));
    }
    let mut total = 0.0;
    for x in prompts {
        total += exact_alpha_markov(target, draft, x, t_max)?.alpha;
    }
    Ok(total / prompts.len() as f64)
}

/// Empirical `τ` from `decodes` lossless speculative decodes per prompt.
pub fn sampled_tau<T, D>(
    target: &T,
    draft: &D,
    prompts: &[Vec<Token>],
    config: &SpecConfig,
    decodes: usize,
    seed: u64,
) -> Result<f64>
where
    T: LanguageModel + ?Sized,
    D: LanguageModel + ?Sized,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut traces = Vec::with_capacity(prompts.len() * decodes);
    for x in prompts {
        for _ in 0..decodes {
            traces.push(spec_decode(target, draft, x, config, &mut rng)?);
        }
    }
    empirical_tau(&traces)
}

/// Monte Carlo on-policy TVD loss `E_{y~q}[(1/|y|)·Σ_t TVD(p_t, q_t)]`, averaged over prompts.
pub fn on_policy_tvd<T, D>(target: &T, draft: &D, prompts: &[Vec<Token>], t_max: usize, samples: usize, seed: u64) -> Result<f64>
where
    T: LanguageModel + ?Sized,
    D: LanguageModel + ?Sized,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = Vec::with_capacity(prompts.len() * samples);
    for x in prompts {
        for _ in 0..samples {
            let output = generate(draft, x, t_max, 1.0, &mut rng)?;
            batch.push(Example { prompt: x.clone(), output });
        }
    }
    let objective = Objective {
        lambda1: 0.0,
        lambda2: 1.0,
        divergence: DivergenceKind::Tvd,
        black_box: false,
    };
    kd_loss(target, draft, &batch, &objective)
}

fn probe_batch<T: LanguageModel + ?Sized>(config: &KDConfig, teacher: &T, prompts: &[Vec<Token>]) -> Result<Vec<Example>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.eval_seed);
    let mut probe = Vec::with_capacity(prompts.len() * config.probe_per_prompt);
    for x in prompts {
        for _ in 0..config.probe_per_prompt {
            let output = generate(teacher, x, config.t_max, 1.0, &mut rng)?;
            probe.push(Example { prompt: x.clone(), output });
        }
    }
    Ok(probe)
}

fn evaluate<T: LanguageModel + ?Sized>(
    config: &KDConfig,
    teacher: &T,
    student: &SoftmaxLM,
    prompts: &Prompts,
    probe: &[Example],
    step: usize,
) -> Result<EvalRecord> {
    // the probe loss always uses the teacher's full distribution
    let objective = Objective {
        black_box: false,
        ..config.objective
    };
    let spec = SpecConfig::lossless(config.eval_gamma, config.t_max)?;
    Ok(EvalRecord {
        step,
        loss: kd_loss(teacher, student, probe, &objective)?,
        alpha: mean_exact_alpha(teacher, student, &prompts.eval, config.t_max)?,
        tau: sampled_tau(teacher, student, &prompts.eval, &spec, config.tau_decodes, config.eval_seed.wrapping_add(1))?,
    })
}

/// Batch, gradient, update, repeated `steps` times; evaluates on held-out
/// prompts at step 0 and every `eval_every` steps.
pub fn train<T, R>(
    config: &KDConfig,
    teacher: &T,
    student_init: &SoftmaxLM,
    fixed: &FixedDataset,
    prompts: &Prompts,
    rng: &mut R,
) -> Result<(SoftmaxLM, TrainHistory)>
where
    T: LanguageModel + ?Sized,
    R: Rng + ?Sized,
{
    config.validate()?;
    if teacher.vocab() != student_init.vocab() {
        return Err(Error::VocabMismatch {
            left: teacher.vocab().size(),
            right: student_init.vocab().size(),
        });
    }
    let probe = probe_batch(config, teacher, &prompts.eval)?;
    let mut student = student_init.clone();
    let mut history = TrainHistory::default();
    history.records.push(evaluate(config, teacher, &student, prompts, &probe, 0)?);
    for step in 1..=config.steps {
        let batch = build_batch(config, fixed, &student, teacher, &prompts.train, rng)?;
        let grad = kd_grad(teacher, &student, &batch.examples, &config.objective)?;
        sgd_step(&mut student, &grad, config.learning_rate)?;
        if step % config.eval_every == 0 {
            history.records.push(evaluate(config, teacher, &student, prompts, &probe, step)?);
        }
    }
    Ok((student, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{random_tabular_lm, TabularLM, Vocab};
    use statrs::distribution::{Binomial, DiscreteCDF};

    fn models(vocab: usize, seed: u64) -> (TabularLM, SoftmaxLM) {
        let vocab = Vocab::with_size(vocab).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let teacher = random_tabular_lm(vocab, 1, 1.0, 0.0, &mut rng).unwrap();
        let student = random_tabular_lm(vocab, 1, 1.0, 0.0, &mut rng).unwrap();
        (teacher, SoftmaxLM::from_tabular(&student).unwrap())
    }

    fn config(objective: Objective) -> KDConfig {
        KDConfig {
            objective,
            learning_rate: 0.5,
            steps: 50,
            batch_size: 8,
            gen_temperature: 1.0,
            t_max: 4,
            eval_every: 10,
            eval_gamma: 3,
            tau_decodes: 5,
            probe_per_prompt: 4,
            eval_seed: 9,
        }
    }

    fn prompts() -> Prompts {
        Prompts {
            train: vec![vec![1], vec![2], vec![3]],
            eval: vec![vec![1], vec![2]],
        }
    }

    fn fixed_from<T: LanguageModel>(teacher: &T, n: usize) -> FixedDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        FixedDataset {
            pairs: (0..n)
                .map(|i| {
                    let prompt = vec![1 + i % 3];
                    let output = generate(teacher, &prompt, 4, 1.0, &mut rng).unwrap();
                    Example { prompt, output }
                })
                .collect(),
        }
    }

    #[test]
    fn preset_table() {
        assert_eq!(preset("GKD").unwrap().lambda2, 1.0);
        assert_eq!(preset("f-Distill").unwrap().divergence, DivergenceKind::Tvd);
        assert_eq!(preset("SupervisedKD").unwrap().lambda1, 1.0);
        assert!(preset("SeqKD").unwrap().black_box);
        let imit = preset("ImitKD").unwrap();
        assert_eq!((imit.lambda1, imit.lambda2), (0.5, 1.0));
        assert!(matches!(preset("MiniLLM"), Err(Error::UnknownPreset(_))));
        for name in PRESET_NAMES {
            preset(name).unwrap();
        }
    }

    #[test]
    fn batch_sources_follow_fractions() {
        let (teacher, student) = models(4, 1);
        let fixed = fixed_from(&teacher, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sup = config(preset("SupervisedKD").unwrap());
        let gkd = config(preset("GKD").unwrap());
        for _ in 0..20 {
            let b = build_batch(&sup, &fixed, &student, &teacher, &prompts().train, &mut rng).unwrap();
            assert_eq!(b.source, BatchSource::Fixed);
            assert!(b.examples.iter().all(|e| fixed.pairs.contains(e)));
            let b = build_batch(&gkd, &fixed, &student, &teacher, &prompts().train, &mut rng).unwrap();
            assert_eq!(b.source, BatchSource::Student);
            assert_eq!(b.examples.len(), 8);
        }
        let f = config(preset("f-Distill").unwrap());
        let n = 1000;
        let students = (0..n)
            .filter(|_| {
                build_batch(&f, &fixed, &student, &teacher, &prompts().train, &mut rng).unwrap().source
                    == BatchSource::Student
            })
            .count() as u64;
        let binom = Binomial::new(0.5, n).unwrap();
        let tail = binom.cdf(students.min(n - students));
        assert!(2.0 * tail > 0.01, "{students} student batches");
    }

    #[test]
    fn missing_fixed_data() {
        let (teacher, student) = models(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = config(preset("ImitKD").unwrap());
        let r = build_batch(&c, &FixedDataset::default(), &student, &teacher, &prompts().train, &mut rng);
        assert!(matches!(r, Err(Error::MissingData)));
    }

    #[test]
    fn loss_examples() {
        let vocab = Vocab::with_size(2).unwrap();
        let p = TabularLM::iid(vocab, Distribution::new(vec![0.5, 0.5]).unwrap()).unwrap();
        let q_table = TabularLM::iid(vocab, Distribution::new(vec![0.25, 0.75]).unwrap()).unwrap();
        let q = SoftmaxLM::from_tabular(&q_table).unwrap();
        let batch = vec![Example {
            prompt: vec![],
            output: vec![1],
        }];
        let fkl = preset("GKD").unwrap();
        let loss = kd_loss(&p, &q, &batch, &fkl).unwrap();
        assert!((loss - 0.143841).abs() < 1e-6, "{loss}");
        assert!(kd_loss(&p, &p, &batch, &fkl).unwrap().abs() < 1e-15);
    }

    #[test]
    fn tvd_loss_is_bounded() {
        let (teacher, student) = models(4, 4);
        let c = config(preset("f-Distill").unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let b = build_batch(&c, &FixedDataset::default(), &student, &teacher, &prompts().train, &mut rng).unwrap();
            let l = kd_loss(&teacher, &student, &b.examples, &c.objective).unwrap();
            assert!((0.0..=1.0).contains(&l));
        }
    }

    fn finite_difference_check(kind: DivergenceKind, seed: u64) {
        let (teacher, student) = models(4, seed);
        let objective = Objective {
            lambda1: 0.0,
            lambda2: 0.5,
            divergence: kind,
            black_box: false,
        };
        let c = config(objective);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let batch = build_batch(&c, &FixedDataset::default(), &student, &teacher, &prompts().train, &mut rng)
            .unwrap()
            .examples;
        let grad = kd_grad(&teacher, &student, &batch, &objective).unwrap();
        let h = 1e-6;
        for i in 0..student.num_rows() {
            for k in 0..4 {
                let bump = |delta: f64| {
                    let mut m = student.clone();
                    m.rows_mut()[i].values_mut()[k] += delta;
                    kd_loss(&teacher, &m, &batch, &objective).unwrap()
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let g = grad.row(i)[k];
                let err = (fd - g).abs() / g.abs().max(1e-3);
                assert!(err <= 1e-5, "{kind:?} row {i} logit {k}: {g} vs {fd}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            finite_difference_check(DivergenceKind::Fkl, seed);
            finite_difference_check(DivergenceKind::Rkl, seed);
            finite_difference_check(DivergenceKind::jsd(0.5).unwrap(), seed);
            finite_difference_check(DivergenceKind::Tvd, seed);
        }
    }

    #[test]
    fn unvisited_rows_get_zero_gradient() {
        let (teacher, student) = models(4, 6);
        let batch = vec![Example {
            prompt: vec![2],
            output: vec![2, 2],
        }];
        let grad = kd_grad(&teacher, &student, &batch, &preset("GKD").unwrap()).unwrap();
        let visited = student.row_index(Context::new(&[2], &[])).unwrap();
        for i in 0..grad.num_rows() {
            if i != visited {
                assert!(grad.row(i).iter().all(|&g| g == 0.0));
            }
        }
    }

    #[test]
    fn teacher_is_a_stationary_point() {
        let (teacher, _) = models(4, 7);
        let student = SoftmaxLM::from_tabular(&teacher).unwrap();
        let batch = fixed_from(&teacher, 16).pairs;
        for kind in [DivergenceKind::Fkl, DivergenceKind::Rkl, DivergenceKind::jsd(0.5).unwrap()] {
            let o = Objective {
                lambda1: 1.0,
                lambda2: 0.0,
                divergence: kind,
                black_box: false,
            };
            assert!(kd_grad(&teacher, &student, &batch, &o).unwrap().norm() <= 1e-9);
        }
    }

    #[test]
    fn sgd_identities_and_descent() {
        let (teacher, student) = models(3, 8);
        let batch = vec![Example {
            prompt: vec![1],
            output: vec![2],
        }];
        let o = preset("GKD").unwrap();
        let mut same = student.clone();
        sgd_step(&mut same, &Gradient::zeros(&student), 0.3).unwrap();
        assert_eq!(same, student);
        let grad = kd_grad(&teacher, &student, &batch, &o).unwrap();
        sgd_step(&mut same, &grad, 0.0).unwrap();
        assert_eq!(same, student);
        let before = kd_loss(&teacher, &student, &batch, &o).unwrap();
        sgd_step(&mut same, &grad, 0.1).unwrap();
        assert!(kd_loss(&teacher, &same, &batch, &o).unwrap() < before);
    }

    #[test]
    fn sgd_rejects_bad_shapes() {
        let (_, student) = models(3, 9);
        let (_, other) = models(4, 9);
        let mut s = student.clone();
        assert!(sgd_step(&mut s, &Gradient::zeros(&other), 0.1).is_err());
    }

    #[test]
    fn self_distillation_stays_at_zero_loss() {
        let (teacher, _) = models(4, 10);
        let student = SoftmaxLM::from_tabular(&teacher).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = config(preset("GKD").unwrap());
        let (_, history) = train(&c, &teacher, &student, &FixedDataset::default(), &prompts(), &mut rng).unwrap();
        assert!(history.records.iter().all(|r| r.loss <= 1e-9));
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let (teacher, student) = models(4, 12);
        let fixed = fixed_from(&teacher, 20);
        for name in PRESET_NAMES {
            let mut c = config(preset(name).unwrap());
            c.steps = 300;
            c.eval_every = 100;
            let run = || {
                let mut rng = ChaCha8Rng::seed_from_u64(13);
                train(&c, &teacher, &student, &fixed, &prompts(), &mut rng).unwrap()
            };
            let (a, ha) = run();
            let (b, hb) = run();
            assert_eq!(a, b);
            assert_eq!(ha, hb);
            assert_eq!(ha.records.len(), 4);
            assert!(ha.last().unwrap().alpha > ha.first().unwrap().alpha, "{name}");
        }
    }

    #[test]
    fn zero_steps_returns_input() {
        let (teacher, student) = models(3, 14);
        let mut c = config(preset("GKD").unwrap());
        c.steps = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, history) = train(&c, &teacher, &student, &FixedDataset::default(), &prompts(), &mut rng).unwrap();
        assert_eq!(out, student);
        assert_eq!(history.records.len(), 1);
    }

    #[test]
    fn history_csv_header() {
        let history = TrainHistory {
            records: vec![EvalRecord {
                step: 0,
                loss: 0.5,
                alpha: 0.25,
                tau: 1.5,
            }],
        };
        let mut buf = Vec::new();
        history.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,loss,alpha,tau\n0,0.5,0.25,1.5\n");
    }
}
