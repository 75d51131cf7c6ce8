//! Experiment runner: task generation, distillation, lenience sweeps, oracle
//! audits and the joined report.
//!
//! Every command reads one JSON experiment file and writes into its output
//! directory. All randomness is derived from the configured seed, so a re-run
//! reproduces every CSV byte for byte.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distill::{self, preset, Example, FixedDataset, KDConfig, Prompts, TrainHistory, PRESET_NAMES};
use crate::error::{Error, Result};
use crate::lm::{blend_lm, generate, random_tabular_lm, seq_logprob, AnyModel, LanguageModel, SoftmaxLM, TabularLM, Token, Vocab};
use crate::metrics::{empirical_alpha, empirical_tau};
use crate::oracle::{
    bound_residuals, enumerate_seq_dist_at, exact_specdec, exact_specdec_with, oracle_report, seq_prob_at,
    specdec_sequence_prob, ResidualFn, BOUND_TOLERANCE, MAX_SPEC_GAMMA, MAX_SPEC_LEN, MAX_SPEC_VOCAB,
};
use crate::prob::DivergenceKind;
use crate::specdec::{residual_dist, spec_decode, LenienceKind, LenienceSpec, SpecConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_AUDIT: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub const TEACHER_FILE: &str = "teacher.json";
pub const DRAFT_INIT_FILE: &str = "draft_init.json";
pub const FIXED_FILE: &str = "fixed.json";
pub const PROMPTS_FILE: &str = "prompts.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const AUDIT_FILE: &str = "audit.csv";
pub const REPORT_FILE: &str = "report.csv";

/// Label of the undistilled draft in sweep and report rows.
pub const RAW_METHOD: &str = "raw";

/// Losslessness tolerance used by the audit.
pub const LOSSLESS_TOLERANCE: f64 = 1e-9;

// RNG streams, so commands never share random draws
const STREAM_TASK: u64 = 1;
const STREAM_DISTILL: u64 = 100;
const STREAM_SWEEP: u64 = 10_000;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub vocab: usize,
    pub order: usize,
    pub concentration: f64,
    #[serde(default)]
    pub eos_bias: f64,
    pub t_max: usize,
    pub prompt_len: usize,
    pub train_prompts: usize,
    pub eval_prompts: usize,
    pub fixed_pairs: usize,
}

/// How the initial draft is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DraftSpec {
    /// Independent random table.
    Random { concentration: f64 },
    /// `λ·teacher + (1 − λ)·noise` with a random noise table.
    Blend { lambda: f64, concentration: f64 },
    /// Model file, relative to the config file's directory.
    File { path: PathBuf },
}

fn default_presets() -> Vec<String> {
    PRESET_NAMES.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillBlock {
    #[serde(default = "default_presets")]
    pub presets: Vec<String>,
    /// Overrides the presets' divergence when set.
    #[serde(default)]
    pub divergence: Option<DivergenceKind>,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default = "one")]
    pub gen_temperature: f64,
    pub eval_every: usize,
    pub eval_gamma: usize,
    pub tau_decodes: usize,
    pub probe_per_prompt: usize,
}

fn one() -> f64 {
    1.0
}

fn default_kinds() -> Vec<LenienceKind> {
    vec![LenienceKind::None, LenienceKind::Lin, LenienceKind::Sq, LenienceKind::Exp]
}

fn default_epsilons() -> Vec<f64> {
    vec![1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0]
}

fn default_temperatures() -> Vec<f64> {
    vec![1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    /// Drafts to sweep: `raw` and/or preset names with a trained model on disk.
    #[serde(default)]
    pub methods: Option<Vec<String>>,
    #[serde(default = "default_kinds")]
    pub kinds: Vec<LenienceKind>,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    pub gammas: Vec<usize>,
    pub cs: Vec<f64>,
    #[serde(default = "default_temperatures")]
    pub temperatures: Vec<f64>,
    /// Monte Carlo decodes per held-out prompt when the exact recursion is out of reach.
    pub decodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditBlock {
    pub instances: usize,
    pub vocab: usize,
    pub order: usize,
    pub t_max: usize,
    pub gamma: usize,
    pub concentration: f64,
    #[serde(default)]
    pub eos_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub task: TaskConfig,
    pub draft: DraftSpec,
    pub distill: DistillBlock,
    pub sweep: SweepBlock,
    pub audit: AuditBlock,
    /// Directory relative paths are resolved against; set when loading.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut config: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if config.out_dir.is_relative() {
            config.out_dir = config.base_dir.join(&config.out_dir);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.task;
        Vocab::with_size(t.vocab)?;
        if t.t_max == 0 || t.prompt_len == 0 || t.train_prompts == 0 || t.eval_prompts == 0 {
            return Err(Error::Config("t_max, prompt_len and prompt counts must be >= 1".into()));
        }
        if t.vocab < 2 {
            return Err(Error::Config("prompts need at least one non-EOS token".into()));
        }
        if let DraftSpec::Blend { lambda, .. } = self.draft {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(Error::Config(format!("blend weight must lie in [0, 1], got {lambda}")));
            }
        }
        for name in &self.distill.presets {
            preset(name)?;
        }
        self.kd_config(&self.distill.presets.first().cloned().unwrap_or_else(|| "GKD".into()))?
            .validate()?;
        let s = &self.sweep;
        for &eps in &s.epsilons {
            LenienceSpec::new(LenienceKind::Lin, eps)?;
        }
        for &gamma in &s.gammas {
            SpecConfig::lossless(gamma, t.t_max)?;
        }
        for &temperature in &s.temperatures {
            SpecConfig::new(1, 1, temperature, LenienceSpec::lossless())?;
        }
        if s.cs.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::Config("cost ratios must be finite and >= 0".into()));
        }
        if s.decodes == 0 {
            return Err(Error::Config("sweep decodes must be >= 1".into()));
        }
        let a = &self.audit;
        Vocab::with_size(a.vocab)?;
        SpecConfig::lossless(a.gamma, a.t_max)?;
        Ok(())
    }

    /// Full training configuration for one preset.
    pub fn kd_config(&self, preset_name: &str) -> Result<KDConfig> {
        let mut objective = preset(preset_name)?;
        if let Some(divergence) = self.distill.divergence {
            objective.divergence = divergence;
        }
        let d = &self.distill;
        Ok(KDConfig {
            objective,
            learning_rate: d.learning_rate,
            steps: d.steps,
            batch_size: d.batch_size,
            gen_temperature: d.gen_temperature,
            t_max: self.task.t_max,
            eval_every: d.eval_every,
            eval_gamma: d.eval_gamma,
            tau_decodes: d.tau_decodes,
            probe_per_prompt: d.probe_per_prompt,
            eval_seed: self.seed,
        })
    }

    fn sweep_methods(&self) -> Vec<String> {
        self.sweep.methods.clone().unwrap_or_else(|| {
            std::iter::once(RAW_METHOD.to_string())
                .chain(self.distill.presets.iter().cloned())
                .collect()
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_task_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingTask(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn load_task_model(path: &Path) -> Result<AnyModel> {
    if !path.exists() {
        return Err(Error::MissingTask(path.to_path_buf()));
    }
    AnyModel::load(path)
}

/// Files written by [`cmd_gen_task`].
#[derive(Debug, Clone)]
pub struct Task {
    pub teacher: AnyModel,
    pub draft_init: AnyModel,
    pub fixed: FixedDataset,
    pub prompts: Prompts,
}

impl Task {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            teacher: load_task_model(&dir.join(TEACHER_FILE))?,
            draft_init: load_task_model(&dir.join(DRAFT_INIT_FILE))?,
            fixed: read_task_json(&dir.join(FIXED_FILE))?,
            prompts: read_task_json(&dir.join(PROMPTS_FILE))?,
        })
    }
}

fn random_prompt<R: Rng + ?Sized>(vocab: Vocab, len: usize, rng: &mut R) -> Vec<Token> {
    // any token but EOS
    (0..len)
        .map(|_| {
            let t = rng.random_range(0..vocab.size() - 1);
            if t >= vocab.eos() {
                t + 1
            } else {
                t
            }
        })
        .collect()
}

/// Builds the task in memory; [`cmd_gen_task`] writes it out.
pub fn build_task(config: &ExperimentConfig) -> Result<Task> {
    let t = &config.task;
    let vocab = Vocab::with_size(t.vocab)?;
    let mut rng = stream_rng(config.seed, STREAM_TASK);
    let teacher = random_tabular_lm(vocab, t.order, t.concentration, t.eos_bias, &mut rng)?;
    let draft_init: AnyModel = match &config.draft {
        DraftSpec::Random { concentration } => {
            random_tabular_lm(vocab, t.order, *concentration, t.eos_bias, &mut rng)?.into()
        }
        DraftSpec::Blend { lambda, concentration } => {
            let noise = random_tabular_lm(vocab, t.order, *concentration, t.eos_bias, &mut rng)?;
            blend_lm(&teacher, &noise, *lambda)?.into()
        }
        DraftSpec::File { path } => {
            let model = AnyModel::load(&config.base_dir.join(path))?;
            if model.vocab() != vocab {
                return Err(Error::VocabMismatch {
                    left: vocab.size(),
                    right: model.vocab().size(),
                });
            }
            model
        }
    };
    let prompts = Prompts {
        train: (0..t.train_prompts).map(|_| random_prompt(vocab, t.prompt_len, &mut rng)).collect(),
        eval: (0..t.eval_prompts).map(|_| random_prompt(vocab, t.prompt_len, &mut rng)).collect(),
    };
    let mut pairs = Vec::with_capacity(t.fixed_pairs);
    for _ in 0..t.fixed_pairs {
        let prompt = prompts.train[rng.random_range(0..prompts.train.len())].clone();
        let output = generate(&teacher, &prompt, t.t_max, config.distill.gen_temperature, &mut rng)?;
        pairs.push(Example { prompt, output });
    }
    Ok(Task {
        teacher: teacher.into(),
        draft_init,
        fixed: FixedDataset { pairs },
        prompts,
    })
}

pub fn cmd_gen_task(config: &ExperimentConfig) -> Result<()> {
    let task = build_task(config)?;
    let dir = &config.out_dir;
    fs::create_dir_all(dir)?;
    task.teacher.save(&dir.join(TEACHER_FILE))?;
    task.draft_init.save(&dir.join(DRAFT_INIT_FILE))?;
    write_json(&dir.join(FIXED_FILE), &task.fixed)?;
    write_json(&dir.join(PROMPTS_FILE), &task.prompts)?;
    Ok(())
}

pub fn draft_file(preset_name: &str) -> String {
    format!("draft_{preset_name}.json")
}

pub fn history_file(preset_name: &str) -> String {
    format!("history_{preset_name}.csv")
}

fn trainable(model: &AnyModel) -> Result<SoftmaxLM> {
    match model {
        AnyModel::Tabular(t) => SoftmaxLM::from_tabular(t),
        AnyModel::Softmax(s) => Ok(s.clone()),
    }
}

/// Trains one preset; returns the model to save and its history.
pub fn distill_preset(config: &ExperimentConfig, task: &Task, preset_name: &str) -> Result<(AnyModel, TrainHistory)> {
    let kd = config.kd_config(preset_name)?;
    let index = PRESET_NAMES.iter().position(|p| *p == preset_name).unwrap_or(PRESET_NAMES.len()) as u64;
    let mut rng = stream_rng(config.seed, STREAM_DISTILL + index);
    let student = trainable(&task.draft_init)?;
    let (trained, history) = distill::train(&kd, &task.teacher, &student, &task.fixed, &task.prompts, &mut rng)?;
    // with nothing trained the input passes through untouched
    let model = if kd.steps == 0 {
        task.draft_init.clone()
    } else {
        AnyModel::Softmax(trained)
    };
    Ok((model, history))
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = jobs {
        builder = builder.num_threads(jobs.max(1));
    }
    builder.build().map_err(|e| Error::Config(e.to_string()))
}

pub fn cmd_distill(config: &ExperimentConfig, jobs: Option<usize>) -> Result<()> {
    let task = Task::load(&config.out_dir)?;
    let results: Vec<Result<(AnyModel, TrainHistory)>> = pool(jobs)?.install(|| {
        config
            .distill
            .presets
            .par_iter()
            .map(|name| distill_preset(config, &task, name))
            .collect()
    });
    for (name, result) in config.distill.presets.iter().zip(results) {
        let (model, history) = result?;
        model.save(&config.out_dir.join(draft_file(name)))?;
        history.write_csv(BufWriter::new(File::create(config.out_dir.join(history_file(name)))?))?;
    }
    Ok(())
}

/// One cell of the quality-latency sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub method: String,
    pub temperature: f64,
    pub kind: LenienceKind,
    pub epsilon: f64,
    pub gamma: usize,
    pub c: f64,
    pub quality_tvd: f64,
    pub quality_loglik: f64,
    pub relative_latency: f64,
    pub tau: f64,
    pub alpha: f64,
    /// `exact` or `mc`.
    pub estimate: String,
}

/// Whether [`exact_specdec`] can handle the sweep's instance sizes.
pub fn sweep_is_exact(vocab: usize, gamma: usize, t_max: usize) -> bool {
    vocab <= MAX_SPEC_VOCAB && gamma <= MAX_SPEC_GAMMA && t_max <= MAX_SPEC_LEN
}

struct CellStats {
    quality_tvd: f64,
    quality_loglik: f64,
    tau: f64,
    alpha: f64,
    target_calls: f64,
    draft_calls: f64,
    tokens: f64,
    exact: bool,
}

fn exact_cell<T, D>(target: &T, draft: &D, prompts: &[Vec<Token>], spec: &SpecConfig) -> Result<CellStats>
where
    T: LanguageModel + ?Sized,
    D: LanguageModel + ?Sized,
{
    let n = prompts.len() as f64;
    let mut stats = CellStats {
        quality_tvd: 0.0,
        quality_loglik: 0.0,
        tau: 0.0,
        alpha: 0.0,
        target_calls: 0.0,
        draft_calls: 0.0,
        tokens: 0.0,
        exact: true,
    };
    let mut accepted = 0.0;
    for x in prompts {
        let out = exact_specdec(target, draft, x, spec)?;
        let want = enumerate_seq_dist_at(target, x, spec.t_max, spec.temperature)?;
        stats.quality_tvd += out.dist.tv(&want) / n;
        let mut loglik = 0.0;
        for (y, s) in out.dist.iter() {
            loglik += s * seq_logprob(target, x, y)?;
        }
        stats.quality_loglik += loglik / n;
        stats.target_calls += out.expected_target_calls;
        stats.draft_calls += out.expected_draft_calls;
        stats.tokens += out.expected_len();
        accepted += out.expected_accepted;
    }
    stats.tau = stats.tokens / stats.target_calls;
    stats.alpha = accepted / stats.tokens;
    Ok(stats)
}

fn sampled_cell<T, D>(
    target: &T,
    draft: &D,
    prompts: &[Vec<Token>],
    spec: &SpecConfig,
    decodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CellStats>
where
    T: LanguageModel + ?Sized,
    D: LanguageModel + ?Sized,
{
    let mut traces = Vec::with_capacity(prompts.len() * decodes);
    let mut tv = 0.0;
    let mut loglik = 0.0;
    for x in prompts {
        for _ in 0..decodes {
            let trace = spec_decode(target, draft, x, spec, rng)?;
            let s = specdec_sequence_prob(target, draft, x, &trace.output, spec)?;
            let p = seq_prob_at(target, x, &trace.output, spec.temperature)?;
            // TV(s, p) = E_{y~s}[max(0, 1 − p(y)/s(y))]
            tv += (1.0 - p / s).max(0.0);
            loglik += seq_logprob(target, x, &trace.output)?;
            traces.push(trace);
        }
    }
    let n = traces.len() as f64;
    Ok(CellStats {
        quality_tvd: tv / n,
        quality_loglik: loglik / n,
        tau: empirical_tau(&traces)?,
        alpha: empirical_alpha(&traces)?.pooled,
        target_calls: traces.iter().map(|t| t.target_calls as f64).sum(),
        draft_calls: traces.iter().map(|t| t.draft_calls as f64).sum(),
        tokens: traces.iter().map(|t| t.output.len() as f64).sum(),
        exact: false,
    })
}

struct Cell {
    method: String,
    temperature: f64,
    kind: LenienceKind,
    epsilon: f64,
    gamma: usize,
}

fn sweep_cells(config: &ExperimentConfig) -> Vec<Cell> {
    let s = &config.sweep;
    let mut epsilons = s.epsilons.clone();
    epsilons.sort_by(f64::total_cmp);
    epsilons.dedup();
    let mut kinds = s.kinds.clone();
    kinds.sort_by_key(|k| k.to_string());
    kinds.dedup();
    let mut methods = config.sweep_methods();
    methods.sort();
    methods.dedup();
    let mut gammas = s.gammas.clone();
    gammas.sort_unstable();
    gammas.dedup();
    let mut temperatures = s.temperatures.clone();
    temperatures.sort_by(f64::total_cmp);
    temperatures.dedup();
    let mut cells = Vec::new();
    for method in &methods {
        for &temperature in &temperatures {
            for &kind in &kinds {
                let eps: Vec<f64> = if kind == LenienceKind::None { vec![1.0] } else { epsilons.clone() };
                for &epsilon in &eps {
                    for &gamma in &gammas {
                        cells.push(Cell {
                            method: method.clone(),
                            temperature,
                            kind,
                            epsilon,
                            gamma,
                        });
                    }
                }
            }
        }
    }
    cells
}

fn load_method(config: &ExperimentConfig, task: &Task, method: &str) -> Result<AnyModel> {
    if method == RAW_METHOD {
        Ok(task.draft_init.clone())
    } else {
        preset(method)?;
        load_task_model(&config.out_dir.join(draft_file(method)))
    }
}

/// Sweep rows in CSV order: by method, temperature, lenience kind, `ε`, `γ`, `c`.
pub fn run_sweep(config: &ExperimentConfig, jobs: Option<usize>) -> Result<Vec<TradeoffRow>> {
    let task = Task::load(&config.out_dir)?;
    let mut drafts = BTreeMap::new();
    for method in config.sweep_methods() {
        let model = load_method(config, &task, &method)?;
        drafts.insert(method, model);
    }
    let cells = sweep_cells(config);
    let t_max = config.task.t_max;
    let vocab = config.task.vocab;
    let results: Vec<Result<Vec<TradeoffRow>>> = pool(jobs)?.install(|| {
        cells
            .par_iter()
            .enumerate()
            .map(|(index, cell)| {
                let draft = &drafts[&cell.method];
                let spec = SpecConfig::new(cell.gamma, t_max, cell.temperature, LenienceSpec::new(cell.kind, cell.epsilon)?)?;
                let stats = if sweep_is_exact(vocab, cell.gamma, t_max) {
                    exact_cell(&task.teacher, draft, &task.prompts.eval, &spec)?
                } else {
                    let mut rng = stream_rng(config.seed, STREAM_SWEEP + index as u64);
                    sampled_cell(&task.teacher, draft, &task.prompts.eval, &spec, config.sweep.decodes, &mut rng)?
                };
                let mut cs = config.sweep.cs.clone();
                cs.sort_by(f64::total_cmp);
                cs.dedup();
                Ok(cs
                    .into_iter()
                    .map(|c| TradeoffRow {
                        method: cell.method.clone(),
                        temperature: cell.temperature,
                        kind: cell.kind,
                        epsilon: cell.epsilon,
                        gamma: cell.gamma,
                        c,
                        quality_tvd: stats.quality_tvd,
                        quality_loglik: stats.quality_loglik,
                        relative_latency: (stats.target_calls + c * stats.draft_calls) / stats.tokens,
                        tau: stats.tau,
                        alpha: stats.alpha,
                        estimate: if stats.exact { "exact" } else { "mc" }.to_string(),
                    })
                    .collect())
            })
            .collect()
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

pub fn cmd_sweep(config: &ExperimentConfig, jobs: Option<usize>) -> Result<()> {
    let rows = run_sweep(config, jobs)?;
    fs::create_dir_all(&config.out_dir)?;
    let mut out = csv::Writer::from_writer(BufWriter::new(File::create(config.out_dir.join(SWEEP_FILE))?));
    for row in &rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub seed: u64,
    pub vocab: usize,
    #[serde(rename = "T_max")]
    pub t_max: usize,
    pub alpha: f64,
    pub epsilon: f64,
    /// `α − (1 − 2T²ε/L_p)`.
    pub bound_slack: f64,
    /// `α − (1 − T²ε/L_p)`.
    pub stated_bound_slack: f64,
    pub position_min_slack: f64,
    pub epsilon_gap: f64,
    pub max_lemma_residual: f64,
    pub lossless_tv: f64,
}

impl AuditRow {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.max_lemma_residual > BOUND_TOLERANCE {
            v.push(format!("identity residual {:e}", self.max_lemma_residual));
        }
        if self.epsilon_gap < -BOUND_TOLERANCE {
            v.push(format!("epsilon gap {:e}", self.epsilon_gap));
        }
        if self.position_min_slack < -BOUND_TOLERANCE {
            v.push(format!("per-position slack {:e}", self.position_min_slack));
        }
        if self.bound_slack < -BOUND_TOLERANCE {
            v.push(format!("bound slack {:e}", self.bound_slack));
        }
        if !(self.lossless_tv <= LOSSLESS_TOLERANCE) {
            v.push(format!("lossless TV {:e}", self.lossless_tv));
        }
        v
    }
}

#[derive(Serialize)]
struct InstanceDump<'a> {
    row: &'a AuditRow,
    violations: Vec<String>,
    prompt: Vec<Token>,
    gamma: usize,
    target: serde_json::Value,
    draft: serde_json::Value,
}

pub fn audit_instance(block: &AuditBlock, seed: u64, residual: ResidualFn) -> Result<(AuditRow, TabularLM, TabularLM)> {
    let vocab = Vocab::with_size(block.vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = random_tabular_lm(vocab, block.order, block.concentration, block.eos_bias, &mut rng)?;
    let draft = random_tabular_lm(vocab, block.order, block.concentration, block.eos_bias, &mut rng)?;
    let prompt = audit_prompt(vocab);
    let report = oracle_report(&target, &draft, &prompt, block.t_max)?;
    let res = bound_residuals(&report, block.t_max);
    let spec = SpecConfig::lossless(block.gamma, block.t_max)?;
    let out = exact_specdec_with(&target, &draft, &prompt, &spec, residual)?;
    let want = enumerate_seq_dist_at(&target, &prompt, block.t_max, 1.0)?;
    let row = AuditRow {
        seed,
        vocab: block.vocab,
        t_max: block.t_max,
        alpha: report.alpha_exact,
        epsilon: report.epsilon,
        bound_slack: res.theorem_slack,
        stated_bound_slack: res.stated_theorem_slack,
        position_min_slack: res.position_min_slack,
        epsilon_gap: res.epsilon_gap,
        max_lemma_residual: res.max_lemma_residual(),
        lossless_tv: out.dist.tv(&want),
    };
    Ok((row, target, draft))
}

fn audit_prompt(vocab: Vocab) -> Vec<Token> {
    vec![(vocab.eos() + 1) % vocab.size()]
}

/// Runs the audit with a caller-supplied residual rule and writes the CSV;
/// violating instances are dumped next to it and reported as [`Error::BoundViolation`].
pub fn oracle_audit_with(config: &ExperimentConfig, jobs: Option<usize>, residual: ResidualFn) -> Result<Vec<AuditRow>> {
    let block = &config.audit;
    let results: Vec<Result<(AuditRow, TabularLM, TabularLM)>> = pool(jobs)?.install(|| {
        (0..block.instances as u64)
            .into_par_iter()
            .map(|i| audit_instance(block, config.seed.wrapping_add(i), residual))
            .collect()
    });
    fs::create_dir_all(&config.out_dir)?;
    let mut out = csv::Writer::from_writer(BufWriter::new(File::create(config.out_dir.join(AUDIT_FILE))?));
    let mut rows = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for r in results {
        let (row, target, draft) = r?;
        out.serialize(&row)?;
        let violations = row.violations();
        if !violations.is_empty() {
            let dump = InstanceDump {
                row: &row,
                violations: violations.clone(),
                prompt: audit_prompt(target.vocab()),
                gamma: block.gamma,
                target: serde_json::from_str(&AnyModel::from(target).to_json()?)?,
                draft: serde_json::from_str(&AnyModel::from(draft).to_json()?)?,
            };
            write_json(&config.out_dir.join(format!("violation_{}.json", row.seed)), &dump)?;
            failures.push(format!("seed {}: {}", row.seed, violations.join(", ")));
        }
        rows.push(row);
    }
    out.flush()?;
    if failures.is_empty() {
        Ok(rows)
    } else {
        Err(Error::BoundViolation(failures.join("; ")))
    }
}

pub fn cmd_oracle_audit(config: &ExperimentConfig, jobs: Option<usize>) -> Result<Vec<AuditRow>> {
    oracle_audit_with(config, jobs, residual_dist)
}

/// One line of the joined report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub temperature: f64,
    pub gamma: usize,
    pub tau: f64,
    pub alpha: f64,
    pub c: f64,
    pub relative_latency: f64,
    pub final_step: Option<usize>,
    pub final_loss: Option<f64>,
    pub final_alpha: Option<f64>,
}

/// Column order of `report.csv`.
pub const REPORT_COLUMNS: [&str; 10] = [
    "method",
    "temperature",
    "gamma",
    "tau",
    "alpha",
    "c",
    "relative_latency",
    "final_step",
    "final_loss",
    "final_alpha",
];

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Joins lossless sweep rows with the last history record of each method.
pub fn build_report(dir: &Path) -> Result<Vec<ReportRow>> {
    let sweep_path = dir.join(SWEEP_FILE);
    let sweep: Vec<TradeoffRow> = if sweep_path.exists() { read_csv(&sweep_path)? } else { Vec::new() };
    let mut histories = BTreeMap::new();
    if dir.is_dir() {
        for name in PRESET_NAMES {
            let path = dir.join(history_file(name));
            if path.exists() {
                let records: Vec<distill::EvalRecord> = read_csv(&path)?;
                if let Some(last) = records.last() {
                    histories.insert(name.to_string(), *last);
                }
            }
        }
    }
    if sweep.is_empty() && histories.is_empty() {
        return Err(Error::NothingToReport(dir.to_path_buf()));
    }
    let mut rows: Vec<ReportRow> = Vec::new();
    let lossless = sweep.iter().filter(|r| r.kind == LenienceKind::None);
    let mut seen = std::collections::BTreeSet::new();
    for r in lossless {
        // one row per (method, temperature, gamma): the smallest c
        let key = (r.method.clone(), r.temperature.to_bits(), r.gamma);
        if !seen.insert(key) {
            continue;
        }
        let h = histories.get(&r.method);
        rows.push(ReportRow {
            method: r.method.clone(),
            temperature: r.temperature,
            gamma: r.gamma,
            tau: r.tau,
            alpha: r.alpha,
            c: r.c,
            relative_latency: r.relative_latency,
            final_step: h.map(|h| h.step),
            final_loss: h.map(|h| h.loss),
            final_alpha: h.map(|h| h.alpha),
        });
    }
    for (method, h) in &histories {
        if !rows.iter().any(|r| &r.method == method) {
            rows.push(ReportRow {
                method: method.clone(),
                temperature: f64::NAN,
                gamma: 0,
                tau: f64::NAN,
                alpha: f64::NAN,
                c: f64::NAN,
                relative_latency: f64::NAN,
                final_step: Some(h.step),
                final_loss: Some(h.loss),
                final_alpha: Some(h.alpha),
            });
        }
    }
    rows.sort_by(|a, b| {
        a.gamma
            .cmp(&b.gamma)
            .then(a.temperature.total_cmp(&b.temperature))
            .then(a.method.cmp(&b.method))
    });
    Ok(rows)
}

pub fn cmd_report(dir: &Path) -> Result<Vec<ReportRow>> {
    let rows = build_report(dir)?;
    let mut out = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(File::create(dir.join(REPORT_FILE))?));
    out.write_record(REPORT_COLUMNS)?;
    for r in &rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(rows)
}

/// Exit status for an error: 2 configuration, 3 audit violation, 4 I/O.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::BoundViolation(_) => EXIT_AUDIT,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::MissingTask(_) | Error::NothingToReport(_) => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

#[derive(Debug, Parser)]
#[command(name = "speclab", version, about = "Speculative decoding and draft distillation on exact tabular models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Experiment file (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel cells.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Write teacher, initial draft, fixed dataset and prompts.
    GenTask,
    /// Train one draft per configured preset.
    Distill,
    /// Quality-latency sweep over lenience, block size and cost ratio.
    Sweep,
    /// Exact bound and losslessness audit on random tiny instances.
    OracleAudit,
    /// Join histories and lossless sweep rows into report.csv.
    Report,
}

fn resolve_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let jobs = cli.common.jobs;
    match cli.command {
        Command::Report => {
            let dir = match (&cli.common.out, &cli.common.config) {
                (Some(out), _) => out.clone(),
                (None, Some(_)) => resolve_config(&cli.common)?.out_dir,
                (None, None) => return Err(Error::Config("report needs --out or --config".into())),
            };
            cmd_report(&dir).map(drop)
        }
        Command::GenTask => cmd_gen_task(&resolve_config(&cli.common)?),
        Command::Distill => cmd_distill(&resolve_config(&cli.common)?, jobs),
        Command::Sweep => cmd_sweep(&resolve_config(&cli.common)?, jobs),
        Command::OracleAudit => cmd_oracle_audit(&resolve_config(&cli.common)?, jobs).map(drop),
    }
}

/// Parses arguments, runs the command and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
