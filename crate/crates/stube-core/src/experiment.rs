//! The six-model ablation grid and the training/evaluation driver.
//!
//! A run is fully described by an `ExperimentConfig` (parsed from a flat
//! `section.key = value` file) plus four explicit seeds. Every variant of
//! the grid shares the same base initialization, corpus, and optimizer
//! settings; the variants differ only in their training objective.
//!
//! Outputs land under `<out>/<variant>/{checkpoint, traj.dump,
//! metrics.json, log.jsonl}` with a cross-variant `comparison.md` at the
//! top; rerunning the grid reuses whatever already exists.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusConfig, CorpusError, StepSequence};
use crate::losses::{self, LossConfig, LossError, Strategy};
use crate::metrics::{
    self, accuracy_from_mse, detection_item, DetectionItem, DetectionSection, EmbeddingPool,
    MetricsError, MetricsReport, PerSkip, ReportCounts, SkipPredictor,
};
use crate::model::{
    load_checkpoint, save_checkpoint, ModelConfig, ModelError, TrainableSet, TransformerModel,
};
use crate::optim::{clip_global_norm, Adam, AdamConfig, OptimError, ParamGrad};
use crate::predict::{self, MlpTrainConfig, PredictError};
use crate::tensor::{Tape, TensorError};
use crate::trajectory::{
    cos_score, extract_trajectory, perp_score, write_trajectories, Trajectory, TrajectoryError,
};

/// The six models of the ablation grid. Ordered from least to most
/// smoothness pressure on step boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GridVariant {
    /// Frozen base model, never trained; the reference for improvement factors.
    B1,
    /// Next-token objective only.
    B2,
    /// Next-token plus smoothness over random token triples.
    C,
    /// Next-token plus smoothness over random step-boundary triples.
    A2,
    /// Next-token plus smoothness over consecutive step boundaries.
    A,
    /// Smoothness over consecutive step boundaries only, no next-token term.
    A1,
}

impl GridVariant {
    pub const ALL: [GridVariant; 6] = [
        GridVariant::B1,
        GridVariant::B2,
        GridVariant::C,
        GridVariant::A2,
        GridVariant::A,
        GridVariant::A1,
    ];

    /// Short lowercase id used in paths and CLI arguments.
    pub fn id(self) -> &'static str {
        match self {
            GridVariant::B1 => "b1",
            GridVariant::B2 => "b2",
            GridVariant::C => "c",
            GridVariant::A2 => "a2",
            GridVariant::A => "a",
            GridVariant::A1 => "a1",
        }
    }

    pub fn parse(s: &str) -> Option<GridVariant> {
        match s.to_ascii_lowercase().as_str() {
            "b1" => Some(GridVariant::B1),
            "b2" => Some(GridVariant::B2),
            "c" => Some(GridVariant::C),
            "a2" => Some(GridVariant::A2),
            "a" => Some(GridVariant::A),
            "a1" => Some(GridVariant::A1),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            GridVariant::B1 => "frozen base",
            GridVariant::B2 => "next-token only",
            GridVariant::C => "next-token + smoothness on random tokens",
            GridVariant::A2 => "next-token + smoothness on random steps",
            GridVariant::A => "next-token + smoothness on consecutive steps",
            GridVariant::A1 => "smoothness on consecutive steps only",
        }
    }

    /// B1 never trains; everything else does.
    pub fn trains(self) -> bool {
        self != GridVariant::B1
    }

    pub fn uses_ntp(self) -> bool {
        !matches!(self, GridVariant::B1 | GridVariant::A1)
    }

    pub fn strategy(self) -> Strategy {
        match self {
            GridVariant::B1 | GridVariant::B2 => Strategy::None,
            GridVariant::C => Strategy::RandomToken,
            GridVariant::A2 => Strategy::RandomStep,
            GridVariant::A | GridVariant::A1 => Strategy::ConsecutiveStep,
        }
    }
}

// ── configuration ──────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("config line {line}: {msg}")]
    BadLine { line: usize, msg: String },
    #[error("config line {line}: bad value for {key}: {msg}")]
    BadValue { line: usize, key: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("variant {variant} has no checkpoint at {path} (run train first)")]
    MissingCheckpoint { variant: String, path: PathBuf },
    #[error("training diverged for {variant} at step {step}; last finite total {last_total}")]
    Diverged { variant: String, step: u64, last_total: f64 },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad json in {path}: {msg}")]
    BadJson { path: PathBuf, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimSettings {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    /// Skip distances evaluated; each must satisfy 1 <= m <= k_min - 1.
    pub m_list: Vec<usize>,
    /// How many held-out questions the greedy exact-match decode sees.
    pub decode_sample_cap: usize,
    /// Cap on MLP training pairs (single-core cost control).
    pub mlp_max_train_pairs: Option<usize>,
    pub mlp_epochs: usize,
    pub mlp_patience: usize,
    /// Fraction of eval sequences corrupted for error detection.
    pub error_rate: f64,
    /// Train share of the corpus split.
    pub train_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub sampler: u64,
    pub split: u64,
}

impl Seeds {
    /// Derives the four seeds from one master seed, for `--seed N`.
    pub fn from_master(s: u64) -> Seeds {
        Seeds { init: s, data: s.wrapping_add(1), sampler: s.wrapping_add(2), split: s.wrapping_add(3) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub beta: f64,
    pub epsilon: f64,
    pub q: Option<usize>,
    pub optim: OptimSettings,
    pub eval: EvalSettings,
    pub seeds: Seeds,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            corpus: CorpusConfig::default(),
            beta: 1.0,
            epsilon: 1e-8,
            q: None,
            optim: OptimSettings { lr: 3e-4, epochs: 3, batch_size: 8, grad_clip: 1.0 },
            eval: EvalSettings {
                m_list: vec![1, 2, 3],
                decode_sample_cap: 150,
                mlp_max_train_pairs: None,
                mlp_epochs: 200,
                mlp_patience: 20,
                error_rate: 0.5,
                train_fraction: 0.8,
            },
            seeds: Seeds { init: 1, data: 2, sampler: 3, split: 4 },
            out_dir: PathBuf::from("runs/toy"),
        }
    }
}

impl ExperimentConfig {
    /// Corpus config with the data seed applied.
    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig { seed: self.seeds.data, ..self.corpus.clone() }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            beta: self.beta,
            epsilon: self.epsilon,
            q: self.q,
            sampler_seed: self.seeds.sampler,
        }
    }

    pub fn mlp_config(&self) -> MlpTrainConfig {
        MlpTrainConfig {
            hidden: 2 * self.model.d_model,
            lr: 1e-3,
            epochs: self.eval.mlp_epochs,
            patience: self.eval.mlp_patience,
            max_train_pairs: self.eval.mlp_max_train_pairs,
            init_seed: self.seeds.init,
        }
    }

    pub fn variant_dir(&self, variant: GridVariant) -> PathBuf {
        self.out_dir.join(variant.id())
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.model.validate()?;
        self.corpus_config().validate()?;
        self.loss_config().validate()?;
        if self.model.vocab_size != self.corpus.vocab_size {
            return Err(ExperimentError::Invalid(format!(
                "model vocab {} != corpus vocab {}",
                self.model.vocab_size, self.corpus.vocab_size
            )));
        }
        if self.corpus.max_seq_len > self.model.max_seq_len {
            return Err(ExperimentError::Invalid(format!(
                "corpus max_seq_len {} exceeds model max_seq_len {}",
                self.corpus.max_seq_len, self.model.max_seq_len
            )));
        }
        if self.optim.lr <= 0.0 || self.optim.epochs == 0 || self.optim.batch_size == 0 {
            return Err(ExperimentError::Invalid(
                "optimizer needs lr > 0, epochs >= 1, batch_size >= 1".into(),
            ));
        }
        if self.optim.grad_clip <= 0.0 {
            return Err(ExperimentError::Invalid("grad_clip must be positive".into()));
        }
        if self.eval.m_list.is_empty() {
            return Err(ExperimentError::Invalid("m_list must be nonempty".into()));
        }
        for &m in &self.eval.m_list {
            if m < 1 || m + 1 > self.corpus.k_min {
                return Err(ExperimentError::Invalid(format!(
                    "skip distance m={m} outside [1, k_min-1] = [1, {}]",
                    self.corpus.k_min.saturating_sub(1)
                )));
            }
        }
        if self.eval.decode_sample_cap == 0 {
            return Err(ExperimentError::Invalid("decode_sample_cap must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.error_rate) {
            return Err(ExperimentError::Invalid("error_rate must be in [0, 1]".into()));
        }
        if !(self.eval.train_fraction > 0.0 && self.eval.train_fraction < 1.0) {
            return Err(ExperimentError::Invalid("train_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(
    line: usize,
    key: &str,
    val: &str,
) -> Result<T, ExperimentError>
where
    T::Err: std::fmt::Display,
{
    val.parse().map_err(|e: T::Err| ExperimentError::BadValue {
        line,
        key: key.to_string(),
        msg: e.to_string(),
    })
}

fn parse_usize_list(line: usize, key: &str, val: &str) -> Result<Vec<usize>, ExperimentError> {
    val.split(',')
        .map(|p| parse_num::<usize>(line, key, p.trim()))
        .collect()
}

fn parse_opt_usize(line: usize, key: &str, val: &str) -> Result<Option<usize>, ExperimentError> {
    if val.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse_num::<usize>(line, key, val).map(Some)
    }
}

/// Parses the flat `section.key = value` grammar on top of the defaults.
/// Blank lines and `#` comments are skipped; unknown and duplicate keys are
/// hard errors.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = ExperimentConfig::default();
    let mut seen: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let stripped = raw.split('#').next().unwrap_or("").trim();
        if stripped.is_empty() {
            continue;
        }
        let (key, val) = stripped.split_once('=').ok_or(ExperimentError::BadLine {
            line,
            msg: "expected key = value".into(),
        })?;
        let key = key.trim();
        let val = val.trim();
        if !seen.insert(key.to_string()) {
            return Err(ExperimentError::DuplicateKey { line, key: key.to_string() });
        }
        match key {
            "model.vocab_size" => cfg.model.vocab_size = parse_num(line, key, val)?,
            "model.d_model" => cfg.model.d_model = parse_num(line, key, val)?,
            "model.n_layers" => cfg.model.n_layers = parse_num(line, key, val)?,
            "model.n_heads" => cfg.model.n_heads = parse_num(line, key, val)?,
            "model.d_ff" => cfg.model.d_ff = parse_num(line, key, val)?,
            "model.max_seq_len" => cfg.model.max_seq_len = parse_num(line, key, val)?,
            "model.lora_rank" => cfg.model.lora_rank = parse_num(line, key, val)?,
            "model.lora_alpha" => cfg.model.lora_alpha = parse_num(line, key, val)?,
            "corpus.n_sequences" => cfg.corpus.n_sequences = parse_num(line, key, val)?,
            "corpus.k_min" => cfg.corpus.k_min = parse_num(line, key, val)?,
            "corpus.k_max" => cfg.corpus.k_max = parse_num(line, key, val)?,
            "corpus.step_len_min" => cfg.corpus.step_len_min = parse_num(line, key, val)?,
            "corpus.step_len_max" => cfg.corpus.step_len_max = parse_num(line, key, val)?,
            "corpus.max_seq_len" => cfg.corpus.max_seq_len = parse_num(line, key, val)?,
            "loss.beta" => cfg.beta = parse_num(line, key, val)?,
            "loss.epsilon" => cfg.epsilon = parse_num(line, key, val)?,
            "loss.q" => cfg.q = parse_opt_usize(line, key, val)?,
            "optim.lr" => cfg.optim.lr = parse_num(line, key, val)?,
            "optim.epochs" => cfg.optim.epochs = parse_num(line, key, val)?,
            "optim.batch_size" => cfg.optim.batch_size = parse_num(line, key, val)?,
            "optim.grad_clip" => cfg.optim.grad_clip = parse_num(line, key, val)?,
            "eval.m_list" => cfg.eval.m_list = parse_usize_list(line, key, val)?,
            "eval.decode_sample_cap" => {
                cfg.eval.decode_sample_cap = parse_num(line, key, val)?
            }
            "eval.mlp_max_train_pairs" => {
                cfg.eval.mlp_max_train_pairs = parse_opt_usize(line, key, val)?
            }
            "eval.mlp_epochs" => cfg.eval.mlp_epochs = parse_num(line, key, val)?,
            "eval.mlp_patience" => cfg.eval.mlp_patience = parse_num(line, key, val)?,
            "eval.error_rate" => cfg.eval.error_rate = parse_num(line, key, val)?,
            "eval.train_fraction" => cfg.eval.train_fraction = parse_num(line, key, val)?,
            "seeds.init" => cfg.seeds.init = parse_num(line, key, val)?,
            "seeds.data" => cfg.seeds.data = parse_num(line, key, val)?,
            "seeds.sampler" => cfg.seeds.sampler = parse_num(line, key, val)?,
            "seeds.split" => cfg.seeds.split = parse_num(line, key, val)?,
            "out_dir" => cfg.out_dir = PathBuf::from(val),
            other => {
                return Err(ExperimentError::UnknownKey { line, key: other.to_string() })
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a config file; the `STUBE_OUT` environment variable, when set,
/// overrides the output directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut cfg = parse_config(&text)?;
    if let Ok(out) = std::env::var("STUBE_OUT") {
        if !out.is_empty() {
            cfg.out_dir = PathBuf::from(out);
        }
    }
    Ok(cfg)
}

// ── shared plumbing ────────────────────────────────────────────────────────

/// Deterministic corpus build: generate, then stratified split.
pub fn build_corpora(
    config: &ExperimentConfig,
) -> Result<(Vec<StepSequence>, Vec<StepSequence>), ExperimentError> {
    let corpus = corpus::generate_corpus(&config.corpus_config())?;
    let f = config.eval.train_fraction;
    let (train, eval) = corpus::split(&corpus, (f, 1.0 - f), config.seeds.split)?;
    Ok((train, eval))
}

/// Forced decode of one sequence, returning its step-boundary trajectory.
fn trajectory_of(
    model: &TransformerModel,
    seq: &StepSequence,
    sequence_id: u32,
) -> Result<Trajectory, ExperimentError> {
    let d = model.config().d_model;
    let mut hidden = Vec::with_capacity(seq.tokens.len() * d);
    let mut st = model.begin_decode();
    for &tok in &seq.tokens {
        let row = model.decode_step(&mut st, tok)?;
        hidden.extend_from_slice(&row.hidden);
    }
    Ok(extract_trajectory(&hidden, d, &seq.step_positions, sequence_id)?)
}

/// Forced decode of a whole corpus slice into step-boundary trajectories,
/// ids assigned by position.
pub fn decode_trajectories(
    model: &TransformerModel,
    sequences: &[StepSequence],
) -> Result<Vec<Trajectory>, ExperimentError> {
    let mut out = Vec::with_capacity(sequences.len());
    for (i, seq) in sequences.iter().enumerate() {
        out.push(trajectory_of(model, seq, i as u32)?);
    }
    Ok(out)
}

fn checkpoint_path(config: &ExperimentConfig, variant: GridVariant) -> PathBuf {
    config.variant_dir(variant).join("checkpoint")
}

/// Loads the variant's checkpoint; the frozen base needs none and falls
/// back to a fresh initialization from the init seed.
pub fn model_for(
    config: &ExperimentConfig,
    variant: GridVariant,
) -> Result<TransformerModel, ExperimentError> {
    let path = checkpoint_path(config, variant);
    if path.exists() {
        Ok(load_checkpoint(&path, Some(&config.model))?)
    } else if variant == GridVariant::B1 {
        Ok(TransformerModel::init(config.model.clone(), config.seeds.init)?)
    } else {
        Err(ExperimentError::MissingCheckpoint { variant: variant.id().into(), path })
    }
}

// ── training ───────────────────────────────────────────────────────────────

/// One line of `log.jsonl`: per-optimizer-step loss components averaged
/// over the micro-batch. No timestamps, so logs are byte-reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub ntp: Option<f64>,
    pub stp: Option<f64>,
    pub total: f64,
    pub degenerate_pairs: usize,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub variant: GridVariant,
    pub optimizer_steps: u64,
    pub final_record: Option<TrainLogRecord>,
    pub checkpoint: PathBuf,
    pub skipped_sequences: usize,
}

struct MicroBatchAcc {
    grads: BTreeMap<String, Vec<f64>>,
    ntp_sum: f64,
    ntp_n: usize,
    stp_sum: f64,
    stp_n: usize,
    total_sum: f64,
    n: usize,
    degenerate: usize,
}

impl MicroBatchAcc {
    fn new() -> Self {
        MicroBatchAcc {
            grads: BTreeMap::new(),
            ntp_sum: 0.0,
            ntp_n: 0,
            stp_sum: 0.0,
            stp_n: 0,
            total_sum: 0.0,
            n: 0,
            degenerate: 0,
        }
    }

    fn record(&self, step: u64) -> TrainLogRecord {
        TrainLogRecord {
            step,
            ntp: (self.ntp_n > 0).then(|| self.ntp_sum / self.ntp_n as f64),
            stp: (self.stp_n > 0).then(|| self.stp_sum / self.stp_n as f64),
            total: self.total_sum / self.n.max(1) as f64,
            degenerate_pairs: self.degenerate,
        }
    }
}

/// Averages, clips, and applies one accumulated micro-batch, then appends
/// its log record.
#[allow(clippy::too_many_arguments)]
fn flush_batch(
    model: &mut TransformerModel,
    adam: &mut Adam,
    names: &[String],
    mut acc: MicroBatchAcc,
    step: &mut u64,
    log: &mut BufWriter<fs::File>,
    log_path: &Path,
    grad_clip: f64,
) -> Result<TrainLogRecord, ExperimentError> {
    let scale = 1.0 / acc.n as f64;
    let mut grads: Vec<Vec<f64>> = names
        .iter()
        .map(|name| {
            acc.grads.remove(name).map_or_else(
                || vec![0.0; grad_len(model, name)],
                |mut g| {
                    for x in g.iter_mut() {
                        *x *= scale;
                    }
                    g
                },
            )
        })
        .collect();
    clip_global_norm(&mut grads, grad_clip);

    let mut params = model.visit_params_mut();
    params.retain(|(name, _)| names.contains(name));
    debug_assert!(params.iter().map(|(n, _)| n).eq(names.iter()), "order drift");
    let mut slots: Vec<ParamGrad<'_>> = params
        .iter_mut()
        .zip(&grads)
        .map(|((_, t), g)| ParamGrad { data: t.data_mut(), grad: g.as_slice() })
        .collect();
    adam.step(&mut slots)?;

    *step += 1;
    let record = acc.record(*step);
    let line = serde_json::to_string(&record).expect("log record serializes");
    log.write_all(line.as_bytes()).map_err(io_err(log_path))?;
    log.write_all(b"\n").map_err(io_err(log_path))?;
    Ok(record)
}

/// Trains the variant's adapters over the train split and writes
/// `checkpoint` and `log.jsonl`. The frozen base variant just snapshots
/// its initialization. Deterministic given the config.
pub fn train_variant(
    variant: GridVariant,
    config: &ExperimentConfig,
) -> Result<TrainSummary, ExperimentError> {
    config.validate()?;
    let dir = config.variant_dir(variant);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let ckpt = dir.join("checkpoint");

    let mut model = TransformerModel::init(config.model.clone(), config.seeds.init)?;
    if !variant.trains() {
        save_checkpoint(&model, &ckpt)?;
        let log_path = dir.join("log.jsonl");
        fs::write(&log_path, "").map_err(io_err(&log_path))?;
        return Ok(TrainSummary {
            variant,
            optimizer_steps: 0,
            final_record: None,
            checkpoint: ckpt,
            skipped_sequences: 0,
        });
    }

    let (train_seqs, _) = build_corpora(config)?;
    model.set_trainable(TrainableSet::Adapters);
    let names = model.trainable_parameters();
    if names.is_empty() {
        return Err(ExperimentError::Invalid(
            "variant trains but the model has no adapters (lora_rank = 0)".into(),
        ));
    }
    let loss_cfg = config.loss_config();
    let mut adam = Adam::new(AdamConfig::with_lr(config.optim.lr))?;

    let log_path = dir.join("log.jsonl");
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(io_err(&log_path))?);

    let mut acc = MicroBatchAcc::new();
    let mut step: u64 = 0;
    let mut skipped = 0usize;
    let mut last_record: Option<TrainLogRecord> = None;

    for epoch in 0..config.optim.epochs {
        for (i, seq) in train_seqs.iter().enumerate() {
            let mut tape = Tape::new();
            let fp = model.forward_on(&mut tape, &seq.tokens)?;
            let breakdown = losses::combined_loss(
                &mut tape,
                variant,
                fp.logits,
                fp.hidden,
                &seq.tokens,
                &seq.step_positions,
                corpus::PAD,
                i as u64,
                epoch as u64,
                &loss_cfg,
            )?;
            let Some(b) = breakdown else {
                skipped += 1;
                continue;
            };
            if !b.total_value.is_finite() {
                return Err(ExperimentError::Diverged {
                    variant: variant.id().into(),
                    step,
                    last_total: last_record.as_ref().map_or(f64::NAN, |r| r.total),
                });
            }
            tape.backward(b.total)?;
            for (name, v) in &fp.trainable {
                if let Some(g) = tape.grad(*v) {
                    match acc.grads.get_mut(name) {
                        Some(buf) => {
                            for (a, &x) in buf.iter_mut().zip(g) {
                                *a += x;
                            }
                        }
                        None => {
                            acc.grads.insert(name.clone(), g.to_vec());
                        }
                    }
                }
            }
            acc.total_sum += b.total_value;
            acc.n += 1;
            if let Some(v) = b.ntp_value {
                acc.ntp_sum += v;
                acc.ntp_n += 1;
            }
            if let Some(v) = b.stp_value {
                acc.stp_sum += v;
                acc.stp_n += 1;
            }
            acc.degenerate += b.degenerate_pairs;

            if acc.n >= config.optim.batch_size {
                let full = std::mem::replace(&mut acc, MicroBatchAcc::new());
                last_record = Some(flush_batch(
                    &mut model,
                    &mut adam,
                    &names,
                    full,
                    &mut step,
                    &mut log,
                    &log_path,
                    config.optim.grad_clip,
                )?);
            }
        }
    }
    if acc.n > 0 {
        last_record = Some(flush_batch(
            &mut model,
            &mut adam,
            &names,
            acc,
            &mut step,
            &mut log,
            &log_path,
            config.optim.grad_clip,
        )?);
    }
    log.flush().map_err(io_err(&log_path))?;
    save_checkpoint(&model, &ckpt)?;
    Ok(TrainSummary {
        variant,
        optimizer_steps: step,
        final_record: last_record,
        checkpoint: ckpt,
        skipped_sequences: skipped,
    })
}

fn grad_len(model: &TransformerModel, name: &str) -> usize {
    model
        .visit_params()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t.numel())
        .unwrap_or(0)
}

// ── evaluation ─────────────────────────────────────────────────────────────

fn argmax_lowest(xs: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy exact-match accuracy: prompt with the question up to and
/// including the first step marker, then generate the rest token by token
/// and require every token to match the reference continuation.
pub fn exact_match_greedy(
    model: &TransformerModel,
    sequences: &[StepSequence],
    cap: usize,
) -> Result<Option<f64>, ExperimentError> {
    let n = sequences.len().min(cap);
    if n == 0 {
        return Ok(None);
    }
    let mut hits = 0usize;
    for seq in &sequences[..n] {
        let boundary = seq.step_positions[0];
        let mut st = model.begin_decode();
        let mut logits = Vec::new();
        for &tok in &seq.tokens[..=boundary] {
            logits = model.decode_step(&mut st, tok)?.logits;
        }
        let mut ok = true;
        for &want in &seq.tokens[boundary + 1..] {
            let next = argmax_lowest(&logits);
            if next != want {
                ok = false;
                break;
            }
            logits = model.decode_step(&mut st, next)?.logits;
        }
        if ok {
            hits += 1;
        }
    }
    Ok(Some(hits as f64 / n as f64))
}

/// Evaluates one variant end to end: forced-decodes the eval split into
/// trajectories (written to `traj.dump`), runs the full metric suite, and
/// writes `metrics.json`.
pub fn eval_variant(
    variant: GridVariant,
    config: &ExperimentConfig,
) -> Result<MetricsReport, ExperimentError> {
    config.validate()?;
    let model = model_for(config, variant)?;
    let (_, eval_seqs) = build_corpora(config)?;
    let dir = config.variant_dir(variant);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;

    let trajs = decode_trajectories(&model, &eval_seqs)?;
    write_trajectories(&dir.join("traj.dump"), &trajs)?;

    // pooled per-position curvature scores
    let mut cos_sum = 0.0;
    let mut cos_n = 0usize;
    let mut perp_sum = 0.0;
    let mut perp_n = 0usize;
    let mut degenerate = 0usize;
    for t in &trajs {
        let c = cos_score(t, config.epsilon);
        cos_sum += c.values.iter().sum::<f64>();
        cos_n += c.values.len();
        let p = perp_score(t);
        perp_sum += p.values.iter().sum::<f64>();
        perp_n += p.values.len();
        degenerate += p.degenerate;
    }

    let pool = EmbeddingPool::from_trajectories(&trajs);
    let mlp_cfg = config.mlp_config();
    let mut per_m = Vec::with_capacity(config.eval.m_list.len());
    let mut pair_total = 0usize;
    let mut skipped_targets = 0usize;
    for &m in &config.eval.m_list {
        let linear = metrics::prediction_mse(&trajs, m, SkipPredictor::Linear)?;
        let curve = predict::ratio_curve(&trajs, &[m], config.seeds.split, &mlp_cfg)?;
        let point = &curve[0];
        let fidelity = metrics::decoding_fidelity(&model, &trajs, m, SkipPredictor::Linear)?;
        let retrieval = metrics::step_retrieval(&pool, &trajs, m, SkipPredictor::Linear)?;
        pair_total += linear.n_pairs;
        skipped_targets += linear.n_skipped;
        per_m.push(PerSkip {
            m,
            linear_mse: linear.mse,
            mlp_mse: point.mlp_mse,
            ratio: point.ratio,
            ratio_degenerate: point.degenerate,
            accuracy: accuracy_from_mse(linear.mse),
            retrieval: retrieval.accuracy,
            top1_agreement: fidelity.top1_agreement,
            top5_jaccard: fidelity.top5_jaccard,
            mean_kl: fidelity.mean_kl,
            n_pairs: linear.n_pairs,
        });
    }

    // error detection over an injected-error copy of the eval split
    let labeled = corpus::inject_errors(&eval_seqs, config.eval.error_rate, config.seeds.data)?;
    let mut items: Vec<DetectionItem> = Vec::new();
    for (i, seq) in labeled.iter().enumerate() {
        let traj = trajectory_of(&model, seq, i as u32)?;
        let perp = perp_score(&traj);
        let label = seq.label.as_ref().expect("inject_errors labels everything");
        if let Some(item) = detection_item(&perp, label) {
            items.push(item);
        }
    }
    let detection = match metrics::error_detection_auc(&items) {
        Ok(rep) => Some(DetectionSection {
            auc: rep.auc,
            localization_accuracy: rep.localization_accuracy,
            n_correct: rep.n_correct,
            n_incorrect: rep.n_incorrect,
        }),
        Err(MetricsError::SingleClass) => None,
        Err(e) => return Err(e.into()),
    };

    let exact_match = exact_match_greedy(&model, &eval_seqs, config.eval.decode_sample_cap)?;

    let report = MetricsReport {
        variant: variant.id().into(),
        per_m,
        mean_cos: (cos_n > 0).then(|| cos_sum / cos_n as f64),
        mean_perp: (perp_n > 0).then(|| perp_sum / perp_n as f64),
        exact_match,
        detection,
        counts: ReportCounts {
            n_trajectories: trajs.len(),
            n_pairs: pair_total,
            degenerate_positions: degenerate,
            skipped_targets,
        },
        notes: vec![
            "one shared optimizer setting across all trained variants".into(),
            "retrieval pool: global over the eval split".into(),
            "decoding fidelity and retrieval use the linear extrapolation predictor".into(),
            "mlp_mse and ratio use the 80/20 held-out protocol; linear_mse averages every pair"
                .into(),
        ],
    };
    let json_path = dir.join("metrics.json");
    fs::write(&json_path, report.to_json()).map_err(io_err(&json_path))?;
    Ok(report)
}

// ── grid ───────────────────────────────────────────────────────────────────

/// Runs the full six-variant grid: train (or snapshot) whatever lacks a
/// checkpoint, evaluate whatever lacks a metrics file, then write the
/// cross-variant comparison. Existing outputs are trusted and reused, so
/// an interrupted grid resumes where it stopped.
pub fn run_grid(config: &ExperimentConfig) -> Result<Vec<MetricsReport>, ExperimentError> {
    config.validate()?;
    fs::create_dir_all(&config.out_dir).map_err(io_err(&config.out_dir))?;
    let mut reports = Vec::with_capacity(GridVariant::ALL.len());
    for variant in GridVariant::ALL {
        if !checkpoint_path(config, variant).exists() {
            train_variant(variant, config)?;
        }
        let metrics_path = config.variant_dir(variant).join("metrics.json");
        let report = if metrics_path.exists() {
            let text = fs::read_to_string(&metrics_path).map_err(io_err(&metrics_path))?;
            MetricsReport::from_json(&text).map_err(|e| ExperimentError::BadJson {
                path: metrics_path.clone(),
                msg: e.to_string(),
            })?
        } else {
            eval_variant(variant, config)?
        };
        reports.push(report);
    }
    let cmp_path = config.out_dir.join("comparison.md");
    fs::write(&cmp_path, metrics::render_comparison(&reports)).map_err(io_err(&cmp_path))?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip() {
        for v in GridVariant::ALL {
            assert_eq!(GridVariant::parse(v.id()), Some(v));
            assert_eq!(GridVariant::parse(&v.id().to_uppercase()), Some(v));
        }
        assert_eq!(GridVariant::parse("zz"), None);
    }

    #[test]
    fn composition_table() {
        use GridVariant::*;
        assert!(!B1.trains());
        assert!(A1.trains() && !A1.uses_ntp());
        assert!(B2.uses_ntp() && B2.strategy() == Strategy::None);
        assert_eq!(C.strategy(), Strategy::RandomToken);
        assert_eq!(A2.strategy(), Strategy::RandomStep);
        assert_eq!(A.strategy(), Strategy::ConsecutiveStep);
        assert_eq!(A1.strategy(), Strategy::ConsecutiveStep);
    }

    /// Small-but-real config for driver tests: one layer, short chains.
    fn tiny_config(out: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.model = ModelConfig {
            vocab_size: 64,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 96,
            lora_rank: 2,
            lora_alpha: 4,
        };
        cfg.corpus = CorpusConfig {
            n_sequences: 200,
            k_min: 3,
            k_max: 5,
            step_len_min: 3,
            step_len_max: 5,
            max_seq_len: 96,
            ..CorpusConfig::default()
        };
        cfg.optim = OptimSettings { lr: 3e-3, epochs: 1, batch_size: 4, grad_clip: 1.0 };
        cfg.eval = EvalSettings {
            m_list: vec![1, 2],
            decode_sample_cap: 5,
            mlp_max_train_pairs: Some(200),
            mlp_epochs: 10,
            mlp_patience: 5,
            error_rate: 0.5,
            train_fraction: 0.8,
        };
        cfg.out_dir = out.to_path_buf();
        cfg
    }

    #[test]
    fn empty_config_is_the_default() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn config_keys_apply_and_errors_carry_line_numbers() {
        let text = "\
# comment
model.d_model = 32
model.n_heads = 4

optim.lr = 0.001
eval.m_list = 1, 2
loss.q = none
seeds.init = 9
out_dir = /tmp/somewhere
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.optim.lr, 0.001);
        assert_eq!(cfg.eval.m_list, vec![1, 2]);
        assert_eq!(cfg.q, None);
        assert_eq!(cfg.seeds.init, 9);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/somewhere"));

        match parse_config("model.d_model = 32\nnot_a_key = 1\n") {
            Err(ExperimentError::UnknownKey { line: 2, key }) => assert_eq!(key, "not_a_key"),
            other => panic!("unexpected {other:?}"),
        }
        match parse_config("optim.lr = 0.1\noptim.lr = 0.2\n") {
            Err(ExperimentError::DuplicateKey { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_config("optim.lr = fast\n") {
            Err(ExperimentError::BadValue { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_config("just words\n") {
            Err(ExperimentError::BadLine { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validation_rejects_out_of_range_skip_distances() {
        // k_min = 4 by default, so m = 4 > k_min - 1 = 3 must fail
        let err = parse_config("eval.m_list = 1,4\n").unwrap_err();
        assert!(matches!(err, ExperimentError::Invalid(_)), "got {err:?}");
    }

    #[test]
    fn master_seed_expands_to_consecutive_seeds() {
        let s = Seeds::from_master(10);
        assert_eq!((s.init, s.data, s.sampler, s.split), (10, 11, 12, 13));
    }

    #[test]
    fn stube_out_overrides_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg");
        fs::write(&path, "out_dir = runs/from_file\n").unwrap();
        std::env::set_var("STUBE_OUT", dir.path().join("from_env"));
        let cfg = load_config(&path).unwrap();
        std::env::remove_var("STUBE_OUT");
        assert_eq!(cfg.out_dir, dir.path().join("from_env"));
    }

    #[test]
    fn b1_training_is_a_base_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let summary = train_variant(GridVariant::B1, &cfg).unwrap();
        assert_eq!(summary.optimizer_steps, 0);
        let loaded = model_for(&cfg, GridVariant::B1).unwrap();
        let fresh = TransformerModel::init(cfg.model.clone(), cfg.seeds.init).unwrap();
        assert_eq!(loaded.base_checksum(), fresh.base_checksum());
        for ((na, ta), (_, tb)) in loaded.visit_params().into_iter().zip(fresh.visit_params()) {
            assert_eq!(ta.data(), tb.data(), "{na} differs from the fresh base");
        }
    }

    #[test]
    fn missing_checkpoint_is_an_error_except_for_the_base() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        assert!(model_for(&cfg, GridVariant::B1).is_ok());
        assert!(matches!(
            model_for(&cfg, GridVariant::A),
            Err(ExperimentError::MissingCheckpoint { .. })
        ));
    }

    #[test]
    fn training_is_deterministic_and_logs_are_clean() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let (cfg_a, cfg_b) = (tiny_config(dir_a.path()), tiny_config(dir_b.path()));
        let sa = train_variant(GridVariant::A, &cfg_a).unwrap();
        let sb = train_variant(GridVariant::A, &cfg_b).unwrap();
        assert!(sa.optimizer_steps > 0);
        assert_eq!(
            fs::read(&sa.checkpoint).unwrap(),
            fs::read(&sb.checkpoint).unwrap(),
            "same config must give byte-identical checkpoints"
        );
        let log_a = fs::read(dir_a.path().join("a/log.jsonl")).unwrap();
        let log_b = fs::read(dir_b.path().join("a/log.jsonl")).unwrap();
        assert_eq!(log_a, log_b);

        // every record has exactly the expected keys, no timestamps
        let text = String::from_utf8(log_a).unwrap();
        let mut steps = Vec::new();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let keys: Vec<&str> = v.as_object().unwrap().keys().map(|s| s.as_str()).collect();
            assert_eq!(keys, ["degenerate_pairs", "ntp", "step", "stp", "total"]);
            assert!(v["ntp"].is_number(), "variant A trains with the next-token term");
            assert!(v["stp"].is_number(), "variant A trains with the smoothness term");
            steps.push(v["step"].as_u64().unwrap());
        }
        let want: Vec<u64> = (1..=steps.len() as u64).collect();
        assert_eq!(steps, want);
    }

    #[test]
    fn objective_composition_shows_up_in_the_log() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.corpus.n_sequences = 40; // enough for a few steps
        train_variant(GridVariant::B2, &cfg).unwrap();
        let text = fs::read_to_string(dir.path().join("b2/log.jsonl")).unwrap();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["stp"].is_null(), "next-token-only must log no smoothness value");
            assert!(v["ntp"].is_number());
        }

        train_variant(GridVariant::A1, &cfg).unwrap();
        let text = fs::read_to_string(dir.path().join("a1/log.jsonl")).unwrap();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["ntp"].is_null(), "smoothness-only must log no next-token value");
            assert!(v["stp"].is_number());
        }
    }

    #[test]
    fn smoothness_objective_decreases_under_training() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.corpus.n_sequences = 160;
        cfg.optim.epochs = 2;
        cfg.optim.lr = 1e-2;
        train_variant(GridVariant::A1, &cfg).unwrap();
        let text = fs::read_to_string(dir.path().join("a1/log.jsonl")).unwrap();
        let totals: Vec<f64> = text
            .lines()
            .map(|l| serde_json::from_str::<TrainLogRecord>(l).unwrap().total)
            .collect();
        assert!(totals.len() >= 20, "need enough steps to smooth over");
        let w = 8;
        let head: f64 = totals[..w].iter().sum::<f64>() / w as f64;
        let tail: f64 = totals[totals.len() - w..].iter().sum::<f64>() / w as f64;
        assert!(
            tail < head,
            "smoothed objective should fall: first window {head}, last window {tail}"
        );
    }

    #[test]
    fn eval_writes_dump_and_report() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        train_variant(GridVariant::B2, &cfg).unwrap();
        let report = eval_variant(GridVariant::B2, &cfg).unwrap();

        assert!(dir.path().join("b2/traj.dump").exists());
        let disk = fs::read_to_string(dir.path().join("b2/metrics.json")).unwrap();
        assert_eq!(MetricsReport::from_json(&disk).unwrap(), report);

        assert_eq!(report.variant, "b2");
        assert_eq!(report.per_m.len(), 2);
        for row in &report.per_m {
            assert!(row.linear_mse >= 0.0);
            assert!((0.0..=1.0).contains(&row.accuracy));
            assert!((0.0..=1.0).contains(&row.retrieval));
            assert!((0.0..=1.0).contains(&row.top1_agreement));
            assert!((0.0..=1.0).contains(&row.top5_jaccard));
            assert!(row.mean_kl >= 0.0);
        }
        assert!(report.mean_cos.is_some());
        assert!(report.mean_perp.is_some());
        let em = report.exact_match.unwrap();
        assert!((0.0..=1.0).contains(&em));
        let det = report.detection.as_ref().expect("both classes at error_rate 0.5");
        assert!((0.0..=1.0).contains(&det.auc));
        assert!(report.counts.n_trajectories > 0);
    }

    #[test]
    fn grid_runs_and_resumes_without_recomputing() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.corpus.n_sequences = 120;
        cfg.eval.m_list = vec![1];
        cfg.eval.mlp_epochs = 3;

        let reports = run_grid(&cfg).unwrap();
        assert_eq!(reports.len(), 6);
        let cmp_first = fs::read_to_string(dir.path().join("comparison.md")).unwrap();
        assert!(cmp_first.contains("| b1 |"));
        assert!(cmp_first.contains("| a1 |"));

        // doctor one metrics file; a resumed grid must trust it rather
        // than recompute, which proves nothing reran
        let doctored_path = dir.path().join("c/metrics.json");
        let mut doctored = MetricsReport::from_json(&fs::read_to_string(&doctored_path).unwrap())
            .unwrap();
        doctored.per_m[0].linear_mse = 123.456;
        fs::write(&doctored_path, doctored.to_json()).unwrap();

        let again = run_grid(&cfg).unwrap();
        assert_eq!(again[2].per_m[0].linear_mse, 123.456);
        let cmp_second = fs::read_to_string(dir.path().join("comparison.md")).unwrap();
        assert!(cmp_second.contains("123.456"), "comparison must reflect reused metrics");
    }
}
