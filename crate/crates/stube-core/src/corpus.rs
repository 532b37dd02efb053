//! Synthetic step-structured sequences for training and probing.
//!
//! The task family is "chain-sum": a question states a two-digit start
//! value and K signed one-digit operands; each reasoning step re-states the
//! running total after applying one operand, padded with deterministic
//! filler words, and ends with a step marker. Because every step is a pure
//! function of the question, a verifier can recheck each step exactly, and
//! an error injector can corrupt the chain at a known step for the
//! error-detection probe.
//!
//! Layout of one sequence (`|` marks the step tokens):
//!
//! ```text
//! <bos> ? 4 7  + 5  - 3 | 5 2 w w w | 4 9 w w |
//!        ^question       ^step 1     ^step 2
//! ```
//!
//! Totals are steered into [13, 86] so that corruption by up to +/-3 never
//! changes the digit count, keeping corrupted and clean sequences aligned
//! token for token.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const STEP: u32 = 3;
/// Digit d is token DIGIT_BASE + d.
pub const DIGIT_BASE: u32 = 4;
pub const PLUS: u32 = 14;
pub const MINUS: u32 = 15;
pub const EQUALS: u32 = 16;
pub const QUESTION: u32 = 17;
/// Filler word w is token WORD_BASE + w.
pub const WORD_BASE: u32 = 18;
pub const N_WORDS: usize = 46;
pub const VOCAB_SIZE: usize = 64;

/// Filler vocabulary; index w renders token WORD_BASE + w.
const WORDS: [&str; N_WORDS] = [
    "so", "then", "we", "get", "take", "add", "drop", "keep", "the", "a", "to", "from", "next",
    "now", "total", "value", "sum", "runs", "goes", "comes", "stays", "moves", "up", "down",
    "by", "and", "with", "after", "before", "step", "again", "still", "more", "less", "new",
    "old", "left", "right", "over", "under", "once", "twice", "count", "tally", "track", "hold",
];

const TOTAL_MIN: i64 = 13;
const TOTAL_MAX: i64 = 86;
const START_MIN: i64 = 40;
const START_MAX: i64 = 60;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus config: {0}")]
    BadConfig(String),
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("token id {0} out of vocabulary")]
    UnknownToken(u32),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("sequence is not well-formed chain-sum: {0}")]
    Malformed(String),
    #[error("error rate {0} outside [0, 1]")]
    ErrorRateOutOfRange(f64),
    #[error("split fractions sum to {0}, expected 1")]
    BadFractions(f64),
    #[error("split leaves one side empty")]
    EmptySplitSide,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
}

/// Correctness annotation produced by `inject_errors`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub is_correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_error_step: Option<usize>,
}

/// One tokenized sequence with its step-marker positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSequence {
    pub tokens: Vec<u32>,
    pub step_positions: Vec<usize>,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

impl StepSequence {
    /// Checks the structural invariants: K >= 1, exactly K+1 strictly
    /// increasing step positions, the step token exactly there and nowhere
    /// else, all ids in vocabulary.
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.k < 1 {
            return Err(CorpusError::InvalidSequence("k must be >= 1".into()));
        }
        if self.step_positions.len() != self.k + 1 {
            return Err(CorpusError::InvalidSequence(format!(
                "expected {} step positions, got {}",
                self.k + 1,
                self.step_positions.len()
            )));
        }
        for w in self.step_positions.windows(2) {
            if w[1] <= w[0] {
                return Err(CorpusError::InvalidSequence(
                    "step positions not strictly increasing".into(),
                ));
            }
        }
        for &t in &self.tokens {
            if t as usize >= VOCAB_SIZE {
                return Err(CorpusError::UnknownToken(t));
            }
        }
        let mut expect = self.step_positions.iter().copied().peekable();
        for (pos, &t) in self.tokens.iter().enumerate() {
            let here = expect.peek() == Some(&pos);
            if here {
                expect.next();
            }
            match (t == STEP, here) {
                (true, false) => {
                    return Err(CorpusError::InvalidSequence(format!(
                        "step token at unlisted position {pos}"
                    )))
                }
                (false, true) => {
                    return Err(CorpusError::InvalidSequence(format!(
                        "position {pos} listed but holds token {t}"
                    )))
                }
                _ => {}
            }
        }
        if expect.next().is_some() {
            return Err(CorpusError::InvalidSequence("step position beyond sequence".into()));
        }
        Ok(())
    }
}

/// Generation knobs. `step_len_*` bound the tokens in a step body,
/// excluding the trailing step marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_sequences: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub step_len_min: usize,
    pub step_len_max: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub task: String,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_sequences: 2500,
            k_min: 4,
            k_max: 10,
            step_len_min: 4,
            step_len_max: 10,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 256,
            task: "chain-sum".into(),
            seed: 0,
        }
    }
}

impl CorpusConfig {
    fn question_len(k: usize) -> usize {
        // <bos> ? hi lo, then (op, digit) per operand, then the first marker
        4 + 2 * k + 1
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.task != "chain-sum" {
            return Err(CorpusError::BadConfig(format!("unknown task {:?}", self.task)));
        }
        if self.vocab_size != VOCAB_SIZE {
            return Err(CorpusError::BadConfig(format!(
                "vocab is fixed at {VOCAB_SIZE}, got {}",
                self.vocab_size
            )));
        }
        if self.n_sequences == 0 {
            return Err(CorpusError::BadConfig("n_sequences must be > 0".into()));
        }
        if self.k_min < 1 || self.k_min > self.k_max {
            return Err(CorpusError::BadConfig(format!(
                "bad k range [{}, {}]",
                self.k_min, self.k_max
            )));
        }
        if self.step_len_min < 2 || self.step_len_min > self.step_len_max {
            return Err(CorpusError::BadConfig(format!(
                "bad step length range [{}, {}] (min 2 for the total digits)",
                self.step_len_min, self.step_len_max
            )));
        }
        let worst = Self::question_len(self.k_max) + self.k_max * (self.step_len_max + 1);
        if worst > self.max_seq_len {
            return Err(CorpusError::BadConfig(format!(
                "worst-case length {worst} exceeds max_seq_len {}",
                self.max_seq_len
            )));
        }
        Ok(())
    }
}

// ── rendering ──────────────────────────────────────────────────────────────

fn digit_token(d: i64) -> u32 {
    DIGIT_BASE + d as u32
}

fn word_token(w: i64) -> u32 {
    WORD_BASE + (w.rem_euclid(N_WORDS as i64)) as u32
}

/// Body length for a clean step: derived from the total so that the whole
/// continuation — digits, fillers, and where the next step marker lands —
/// is computable from the question alone. Greedy decoding therefore has a
/// genuine 100% ceiling.
pub fn derived_step_len(total: i64, len_min: usize, len_max: usize) -> usize {
    let span = (len_max - len_min + 1) as i64;
    len_min + total.rem_euclid(span) as usize
}

/// Step body: the running total's two digits, then deterministic filler
/// words derived from the total, so every body token is verifiable.
fn render_step_body(total: i64, len: usize) -> Vec<u32> {
    debug_assert!((10..=99).contains(&total));
    let mut out = Vec::with_capacity(len);
    out.push(digit_token(total / 10));
    out.push(digit_token(total % 10));
    for j in 0..len - 2 {
        out.push(word_token(total + 7 * j as i64));
    }
    out
}

fn render_question(start: i64, operands: &[i64]) -> Vec<u32> {
    let mut out = vec![BOS, QUESTION, digit_token(start / 10), digit_token(start % 10)];
    for &op in operands {
        out.push(if op >= 0 { PLUS } else { MINUS });
        out.push(digit_token(op.abs()));
    }
    out
}

/// The arithmetic content of one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainSum {
    pub start: i64,
    /// Signed one-digit operands, one per step.
    pub operands: Vec<i64>,
}

impl ChainSum {
    /// Running totals t_1..t_K.
    pub fn totals(&self) -> Vec<i64> {
        let mut t = self.start;
        self.operands
            .iter()
            .map(|&op| {
                t += op;
                t
            })
            .collect()
    }
}

fn assemble(problem: &ChainSum, step_lens: &[usize]) -> StepSequence {
    let k = problem.operands.len();
    let mut tokens = render_question(problem.start, &problem.operands);
    let mut step_positions = Vec::with_capacity(k + 1);
    step_positions.push(tokens.len());
    tokens.push(STEP);
    for (total, &len) in problem.totals().iter().zip(step_lens) {
        tokens.extend(render_step_body(*total, len));
        step_positions.push(tokens.len());
        tokens.push(STEP);
    }
    StepSequence { tokens, step_positions, k, label: None }
}

// ── generation ─────────────────────────────────────────────────────────────

/// Deterministic corpus generation; sequence i depends only on
/// (config.seed, i), so order of generation never matters.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Vec<StepSequence>, CorpusError> {
    config.validate()?;
    let mut out = Vec::with_capacity(config.n_sequences);
    for i in 0..config.n_sequences {
        let mut r = rng::stream(&[0xC0, config.seed, i as u64]);
        let k = r.gen_range(config.k_min..=config.k_max);
        let start = r.gen_range(START_MIN..=START_MAX);
        let mut operands = Vec::with_capacity(k);
        let mut total = start;
        for _ in 0..k {
            let mag = r.gen_range(1i64..=9);
            let mut op = if r.gen_bool(0.5) { mag } else { -mag };
            // keep totals in [TOTAL_MIN, TOTAL_MAX]; flipping the sign
            // always lands inside because the band is wider than 2*9
            if !(TOTAL_MIN..=TOTAL_MAX).contains(&(total + op)) {
                op = -op;
            }
            total += op;
            operands.push(op);
        }
        let problem = ChainSum { start, operands };
        let step_lens: Vec<usize> = problem
            .totals()
            .iter()
            .map(|&t| derived_step_len(t, config.step_len_min, config.step_len_max))
            .collect();
        let seq = assemble(&problem, &step_lens);
        debug_assert!(seq.tokens.len() <= config.max_seq_len);
        out.push(seq);
    }
    Ok(out)
}

// ── verification ───────────────────────────────────────────────────────────

/// Parses the question span back into the arithmetic problem.
pub fn parse_question(seq: &StepSequence) -> Result<ChainSum, CorpusError> {
    let q_end = *seq
        .step_positions
        .first()
        .ok_or_else(|| CorpusError::Malformed("no step positions".into()))?;
    let q = &seq.tokens[..q_end];
    if q.len() < 4 || q[0] != BOS || q[1] != QUESTION {
        return Err(CorpusError::Malformed("question must open with <bos> ?".into()));
    }
    let digit = |t: u32, what: &str| -> Result<i64, CorpusError> {
        if (DIGIT_BASE..DIGIT_BASE + 10).contains(&t) {
            Ok((t - DIGIT_BASE) as i64)
        } else {
            Err(CorpusError::Malformed(format!("expected digit for {what}, got token {t}")))
        }
    };
    let start = 10 * digit(q[2], "start high digit")? + digit(q[3], "start low digit")?;
    let rest = &q[4..];
    if rest.len() % 2 != 0 {
        return Err(CorpusError::Malformed("dangling operator".into()));
    }
    let mut operands = Vec::with_capacity(rest.len() / 2);
    for pair in rest.chunks(2) {
        let sign = match pair[0] {
            PLUS => 1,
            MINUS => -1,
            t => return Err(CorpusError::Malformed(format!("expected operator, got {t}"))),
        };
        operands.push(sign * digit(pair[1], "operand")?);
    }
    if operands.len() != seq.k {
        return Err(CorpusError::Malformed(format!(
            "{} operands for k = {}",
            operands.len(),
            seq.k
        )));
    }
    Ok(ChainSum { start, operands })
}

/// Result of rechecking one step against the recomputed running total.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepCheck {
    pub expected_total: i64,
    pub ok: bool,
}

/// Recomputes the chain from the question and compares every step body
/// against its expected rendering. Clean sequences pass every check;
/// corrupted ones fail from the first corrupted step on.
pub fn verify_sequence(seq: &StepSequence) -> Result<Vec<StepCheck>, CorpusError> {
    seq.validate()?;
    let problem = parse_question(seq)?;
    let totals = problem.totals();
    let mut checks = Vec::with_capacity(seq.k);
    for step in 1..=seq.k {
        let body =
            &seq.tokens[seq.step_positions[step - 1] + 1..seq.step_positions[step]];
        let expected = render_step_body(totals[step - 1], body.len());
        checks.push(StepCheck { expected_total: totals[step - 1], ok: body == expected });
    }
    Ok(checks)
}

/// True when every step of the chain checks out.
pub fn sequence_is_clean(seq: &StepSequence) -> Result<bool, CorpusError> {
    Ok(verify_sequence(seq)?.iter().all(|c| c.ok))
}

// ── error injection ────────────────────────────────────────────────────────

/// Labels every sequence; a Bernoulli(error_rate) subset get their running
/// total shifted by a nonzero delta in [-3, 3] from a uniformly chosen
/// step e in [1, K-1] onward (every later step re-rendered from the wrong
/// total, as a consistent-but-wrong chain). Sequence lengths and step
/// positions are untouched.
pub fn inject_errors(
    corpus: &[StepSequence],
    error_rate: f64,
    seed: u64,
) -> Result<Vec<StepSequence>, CorpusError> {
    if !(0.0..=1.0).contains(&error_rate) {
        return Err(CorpusError::ErrorRateOutOfRange(error_rate));
    }
    let mut out = Vec::with_capacity(corpus.len());
    for (i, seq) in corpus.iter().enumerate() {
        let mut r = rng::stream(&[0xE1, seed, i as u64]);
        let corrupt = r.gen_bool(error_rate) && seq.k >= 2;
        if !corrupt {
            let mut clean = seq.clone();
            clean.label = Some(Label { is_correct: true, first_error_step: None });
            out.push(clean);
            continue;
        }
        let problem = parse_question(seq)?;
        let totals = problem.totals();
        let e = r.gen_range(1..seq.k); // first wrong step, 1..=K-1
        let mag = r.gen_range(1i64..=3);
        let delta = if r.gen_bool(0.5) { mag } else { -mag };

        let mut tokens = seq.tokens.clone();
        for step in e..=seq.k {
            let lo = seq.step_positions[step - 1] + 1;
            let hi = seq.step_positions[step];
            let body = render_step_body(totals[step - 1] + delta, hi - lo);
            tokens[lo..hi].copy_from_slice(&body);
        }
        out.push(StepSequence {
            tokens,
            step_positions: seq.step_positions.clone(),
            k: seq.k,
            label: Some(Label { is_correct: false, first_error_step: Some(e) }),
        });
    }
    Ok(out)
}

// ── split ──────────────────────────────────────────────────────────────────

/// Deterministic stratified split. Within each K stratum the order is
/// shuffled by (seed, K); counts follow largest-remainder apportionment so
/// each stratum's train share is within one sequence of the requested
/// fraction while the overall sizes are exact.
pub fn split(
    corpus: &[StepSequence],
    fractions: (f64, f64),
    seed: u64,
) -> Result<(Vec<StepSequence>, Vec<StepSequence>), CorpusError> {
    let sum = fractions.0 + fractions.1;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadFractions(sum));
    }
    let n = corpus.len();
    let target_train = (fractions.0 * n as f64).round() as usize;
    if target_train == 0 || target_train == n {
        return Err(CorpusError::EmptySplitSide);
    }

    let mut by_k: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, seq) in corpus.iter().enumerate() {
        by_k.entry(seq.k).or_default().push(i);
    }
    // largest-remainder apportionment of the train count across strata
    let mut base_total = 0usize;
    let mut entries: Vec<(usize, usize, f64)> = Vec::new(); // (k, base, remainder)
    for (&k, idxs) in &by_k {
        let exact = fractions.0 * idxs.len() as f64;
        let base = exact.floor() as usize;
        base_total += base;
        entries.push((k, base, exact - base as f64));
    }
    let mut leftover = target_train.saturating_sub(base_total);
    entries.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    let mut take: BTreeMap<usize, usize> = BTreeMap::new();
    for (k, base, _) in &entries {
        take.insert(*k, *base);
    }
    for (k, base, _) in &entries {
        if leftover == 0 {
            break;
        }
        if base + 1 <= by_k[k].len() {
            take.insert(*k, base + 1);
            leftover -= 1;
        }
    }

    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (&k, idxs) in &by_k {
        let mut order = idxs.clone();
        let mut r = rng::stream(&[0x5B, seed, k as u64]);
        for i in (1..order.len()).rev() {
            let j = r.gen_range(0..=i);
            order.swap(i, j);
        }
        let cut = take[&k].min(order.len());
        for &idx in &order[..cut] {
            train.push(corpus[idx].clone());
        }
        for &idx in &order[cut..] {
            eval.push(corpus[idx].clone());
        }
    }
    if train.is_empty() || eval.is_empty() {
        return Err(CorpusError::EmptySplitSide);
    }
    Ok((train, eval))
}

// ── text round-trip ────────────────────────────────────────────────────────

pub fn token_to_text(id: u32) -> Result<&'static str, CorpusError> {
    const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
    match id {
        PAD => Ok("<pad>"),
        BOS => Ok("<bos>"),
        EOS => Ok("<eos>"),
        STEP => Ok("<step>"),
        PLUS => Ok("+"),
        MINUS => Ok("-"),
        EQUALS => Ok("="),
        QUESTION => Ok("?"),
        d if (DIGIT_BASE..DIGIT_BASE + 10).contains(&d) => {
            Ok(DIGITS[(d - DIGIT_BASE) as usize])
        }
        w if (WORD_BASE..WORD_BASE + N_WORDS as u32).contains(&w) => {
            Ok(WORDS[(w - WORD_BASE) as usize])
        }
        other => Err(CorpusError::UnknownToken(other)),
    }
}

pub fn text_to_token(text: &str) -> Result<u32, CorpusError> {
    match text {
        "<pad>" => return Ok(PAD),
        "<bos>" => return Ok(BOS),
        "<eos>" => return Ok(EOS),
        "<step>" => return Ok(STEP),
        "+" => return Ok(PLUS),
        "-" => return Ok(MINUS),
        "=" => return Ok(EQUALS),
        "?" => return Ok(QUESTION),
        _ => {}
    }
    if text.len() == 1 {
        if let Some(d) = text.chars().next().unwrap().to_digit(10) {
            return Ok(DIGIT_BASE + d);
        }
    }
    if let Some(w) = WORDS.iter().position(|&w| w == text) {
        return Ok(WORD_BASE + w as u32);
    }
    Err(CorpusError::UnknownWord(text.to_string()))
}

pub fn detokenize(tokens: &[u32]) -> Result<String, CorpusError> {
    let parts: Result<Vec<&str>, _> = tokens.iter().map(|&t| token_to_text(t)).collect();
    Ok(parts?.join(" "))
}

pub fn tokenize(text: &str) -> Result<Vec<u32>, CorpusError> {
    text.split_whitespace().map(text_to_token).collect()
}

// ── jsonl io ───────────────────────────────────────────────────────────────

/// One JSON object per line: {tokens, step_positions, k, label}.
pub fn write_corpus(path: &Path, corpus: &[StepSequence]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for seq in corpus {
        let line = serde_json::to_string(seq)
            .map_err(|source| CorpusError::Json { line: 0, source })?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates a corpus file; errors carry the 1-based line number.
pub fn read_corpus(path: &Path) -> Result<Vec<StepSequence>, CorpusError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: StepSequence = serde_json::from_str(&line)
            .map_err(|source| CorpusError::Json { line: i + 1, source })?;
        seq.validate().map_err(|e| {
            CorpusError::InvalidSequence(format!("line {}: {e}", i + 1))
        })?;
        out.push(seq);
    }
    Ok(out)
}
