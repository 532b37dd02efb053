//! Toy decoder-only transformer: RMSNorm -> causal multi-head attention ->
//! RMSNorm -> GELU feed-forward, with residual connections, learned absolute
//! position embeddings, an untied LM head, and optional low-rank adapter
//! pairs on the q/k/v/o projections. "Hidden states" throughout the crate
//! are the last block's outputs *before* the final norm; `decode_head` maps
//! such a state to the same next-token distribution the full forward pass
//! produces at that position.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tensor::math;
use crate::tensor::{Tape, Tensor, TensorError, Value};

/// Magic prefix of model checkpoint files.
pub const CHECKPOINT_MAGIC: &[u8; 5] = b"STUB1";

const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("tensor op failed: {0}")]
    Tensor(#[from] TensorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint config mismatch on {field}: expected {expected}, found {found}")]
    ConfigMismatch {
        field: &'static str,
        expected: u32,
        found: u32,
    },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint has trailing bytes")]
    TrailingBytes,
    #[error("decode head input has dimension {got}, model expects {want}")]
    BadStateDim { got: usize, want: usize },
}

/// Architecture hyperparameters. The default is the toy configuration used
/// by the experiment grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// Rank of the adapter pairs on q/k/v/o; 0 disables adapters.
    pub lora_rank: usize,
    /// Adapter scale numerator; the delta is scaled by lora_alpha / lora_rank.
    pub lora_alpha: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 256,
            lora_rank: 4,
            lora_alpha: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.max_seq_len == 0
        {
            return Err(ModelError::BadConfig("all dimensions must be nonzero".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.lora_rank > 0 && self.lora_alpha == 0 {
            return Err(ModelError::BadConfig("lora_alpha must be nonzero when rank > 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn header_fields(&self) -> [u32; 8] {
        [
            self.vocab_size as u32,
            self.d_model as u32,
            self.n_layers as u32,
            self.n_heads as u32,
            self.d_ff as u32,
            self.max_seq_len as u32,
            self.lora_rank as u32,
            self.lora_alpha,
        ]
    }
}

/// One low-rank adapter pair: delta(W) = A @ B * (alpha / rank), with
/// A: [d, r] Gaussian-initialized and B: [r, d] zero-initialized so a fresh
/// adapter is an exact no-op.
#[derive(Debug, Clone)]
pub struct AdapterPair {
    pub a: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct LayerAdapters {
    pub q: AdapterPair,
    pub k: AdapterPair,
    pub v: AdapterPair,
    pub o: AdapterPair,
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub attn_gain: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub adapters: Option<LayerAdapters>,
    pub ffn_gain: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

#[derive(Debug, Clone)]
pub struct TransformerModel {
    config: ModelConfig,
    pub tok_embed: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Tensor,
    pub lm_head: Tensor,
}

/// Which parameter set participates in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainableSet {
    /// Frozen model; training it is a caller error.
    Nothing,
    /// Adapter pairs only; the base stays frozen.
    Adapters,
    /// Every parameter (used by gradient tests, not by the grid).
    Everything,
}

/// Output of one differentiable forward pass.
pub struct ForwardPass {
    /// Last block output before the final norm, shape [T, d_model].
    pub hidden: Value,
    /// Next-token logits, shape [T, vocab].
    pub logits: Value,
    /// Tape handles for every parameter that requires grad, in canonical
    /// parameter order; used to pull gradients out after backward.
    pub trainable: Vec<(String, Value)>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Per-tensor init stream keyed by name, so the base weights are identical
/// whether or not adapters exist.
fn init_tensor(seed: u64, name: &str, shape: Vec<usize>, std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if std > 0.0 {
        let mut r = rng::stream(&[0x1417, seed, fnv1a(name)]);
        rng::fill_normal(&mut r, std, t.data_mut());
    }
    t
}

fn ones(shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, vec![1.0; n]).expect("shape/data agree")
}

impl TransformerModel {
    /// Fresh Gaussian-initialized model (std 0.02, norm gains at one,
    /// adapter B matrices at zero). Deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let name = |part: &str| format!("layer{l}.{part}");
            let adapters = if config.lora_rank > 0 {
                let r = config.lora_rank;
                let pair = |proj: &str| AdapterPair {
                    a: init_tensor(seed, &name(&format!("adapter.{proj}.a")), vec![d, r], INIT_STD),
                    b: Tensor::zeros(vec![r, d]),
                };
                Some(LayerAdapters {
                    q: pair("q"),
                    k: pair("k"),
                    v: pair("v"),
                    o: pair("o"),
                })
            } else {
                None
            };
            layers.push(LayerWeights {
                attn_gain: ones(vec![d]),
                wq: init_tensor(seed, &name("wq"), vec![d, d], INIT_STD),
                wk: init_tensor(seed, &name("wk"), vec![d, d], INIT_STD),
                wv: init_tensor(seed, &name("wv"), vec![d, d], INIT_STD),
                wo: init_tensor(seed, &name("wo"), vec![d, d], INIT_STD),
                adapters,
                ffn_gain: ones(vec![d]),
                w1: init_tensor(seed, &name("w1"), vec![d, config.d_ff], INIT_STD),
                w2: init_tensor(seed, &name("w2"), vec![config.d_ff, d], INIT_STD),
            });
        }
        Ok(TransformerModel {
            tok_embed: init_tensor(seed, "tok_embed", vec![config.vocab_size, d], INIT_STD),
            pos_embed: init_tensor(seed, "pos_embed", vec![config.max_seq_len, d], INIT_STD),
            layers,
            final_gain: ones(vec![d]),
            lm_head: init_tensor(seed, "lm_head", vec![d, config.vocab_size], INIT_STD),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Visits every parameter in canonical order (the checkpoint blob order).
    pub fn visit_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("tok_embed".into(), &self.tok_embed));
        out.push(("pos_embed".into(), &self.pos_embed));
        for (l, layer) in self.layers.iter().enumerate() {
            let p = |part: &str| format!("layer{l}.{part}");
            out.push((p("attn_gain"), &layer.attn_gain));
            out.push((p("wq"), &layer.wq));
            out.push((p("wk"), &layer.wk));
            out.push((p("wv"), &layer.wv));
            out.push((p("wo"), &layer.wo));
            if let Some(ad) = &layer.adapters {
                for (proj, pair) in [("q", &ad.q), ("k", &ad.k), ("v", &ad.v), ("o", &ad.o)] {
                    out.push((p(&format!("adapter.{proj}.a")), &pair.a));
                    out.push((p(&format!("adapter.{proj}.b")), &pair.b));
                }
            }
            out.push((p("ffn_gain"), &layer.ffn_gain));
            out.push((p("w1"), &layer.w1));
            out.push((p("w2"), &layer.w2));
        }
        out.push(("final_gain".into(), &self.final_gain));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    /// Mutable variant of `visit_params`, same order.
    pub fn visit_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("tok_embed".into(), &mut self.tok_embed));
        out.push(("pos_embed".into(), &mut self.pos_embed));
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let p = |part: &str| format!("layer{l}.{part}");
            out.push((p("attn_gain"), &mut layer.attn_gain));
            out.push((p("wq"), &mut layer.wq));
            out.push((p("wk"), &mut layer.wk));
            out.push((p("wv"), &mut layer.wv));
            out.push((p("wo"), &mut layer.wo));
            if let Some(ad) = &mut layer.adapters {
                for (proj, pair) in [
                    ("q", &mut ad.q),
                    ("k", &mut ad.k),
                    ("v", &mut ad.v),
                    ("o", &mut ad.o),
                ] {
                    out.push((p(&format!("adapter.{proj}.a")), &mut pair.a));
                    out.push((p(&format!("adapter.{proj}.b")), &mut pair.b));
                }
            }
            out.push((p("ffn_gain"), &mut layer.ffn_gain));
            out.push((p("w1"), &mut layer.w1));
            out.push((p("w2"), &mut layer.w2));
        }
        out.push(("final_gain".into(), &mut self.final_gain));
        out.push(("lm_head".into(), &mut self.lm_head));
        out
    }

    /// Sets which parameters request gradients.
    pub fn set_trainable(&mut self, set: TrainableSet) {
        for (name, t) in self.visit_params_mut() {
            let on = match set {
                TrainableSet::Nothing => false,
                TrainableSet::Everything => true,
                TrainableSet::Adapters => name.contains(".adapter."),
            };
            t.set_requires_grad(on);
        }
    }

    /// Names of parameters currently requesting gradients, canonical order.
    pub fn trainable_parameters(&self) -> Vec<String> {
        self.visit_params()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, _)| n)
            .collect()
    }

    /// Number of scalar parameters currently trainable.
    pub fn trainable_param_count(&self) -> usize {
        self.visit_params()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Order-insensitive digest of the non-adapter weights; used to assert
    /// the base stays frozen during adapter training.
    pub fn base_checksum(&self) -> u64 {
        let mut acc: u64 = 0;
        for (name, t) in self.visit_params() {
            if name.contains(".adapter.") {
                continue;
            }
            for &v in t.data() {
                acc = acc.wrapping_mul(0x100000001b3).wrapping_add(v.to_bits());
            }
        }
        acc
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange { id: t, vocab: self.config.vocab_size });
            }
        }
        Ok(())
    }

    /// Differentiable forward pass on the given tape.
    pub fn forward_on(&self, tape: &mut Tape, tokens: &[u32]) -> Result<ForwardPass, ModelError> {
        self.check_tokens(tokens)?;
        let t_len = tokens.len();
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let pos_ids: Vec<usize> = (0..t_len).collect();
        let scale = if self.config.lora_rank > 0 {
            self.config.lora_alpha as f64 / self.config.lora_rank as f64
        } else {
            0.0
        };

        let mut trainable: Vec<(String, Value)> = Vec::new();
        fn bind(
            tape: &mut Tape,
            trainable: &mut Vec<(String, Value)>,
            name: String,
            t: &Tensor,
        ) -> Value {
            let v = tape.leaf(t);
            if t.requires_grad() {
                trainable.push((name, v));
            }
            v
        }

        let tok_table = bind(tape, &mut trainable, "tok_embed".into(), &self.tok_embed);
        let pos_table = bind(tape, &mut trainable, "pos_embed".into(), &self.pos_embed);
        let tok_e = tape.embedding(tok_table, &ids)?;
        let pos_e = tape.gather_rows(pos_table, &pos_ids)?;
        let mut x = tape.add(tok_e, pos_e)?;

        let n_heads = self.config.n_heads;
        let dh = self.config.head_dim();
        let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();

        for (l, layer) in self.layers.iter().enumerate() {
            let p = |part: &str| format!("layer{l}.{part}");

            // A projection with an optional low-rank delta.
            let proj = |tape: &mut Tape,
                            trainable: &mut Vec<(String, Value)>,
                            input: Value,
                            w: &Tensor,
                            wname: String,
                            pair: Option<(&AdapterPair, String)>|
             -> Result<Value, ModelError> {
                let wv = tape.leaf(w);
                if w.requires_grad() {
                    trainable.push((wname, wv));
                }
                let mut out = tape.matmul(input, wv)?;
                if let Some((ad, prefix)) = pair {
                    let av = tape.leaf(&ad.a);
                    if ad.a.requires_grad() {
                        trainable.push((format!("{prefix}.a"), av));
                    }
                    let bv = tape.leaf(&ad.b);
                    if ad.b.requires_grad() {
                        trainable.push((format!("{prefix}.b"), bv));
                    }
                    let low = tape.matmul(input, av)?;
                    let delta = tape.matmul(low, bv)?;
                    let scaled = tape.affine(delta, scale, 0.0);
                    out = tape.add(out, scaled)?;
                }
                Ok(out)
            };

            let attn_gain = bind(tape, &mut trainable, p("attn_gain"), &layer.attn_gain);
            let xn = tape.rmsnorm(x, attn_gain)?;

            let ad = layer.adapters.as_ref();
            let q = proj(tape, &mut trainable, xn, &layer.wq, p("wq"),
                ad.map(|a| (&a.q, p("adapter.q"))))?;
            let k = proj(tape, &mut trainable, xn, &layer.wk, p("wk"),
                ad.map(|a| (&a.k, p("adapter.k"))))?;
            let v = proj(tape, &mut trainable, xn, &layer.wv, p("wv"),
                ad.map(|a| (&a.v, p("adapter.v"))))?;

            let mut heads = Vec::with_capacity(n_heads);
            for h in 0..n_heads {
                let (lo, hi) = (h * dh, (h + 1) * dh);
                let qh = tape.slice_cols(q, lo, hi)?;
                let kh = tape.slice_cols(k, lo, hi)?;
                let vh = tape.slice_cols(v, lo, hi)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scaled = tape.affine(scores, inv_sqrt_dh, 0.0);
                let probs = tape.softmax_causal(scaled)?;
                heads.push(tape.matmul(probs, vh)?);
            }
            let merged = tape.concat_cols(&heads)?;
            let attn = proj(tape, &mut trainable, merged, &layer.wo, p("wo"),
                ad.map(|a| (&a.o, p("adapter.o"))))?;
            x = tape.add(x, attn)?;

            let ffn_gain = bind(tape, &mut trainable, p("ffn_gain"), &layer.ffn_gain);
            let xn2 = tape.rmsnorm(x, ffn_gain)?;
            let w1 = bind(tape, &mut trainable, p("w1"), &layer.w1);
            let w2 = bind(tape, &mut trainable, p("w2"), &layer.w2);
            let h1 = tape.matmul(xn2, w1)?;
            let h1 = tape.gelu(h1);
            let ff = tape.matmul(h1, w2)?;
            x = tape.add(x, ff)?;
        }

        let hidden = x;
        let final_gain = bind(tape, &mut trainable, "final_gain".into(), &self.final_gain);
        let lm_head = bind(tape, &mut trainable, "lm_head".into(), &self.lm_head);
        let normed = tape.rmsnorm(hidden, final_gain)?;
        let logits = tape.matmul(normed, lm_head)?;

        Ok(ForwardPass { hidden, logits, trainable })
    }

    /// Maps a hidden state (pre-final-norm, length d_model) to the
    /// next-token distribution: final RMSNorm, LM head, softmax. Uses the
    /// same kernels as the tape forward, so it agrees bit for bit with
    /// softmax over the logits row the full forward produces.
    pub fn decode_head(&self, state: &[f64]) -> Result<Vec<f64>, ModelError> {
        let d = self.config.d_model;
        if state.len() != d {
            return Err(ModelError::BadStateDim { got: state.len(), want: d });
        }
        let mut normed = vec![0.0; d];
        math::rmsnorm_row(state, self.final_gain.data(), &mut normed);
        let mut logits = vec![0.0; self.config.vocab_size];
        math::matmul_nn(&normed, self.lm_head.data(), 1, d, self.config.vocab_size, &mut logits);
        math::softmax_row(&mut logits);
        Ok(logits)
    }

    /// Starts an incremental decode with empty per-layer key/value caches.
    pub fn begin_decode(&self) -> DecodeState {
        DecodeState {
            k_cache: vec![Vec::new(); self.config.n_layers],
            v_cache: vec![Vec::new(); self.config.n_layers],
            pos: 0,
        }
    }

    /// One projection row through a base matrix plus its optional low-rank
    /// delta, mirroring the tape path operation for operation so the
    /// results agree exactly.
    fn project_row(&self, xn: &[f64], w: &Tensor, pair: Option<&AdapterPair>, out: &mut [f64]) {
        let d = self.config.d_model;
        math::matmul_nn(xn, w.data(), 1, d, d, out);
        if let Some(ad) = pair {
            let r = self.config.lora_rank;
            let scale = self.config.lora_alpha as f64 / r as f64;
            let mut low = vec![0.0; r];
            math::matmul_nn(xn, ad.a.data(), 1, d, r, &mut low);
            let mut delta = vec![0.0; d];
            math::matmul_nn(&low, ad.b.data(), 1, r, d, &mut delta);
            for (o, dv) in out.iter_mut().zip(&delta) {
                *o += scale * dv;
            }
        }
    }

    /// Feeds one token, returning the pre-final-norm hidden row and the
    /// next-token logits row. Produces the same numbers as running the
    /// full forward over the extended sequence and reading its last row,
    /// at per-token instead of per-sequence cost.
    pub fn decode_step(&self, st: &mut DecodeState, token: u32) -> Result<DecodeRow, ModelError> {
        if st.pos >= self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: st.pos + 1,
                max: self.config.max_seq_len,
            });
        }
        self.check_tokens(&[token])?;
        let d = self.config.d_model;
        let n_heads = self.config.n_heads;
        let dh = self.config.head_dim();
        let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();
        let t_id = token as usize;

        let mut x = vec![0.0; d];
        for j in 0..d {
            x[j] = self.tok_embed.data()[t_id * d + j] + self.pos_embed.data()[st.pos * d + j];
        }

        for (l, layer) in self.layers.iter().enumerate() {
            let mut xn = vec![0.0; d];
            math::rmsnorm_row(&x, layer.attn_gain.data(), &mut xn);
            let ad = layer.adapters.as_ref();
            let mut q = vec![0.0; d];
            let mut k = vec![0.0; d];
            let mut v = vec![0.0; d];
            self.project_row(&xn, &layer.wq, ad.map(|a| &a.q), &mut q);
            self.project_row(&xn, &layer.wk, ad.map(|a| &a.k), &mut k);
            self.project_row(&xn, &layer.wv, ad.map(|a| &a.v), &mut v);
            st.k_cache[l].extend_from_slice(&k);
            st.v_cache[l].extend_from_slice(&v);
            let t_len = st.pos + 1;

            let mut merged = vec![0.0; d];
            let mut scores = vec![0.0; t_len];
            for h in 0..n_heads {
                let lo = h * dh;
                for (p, s) in scores.iter_mut().enumerate() {
                    let kp = &st.k_cache[l][p * d + lo..p * d + lo + dh];
                    *s = math::dot(&q[lo..lo + dh], kp) * inv_sqrt_dh;
                }
                math::softmax_row(&mut scores);
                let out = &mut merged[lo..lo + dh];
                for (p, &s) in scores.iter().enumerate() {
                    let vp = &st.v_cache[l][p * d + lo..p * d + lo + dh];
                    for (o, &vv) in out.iter_mut().zip(vp) {
                        *o += s * vv;
                    }
                }
            }
            let mut attn = vec![0.0; d];
            self.project_row(&merged, &layer.wo, ad.map(|a| &a.o), &mut attn);
            for (xi, ai) in x.iter_mut().zip(&attn) {
                *xi += ai;
            }

            let mut xn2 = vec![0.0; d];
            math::rmsnorm_row(&x, layer.ffn_gain.data(), &mut xn2);
            let d_ff = self.config.d_ff;
            let mut h1 = vec![0.0; d_ff];
            math::matmul_nn(&xn2, layer.w1.data(), 1, d, d_ff, &mut h1);
            for hj in h1.iter_mut() {
                *hj = math::gelu(*hj);
            }
            let mut ff = vec![0.0; d];
            math::matmul_nn(&h1, layer.w2.data(), 1, d_ff, d, &mut ff);
            for (xi, fi) in x.iter_mut().zip(&ff) {
                *xi += fi;
            }
        }
        st.pos += 1;

        let mut normed = vec![0.0; d];
        math::rmsnorm_row(&x, self.final_gain.data(), &mut normed);
        let mut logits = vec![0.0; self.config.vocab_size];
        math::matmul_nn(&normed, self.lm_head.data(), 1, d, self.config.vocab_size, &mut logits);
        Ok(DecodeRow { hidden: x, logits })
    }
}

/// Per-layer key/value caches for incremental decoding.
#[derive(Debug, Clone)]
pub struct DecodeState {
    k_cache: Vec<Vec<f64>>,
    v_cache: Vec<Vec<f64>>,
    pos: usize,
}

impl DecodeState {
    pub fn len(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }
}

/// One incremental decode step: hidden row (pre-final-norm) and logits.
#[derive(Debug, Clone)]
pub struct DecodeRow {
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

// ── checkpoint io ──────────────────────────────────────────────────────────

/// Writes magic, config header (fixed-order little-endian u32), then every
/// parameter blob as little-endian f64 in canonical order.
pub fn save_checkpoint(model: &TransformerModel, path: &Path) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    for f in model.config().header_fields() {
        w.write_all(&f.to_le_bytes())?;
    }
    for (_, t) in model.visit_params() {
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| ModelError::Truncated)?;
    Ok(u32::from_le_bytes(buf))
}

/// Loads a checkpoint. When `expected` is given, every header field must
/// match it exactly.
pub fn load_checkpoint(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<TransformerModel, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| ModelError::Truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic);
    }
    const FIELDS: [&str; 8] = [
        "vocab_size",
        "d_model",
        "n_layers",
        "n_heads",
        "d_ff",
        "max_seq_len",
        "lora_rank",
        "lora_alpha",
    ];
    let mut raw = [0u32; 8];
    for v in raw.iter_mut() {
        *v = read_u32(&mut r)?;
    }
    if let Some(exp) = expected {
        for (i, (&found, &want)) in raw.iter().zip(exp.header_fields().iter()).enumerate() {
            if found != want {
                return Err(ModelError::ConfigMismatch {
                    field: FIELDS[i],
                    expected: want,
                    found,
                });
            }
        }
    }
    let config = ModelConfig {
        vocab_size: raw[0] as usize,
        d_model: raw[1] as usize,
        n_layers: raw[2] as usize,
        n_heads: raw[3] as usize,
        d_ff: raw[4] as usize,
        max_seq_len: raw[5] as usize,
        lora_rank: raw[6] as usize,
        lora_alpha: raw[7],
    };
    let mut model = TransformerModel::init(config, 0)?;
    for (_, t) in model.visit_params_mut() {
        let mut buf = [0u8; 8];
        for v in t.data_mut() {
            r.read_exact(&mut buf).map_err(|_| ModelError::Truncated)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(model),
        _ => Err(ModelError::TrailingBytes),
    }
}
