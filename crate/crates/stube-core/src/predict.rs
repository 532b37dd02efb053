//! Skip predictors: where will the hidden state be m step boundaries from
//! now?
//!
//! Two predictors answer that question after the fact, from dumped
//! trajectories. The linear one extrapolates the last displacement,
//! zhat_{k+m} = z_k + m (z_k - z_{k-1}), and has no parameters. The MLP one
//! adds a learned correction g(concat(z_k, z_{k-1})) on top of the same
//! extrapolation; its final layer starts at exactly zero, so an untrained
//! MLP is the linear predictor, bit for bit.
//!
//! All reported errors use the normalized form
//! ||zhat - z||^2 / ||z||^2, averaged over prediction pairs.

use std::fs;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::optim::{Adam, AdamConfig, OptimError, ParamGrad};
use crate::rng;
use crate::tensor::math;
use crate::tensor::{Tape, Tensor, TensorError, Value};
use crate::trajectory::Trajectory;

pub const PREDICTOR_MAGIC: &[u8; 5] = b"SKIP1";

/// Targets with squared norm below this are skipped by the normalized MSE
/// (the ratio would be meaningless).
pub const DEGENERATE_TARGET_SQ: f64 = 1e-24;

/// Linear MSE below this makes the MLP/linear ratio numerically
/// meaningless; such ratios are reported as 1.0 and flagged.
pub const DEGENERATE_LINEAR_MSE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("need at least {need} prediction pairs, got {got}")]
    TooFewPairs { got: usize, need: usize },
    #[error("state dimension {got} does not match predictor dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("predictor was trained for skip {trained_for}, asked for {requested}")]
    WrongSkip { trained_for: usize, requested: usize },
    #[error("pairs mix dimensions or skip distances")]
    MixedPairs,
    #[error("cannot split: all pairs come from one sequence")]
    SplitDegenerate,
    #[error("no valid pairs after skipping degenerate targets")]
    NoValidPairs,
    #[error("skip distance must be >= 1")]
    ZeroSkip,
    #[error("bad hyperparameters: {0}")]
    BadConfig(String),
    #[error("tensor error: {0}")]
    Tensor(#[from] TensorError),
    #[error("optimizer error: {0}")]
    Optim(#[from] OptimError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad predictor file magic")]
    BadMagic,
    #[error("predictor file truncated")]
    Truncated,
    #[error("predictor file has trailing bytes")]
    TrailingBytes,
}

/// One supervised example: states at boundaries k-1 and k, target at k+m.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionPair {
    pub z_prev: Vec<f64>,
    pub z_cur: Vec<f64>,
    pub target: Vec<f64>,
    pub sequence_id: u32,
    pub k: usize,
    pub m: usize,
}

/// All (k, k+m) pairs with k >= 1 and k+m <= K, from every trajectory long
/// enough to supply them.
pub fn build_pairs(trajectories: &[Trajectory], m: usize) -> Result<Vec<PredictionPair>, PredictError> {
    if m == 0 {
        return Err(PredictError::ZeroSkip);
    }
    let mut out = Vec::new();
    for traj in trajectories {
        let k_total = traj.k();
        if k_total < m + 1 {
            continue;
        }
        for k in 1..=k_total - m {
            out.push(PredictionPair {
                z_prev: traj.point(k - 1).to_vec(),
                z_cur: traj.point(k).to_vec(),
                target: traj.point(k + m).to_vec(),
                sequence_id: traj.sequence_id,
                k,
                m,
            });
        }
    }
    Ok(out)
}

/// zhat_{k+m} = z_k + m (z_k - z_{k-1}).
pub fn linear_predict(z_cur: &[f64], z_prev: &[f64], m: usize) -> Vec<f64> {
    let mf = m as f64;
    z_cur
        .iter()
        .zip(z_prev)
        .map(|(&zk, &zp)| zk + mf * (zk - zp))
        .collect()
}

/// Residual MLP over concat(z_cur, z_prev): widths [2d, H, H, d], gelu
/// between layers, final layer zero-initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpPredictor {
    pub m: usize,
    pub dim: usize,
    pub hidden: usize,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    w3: Tensor,
    b3: Tensor,
}

impl MlpPredictor {
    pub fn init(dim: usize, hidden: usize, m: usize, seed: u64) -> Result<Self, PredictError> {
        if dim == 0 || hidden == 0 {
            return Err(PredictError::BadConfig("dim and hidden must be nonzero".into()));
        }
        if m == 0 {
            return Err(PredictError::ZeroSkip);
        }
        let gauss = |shape: Vec<usize>, std: f64, tag: u64| {
            let mut r = rng::stream(&[0x5C1F, seed, m as u64, tag]);
            let mut data = vec![0.0; shape.iter().product()];
            rng::fill_normal(&mut r, std, &mut data);
            Tensor::new(shape, data).unwrap().with_grad()
        };
        Ok(MlpPredictor {
            m,
            dim,
            hidden,
            w1: gauss(vec![2 * dim, hidden], (2.0 / (2 * dim) as f64).sqrt(), 1),
            b1: Tensor::zeros(vec![hidden]).with_grad(),
            w2: gauss(vec![hidden, hidden], (2.0 / hidden as f64).sqrt(), 2),
            b2: Tensor::zeros(vec![hidden]).with_grad(),
            // exactly zero so the fresh predictor is the linear one
            w3: Tensor::zeros(vec![hidden, dim]).with_grad(),
            b3: Tensor::zeros(vec![dim]).with_grad(),
        })
    }

    fn params_mut(&mut self) -> [&mut Tensor; 6] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.w3, &mut self.b3]
    }

    fn params(&self) -> [&Tensor; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    /// The learned correction for one pair; zero for a fresh predictor.
    pub fn correction(&self, z_cur: &[f64], z_prev: &[f64]) -> Result<Vec<f64>, PredictError> {
        if z_cur.len() != self.dim || z_prev.len() != self.dim {
            return Err(PredictError::DimMismatch {
                expected: self.dim,
                got: z_cur.len().max(z_prev.len()),
            });
        }
        let mut x = Vec::with_capacity(2 * self.dim);
        x.extend_from_slice(z_cur);
        x.extend_from_slice(z_prev);

        let mut h1 = vec![0.0; self.hidden];
        math::matmul_nn(&x, self.w1.data(), 1, 2 * self.dim, self.hidden, &mut h1);
        for (h, b) in h1.iter_mut().zip(self.b1.data()) {
            *h = math::gelu(*h + b);
        }
        let mut h2 = vec![0.0; self.hidden];
        math::matmul_nn(&h1, self.w2.data(), 1, self.hidden, self.hidden, &mut h2);
        for (h, b) in h2.iter_mut().zip(self.b2.data()) {
            *h = math::gelu(*h + b);
        }
        let mut g = vec![0.0; self.dim];
        math::matmul_nn(&h2, self.w3.data(), 1, self.hidden, self.dim, &mut g);
        for (o, b) in g.iter_mut().zip(self.b3.data()) {
            *o += b;
        }
        Ok(g)
    }

    /// Batched tape forward used by training: rows of `x` are
    /// concat(z_cur, z_prev); returns the correction matrix [n, dim].
    fn correction_on(&self, tape: &mut Tape, x: Value) -> Result<(Value, Vec<Value>), PredictError> {
        let w1 = tape.leaf(&self.w1);
        let b1 = tape.leaf(&self.b1);
        let w2 = tape.leaf(&self.w2);
        let b2 = tape.leaf(&self.b2);
        let w3 = tape.leaf(&self.w3);
        let b3 = tape.leaf(&self.b3);
        let h1 = tape.matmul(x, w1)?;
        let h1 = tape.add(h1, b1)?;
        let h1 = tape.gelu(h1);
        let h2 = tape.matmul(h1, w2)?;
        let h2 = tape.add(h2, b2)?;
        let h2 = tape.gelu(h2);
        let g = tape.matmul(h2, w3)?;
        let g = tape.add(g, b3)?;
        Ok((g, vec![w1, b1, w2, b2, w3, b3]))
    }

    pub fn save(&self, path: &Path) -> Result<(), PredictError> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(PREDICTOR_MAGIC);
        for v in [self.m as u32, self.dim as u32, self.hidden as u32] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for p in self.params() {
            for &x in p.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PredictError> {
        let bytes = fs::read(path)?;
        if bytes.len() < 5 || &bytes[..5] != PREDICTOR_MAGIC {
            return Err(PredictError::BadMagic);
        }
        let mut pos = 5usize;
        let read_u32 = |pos: &mut usize| -> Result<u32, PredictError> {
            let end = *pos + 4;
            let chunk = bytes.get(*pos..end).ok_or(PredictError::Truncated)?;
            *pos = end;
            Ok(u32::from_le_bytes(chunk.try_into().unwrap()))
        };
        let m = read_u32(&mut pos)? as usize;
        let dim = read_u32(&mut pos)? as usize;
        let hidden = read_u32(&mut pos)? as usize;
        let mut out = MlpPredictor::init(dim, hidden, m.max(1), 0)?;
        if m == 0 {
            return Err(PredictError::ZeroSkip);
        }
        for p in out.params_mut() {
            for x in p.data_mut() {
                let end = pos + 8;
                let chunk = bytes.get(pos..end).ok_or(PredictError::Truncated)?;
                *x = f64::from_le_bytes(chunk.try_into().unwrap());
                pos = end;
            }
        }
        if pos != bytes.len() {
            return Err(PredictError::TrailingBytes);
        }
        Ok(out)
    }
}

/// Linear extrapolation plus the learned correction. Refuses pairs whose
/// skip distance differs from the one the predictor was trained for.
pub fn mlp_predict(
    p: &MlpPredictor,
    z_cur: &[f64],
    z_prev: &[f64],
    m: usize,
) -> Result<Vec<f64>, PredictError> {
    if m != p.m {
        return Err(PredictError::WrongSkip { trained_for: p.m, requested: m });
    }
    let mut out = linear_predict(z_cur, z_prev, m);
    let g = p.correction(z_cur, z_prev)?;
    for (o, c) in out.iter_mut().zip(g) {
        *o += c;
    }
    Ok(out)
}

/// Normalized MSE over a pair set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseReport {
    pub mse: f64,
    pub n_pairs: usize,
    pub n_skipped: usize,
}

fn eval_mse<F>(pairs: &[PredictionPair], mut predict: F) -> Result<MseReport, PredictError>
where
    F: FnMut(&PredictionPair) -> Result<Vec<f64>, PredictError>,
{
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut skipped = 0usize;
    for pair in pairs {
        let t2 = math::dot(&pair.target, &pair.target);
        if t2 < DEGENERATE_TARGET_SQ {
            skipped += 1;
            continue;
        }
        let pred = predict(pair)?;
        if pred.len() != pair.target.len() {
            return Err(PredictError::DimMismatch { expected: pair.target.len(), got: pred.len() });
        }
        let mut d2 = 0.0;
        for (p, t) in pred.iter().zip(&pair.target) {
            let d = p - t;
            d2 += d * d;
        }
        sum += d2 / t2;
        n += 1;
    }
    if n == 0 {
        return Err(PredictError::NoValidPairs);
    }
    Ok(MseReport { mse: sum / n as f64, n_pairs: n, n_skipped: skipped })
}

pub fn eval_linear_mse(pairs: &[PredictionPair]) -> Result<MseReport, PredictError> {
    eval_mse(pairs, |p| Ok(linear_predict(&p.z_cur, &p.z_prev, p.m)))
}

pub fn eval_mlp_mse(pairs: &[PredictionPair], p: &MlpPredictor) -> Result<MseReport, PredictError> {
    eval_mse(pairs, |pair| mlp_predict(p, &pair.z_cur, &pair.z_prev, pair.m))
}

/// Deterministic split of pair indices by sequence id, so no trajectory
/// contributes to both sides.
pub fn split_by_sequence(
    pairs: &[PredictionPair],
    heldout_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), PredictError> {
    let mut ids: Vec<u32> = pairs.iter().map(|p| p.sequence_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(PredictError::SplitDegenerate);
    }
    let mut r = rng::stream(&[0x5B17, seed]);
    for i in (1..ids.len()).rev() {
        let j = r.gen_range(0..=i);
        ids.swap(i, j);
    }
    let n_held = ((ids.len() as f64 * heldout_fraction).round() as usize).clamp(1, ids.len() - 1);
    let held: std::collections::BTreeSet<u32> = ids[..n_held].iter().copied().collect();
    let mut train_idx = Vec::new();
    let mut held_idx = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        if held.contains(&p.sequence_id) {
            held_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    Ok((train_idx, held_idx))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpTrainConfig {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    /// Deterministic cap on the number of training pairs, to bound eval
    /// cost on a single core; None trains on everything.
    pub max_train_pairs: Option<usize>,
    pub init_seed: u64,
}

impl MlpTrainConfig {
    pub fn for_dim(dim: usize) -> Self {
        MlpTrainConfig {
            hidden: 2 * dim,
            lr: 1e-3,
            epochs: 200,
            patience: 20,
            max_train_pairs: None,
            init_seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct MlpTraining {
    pub predictor: MlpPredictor,
    pub train_mse: f64,
    pub heldout_mse: f64,
    pub linear_train_mse: f64,
    pub linear_heldout_mse: f64,
    pub epochs_run: usize,
}

const MIN_PAIRS: usize = 50;

/// Batched constants for one side of the split.
struct Batch {
    n: usize,
    x: Vec<f64>,       // [n, 2d] concat(z_cur, z_prev)
    base: Vec<f64>,    // [n, d] linear predictions
    target: Vec<f64>,  // [n, d]
    weight: Vec<f64>,  // [n, d] rows 1/(N_valid * ||target||^2), 0 when skipped
}

fn batch_of(pairs: &[PredictionPair], idx: &[usize], dim: usize) -> Batch {
    let n = idx.len();
    let mut b = Batch {
        n,
        x: Vec::with_capacity(n * 2 * dim),
        base: Vec::with_capacity(n * dim),
        target: Vec::with_capacity(n * dim),
        weight: vec![0.0; n * dim],
    };
    let mut valid = Vec::with_capacity(n);
    for &i in idx {
        let p = &pairs[i];
        b.x.extend_from_slice(&p.z_cur);
        b.x.extend_from_slice(&p.z_prev);
        b.base.extend_from_slice(&linear_predict(&p.z_cur, &p.z_prev, p.m));
        b.target.extend_from_slice(&p.target);
        let t2 = math::dot(&p.target, &p.target);
        valid.push(if t2 < DEGENERATE_TARGET_SQ { None } else { Some(1.0 / t2) });
    }
    let n_valid = valid.iter().flatten().count().max(1) as f64;
    for (row, w) in valid.iter().enumerate() {
        if let Some(w) = w {
            let scaled = w / n_valid;
            b.weight[row * dim..(row + 1) * dim].fill(scaled);
        }
    }
    b
}

/// Trains one MLP for skip distance m. Full-batch adaptive-moment descent
/// on the normalized MSE; early stop on held-out MSE with the configured
/// patience; the best-by-heldout snapshot is returned (epoch 0, the pure
/// linear predictor, is always a candidate).
pub fn train_mlp(
    pairs: &[PredictionPair],
    m: usize,
    split_seed: u64,
    cfg: &MlpTrainConfig,
) -> Result<MlpTraining, PredictError> {
    if pairs.len() < MIN_PAIRS {
        return Err(PredictError::TooFewPairs { got: pairs.len(), need: MIN_PAIRS });
    }
    let dim = pairs[0].target.len();
    if pairs.iter().any(|p| {
        p.m != m || p.target.len() != dim || p.z_cur.len() != dim || p.z_prev.len() != dim
    }) {
        return Err(PredictError::MixedPairs);
    }
    if cfg.lr <= 0.0 || cfg.hidden == 0 {
        return Err(PredictError::BadConfig("lr and hidden must be positive".into()));
    }

    let (mut train_idx, held_idx) = split_by_sequence(pairs, 0.2, split_seed)?;
    if let Some(cap) = cfg.max_train_pairs {
        if train_idx.len() > cap {
            let mut r = rng::stream(&[0x5B18, split_seed]);
            for i in (1..train_idx.len()).rev() {
                let j = r.gen_range(0..=i);
                train_idx.swap(i, j);
            }
            train_idx.truncate(cap);
            train_idx.sort_unstable();
        }
    }
    let train_pairs: Vec<PredictionPair> = train_idx.iter().map(|&i| pairs[i].clone()).collect();
    let held_pairs: Vec<PredictionPair> = held_idx.iter().map(|&i| pairs[i].clone()).collect();
    let batch = batch_of(pairs, &train_idx, dim);

    let mut p = MlpPredictor::init(dim, cfg.hidden, m, cfg.init_seed)?;
    let linear_train = eval_linear_mse(&train_pairs)?.mse;
    let linear_held = eval_linear_mse(&held_pairs)?.mse;

    let mut best = p.clone();
    let mut best_held = linear_held; // epoch 0: MLP == linear exactly
    let mut since_best = 0usize;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr))?;
    let mut epochs_run = 0usize;

    for _epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let x = tape.constant(vec![batch.n, 2 * dim], batch.x.clone())?;
        let base = tape.constant(vec![batch.n, dim], batch.base.clone())?;
        let target = tape.constant(vec![batch.n, dim], batch.target.clone())?;
        let weight = tape.constant(vec![batch.n, dim], batch.weight.clone())?;
        let (g, leaves) = p.correction_on(&mut tape, x)?;
        let pred = tape.add(base, g)?;
        let diff = tape.sub(pred, target)?;
        let sq = tape.mul(diff, diff)?;
        let weighted = tape.mul(sq, weight)?;
        let loss = tape.sum_all(weighted);
        tape.backward(loss)?;

        let grads: Vec<Vec<f64>> =
            leaves.iter().map(|&v| tape.grad(v).unwrap_or(&[]).to_vec()).collect();
        let mut slots: Vec<ParamGrad<'_>> = Vec::with_capacity(6);
        for (t, gbuf) in p.params_mut().into_iter().zip(&grads) {
            slots.push(ParamGrad { data: t.data_mut(), grad: gbuf });
        }
        adam.step(&mut slots)?;
        epochs_run += 1;

        let held_mse = eval_mlp_mse(&held_pairs, &p)?.mse;
        if held_mse < best_held {
            best_held = held_mse;
            best = p.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    let train_mse = eval_mlp_mse(&train_pairs, &best)?.mse;
    Ok(MlpTraining {
        predictor: best,
        train_mse,
        heldout_mse: best_held,
        linear_train_mse: linear_train,
        linear_heldout_mse: linear_held,
        epochs_run,
    })
}

/// One row of the skip-distance study.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RatioPoint {
    pub m: usize,
    pub linear_mse: f64,
    pub mlp_mse: f64,
    pub ratio: f64,
    pub degenerate: bool,
    pub n_pairs: usize,
}

/// Trains one MLP per skip distance and reports held-out linear MSE, MLP
/// MSE, and their ratio. A vanishing linear MSE makes the ratio
/// meaningless; it is pinned to 1.0 and flagged.
pub fn ratio_curve(
    trajectories: &[Trajectory],
    m_list: &[usize],
    split_seed: u64,
    cfg: &MlpTrainConfig,
) -> Result<Vec<RatioPoint>, PredictError> {
    if m_list.is_empty() {
        return Err(PredictError::BadConfig("m_list must be nonempty".into()));
    }
    let mut out = Vec::with_capacity(m_list.len());
    for &m in m_list {
        let pairs = build_pairs(trajectories, m)?;
        let trained = train_mlp(&pairs, m, split_seed, cfg)?;
        let degenerate = trained.linear_heldout_mse < DEGENERATE_LINEAR_MSE;
        let ratio =
            if degenerate { 1.0 } else { trained.heldout_mse / trained.linear_heldout_mse };
        out.push(RatioPoint {
            m,
            linear_mse: trained.linear_heldout_mse,
            mlp_mse: trained.heldout_mse,
            ratio,
            degenerate,
            n_pairs: pairs.len(),
        });
    }
    Ok(out)
}
