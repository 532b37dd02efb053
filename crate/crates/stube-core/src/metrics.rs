//! Evaluation quantities: normalized prediction error, its accuracy
//! transform, decoding fidelity (top-1 agreement, top-5 Jaccard, KL), step
//! retrieval against the full eval pool, and error-detection AUC.
//!
//! Everything here is pure over dumped trajectories plus an optional
//! model for the decoding head, so evaluations never rerun training.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::model::{ModelError, TransformerModel};
use crate::predict::{
    build_pairs, eval_linear_mse, eval_mlp_mse, linear_predict, mlp_predict, MlpPredictor,
    MseReport, PredictError, PredictionPair,
};
use crate::trajectory::{average_ranks, PerpScores, Trajectory, TrajectoryError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no valid prediction pairs")]
    NoValidPairs,
    #[error("retrieval pool has {got} entries, need at least 3")]
    PoolTooSmall { got: usize },
    #[error("labels contain a single class; AUC undefined")]
    SingleClass,
    #[error("distribution lengths differ: {lhs} vs {rhs}")]
    LengthMismatch { lhs: usize, rhs: usize },
    #[error("bad input: {0}")]
    BadInput(String),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

/// Which skip predictor to evaluate.
#[derive(Debug, Clone, Copy)]
pub enum SkipPredictor<'a> {
    Linear,
    Mlp(&'a MlpPredictor),
}

impl SkipPredictor<'_> {
    fn predict(&self, pair: &PredictionPair) -> Result<Vec<f64>, PredictError> {
        match self {
            SkipPredictor::Linear => Ok(linear_predict(&pair.z_cur, &pair.z_prev, pair.m)),
            SkipPredictor::Mlp(p) => mlp_predict(p, &pair.z_cur, &pair.z_prev, pair.m),
        }
    }
}

/// Mean over valid (trajectory, k) pairs of
/// ||zhat_{k+m} - z_{k+m}||^2 / ||z_{k+m}||^2.
pub fn prediction_mse(
    trajectories: &[Trajectory],
    m: usize,
    predictor: SkipPredictor<'_>,
) -> Result<MseReport, MetricsError> {
    let pairs = build_pairs(trajectories, m)?;
    let report = match predictor {
        SkipPredictor::Linear => eval_linear_mse(&pairs),
        SkipPredictor::Mlp(p) => eval_mlp_mse(&pairs, p),
    };
    report.map_err(|e| match e {
        PredictError::NoValidPairs => MetricsError::NoValidPairs,
        other => MetricsError::Predict(other),
    })
}

/// Accuracy transform of a normalized MSE: max(0, 1 - sqrt(mse)).
pub fn accuracy_from_mse(mse: f64) -> f64 {
    debug_assert!(mse >= 0.0);
    (1.0 - mse.sqrt()).max(0.0)
}

/// KL(q || p) in nats. Zero q entries contribute nothing; tiny negative
/// rounding residue is clamped to zero.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> Result<f64, MetricsError> {
    if q.len() != p.len() {
        return Err(MetricsError::LengthMismatch { lhs: q.len(), rhs: p.len() });
    }
    let mut sum = 0.0;
    for (&qi, &pi) in q.iter().zip(p) {
        if qi > 0.0 {
            if pi <= 0.0 {
                return Err(MetricsError::BadInput(
                    "q places mass where p has none".into(),
                ));
            }
            sum += qi * (qi / pi).ln();
        }
    }
    Ok(sum.max(0.0))
}

/// Argmax with ties broken toward the lowest index.
fn top1(p: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// The k most probable token ids, ties broken toward the lowest id.
fn top_k_ids(p: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let sa: std::collections::BTreeSet<usize> = a.iter().copied().collect();
    let sb: std::collections::BTreeSet<usize> = b.iter().copied().collect();
    let inter = sa.intersection(&sb).count() as f64;
    let union = sa.union(&sb).count() as f64;
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub top1_agreement: f64,
    pub top5_jaccard: f64,
    pub mean_kl: f64,
    pub n_pairs: usize,
}

/// Decodes both the predicted and the actual state at k+m through the
/// model's output head and compares the next-token distributions.
pub fn decoding_fidelity(
    model: &TransformerModel,
    trajectories: &[Trajectory],
    m: usize,
    predictor: SkipPredictor<'_>,
) -> Result<FidelityReport, MetricsError> {
    let pairs = build_pairs(trajectories, m)?;
    if pairs.is_empty() {
        return Err(MetricsError::NoValidPairs);
    }
    let mut agree = 0usize;
    let mut jac = 0.0;
    let mut kl = 0.0;
    for pair in &pairs {
        let zhat = predictor.predict(pair)?;
        let p = model.decode_head(&zhat)?; // predicted distribution
        let q = model.decode_head(&pair.target)?; // actual distribution
        if top1(&p) == top1(&q) {
            agree += 1;
        }
        jac += jaccard(&top_k_ids(&p, 5), &top_k_ids(&q, 5));
        kl += kl_divergence(&q, &p)?;
    }
    let n = pairs.len() as f64;
    Ok(FidelityReport {
        top1_agreement: agree as f64 / n,
        top5_jaccard: jac / n,
        mean_kl: kl / n,
        n_pairs: pairs.len(),
    })
}

/// Every step-boundary embedding in the eval set, keyed by
/// (sequence_id, position).
pub struct EmbeddingPool {
    entries: Vec<(u32, usize)>,
    points: Vec<Vec<f64>>,
}

impl EmbeddingPool {
    pub fn from_trajectories(trajectories: &[Trajectory]) -> Self {
        let mut keyed: Vec<((u32, usize), Vec<f64>)> = Vec::new();
        for t in trajectories {
            for k in 0..=t.k() {
                keyed.push(((t.sequence_id, k), t.point(k).to_vec()));
            }
        }
        keyed.sort_by_key(|(key, _)| *key);
        let entries = keyed.iter().map(|(key, _)| *key).collect();
        let points = keyed.into_iter().map(|(_, p)| p).collect();
        EmbeddingPool { entries, points }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub accuracy: f64,
    pub n_pairs: usize,
}

/// Nearest-neighbor retrieval of the predicted state over the full pool,
/// excluding the two source points (z_k and z_{k-1}) by identity. A pair
/// counts as a hit iff the nearest remaining entry is exactly
/// (sequence_id, k+m). Distance ties go to the lowest (sequence_id,
/// position), which is the pool order.
pub fn step_retrieval(
    pool: &EmbeddingPool,
    trajectories: &[Trajectory],
    m: usize,
    predictor: SkipPredictor<'_>,
) -> Result<RetrievalReport, MetricsError> {
    if pool.len() < 3 {
        return Err(MetricsError::PoolTooSmall { got: pool.len() });
    }
    let pairs = build_pairs(trajectories, m)?;
    if pairs.is_empty() {
        return Err(MetricsError::NoValidPairs);
    }
    let mut hits = 0usize;
    for pair in &pairs {
        let zhat = predictor.predict(pair)?;
        let skip_a = (pair.sequence_id, pair.k);
        let skip_b = (pair.sequence_id, pair.k - 1);
        let want = (pair.sequence_id, pair.k + pair.m);
        let mut best: Option<(f64, (u32, usize))> = None;
        for (key, point) in pool.entries.iter().zip(&pool.points) {
            if *key == skip_a || *key == skip_b {
                continue;
            }
            let mut d2 = 0.0;
            for (a, b) in zhat.iter().zip(point) {
                let d = a - b;
                d2 += d * d;
            }
            // strict < keeps the earliest (lowest-key) entry on ties
            if best.map_or(true, |(bd, _)| d2 < bd) {
                best = Some((d2, *key));
            }
        }
        if best.map(|(_, key)| key) == Some(want) {
            hits += 1;
        }
    }
    Ok(RetrievalReport { accuracy: hits as f64 / pairs.len() as f64, n_pairs: pairs.len() })
}

/// One trajectory's contribution to error detection: its maximal
/// perpendicular score, where that maximum sits, and the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionItem {
    pub score: f64,
    pub predicted_step: usize,
    pub is_correct: bool,
    pub first_error_step: Option<usize>,
}

/// Builds a detection item from per-position perpendicular scores; None
/// when the trajectory has no scoreable interior positions.
pub fn detection_item(perp: &PerpScores, label: &Label) -> Option<DetectionItem> {
    let mut best: Option<(f64, usize)> = None;
    for (&pos, &v) in perp.positions.iter().zip(&perp.values) {
        if best.map_or(true, |(bv, _)| v > bv) {
            best = Some((v, pos));
        }
    }
    best.map(|(score, predicted_step)| DetectionItem {
        score,
        predicted_step,
        is_correct: label.is_correct,
        first_error_step: label.first_error_step,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub auc: f64,
    pub localization_accuracy: f64,
    pub n_correct: usize,
    pub n_incorrect: usize,
}

/// Rank-based (Mann-Whitney) AUC of the max-perp score against the labels,
/// with incorrect trajectories as the positive class, plus the fraction of
/// incorrect trajectories whose score peaks exactly at the first wrong
/// step.
pub fn error_detection_auc(items: &[DetectionItem]) -> Result<DetectionReport, MetricsError> {
    let n_pos = items.iter().filter(|i| !i.is_correct).count();
    let n_neg = items.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let scores: Vec<f64> = items.iter().map(|i| i.score).collect();
    let ranks = match average_ranks(&scores) {
        Ok(r) => r,
        // all scores equal: every ordering is a tie, AUC is exactly half
        Err(TrajectoryError::ConstantInput) => vec![(items.len() + 1) as f64 / 2.0; items.len()],
        Err(e) => return Err(e.into()),
    };
    let rank_sum_pos: f64 = items
        .iter()
        .zip(&ranks)
        .filter(|(i, _)| !i.is_correct)
        .map(|(_, &r)| r)
        .sum();
    let auc = (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64;

    let mut localized = 0usize;
    for item in items.iter().filter(|i| !i.is_correct) {
        if item.first_error_step == Some(item.predicted_step) {
            localized += 1;
        }
    }
    Ok(DetectionReport {
        auc,
        localization_accuracy: localized as f64 / n_pos as f64,
        n_correct: n_neg,
        n_incorrect: n_pos,
    })
}

// ── report document ────────────────────────────────────────────────────────

/// Per-skip-distance block of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerSkip {
    pub m: usize,
    pub linear_mse: f64,
    pub mlp_mse: f64,
    pub ratio: f64,
    pub ratio_degenerate: bool,
    pub accuracy: f64,
    pub retrieval: f64,
    pub top1_agreement: f64,
    pub top5_jaccard: f64,
    pub mean_kl: f64,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub n_trajectories: usize,
    pub n_pairs: usize,
    pub degenerate_positions: usize,
    pub skipped_targets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSection {
    pub auc: f64,
    pub localization_accuracy: f64,
    pub n_correct: usize,
    pub n_incorrect: usize,
}

/// The full per-variant evaluation document, serialized as one JSON file
/// and renderable as markdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub per_m: Vec<PerSkip>,
    pub mean_cos: Option<f64>,
    pub mean_perp: Option<f64>,
    /// Greedy exact-match accuracy on held-out questions, when measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_match: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionSection>,
    pub counts: ReportCounts,
    /// Methodology flags the numbers depend on.
    pub notes: Vec<String>,
}

fn fmt(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 0.001 && v.abs() < 1000.0 {
        format!("{v:.4}")
    } else {
        format!("{v:.3e}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), fmt)
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Markdown rendering of one variant's metrics.
    pub fn render_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# Variant {}\n\n", self.variant));
        for note in &self.notes {
            out.push_str(&format!("> {note}\n"));
        }
        out.push('\n');
        out.push_str("| m | linear MSE | MLP MSE | ratio | accuracy | retrieval | top-1 | top-5 J | KL | pairs |\n");
        out.push_str("|---|-----------|---------|-------|----------|-----------|-------|---------|----|-------|\n");
        for row in &self.per_m {
            let ratio = if row.ratio_degenerate {
                format!("{} (degenerate)", fmt(row.ratio))
            } else {
                fmt(row.ratio)
            };
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
                row.m,
                fmt(row.linear_mse),
                fmt(row.mlp_mse),
                ratio,
                fmt(row.accuracy),
                fmt(row.retrieval),
                fmt(row.top1_agreement),
                fmt(row.top5_jaccard),
                fmt(row.mean_kl),
                row.n_pairs,
            ));
        }
        out.push('\n');
        out.push_str(&format!(
            "Mean cos: {}  \nMean perp: {}\n",
            fmt_opt(self.mean_cos),
            fmt_opt(self.mean_perp)
        ));
        if let Some(em) = self.exact_match {
            out.push_str(&format!("Exact match (greedy decode): {}\n", fmt(em)));
        }
        if let Some(det) = &self.detection {
            out.push_str(&format!(
                "\nError detection: AUC {} | localization {} ({} correct / {} incorrect)\n",
                fmt(det.auc),
                fmt(det.localization_accuracy),
                det.n_correct,
                det.n_incorrect,
            ));
        }
        out.push_str(&format!(
            "\nCounts: {} trajectories, {} pairs, {} degenerate positions, {} skipped targets\n",
            self.counts.n_trajectories,
            self.counts.n_pairs,
            self.counts.degenerate_positions,
            self.counts.skipped_targets,
        ));
        out
    }
}

/// Cross-variant comparison tables: prediction error with improvement
/// factors against the frozen base, accuracy transform, decoding fidelity
/// per m, MLP/linear ratio trend, and error detection.
pub fn render_comparison(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    out.push_str("# Variant comparison\n\n");
    let mut notes: Vec<&str> = Vec::new();
    for r in reports {
        for n in &r.notes {
            if !notes.contains(&n.as_str()) {
                notes.push(n);
            }
        }
    }
    for n in notes {
        out.push_str(&format!("> {n}\n"));
    }
    out.push('\n');

    let base_mse1 = reports
        .iter()
        .find(|r| r.variant == "b1")
        .and_then(|r| r.per_m.iter().find(|p| p.m == 1))
        .map(|p| p.linear_mse);

    out.push_str("## Prediction error (linear extrapolation)\n\n");
    out.push_str("| variant | MSE m=1 | MSE m=2 | MSE m=3 | mean cos | mean perp | x vs B1 (m=1) |\n");
    out.push_str("|---------|---------|---------|---------|----------|-----------|---------------|\n");
    for r in reports {
        let mse = |m: usize| r.per_m.iter().find(|p| p.m == m).map(|p| p.linear_mse);
        let factor = match (base_mse1, mse(1)) {
            (Some(b), Some(v)) if v > 0.0 => fmt(b / v),
            _ => "-".into(),
        };
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} |\n",
            r.variant,
            fmt_opt(mse(1)),
            fmt_opt(mse(2)),
            fmt_opt(mse(3)),
            fmt_opt(r.mean_cos),
            fmt_opt(r.mean_perp),
            factor,
        ));
    }

    out.push_str("\n## Accuracy (1 - sqrt(MSE)) and task exact match\n\n");
    out.push_str("| variant | acc m=1 | acc m=2 | acc m=3 | exact match |\n");
    out.push_str("|---------|---------|---------|---------|-------------|\n");
    for r in reports {
        let acc = |m: usize| r.per_m.iter().find(|p| p.m == m).map(|p| p.accuracy);
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            r.variant,
            fmt_opt(acc(1)),
            fmt_opt(acc(2)),
            fmt_opt(acc(3)),
            fmt_opt(r.exact_match),
        ));
    }

    out.push_str("\n## Decoding fidelity (from predicted states)\n\n");
    out.push_str("| variant | m | retrieval | top-1 | top-5 J | KL |\n");
    out.push_str("|---------|---|-----------|-------|---------|----|\n");
    for r in reports {
        for row in &r.per_m {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} |\n",
                r.variant,
                row.m,
                fmt(row.retrieval),
                fmt(row.top1_agreement),
                fmt(row.top5_jaccard),
                fmt(row.mean_kl),
            ));
        }
    }

    out.push_str("\n## MLP/linear ratio by skip distance\n\n");
    out.push_str("| variant | ratio m=1 | ratio m=2 | ratio m=3 | trend |\n");
    out.push_str("|---------|-----------|-----------|-----------|-------|\n");
    for r in reports {
        let ratio = |m: usize| r.per_m.iter().find(|p| p.m == m).map(|p| p.ratio);
        let trend = match (ratio(1), ratio(3)) {
            (Some(a), Some(b)) if a > 0.0 => {
                let change = (b - a) / a;
                if change <= -0.30 {
                    "strong down".to_string()
                } else if change.abs() < 0.15 {
                    "flat".to_string()
                } else if change < 0.0 {
                    "down".to_string()
                } else {
                    "up".to_string()
                }
            }
            _ => "-".to_string(),
        };
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            r.variant,
            fmt_opt(ratio(1)),
            fmt_opt(ratio(2)),
            fmt_opt(ratio(3)),
            trend,
        ));
    }

    out.push_str("\n## Error detection (negative-finding report)\n\n");
    out.push_str("| variant | AUC | localization | correct | incorrect |\n");
    out.push_str("|---------|-----|--------------|---------|-----------|\n");
    for r in reports {
        match &r.detection {
            Some(d) => out.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                r.variant,
                fmt(d.auc),
                fmt(d.localization_accuracy),
                d.n_correct,
                d.n_incorrect,
            )),
            None => out.push_str(&format!("| {} | - | - | - | - |\n", r.variant)),
        }
    }
    out
}
