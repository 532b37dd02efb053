//! Step-boundary trajectories and their smoothness scores.
//!
//! A trajectory is the (K+1) x d matrix of hidden states collected at the
//! step-marker positions of one sequence, z_0..z_K. Two per-position scores
//! measure how sharply the trajectory turns:
//!
//! * cos score at k (1 <= k <= K-1): 1 - cos(z_k - z_{k-1}, z_{k+1} - z_k),
//!   the same quantity the smoothness training loss averages.
//! * perp score at k: the sine of the angle between the incoming
//!   displacement d_k = z_k - z_{k-1} and the secant s_k = z_{k+1} - z_{k-1},
//!   i.e. the normalized residual of d_k after projecting onto s_k.
//!
//! The final position K has no outgoing displacement; its perp score uses
//! the arriving direction z_{K-1} - z_{K-2} as the reference instead and is
//! reported separately from the interior mean.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::math;

/// Magic prefix of trajectory dump files.
pub const TRAJ_MAGIC: &[u8; 5] = b"TRAJ1";

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("dimension must be nonzero")]
    ZeroDim,
    #[error("point buffer of {len} values is not a multiple of dim {dim}")]
    BadPointBuffer { len: usize, dim: usize },
    #[error("trajectory needs at least one point")]
    Empty,
    #[error("trajectory contains a non-finite value")]
    NonFinite,
    #[error("no step positions given")]
    NoPositions,
    #[error("step position {index} out of range for {bound} rows")]
    PositionOutOfRange { index: usize, bound: usize },
    #[error("step positions must be strictly increasing")]
    PositionsNotIncreasing,
    #[error("rank correlation needs equal-length lists, got {lhs} and {rhs}")]
    LengthMismatch { lhs: usize, rhs: usize },
    #[error("rank correlation needs at least two entries")]
    TooFewEntries,
    #[error("rank correlation undefined for a constant list")]
    ConstantInput,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a trajectory dump (bad magic)")]
    BadMagic,
    #[error("trajectory dump truncated")]
    Truncated,
    #[error("trajectory dump has trailing bytes")]
    TrailingBytes,
    #[error("too many trajectories for the dump format: {0}")]
    TooMany(usize),
}

/// Hidden states z_0..z_K for one sequence, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub sequence_id: u32,
    dim: usize,
    points: Vec<f64>,
}

impl Trajectory {
    pub fn new(sequence_id: u32, dim: usize, points: Vec<f64>) -> Result<Self, TrajectoryError> {
        if dim == 0 {
            return Err(TrajectoryError::ZeroDim);
        }
        if points.is_empty() {
            return Err(TrajectoryError::Empty);
        }
        if points.len() % dim != 0 {
            return Err(TrajectoryError::BadPointBuffer { len: points.len(), dim });
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(TrajectoryError::NonFinite);
        }
        Ok(Trajectory { sequence_id, dim, points })
    }

    /// Number of displacements; the trajectory has k() + 1 points.
    pub fn k(&self) -> usize {
        self.points.len() / self.dim - 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// d_k = z_k - z_{k-1}, valid for 1 <= k <= K.
    pub fn displacement(&self, k: usize) -> Vec<f64> {
        let prev = (k - 1) * self.dim;
        let cur = k * self.dim;
        (0..self.dim)
            .map(|j| self.points[cur + j] - self.points[prev + j])
            .collect()
    }

    /// Scores need at least two displacements.
    pub fn usable_for_scores(&self) -> bool {
        self.k() >= 2
    }
}

/// Pulls the rows at `step_positions` out of a [rows x dim] hidden-state
/// matrix. Positions must be strictly increasing and in range.
pub fn extract_trajectory(
    hidden: &[f64],
    dim: usize,
    step_positions: &[usize],
    sequence_id: u32,
) -> Result<Trajectory, TrajectoryError> {
    if dim == 0 {
        return Err(TrajectoryError::ZeroDim);
    }
    if hidden.len() % dim != 0 {
        return Err(TrajectoryError::BadPointBuffer { len: hidden.len(), dim });
    }
    if step_positions.is_empty() {
        return Err(TrajectoryError::NoPositions);
    }
    let rows = hidden.len() / dim;
    let mut points = Vec::with_capacity(step_positions.len() * dim);
    let mut prev: Option<usize> = None;
    for &p in step_positions {
        if p >= rows {
            return Err(TrajectoryError::PositionOutOfRange { index: p, bound: rows });
        }
        if let Some(q) = prev {
            if p <= q {
                return Err(TrajectoryError::PositionsNotIncreasing);
            }
        }
        prev = Some(p);
        points.extend_from_slice(&hidden[p * dim..(p + 1) * dim]);
    }
    Trajectory::new(sequence_id, dim, points)
}

/// Per-position cos scores for k = 1..K-1; empty when K < 2.
#[derive(Debug, Clone, PartialEq)]
pub struct CosScores {
    /// values[i] is the score at position k = i + 1.
    pub values: Vec<f64>,
    pub mean: Option<f64>,
}

/// 1 - cosine similarity of consecutive displacements, denominator
/// stabilized by an additive epsilon.
pub fn cos_score(traj: &Trajectory, epsilon: f64) -> CosScores {
    let k_max = traj.k();
    if k_max < 2 {
        return CosScores { values: vec![], mean: None };
    }
    let mut values = Vec::with_capacity(k_max - 1);
    let mut prev = traj.displacement(1);
    for k in 1..k_max {
        let next = traj.displacement(k + 1);
        let denom = math::l2_norm(&prev) * math::l2_norm(&next) + epsilon;
        values.push(1.0 - math::dot(&prev, &next) / denom);
        prev = next;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    CosScores { values, mean: Some(mean) }
}

/// Per-position perp scores. Interior positions use the two-sided secant;
/// the last position uses the arriving direction and is kept out of `mean`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerpScores {
    /// Interior positions (subset of 1..=K-1) whose score is defined.
    pub positions: Vec<usize>,
    pub values: Vec<f64>,
    /// Mean over interior values only.
    pub mean: Option<f64>,
    /// Score at position K against the arriving direction, when defined.
    pub last: Option<f64>,
    /// Positions skipped because a displacement or reference had zero norm.
    pub degenerate: usize,
}

/// Sine of the angle between `d` and reference `r`, or None if either is a
/// zero vector.
fn sine_against(d: &[f64], r: &[f64]) -> Option<f64> {
    let nd = math::l2_norm(d);
    let nr = math::l2_norm(r);
    if nd == 0.0 || nr == 0.0 {
        return None;
    }
    let coef = math::dot(d, r) / (nr * nr);
    let mut resid_sq = 0.0;
    for j in 0..d.len() {
        let rca = d[j] - coef * r[j];
        resid_sq += rca * rca;
    }
    Some((resid_sq.sqrt() / nd).min(1.0))
}

pub fn perp_score(traj: &Trajectory) -> PerpScores {
    let k_max = traj.k();
    if k_max < 2 {
        return PerpScores {
            positions: vec![],
            values: vec![],
            mean: None,
            last: None,
            degenerate: 0,
        };
    }
    let dim = traj.dim();
    let mut positions = Vec::new();
    let mut values = Vec::new();
    let mut degenerate = 0usize;
    for k in 1..k_max {
        let d = traj.displacement(k);
        let s: Vec<f64> = (0..dim)
            .map(|j| traj.point(k + 1)[j] - traj.point(k - 1)[j])
            .collect();
        match sine_against(&d, &s) {
            Some(v) => {
                positions.push(k);
                values.push(v);
            }
            None => degenerate += 1,
        }
    }
    let last = {
        let d = traj.displacement(k_max);
        let arriving = traj.displacement(k_max - 1);
        let v = sine_against(&d, &arriving);
        if v.is_none() {
            degenerate += 1;
        }
        v
    };
    let mean = if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    };
    PerpScores { positions, values, mean, last, degenerate }
}

/// Average ranks (1-based) with ties sharing the mean of their rank block.
pub fn average_ranks(xs: &[f64]) -> Result<Vec<f64>, TrajectoryError> {
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(TrajectoryError::NonFinite);
    }
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).expect("finite values compare"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for t in i..=j {
            ranks[idx[t]] = avg;
        }
        i = j + 1;
    }
    Ok(ranks)
}

/// Spearman rank correlation with average-rank ties. Errors when either
/// list is constant (rho undefined).
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Result<f64, TrajectoryError> {
    if a.len() != b.len() {
        return Err(TrajectoryError::LengthMismatch { lhs: a.len(), rhs: b.len() });
    }
    if a.len() < 2 {
        return Err(TrajectoryError::TooFewEntries);
    }
    let ra = average_ranks(a)?;
    let rb = average_ranks(b)?;
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(TrajectoryError::ConstantInput);
    }
    Ok(cov / (va * vb).sqrt())
}

// ── dump io ────────────────────────────────────────────────────────────────

/// Writes a trajectory dump: magic, u32 count, then per trajectory
/// {u32 sequence_id, u32 K, u32 d, (K+1)*d little-endian f64}.
pub fn write_trajectories(path: &Path, trajs: &[Trajectory]) -> Result<(), TrajectoryError> {
    let count = u32::try_from(trajs.len()).map_err(|_| TrajectoryError::TooMany(trajs.len()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TRAJ_MAGIC)?;
    w.write_all(&count.to_le_bytes())?;
    for t in trajs {
        w.write_all(&t.sequence_id.to_le_bytes())?;
        w.write_all(&(t.k() as u32).to_le_bytes())?;
        w.write_all(&(t.dim() as u32).to_le_bytes())?;
        for &v in t.points() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, TrajectoryError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| TrajectoryError::Truncated)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>, TrajectoryError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| TrajectoryError::Truncated)?;
    if &magic != TRAJ_MAGIC {
        return Err(TrajectoryError::BadMagic);
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let sequence_id = read_u32(&mut r)?;
        let k = read_u32(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        if dim == 0 {
            return Err(TrajectoryError::ZeroDim);
        }
        let mut points = vec![0.0; (k + 1) * dim];
        let mut buf = [0u8; 8];
        for v in points.iter_mut() {
            r.read_exact(&mut buf).map_err(|_| TrajectoryError::Truncated)?;
            *v = f64::from_le_bytes(buf);
        }
        out.push(Trajectory::new(sequence_id, dim, points)?);
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(out),
        _ => Err(TrajectoryError::TrailingBytes),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    const EPS: f64 = 1e-8;

    fn traj2(points: &[(f64, f64)]) -> Trajectory {
        let flat: Vec<f64> = points.iter().flat_map(|&(x, y)| [x, y]).collect();
        Trajectory::new(0, 2, flat).unwrap()
    }

    #[test]
    fn extract_gathers_requested_rows_in_order() {
        let hidden: Vec<f64> = (0..30).map(|v| v as f64).collect(); // 10 x 3
        let t = extract_trajectory(&hidden, 3, &[2, 5, 9], 42).unwrap();
        assert_eq!(t.sequence_id, 42);
        assert_eq!(t.k(), 2);
        assert_eq!(t.point(0), &[6.0, 7.0, 8.0]);
        assert_eq!(t.point(1), &[15.0, 16.0, 17.0]);
        assert_eq!(t.point(2), &[27.0, 28.0, 29.0]);
    }

    #[test]
    fn extract_rejects_bad_positions() {
        let hidden = vec![0.0; 30];
        assert!(matches!(
            extract_trajectory(&hidden, 3, &[2, 10], 0),
            Err(TrajectoryError::PositionOutOfRange { index: 10, bound: 10 })
        ));
        assert!(matches!(
            extract_trajectory(&hidden, 3, &[5, 2], 0),
            Err(TrajectoryError::PositionsNotIncreasing)
        ));
        assert!(matches!(
            extract_trajectory(&hidden, 3, &[2, 2], 0),
            Err(TrajectoryError::PositionsNotIncreasing)
        ));
        assert!(matches!(
            extract_trajectory(&hidden, 3, &[], 0),
            Err(TrajectoryError::NoPositions)
        ));
    }

    #[test]
    fn single_position_trajectory_is_unusable_for_scores() {
        let hidden = vec![1.0; 12];
        let t = extract_trajectory(&hidden, 3, &[1], 0).unwrap();
        assert_eq!(t.k(), 0);
        assert!(!t.usable_for_scores());
        assert!(cos_score(&t, EPS).values.is_empty());
        assert!(perp_score(&t).values.is_empty());
        assert_eq!(perp_score(&t).last, None);
    }

    #[test]
    fn collinear_points_score_zero() {
        let t = traj2(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)]);
        let c = cos_score(&t, EPS);
        assert_eq!(c.values.len(), 2);
        for v in &c.values {
            assert!(v.abs() < 1e-7, "cos {v}");
        }
        let p = perp_score(&t);
        assert_eq!(p.positions, vec![1, 2]);
        for v in &p.values {
            assert!(v.abs() < 1e-12, "perp {v}");
        }
        assert!(p.last.unwrap().abs() < 1e-12);
        assert_eq!(p.degenerate, 0);
    }

    #[test]
    fn right_angle_turn_scores() {
        // z = (0,0),(1,0),(1,1): cos score exactly 1 (orthogonal
        // displacements), perp score sin 45 deg.
        let t = traj2(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)]);
        let c = cos_score(&t, EPS);
        assert_eq!(c.values.len(), 1);
        assert!((c.values[0] - 1.0).abs() < 1e-12);
        let p = perp_score(&t);
        assert_eq!(p.values.len(), 1);
        assert!((p.values[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        // last position: d_2=(0,1) vs arriving (1,0) -> sin 90 deg = 1
        assert!((p.last.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backtracking_gives_cos_two_and_degenerate_perp() {
        let t = traj2(&[(0.0, 0.0), (1.0, 0.0), (0.0, 0.0)]);
        let c = cos_score(&t, EPS);
        assert!((c.values[0] - 2.0).abs() < 1e-7);
        // secant z_2 - z_0 is the zero vector -> interior position skipped
        let p = perp_score(&t);
        assert!(p.values.is_empty());
        assert_eq!(p.degenerate, 1);
        // last position is still defined: d_2 = (-1,0) vs arriving (1,0),
        // antiparallel -> sine 0
        assert!(p.last.unwrap().abs() < 1e-12);
    }

    #[test]
    fn last_position_uses_arriving_direction() {
        let t = traj2(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (2.0, 1.0)]);
        let p = perp_score(&t);
        // interior: k=1 straight (0), k=2 d=(1,0) vs s=(1,1) -> sin 45
        assert!((p.values[0]).abs() < 1e-12);
        assert!((p.values[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        // last: d_3=(0,1) vs arriving z_2-z_1=(1,0) -> 1.0, not in mean
        assert!((p.last.unwrap() - 1.0).abs() < 1e-12);
        let mean = p.mean.unwrap();
        assert!((mean - std::f64::consts::FRAC_1_SQRT_2 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn perp_matches_planar_cross_product_formula() {
        let mut r = rng::stream(&[981, 0]);
        for _ in 0..200 {
            let pts: Vec<(f64, f64)> = (0..5)
                .map(|_| (r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0)))
                .collect();
            let t = traj2(&pts);
            let p = perp_score(&t);
            for (pos, val) in p.positions.iter().zip(&p.values) {
                let d = t.displacement(*pos);
                let s = [
                    t.point(pos + 1)[0] - t.point(pos - 1)[0],
                    t.point(pos + 1)[1] - t.point(pos - 1)[1],
                ];
                let cross = (d[0] * s[1] - d[1] * s[0]).abs();
                let direct = cross / (math::l2_norm(&d) * math::l2_norm(&s));
                assert!((val - direct).abs() < 1e-10, "{val} vs {direct}");
            }
        }
    }

    /// Gram-Schmidt on a random Gaussian matrix: a deterministic orthogonal
    /// matrix for the rotation-invariance check.
    fn random_orthogonal(dim: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(&[4242, seed]);
        let mut q = vec![0.0; dim * dim];
        for row in 0..dim {
            let mut v: Vec<f64> = (0..dim).map(|_| rng::normal(&mut r)).collect();
            for prev in 0..row {
                let p = &q[prev * dim..(prev + 1) * dim];
                let proj = math::dot(&v, p);
                for j in 0..dim {
                    v[j] -= proj * p[j];
                }
            }
            let n = math::l2_norm(&v);
            for j in 0..dim {
                q[row * dim + j] = v[j] / n;
            }
        }
        q
    }

    fn apply_matrix(t: &Trajectory, q: &[f64]) -> Trajectory {
        let d = t.dim();
        let rows = t.k() + 1;
        let mut out = vec![0.0; rows * d];
        for i in 0..rows {
            for rrow in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += q[rrow * d + j] * t.point(i)[j];
                }
                out[i * d + rrow] = acc;
            }
        }
        Trajectory::new(t.sequence_id, d, out).unwrap()
    }

    #[test]
    fn scores_are_rotation_invariant() {
        let dim = 8;
        let mut r = rng::stream(&[77, 1]);
        let pts: Vec<f64> = (0..7 * dim).map(|_| rng::normal(&mut r)).collect();
        let t = Trajectory::new(0, dim, pts).unwrap();
        let q = random_orthogonal(dim, 5);
        let rt = apply_matrix(&t, &q);

        let (c0, c1) = (cos_score(&t, EPS), cos_score(&rt, EPS));
        for (a, b) in c0.values.iter().zip(&c1.values) {
            assert!((a - b).abs() < 1e-10, "cos {a} vs {b}");
        }
        let (p0, p1) = (perp_score(&t), perp_score(&rt));
        assert_eq!(p0.positions, p1.positions);
        for (a, b) in p0.values.iter().zip(&p1.values) {
            assert!((a - b).abs() < 1e-10, "perp {a} vs {b}");
        }
        assert!((p0.last.unwrap() - p1.last.unwrap()).abs() < 1e-10);
    }

    #[test]
    fn scores_are_scale_and_translation_invariant_at_large_scale() {
        // Uses coordinates of magnitude ~1e3 so the additive epsilon in the
        // cos denominator is negligible relative to the norms.
        let dim = 6;
        let mut r = rng::stream(&[78, 2]);
        let pts: Vec<f64> = (0..6 * dim).map(|_| 1000.0 * rng::normal(&mut r)).collect();
        let t = Trajectory::new(0, dim, pts.clone()).unwrap();

        let scaled: Vec<f64> = pts.iter().map(|v| v * 3.5).collect();
        let shifted: Vec<f64> = pts.iter().map(|v| v + 250.0).collect();
        let ts = Trajectory::new(0, dim, scaled).unwrap();
        let tt = Trajectory::new(0, dim, shifted).unwrap();

        for other in [&ts, &tt] {
            let (c0, c1) = (cos_score(&t, EPS), cos_score(other, EPS));
            for (a, b) in c0.values.iter().zip(&c1.values) {
                assert!((a - b).abs() < 1e-10, "cos {a} vs {b}");
            }
            let (p0, p1) = (perp_score(&t), perp_score(other));
            for (a, b) in p0.values.iter().zip(&p1.values) {
                assert!((a - b).abs() < 1e-10, "perp {a} vs {b}");
            }
        }
    }

    #[test]
    fn unit_step_trajectories_rank_identically_under_both_scores() {
        // With equal-length displacements the perp score is sqrt(cos/2)
        // exactly, so sorting interior positions by one score must match
        // sorting by the other. 1000 random-direction unit-step walks.
        let dim = 8;
        let mut r = rng::stream(&[79, 3]);
        for case in 0..1000 {
            let mut pts = vec![0.0; dim];
            let mut cur = vec![0.0; dim];
            for _ in 0..5 {
                let mut step: Vec<f64> = (0..dim).map(|_| rng::normal(&mut r)).collect();
                let n = math::l2_norm(&step);
                for v in step.iter_mut() {
                    *v /= n;
                }
                for j in 0..dim {
                    cur[j] += step[j];
                }
                pts.extend_from_slice(&cur);
            }
            let t = Trajectory::new(case, dim, pts).unwrap();
            let c = cos_score(&t, EPS);
            let p = perp_score(&t);
            assert_eq!(p.positions.len(), c.values.len(), "case {case} degenerate");

            let order = |vals: &[f64]| {
                let mut idx: Vec<usize> = (0..vals.len()).collect();
                idx.sort_by(|&i, &j| vals[i].partial_cmp(&vals[j]).unwrap());
                idx
            };
            assert_eq!(order(&c.values), order(&p.values), "case {case}");
            // and the closed form holds
            for (cv, pv) in c.values.iter().zip(&p.values) {
                assert!((pv - (cv / 2.0).sqrt()).abs() < 1e-7, "case {case}: {cv} {pv}");
            }
        }
    }

    #[test]
    fn spearman_basic_cases() {
        assert!((rank_correlation(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]).unwrap()
            - 1.0)
            .abs()
            < 1e-12);
        assert!((rank_correlation(&[1.0, 2.0, 3.0, 4.0], &[9.0, 7.0, 5.0, 3.0]).unwrap()
            + 1.0)
            .abs()
            < 1e-12);
        // hand-computed tie case: ranks a = [1, 2.5, 2.5, 4], b = [1,2,3,4]
        // -> rho = 4.5 / sqrt(4.5 * 5) = 3/sqrt(10)
        let rho = rank_correlation(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((rho - 3.0 / 10.0f64.sqrt()).abs() < 1e-12, "{rho}");
    }

    #[test]
    fn spearman_error_cases() {
        assert!(matches!(
            rank_correlation(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(TrajectoryError::ConstantInput)
        ));
        assert!(matches!(
            rank_correlation(&[1.0, 2.0], &[1.0]),
            Err(TrajectoryError::LengthMismatch { lhs: 2, rhs: 1 })
        ));
        assert!(matches!(
            rank_correlation(&[1.0], &[1.0]),
            Err(TrajectoryError::TooFewEntries)
        ));
    }

    #[test]
    fn average_ranks_handles_tie_blocks() {
        let r = average_ranks(&[3.0, 1.0, 3.0, 2.0, 3.0]).unwrap();
        assert_eq!(r, vec![4.0, 1.0, 4.0, 2.0, 4.0]);
    }

    #[test]
    fn dump_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dump");
        let mut r = rng::stream(&[80, 4]);
        let trajs: Vec<Trajectory> = (0..5)
            .map(|i| {
                let k = 2 + (i as usize % 3);
                let pts: Vec<f64> = (0..(k + 1) * 4).map(|_| 2.0 * rng::normal(&mut r)).collect();
                Trajectory::new(100 + i, 4, pts).unwrap()
            })
            .collect();
        write_trajectories(&path, &trajs).unwrap();
        let back = read_trajectories(&path).unwrap();
        assert_eq!(back, trajs);
    }

    #[test]
    fn dump_read_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dump");
        let t = Trajectory::new(1, 2, vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0]).unwrap();
        write_trajectories(&path, &[t]).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let cut = dir.path().join("cut.dump");
        std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_trajectories(&cut), Err(TrajectoryError::Truncated)));

        let magic = dir.path().join("magic.dump");
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        std::fs::write(&magic, &bad).unwrap();
        assert!(matches!(read_trajectories(&magic), Err(TrajectoryError::BadMagic)));

        let long = dir.path().join("long.dump");
        let mut extra = bytes;
        extra.push(7);
        std::fs::write(&long, &extra).unwrap();
        assert!(matches!(read_trajectories(&long), Err(TrajectoryError::TrailingBytes)));
    }

    proptest! {
        /// Random well-conditioned trajectories: scores stay in their
        /// documented ranges and no position silently vanishes.
        #[test]
        fn score_ranges_hold(
            steps in proptest::collection::vec(
                proptest::collection::vec(0.5f64..2.0, 3), 2..7),
            flips in proptest::collection::vec(proptest::bool::ANY, 7),
        ) {
            // displacement components in [0.5, 2] with random signs: nonzero
            // norms, bounded ratios
            let dim = 3;
            let mut pts = vec![0.0; dim];
            let mut cur = vec![0.0; dim];
            for (i, s) in steps.iter().enumerate() {
                let sign = if flips[i % flips.len()] { 1.0 } else { -1.0 };
                for j in 0..dim {
                    cur[j] += sign * s[j];
                }
                pts.extend_from_slice(&cur);
            }
            let t = Trajectory::new(0, dim, pts).unwrap();
            let c = cos_score(&t, EPS);
            prop_assert_eq!(c.values.len(), t.k() - 1);
            for v in &c.values {
                prop_assert!((0.0..=2.0).contains(v), "cos {} out of range", v);
            }
            let p = perp_score(&t);
            for v in &p.values {
                prop_assert!((0.0..=1.0).contains(v), "perp {} out of range", v);
            }
            if let Some(l) = p.last {
                prop_assert!((0.0..=1.0).contains(&l));
            }
            prop_assert_eq!(
                p.positions.len() + p.degenerate - usize::from(p.last.is_none()),
                t.k() - 1
            );
        }

        /// Translating every point leaves both scores nearly unchanged.
        #[test]
        fn translation_invariance(
            shift in -10.0f64..10.0,
            seed in 0u64..500,
        ) {
            let dim = 4;
            let mut r = rng::stream(&[90, seed]);
            let pts: Vec<f64> = (0..5 * dim).map(|_| rng::normal(&mut r)).collect();
            let t = Trajectory::new(0, dim, pts.clone()).unwrap();
            let shifted: Vec<f64> = pts.iter().map(|v| v + shift).collect();
            let ts = Trajectory::new(0, dim, shifted).unwrap();
            let (c0, c1) = (cos_score(&t, EPS), cos_score(&ts, EPS));
            for (a, b) in c0.values.iter().zip(&c1.values) {
                prop_assert!((a - b).abs() < 1e-8);
            }
            let (p0, p1) = (perp_score(&t), perp_score(&ts));
            for (a, b) in p0.values.iter().zip(&p1.values) {
                prop_assert!((a - b).abs() < 1e-8);
            }
        }
    }
}
