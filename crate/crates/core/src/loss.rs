//! Mask-split, transition-corrected cross-entropy.
//!
//! With `p = softmax(z)` and per-class losses `l_k = -ln p_k`, a voxel with
//! soft target `q` contributes
//!
//! * `sum_k q_k l_k` when its mask is 0, and
//! * `sum_k q_k (C l)_k = sum_k (C^T q)_k l_k` when its mask is 1,
//!
//! where `C = (T^T + lambda I)^-1` comes from [`crate::transition`]. Both cases
//! are a weighted cross-entropy with coefficients `a` (`q` or `C^T q`), whose
//! score gradient is `(sum_k a_k) p - a`.
//!
//! `p_k` is floored at [`LOG_FLOOR`] inside the log; the gradient treats
//! floored classes as constant, so it is exact for the floored loss too.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::sum::{neumaier_sum, Neumaier, BLOCK};
use crate::transition::{SquareMatrix, TransitionMatrix};
use crate::volume::{GridGeometry, ProbVolume, ScalarMap};
use crate::{Error, Result};

pub use crate::volume::ScoreVolume;

/// Lower bound on probabilities inside the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Denominator floor for relative gradient errors; below it errors are
/// effectively absolute.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossOptions {
    pub reduction: Reduction,
    /// Keep the per-voxel loss map in the report.
    pub per_voxel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    /// Sum over voxels with mask 0.
    pub clean_term: f64,
    /// Sum over voxels with mask 1.
    pub corrected_term: f64,
    pub reduction: Reduction,
    pub num_voxels: usize,
    #[serde(skip)]
    pub per_voxel: Option<ScalarMap>,
}

/// Row-wise max-shifted softmax.
pub fn softmax(scores: &ScoreVolume) -> ProbVolume {
    let l = scores.num_labels();
    let mut probs = vec![0.0; scores.scores().len()];
    probs
        .par_chunks_mut(l * BLOCK)
        .zip(scores.scores().par_chunks(l * BLOCK))
        .for_each(|(out, z)| {
            for (o, zr) in out.chunks_exact_mut(l).zip(z.chunks_exact(l)) {
                softmax_row(zr, o);
            }
        });
    ProbVolume::new(*scores.geometry(), l, probs).expect("softmax rows lie on the simplex")
}

/// Writes the softmax of `z` into `out` and returns log-sum-exp of `z`.
#[inline]
fn softmax_row(z: &[f64], out: &mut [f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
    max + s.ln()
}

fn check_inputs(
    scores: &ScoreVolume,
    targets: &ProbVolume,
    mask: &ScalarMap,
    c: &SquareMatrix,
) -> Result<()> {
    let g = scores.geometry();
    g.check_same_grid(targets.geometry(), "loss targets")?;
    g.check_same_grid(mask.geometry(), "loss mask")?;
    let l = scores.num_labels();
    if targets.num_labels() != l || c.order() != l {
        return Err(Error::validation(format!(
            "loss: L mismatch (scores {l}, targets {}, C {})",
            targets.num_labels(),
            c.order()
        )));
    }
    scores.validate()?;
    mask.check_binary("loss mask")?;
    if c.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("correction matrix has non-finite entries"));
    }
    Ok(())
}

/// Per-voxel class coefficients `a`: the soft target on mask-0 voxels and
/// `C^T q` on mask-1 voxels. They depend only on the targets, the mask and
/// `C`, so training computes them once.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCoefficients {
    geometry: GridGeometry,
    num_labels: usize,
    coefficients: Vec<f64>,
    corrected: Vec<bool>,
}

impl LossCoefficients {
    pub fn new(targets: &ProbVolume, mask: &ScalarMap, c: &SquareMatrix) -> Result<Self> {
        let l = targets.num_labels();
        targets.geometry().check_same_grid(mask.geometry(), "loss mask")?;
        if c.order() != l {
            return Err(Error::validation(format!(
                "loss: L mismatch (targets {l}, C {})",
                c.order()
            )));
        }
        mask.check_binary("loss mask")?;
        if c.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("correction matrix has non-finite entries"));
        }
        let corrected: Vec<bool> = mask.values().iter().map(|&m| m != 0.0).collect();
        let mut coefficients = vec![0.0; targets.probs().len()];
        coefficients
            .par_chunks_mut(BLOCK * l)
            .zip(targets.probs().par_chunks(BLOCK * l))
            .zip(corrected.par_chunks(BLOCK))
            .for_each(|((out, q), m)| {
                for ((a, q), &m) in out.chunks_exact_mut(l).zip(q.chunks_exact(l)).zip(m) {
                    if !m {
                        a.copy_from_slice(q);
                        continue;
                    }
                    for (k, ak) in a.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for (li, &ql) in q.iter().enumerate() {
                            s += c.data()[li * l + k] * ql;
                        }
                        *ak = s;
                    }
                }
            });
        Ok(LossCoefficients {
            geometry: *targets.geometry(),
            num_labels: l,
            coefficients,
            corrected,
        })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.coefficients[i * self.num_labels..(i + 1) * self.num_labels]
    }

    fn check_scores(&self, scores: &ScoreVolume) -> Result<()> {
        self.geometry.check_same_grid(scores.geometry(), "loss scores")?;
        if scores.num_labels() != self.num_labels {
            return Err(Error::validation(format!(
                "loss: L mismatch (scores {}, targets {})",
                scores.num_labels(),
                self.num_labels
            )));
        }
        scores.validate()
    }

    pub fn loss(&self, scores: &ScoreVolume, options: LossOptions) -> Result<LossReport> {
        self.check_scores(scores)?;
        let l = self.num_labels;
        let n = self.geometry.len();
        let mut per_voxel = vec![0.0; n];
        let partials: Vec<(Neumaier, Neumaier)> = per_voxel
            .par_chunks_mut(BLOCK)
            .enumerate()
            .map(|(b, out)| {
                let mut p = vec![0.0; l];
                let (mut clean, mut corrected) = (Neumaier::default(), Neumaier::default());
                for (off, o) in out.iter_mut().enumerate() {
                    let i = b * BLOCK + off;
                    let z = scores.row(i);
                    let lse = softmax_row(z, &mut p);
                    let v: f64 = self
                        .row(i)
                        .iter()
                        .zip(z)
                        .map(|(&ak, &zk)| ak * class_loss(lse, zk).0)
                        .sum();
                    *o = v;
                    if self.corrected[i] {
                        corrected.add(v);
                    } else {
                        clean.add(v);
                    }
                }
                (clean, corrected)
            })
            .collect();

        let clean = neumaier_sum(partials.iter().map(|p| p.0.value()));
        let corrected = neumaier_sum(partials.iter().map(|p| p.1.value()));
        if !(clean.is_finite() && corrected.is_finite()) {
            return Err(Error::numerical("loss is not finite"));
        }
        let scale = reduction_scale(options.reduction, n);
        let per_voxel = if options.per_voxel {
            if scale != 1.0 {
                per_voxel.iter_mut().for_each(|v| *v *= scale);
            }
            Some(ScalarMap::new(self.geometry, per_voxel)?)
        } else {
            None
        };
        let (clean_term, corrected_term) = (clean * scale, corrected * scale);
        Ok(LossReport {
            total: clean_term + corrected_term,
            clean_term,
            corrected_term,
            reduction: options.reduction,
            num_voxels: n,
            per_voxel,
        })
    }

    pub fn grad(&self, scores: &ScoreVolume, reduction: Reduction) -> Result<Vec<f64>> {
        self.check_scores(scores)?;
        let l = self.num_labels;
        let n = self.geometry.len();
        let scale = reduction_scale(reduction, n);
        let mut grad = vec![0.0; n * l];
        grad.par_chunks_mut(BLOCK * l)
            .enumerate()
            .for_each(|(b, out)| {
                let mut a = vec![0.0; l];
                let mut p = vec![0.0; l];
                for (off, g) in out.chunks_exact_mut(l).enumerate() {
                    let i = b * BLOCK + off;
                    a.copy_from_slice(self.row(i));
                    let z = scores.row(i);
                    let lse = softmax_row(z, &mut p);
                    let mut weight = 0.0;
                    for (k, ak) in a.iter_mut().enumerate() {
                        if class_loss(lse, z[k]).1 {
                            *ak = 0.0;
                        }
                        weight += *ak;
                    }
                    for k in 0..l {
                        g[k] = (weight * p[k] - a[k]) * scale;
                    }
                }
            });
        Ok(grad)
    }
}

fn reduction_scale(reduction: Reduction, n: usize) -> f64 {
    match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / n as f64,
    }
}

/// Floored `-ln p_k` from log-sum-exp, and whether the floor was hit.
#[inline]
fn class_loss(lse: f64, z: f64) -> (f64, bool) {
    let cap = -LOG_FLOOR.ln();
    let v = lse - z;
    if v > cap {
        (cap, true)
    } else {
        (v, false)
    }
}

/// Evaluates the corrected loss. `c` is usually
/// [`TransitionMatrix::corrected_inverse`].
pub fn corrected_loss(
    scores: &ScoreVolume,
    targets: &ProbVolume,
    mask: &ScalarMap,
    c: &SquareMatrix,
    options: LossOptions,
) -> Result<LossReport> {
    check_inputs(scores, targets, mask, c)?;
    LossCoefficients::new(targets, mask, c)?.loss(scores, options)
}

/// Gradient of the reduced loss with respect to the scores, `N x L`.
pub fn corrected_loss_grad(
    scores: &ScoreVolume,
    targets: &ProbVolume,
    mask: &ScalarMap,
    c: &SquareMatrix,
    reduction: Reduction,
) -> Result<Vec<f64>> {
    check_inputs(scores, targets, mask, c)?;
    LossCoefficients::new(targets, mask, c)?.grad(scores, reduction)
}

/// Corrected loss with `C` taken from a transition matrix.
pub fn transition_corrected_loss(
    scores: &ScoreVolume,
    targets: &ProbVolume,
    mask: &ScalarMap,
    transition: &TransitionMatrix,
    options: LossOptions,
) -> Result<LossReport> {
    corrected_loss(scores, targets, mask, transition.corrected_inverse(), options)
}

/// Soft cross-entropy over every voxel.
pub fn cross_entropy(scores: &ScoreVolume, targets: &ProbVolume, options: LossOptions) -> Result<LossReport> {
    let mask = ScalarMap::zeros(*scores.geometry());
    let c = SquareMatrix::identity(scores.num_labels());
    corrected_loss(scores, targets, &mask, &c, options)
}

/// Outcome of comparing the analytic gradient against central differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheck {
    pub num_labels: usize,
    pub num_coordinates: usize,
    pub step: f64,
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
}

/// Central finite differences of the total loss for every score coordinate.
pub fn finite_difference_check(
    scores: &ScoreVolume,
    targets: &ProbVolume,
    mask: &ScalarMap,
    c: &SquareMatrix,
    reduction: Reduction,
    step: f64,
) -> Result<GradCheck> {
    let analytic = corrected_loss_grad(scores, targets, mask, c, reduction)?;
    let options = LossOptions {
        reduction,
        per_voxel: false,
    };
    let mut probe = scores.clone();
    let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
    for (idx, &a) in analytic.iter().enumerate() {
        let z0 = probe.scores()[idx];
        probe.scores_mut()[idx] = z0 + step;
        let up = corrected_loss(&probe, targets, mask, c, options)?.total;
        probe.scores_mut()[idx] = z0 - step;
        let down = corrected_loss(&probe, targets, mask, c, options)?.total;
        probe.scores_mut()[idx] = z0;
        let fd = (up - down) / (2.0 * step);
        let err = (a - fd).abs();
        max_abs = max_abs.max(err);
        max_rel = max_rel.max(err / a.abs().max(fd.abs()).max(GRAD_CHECK_FLOOR));
    }
    Ok(GradCheck {
        num_labels: scores.num_labels(),
        num_coordinates: analytic.len(),
        step,
        max_relative_error: max_rel,
        max_absolute_error: max_abs,
    })
}

/// Random loss instance: scores in [-3, 3], soft targets, a half-set mask and
/// `C` from a diagonally dominant random transition matrix with `lambda = 1`.
pub fn random_instance(
    dims: [usize; 3],
    num_labels: usize,
    seed: u64,
) -> Result<(ScoreVolume, ProbVolume, ScalarMap, SquareMatrix)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = GridGeometry::new(dims, [1.0; 3])?;
    let n = g.len();
    let l = num_labels;
    let scores: Vec<f64> = (0..n * l).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut targets = Vec::with_capacity(n * l);
    for _ in 0..n {
        let raw: Vec<f64> = (0..l).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        targets.extend(raw.iter().map(|v| v / s));
    }
    let mask: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let mut t = SquareMatrix::identity(l);
    for j in 0..l {
        let off: Vec<f64> = (0..l).map(|k| if k == j { 0.0 } else { rng.random_range(0.0..1.0) }).collect();
        let off_sum: f64 = off.iter().sum();
        let keep = rng.random_range(0.6..0.95);
        for k in 0..l {
            let v = if k == j { keep } else { (1.0 - keep) * off[k] / off_sum };
            t.set(k, j, v);
        }
    }
    let c = TransitionMatrix::new(t, 1.0)?.corrected_inverse().clone();
    Ok((
        ScoreVolume::new(g, l, scores)?,
        ProbVolume::new(g, l, targets)?,
        ScalarMap::new(g, mask)?,
        c,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry(n: usize) -> GridGeometry {
        GridGeometry::new([n, 1, 1], [1.0; 3]).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let g = geometry(2);
        let s = ScoreVolume::new(g, 3, vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let p = softmax(&s);
        for v in p.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(p.argmax().labels()[1], 2);

        let s = ScoreVolume::new(geometry(1), 2, vec![1000.0, 0.0]).unwrap();
        let p = softmax(&s);
        assert_eq!(p.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn non_finite_scores_rejected() {
        assert!(ScoreVolume::new(geometry(1), 2, vec![f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn self_cross_entropy_vanishes_at_point_mass() {
        let g = geometry(2);
        let scores = ScoreVolume::new(g, 2, vec![60.0, 0.0, 0.0, 60.0]).unwrap();
        let targets = ProbVolume::new(g, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mask = ScalarMap::zeros(g);
        let c = SquareMatrix::scaled_identity(2, 3.0);
        let r = corrected_loss(&scores, &targets, &mask, &c, LossOptions::default()).unwrap();
        assert!(r.total < 1e-20);
        let grad = corrected_loss_grad(&scores, &targets, &mask, &c, Reduction::Sum).unwrap();
        assert!(grad.iter().all(|g| g.abs() <= 1e-9));
    }

    #[test]
    fn single_corrected_voxel_matches_scalar_evaluation() {
        let g = geometry(1);
        let (p0, p1) = (0.7f64, 0.3f64);
        let scores = ScoreVolume::new(g, 2, vec![p0.ln(), p1.ln()]).unwrap();
        let targets = ProbVolume::new(g, 2, vec![0.8, 0.2]).unwrap();
        let mask = ScalarMap::new(g, vec![1.0]).unwrap();
        let t = SquareMatrix::from_rows(&[vec![0.9, 0.2], vec![0.1, 0.8]]).unwrap();
        let c = crate::transition::corrected_inverse(&t, 1.0).unwrap();
        let r = corrected_loss(&scores, &targets, &mask, &c, LossOptions::default()).unwrap();

        let det = 1.9 * 1.8 - 0.1 * 0.2;
        let cinv = [[1.8 / det, -0.1 / det], [-0.2 / det, 1.9 / det]];
        let ell = [-p0.ln(), -p1.ln()];
        let q = [0.8, 0.2];
        let expect: f64 = (0..2)
            .map(|l| q[l] * (cinv[l][0] * ell[0] + cinv[l][1] * ell[1]))
            .sum();
        assert!((r.total - expect).abs() < 1e-12, "{} vs {expect}", r.total);
        assert_eq!(r.clean_term, 0.0);
        assert_eq!(r.total, r.corrected_term);
    }

    #[test]
    fn mean_reduction_divides_by_voxel_count() {
        let (s, t, m, c) = random_instance([3, 2, 2], 3, 9).unwrap();
        let sum = corrected_loss(&s, &t, &m, &c, LossOptions::default()).unwrap();
        let mean = corrected_loss(
            &s,
            &t,
            &m,
            &c,
            LossOptions {
                reduction: Reduction::Mean,
                per_voxel: true,
            },
        )
        .unwrap();
        assert!((mean.total * 12.0 - sum.total).abs() < 1e-12 * sum.total.abs().max(1.0));
        let pv = mean.per_voxel.unwrap();
        assert!((neumaier_sum(pv.values().iter().copied()) - mean.total).abs() < 1e-12);
    }

    #[test]
    fn log_floor_caps_fully_wrong_voxels() {
        let g = geometry(1);
        let scores = ScoreVolume::new(g, 2, vec![0.0, 100.0]).unwrap();
        let targets = ProbVolume::new(g, 2, vec![1.0, 0.0]).unwrap();
        let r = cross_entropy(&scores, &targets, LossOptions::default()).unwrap();
        assert!((r.total - (-LOG_FLOOR.ln())).abs() < 1e-12);
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let (s, t, m, _) = random_instance([2, 2, 2], 3, 1).unwrap();
        let c2 = SquareMatrix::identity(2);
        assert!(corrected_loss(&s, &t, &m, &c2, LossOptions::default()).is_err());
        let mut bad = m.clone();
        bad.values_mut()[0] = 0.5;
        assert!(corrected_loss(&s, &t, &bad, &SquareMatrix::identity(3), LossOptions::default()).is_err());
    }
}
