//! Boundary-uncertainty label smoothing.
//!
//! For every voxel `i` the smoother looks at the ball `i^R` of radius
//! `R = max uncertainty`. If that ball holds a single label, or any voxel in it
//! belongs to a tissue with zero uncertainty, the voxel keeps its one-hot
//! label. Otherwise the boundary uncertainty is `r_u = min U(i^R)` and the
//! smoothed row is the label histogram of the ball `i^{r_u}` weighted by
//! `exp(-|k - i| / tau)`, normalized over the in-bounds part of the ball.
//! `tau` defaults to `r_u`.
//!
//! Balls are clipped at the volume border. Distances are in voxel units.

use rayon::prelude::*;

use crate::volume::{
    BallOffsets, GridGeometry, LabelId, LabelVolume, ProbVolume, ScalarMap, UncertaintyTable,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SmoothingConfig {
    /// Kernel width; `None` uses `tau = r_u` at each voxel.
    pub tau_override: Option<f64>,
}

impl SmoothingConfig {
    fn validate(&self) -> Result<()> {
        match self.tau_override {
            Some(t) if !(t.is_finite() && t > 0.0) => Err(Error::validation(format!(
                "tau override must be finite and positive, got {t}"
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingOutput {
    /// Soft targets `Y_S`.
    pub smoothed: ProbVolume,
    /// 1 where the smoothed row differs from the one-hot input row.
    pub mask: ScalarMap,
    /// Per-voxel uncertainty `U`.
    pub uncertainty_map: ScalarMap,
}

/// `U(i) = table[label(i)]`.
pub fn build_uncertainty_map(labels: &LabelVolume, table: &UncertaintyTable) -> Result<ScalarMap> {
    let values = uncertainty_values(labels, table)?;
    ScalarMap::new(
        *labels.geometry(),
        values.into_iter().map(f64::from).collect(),
    )
}

fn uncertainty_values(labels: &LabelVolume, table: &UncertaintyTable) -> Result<Vec<u32>> {
    labels
        .labels()
        .iter()
        .map(|&l| {
            table
                .get(l)
                .ok_or_else(|| Error::validation(format!("label {l} has no uncertainty entry")))
        })
        .collect()
}

/// Offsets of the ball `i^{r_u}` with their unnormalized weights
/// `exp(-d / tau)`. Normalization happens per voxel after border clipping.
#[derive(Debug, Clone)]
pub struct SmoothingKernel {
    ball: BallOffsets,
    weights: Vec<f64>,
}

impl SmoothingKernel {
    pub fn new(radius: u32, tau: f64) -> Result<Self> {
        let ball = BallOffsets::new(radius as f64)?;
        let weights = ball.distances().iter().map(|d| (-d / tau).exp()).collect();
        Ok(SmoothingKernel { ball, weights })
    }

    pub fn offsets(&self) -> &[[i64; 3]] {
        self.ball.offsets()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Ball offsets plus their linear-index deltas for one grid.
struct Stencil {
    reach: usize,
    offsets: Vec<[i64; 3]>,
    deltas: Vec<isize>,
    weights: Vec<f64>,
}

impl Stencil {
    fn new(ball: &BallOffsets, weights: Vec<f64>, geometry: &GridGeometry) -> Self {
        let [nx, ny, _] = geometry.dims();
        let deltas = ball
            .offsets()
            .iter()
            .map(|o| (o[0] + nx as i64 * (o[1] + ny as i64 * o[2])) as isize)
            .collect();
        Stencil {
            reach: ball.reach(),
            offsets: ball.offsets().to_vec(),
            deltas,
            weights,
        }
    }

    /// Calls `f(j, linear index)` for every in-bounds stencil entry.
    #[inline]
    fn for_each(&self, geometry: &GridGeometry, p: [usize; 3], idx: usize, mut f: impl FnMut(usize, usize) -> bool) {
        let dims = geometry.dims();
        let interior = (0..3).all(|a| p[a] >= self.reach && p[a] + self.reach < dims[a]);
        if interior {
            for (j, &d) in self.deltas.iter().enumerate() {
                if !f(j, (idx as isize + d) as usize) {
                    return;
                }
            }
        } else {
            for (j, o) in self.offsets.iter().enumerate() {
                let q = [p[0] as i64 + o[0], p[1] as i64 + o[1], p[2] as i64 + o[2]];
                if geometry.contains(q) {
                    let k = geometry.index(q.map(|v| v as usize));
                    if !f(j, k) {
                        return;
                    }
                }
            }
        }
    }
}

/// Smooths with the default configuration (`tau = r_u`).
pub fn smooth_labels(labels: &LabelVolume, table: &UncertaintyTable) -> Result<SmoothingOutput> {
    smooth_labels_with(labels, table, &SmoothingConfig::default())
}

/// Smooths hard labels. Output is independent of the rayon thread count.
pub fn smooth_labels_with(
    labels: &LabelVolume,
    table: &UncertaintyTable,
    config: &SmoothingConfig,
) -> Result<SmoothingOutput> {
    config.validate()?;
    table.check_covers(labels.num_labels())?;
    let geometry = *labels.geometry();
    let num_labels = labels.num_labels();
    let uncertainty = uncertainty_values(labels, table)?;
    let max_r = table.max_uncertainty();

    let outer = Stencil::new(&BallOffsets::new(max_r as f64)?, Vec::new(), &geometry);
    let kernels: Vec<Option<Stencil>> = (0..=max_r)
        .map(|r| {
            if r == 0 {
                return Ok(None);
            }
            let kernel = SmoothingKernel::new(r, config.tau_override.unwrap_or(r as f64))?;
            Ok(Some(Stencil::new(&kernel.ball, kernel.weights, &geometry)))
        })
        .collect::<Result<_>>()?;

    let ids = labels.labels();
    let n = geometry.len();
    let [nx, ny, _] = geometry.dims();
    let slice_len = nx * ny;
    let mut probs = vec![0.0; n * num_labels];
    let mut mask = vec![0.0; n];

    probs
        .par_chunks_mut(slice_len * num_labels)
        .zip(mask.par_chunks_mut(slice_len))
        .enumerate()
        .for_each(|(z, (prob_slice, mask_slice))| {
            let mut acc = vec![0.0; num_labels];
            for local in 0..slice_len {
                let idx = z * slice_len + local;
                let p = geometry.coords(idx);
                let row = &mut prob_slice[local * num_labels..(local + 1) * num_labels];
                let own = ids[idx];
                match boundary_radius(&geometry, &outer, ids, &uncertainty, p, idx) {
                    None => row[own as usize] = 1.0,
                    Some(r_u) => {
                        let kernel = kernels[r_u as usize]
                            .as_ref()
                            .expect("r_u >= 1 has a kernel");
                        weighted_histogram(&geometry, kernel, ids, p, idx, &mut acc, row);
                        if !is_one_hot(row, own) {
                            mask_slice[local] = 1.0;
                        }
                    }
                }
            }
        });

    Ok(SmoothingOutput {
        smoothed: ProbVolume::new(geometry, num_labels, probs)?,
        mask: ScalarMap::new(geometry, mask)?,
        uncertainty_map: ScalarMap::new(geometry, uncertainty.into_iter().map(f64::from).collect())?,
    })
}

/// `Some(r_u)` when the voxel is near a boundary whose uncertainty is
/// nonzero, `None` when the row stays one-hot.
#[inline]
fn boundary_radius(
    geometry: &GridGeometry,
    outer: &Stencil,
    ids: &[LabelId],
    uncertainty: &[u32],
    p: [usize; 3],
    idx: usize,
) -> Option<u32> {
    let own = ids[idx];
    let mut min_u = uncertainty[idx];
    if min_u == 0 {
        return None;
    }
    let mut mixed = false;
    outer.for_each(geometry, p, idx, |_, k| {
        mixed |= ids[k] != own;
        min_u = min_u.min(uncertainty[k]);
        min_u != 0
    });
    if mixed && min_u > 0 {
        Some(min_u)
    } else {
        None
    }
}

#[inline]
fn weighted_histogram(
    geometry: &GridGeometry,
    kernel: &Stencil,
    ids: &[LabelId],
    p: [usize; 3],
    idx: usize,
    acc: &mut [f64],
    row: &mut [f64],
) {
    acc.iter_mut().for_each(|a| *a = 0.0);
    let mut total = 0.0;
    kernel.for_each(geometry, p, idx, |j, k| {
        let w = kernel.weights[j];
        acc[ids[k] as usize] += w;
        total += w;
        true
    });
    for (r, a) in row.iter_mut().zip(acc.iter()) {
        *r = a / total;
    }
}

#[inline]
fn is_one_hot(row: &[f64], label: LabelId) -> bool {
    row.iter()
        .enumerate()
        .all(|(k, &v)| if k == label as usize { v == 1.0 } else { v == 0.0 })
}

/// Uniform label smoothing: `(1 - alpha) * onehot + alpha / L` for every
/// non-background voxel; background rows stay one-hot.
pub fn standard_smooth(labels: &LabelVolume, alpha: f64) -> Result<ProbVolume> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::validation(format!(
            "alpha must lie in [0, 1), got {alpha}"
        )));
    }
    let l = labels.num_labels();
    let floor = alpha / l as f64;
    let mut probs = labels.one_hot();
    for (row, &lab) in probs.probs_mut().chunks_exact_mut(l).zip(labels.labels()) {
        if lab == 0 {
            continue;
        }
        for (k, v) in row.iter_mut().enumerate() {
            *v = if k == lab as usize { 1.0 - alpha + floor } else { floor };
        }
    }
    Ok(probs)
}

/// `M(i) = 1` exactly where the smoothed row is not the one-hot row of the
/// original label.
pub fn compute_mask(original: &LabelVolume, smoothed: &ProbVolume) -> Result<ScalarMap> {
    original
        .geometry()
        .check_same_grid(smoothed.geometry(), "compute_mask")?;
    if original.num_labels() != smoothed.num_labels() {
        return Err(Error::validation(format!(
            "compute_mask: L mismatch {} vs {}",
            original.num_labels(),
            smoothed.num_labels()
        )));
    }
    let values = smoothed
        .rows()
        .zip(original.labels())
        .map(|(row, &lab)| if is_one_hot(row, lab) { 0.0 } else { 1.0 })
        .collect();
    ScalarMap::new(*original.geometry(), values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split_volume(n: usize, cut: usize, l: usize) -> LabelVolume {
        let g = GridGeometry::cube(n).unwrap();
        LabelVolume::from_fn(g, l, |[x, _, _]| if x < cut { 0 } else { 1 }).unwrap()
    }

    #[test]
    fn uncertainty_map_is_table_lookup() {
        let g = GridGeometry::new([3, 1, 1], [1.0; 3]).unwrap();
        let lv = LabelVolume::new(g, 3, vec![0, 1, 2]).unwrap();
        // caudate-like tissue carries 2, ventricle-like 0
        let table = UncertaintyTable::new(vec![1, 2, 0]).unwrap();
        let u = build_uncertainty_map(&lv, &table).unwrap();
        assert_eq!(u.values(), &[1.0, 2.0, 0.0]);

        let bg = LabelVolume::filled(g, 2, 0).unwrap();
        let zero = UncertaintyTable::new(vec![0, 3]).unwrap();
        assert!(build_uncertainty_map(&bg, &zero)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn uncertainty_map_requires_entry() {
        let g = GridGeometry::new([2, 1, 1], [1.0; 3]).unwrap();
        let lv = LabelVolume::new(g, 3, vec![0, 2]).unwrap();
        let table = UncertaintyTable::new(vec![1, 1]).unwrap();
        assert!(build_uncertainty_map(&lv, &table).is_err());
        assert!(smooth_labels(&lv, &table).is_err());
    }

    #[test]
    fn homogeneous_volume_is_untouched() {
        let g = GridGeometry::cube(6).unwrap();
        let lv = LabelVolume::filled(g, 3, 2).unwrap();
        let table = UncertaintyTable::uniform(3, 3).unwrap();
        let out = smooth_labels(&lv, &table).unwrap();
        assert_eq!(out.smoothed, lv.one_hot());
        assert_eq!(out.mask.count_nonzero(), 0);
    }

    #[test]
    fn zero_uncertainty_neighbor_blocks_smoothing() {
        let lv = split_volume(9, 4, 2);
        let table = UncertaintyTable::new(vec![0, 3]).unwrap();
        let out = smooth_labels(&lv, &table).unwrap();
        assert_eq!(out.mask.count_nonzero(), 0);
        assert_eq!(out.smoothed, lv.one_hot());
    }

    #[test]
    fn two_sided_boundary_gets_smoothed_symmetrically() {
        let lv = split_volume(9, 4, 2);
        let table = UncertaintyTable::uniform(2, 2).unwrap();
        let out = smooth_labels(&lv, &table).unwrap();
        let g = lv.geometry();
        // voxels at x = 3 and x = 4 face each other across the cut
        let a = out.smoothed.row(g.index([3, 4, 4]));
        let b = out.smoothed.row(g.index([4, 4, 4]));
        assert!((a[0] - b[1]).abs() < 1e-15);
        assert!(a[0] > 0.5 && a[0] < 1.0);
        // deep interior untouched
        assert_eq!(out.mask.get([0, 4, 4]), 0.0);
        assert_eq!(out.mask.get([8, 4, 4]), 0.0);
    }

    #[test]
    fn center_carries_largest_weight() {
        for r in 1..=4 {
            let k = SmoothingKernel::new(r, r as f64).unwrap();
            let center = k.offsets().iter().position(|o| *o == [0, 0, 0]).unwrap();
            let max = k.weights().iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(k.weights()[center], max);
            assert_eq!(k.weights().iter().filter(|&&w| w == max).count(), 1);
        }
    }

    #[test]
    fn tau_override_changes_weights() {
        let lv = split_volume(9, 4, 2);
        let table = UncertaintyTable::uniform(2, 2).unwrap();
        let a = smooth_labels(&lv, &table).unwrap();
        let b = smooth_labels_with(&lv, &table, &SmoothingConfig { tau_override: Some(0.5) }).unwrap();
        let i = lv.geometry().index([3, 4, 4]);
        assert!(b.smoothed.row(i)[0] > a.smoothed.row(i)[0]);
        assert!(smooth_labels_with(&lv, &table, &SmoothingConfig { tau_override: Some(0.0) }).is_err());
    }

    #[test]
    fn standard_smoothing_rows() {
        let g = GridGeometry::new([2, 1, 1], [1.0; 3]).unwrap();
        let lv = LabelVolume::new(g, 4, vec![2, 0]).unwrap();
        let p = standard_smooth(&lv, 0.1).unwrap();
        let expect = [0.025, 0.025, 0.925, 0.025];
        for (a, b) in p.row(0).iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((p.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(p.row(1), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(standard_smooth(&lv, 0.0).unwrap(), lv.one_hot());
        assert!(standard_smooth(&lv, 1.0).is_err());
        assert!(standard_smooth(&lv, -0.1).is_err());
    }

    #[test]
    fn mask_marks_exactly_altered_rows() {
        let g = GridGeometry::new([3, 1, 1], [1.0; 3]).unwrap();
        let lv = LabelVolume::new(g, 2, vec![0, 1, 1]).unwrap();
        let mut p = lv.one_hot();
        assert_eq!(compute_mask(&lv, &p).unwrap().count_nonzero(), 0);
        p.probs_mut()[2] = 0.25;
        p.probs_mut()[3] = 0.75;
        let m = compute_mask(&lv, &p).unwrap();
        assert_eq!(m.values(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn mask_rejects_geometry_mismatch() {
        let lv = split_volume(3, 1, 2);
        let other = split_volume(4, 1, 2).one_hot();
        assert!(compute_mask(&lv, &other).is_err());
    }
}
