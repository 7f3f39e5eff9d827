//! Overlap and surface-distance metrics between two label volumes.
//!
//! Surface voxels are voxels of a label with at least one 6-connected face
//! neighbor of another label, or on the volume border. HD95 and ASSD pool the
//! directed distances from each surface to the other: HD95 is the 95th
//! percentile of the pooled distances (linear interpolation between closest
//! ranks), ASSD their mean. Distances are in millimeters through the grid
//! spacing and come from an exact separable Euclidean distance transform.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::volume::{GridGeometry, LabelId, LabelVolume, ScalarMap};
use crate::{Error, Result};

/// `2|A ∩ B| / (|A| + |B|)`; 1 when the label is absent from both.
pub fn dsc(pred: &LabelVolume, reference: &LabelVolume, label: LabelId) -> Result<f64> {
    pred.geometry().check_same_grid(reference.geometry(), "dsc")?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &r) in pred.labels().iter().zip(reference.labels()) {
        let (ip, ir) = (p == label, r == label);
        a += ip as usize;
        b += ir as usize;
        both += (ip && ir) as usize;
    }
    Ok(if a + b == 0 {
        1.0
    } else {
        2.0 * both as f64 / (a + b) as f64
    })
}

/// Linear indices of the surface voxels of `label`, ascending.
pub fn surface_voxels(vol: &LabelVolume, label: LabelId) -> Vec<usize> {
    let g = vol.geometry();
    let dims = g.dims();
    let ids = vol.labels();
    let strides = [1, dims[0], dims[0] * dims[1]];
    (0..g.len())
        .filter(|&i| {
            if ids[i] != label {
                return false;
            }
            let p = g.coords(i);
            (0..3).any(|a| {
                p[a] == 0
                    || p[a] + 1 == dims[a]
                    || ids[i - strides[a]] != label
                    || ids[i + strides[a]] != label
            })
        })
        .collect()
}

/// Exact Euclidean distance (mm) from every voxel to the nearest nonzero
/// voxel of `mask`, with per-axis `spacing`.
pub fn edt(mask: &ScalarMap, spacing: [f64; 3]) -> Result<ScalarMap> {
    let g = mask.geometry().with_spacing(spacing)?;
    let seeds = mask.to_mask();
    let sq = squared_edt(&g, &seeds)?;
    ScalarMap::new(g, sq.into_iter().map(f64::sqrt).collect())
}

/// Squared distances to the nearest `true` voxel, in mm².
pub fn squared_edt(geometry: &GridGeometry, seeds: &[bool]) -> Result<Vec<f64>> {
    if seeds.len() != geometry.len() {
        return Err(Error::validation("edt: mask size does not match geometry"));
    }
    if !seeds.iter().any(|&s| s) {
        return Err(Error::validation("edt: mask has no foreground voxel"));
    }
    let dims = geometry.dims();
    let spacing = geometry.spacing();
    let mut f: Vec<f64> = seeds
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis];
        if n == 1 {
            continue;
        }
        let stride = strides[axis];
        // line starts: every voxel whose coordinate along `axis` is 0
        let starts: Vec<usize> = (0..geometry.len())
            .filter(|&i| geometry.coords(i)[axis] == 0)
            .collect();
        let results: Vec<Vec<f64>> = starts
            .par_iter()
            .map_init(
                || (vec![0.0; n], Vec::with_capacity(n), Vec::with_capacity(n + 1)),
                |(line, v, z), &s| {
                    for (q, l) in line.iter_mut().enumerate() {
                        *l = f[s + q * stride];
                    }
                    let mut out = vec![0.0; n];
                    lower_envelope(line, spacing[axis], &mut out, v, z);
                    out
                },
            )
            .collect();
        for (&s, out) in starts.iter().zip(results) {
            for (q, v) in out.into_iter().enumerate() {
                f[s + q * stride] = v;
            }
        }
    }
    Ok(f)
}

/// One-dimensional squared distance transform of sampled function `f` with
/// sample spacing `s`: `out[q] = min_p (s (q - p))^2 + f[p]`.
fn lower_envelope(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let pos = |q: usize| s * q as f64;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        let xq = pos(q);
        let mut boundary = f64::NEG_INFINITY;
        while let Some(&p) = v.last() {
            let xp = pos(p);
            let cross = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
            if cross <= *z.last().expect("z tracks v") {
                v.pop();
                z.pop();
            } else {
                boundary = cross;
                break;
            }
        }
        v.push(q);
        z.push(boundary);
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let x = pos(q);
        while j + 1 < v.len() && z[j + 1] < x {
            j += 1;
        }
        let d = x - pos(v[j]);
        *o = d * d + f[v[j]];
    }
}

/// Percentile `q` in [0, 100] by linear interpolation between closest ranks.
/// `values` must be sorted ascending and non-empty.
pub fn percentile_sorted(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (rank - lo as f64) * (values[hi] - values[lo])
}

/// Distances (mm) from each surface voxel of `label` in `from` to the nearest
/// surface voxel of `label` in `to`. `None` if either surface is empty.
pub fn directed_surface_distances(
    from: &LabelVolume,
    to: &LabelVolume,
    label: LabelId,
    spacing: [f64; 3],
) -> Result<Option<Vec<f64>>> {
    from.geometry().check_same_grid(to.geometry(), "surface distance")?;
    let src = surface_voxels(from, label);
    let dst = surface_voxels(to, label);
    if src.is_empty() || dst.is_empty() {
        return Ok(None);
    }
    let g = to.geometry().with_spacing(spacing)?;
    let mut seeds = vec![false; g.len()];
    dst.iter().for_each(|&i| seeds[i] = true);
    let sq = squared_edt(&g, &seeds)?;
    Ok(Some(src.iter().map(|&i| sq[i].sqrt()).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SurfaceDistances {
    pub hd95_mm: f64,
    pub assd_mm: f64,
}

/// Pooled symmetric HD95 and ASSD; `None` when the label is missing from
/// either volume.
pub fn hd95_assd(
    pred: &LabelVolume,
    reference: &LabelVolume,
    label: LabelId,
    spacing: [f64; 3],
) -> Result<Option<SurfaceDistances>> {
    let Some(mut pooled) = directed_surface_distances(pred, reference, label, spacing)? else {
        return Ok(None);
    };
    let back = directed_surface_distances(reference, pred, label, spacing)?
        .expect("both surfaces non-empty");
    pooled.extend(back);
    Ok(Some(pooled_statistics(pooled)))
}

fn pooled_statistics(mut d: Vec<f64>) -> SurfaceDistances {
    let assd = crate::sum::neumaier_sum(d.iter().copied()) / d.len() as f64;
    d.sort_by(f64::total_cmp);
    SurfaceDistances {
        hd95_mm: percentile_sorted(&d, 95.0),
        assd_mm: assd,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DirectedStats {
    pub hd95_mm: f64,
    pub mean_mm: f64,
}

/// Both directed statistics, for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DirectedDistances {
    pub pred_to_ref: DirectedStats,
    pub ref_to_pred: DirectedStats,
}

fn directed_stats(mut d: Vec<f64>) -> DirectedStats {
    let mean = crate::sum::neumaier_sum(d.iter().copied()) / d.len() as f64;
    d.sort_by(f64::total_cmp);
    DirectedStats {
        hd95_mm: percentile_sorted(&d, 95.0),
        mean_mm: mean,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelMetrics {
    pub dsc: f64,
    pub hd95_mm: Option<f64>,
    pub assd_mm: Option<f64>,
    pub present_in_ref: bool,
    pub present_in_pred: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub directed: Option<DirectedDistances>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Number of labels the metric was defined for.
    pub count: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(MeanStd {
            mean,
            std: var.sqrt(),
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub dsc: Option<MeanStd>,
    pub hd95_mm: Option<MeanStd>,
    pub assd_mm: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_label: BTreeMap<LabelId, LabelMetrics>,
    pub aggregate: Aggregate,
}

impl MetricsReport {
    /// Recomputes the aggregate from `per_label`.
    pub fn aggregate_of(per_label: &BTreeMap<LabelId, LabelMetrics>) -> Aggregate {
        let dsc: Vec<f64> = per_label.values().map(|m| m.dsc).collect();
        let hd: Vec<f64> = per_label.values().filter_map(|m| m.hd95_mm).collect();
        let assd: Vec<f64> = per_label.values().filter_map(|m| m.assd_mm).collect();
        Aggregate {
            dsc: MeanStd::of(&dsc),
            hd95_mm: MeanStd::of(&hd),
            assd_mm: MeanStd::of(&assd),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsOptions {
    /// Labels to score; `None` means every foreground label `1..L`.
    pub labels: Option<Vec<LabelId>>,
    /// Also report directed statistics.
    pub directed: bool,
}

/// Per-label DSC / HD95 / ASSD with mean ± std aggregates. Spacing comes from
/// the reference volume.
pub fn evaluate(pred: &LabelVolume, reference: &LabelVolume, options: &MetricsOptions) -> Result<MetricsReport> {
    pred.geometry().check_same_grid(reference.geometry(), "metrics")?;
    let labels: Vec<LabelId> = match &options.labels {
        Some(l) => l.clone(),
        None => (1..reference.num_labels().max(pred.num_labels()) as LabelId).collect(),
    };
    let spacing = reference.geometry().spacing();
    let rows: Vec<(LabelId, LabelMetrics)> = labels
        .par_iter()
        .map(|&label| -> Result<(LabelId, LabelMetrics)> {
            let forward = directed_surface_distances(pred, reference, label, spacing)?;
            let backward = directed_surface_distances(reference, pred, label, spacing)?;
            let (hd95, assd, directed) = match (forward, backward) {
                (Some(f), Some(b)) => {
                    let directed = options
                        .directed
                        .then(|| DirectedDistances {
                            pred_to_ref: directed_stats(f.clone()),
                            ref_to_pred: directed_stats(b.clone()),
                        });
                    let mut pooled = f;
                    pooled.extend(b);
                    let s = pooled_statistics(pooled);
                    (Some(s.hd95_mm), Some(s.assd_mm), directed)
                }
                _ => (None, None, None),
            };
            Ok((
                label,
                LabelMetrics {
                    dsc: dsc(pred, reference, label)?,
                    hd95_mm: hd95,
                    assd_mm: assd,
                    present_in_ref: reference.labels().contains(&label),
                    present_in_pred: pred.labels().contains(&label),
                    directed,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let per_label: BTreeMap<_, _> = rows.into_iter().collect();
    let aggregate = MetricsReport::aggregate_of(&per_label);
    Ok(MetricsReport {
        per_label,
        aggregate,
    })
}
