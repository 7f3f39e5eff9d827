//! Brute-force reference implementations and random inputs shared by the
//! integration tests. Everything here favors obviousness over speed.

#![allow(dead_code)]

use noisyseg::volume::{GridGeometry, LabelId, LabelVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Labels from the nearest of a few random centers (Voronoi cells), which
/// gives both flat interiors and boundaries between every pair of labels.
pub fn voronoi_labels(rng: &mut ChaCha8Rng, dims: [usize; 3], spacing: [f64; 3], num_labels: usize, cells: usize) -> LabelVolume {
    let g = GridGeometry::new(dims, spacing).unwrap();
    let centers: Vec<([f64; 3], LabelId)> = (0..cells)
        .map(|_| {
            let c = dims.map(|n| rng.random_range(0.0..n as f64));
            (c, rng.random_range(0..num_labels) as LabelId)
        })
        .collect();
    LabelVolume::from_fn(g, num_labels, |p| {
        let mut best = (f64::INFINITY, 0);
        for (c, l) in &centers {
            let d: f64 = (0..3).map(|a| (p[a] as f64 - c[a]).powi(2)).sum();
            if d < best.0 {
                best = (d, *l);
            }
        }
        best.1
    })
    .unwrap()
}

/// Random grid shape with every edge in `1..=max_edge`.
pub fn random_dims(rng: &mut ChaCha8Rng, max_edge: usize) -> [usize; 3] {
    [0; 3].map(|_| rng.random_range(1..=max_edge))
}

/// Weighted-ball smoothing written directly from the definition: enumerate
/// every in-bounds voxel within distance `R`, decide homogeneity and the
/// minimum uncertainty, then average indicator vectors over the radius-`r_u`
/// ball with weights `exp(-d / r_u)`.
pub fn smooth_oracle(labels: &LabelVolume, table: &[u32]) -> (Vec<f64>, Vec<bool>) {
    let g = labels.geometry();
    let [nx, ny, nz] = g.dims().map(|n| n as i64);
    let l = labels.num_labels();
    let r_max = *table.iter().max().unwrap() as i64;
    let mut probs = vec![0.0; g.len() * l];
    let mut mask = vec![false; g.len()];
    let ball = |c: [i64; 3], r: i64| -> Vec<([i64; 3], f64)> {
        let mut out = Vec::new();
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let d2 = (x - c[0]).pow(2) + (y - c[1]).pow(2) + (z - c[2]).pow(2);
                    if d2 <= r * r {
                        out.push(([x, y, z], (d2 as f64).sqrt()));
                    }
                }
            }
        }
        out
    };
    let label_at = |p: [i64; 3]| labels.get([p[0] as usize, p[1] as usize, p[2] as usize]);
    for i in 0..g.len() {
        let c = g.coords(i).map(|v| v as i64);
        let own = label_at(c);
        let row = &mut probs[i * l..(i + 1) * l];
        let neighborhood = ball(c, r_max);
        let homogeneous = neighborhood.iter().all(|(p, _)| label_at(*p) == own);
        let r_u = neighborhood
            .iter()
            .map(|(p, _)| table[label_at(*p) as usize])
            .min()
            .unwrap();
        if homogeneous || r_u == 0 {
            row[own as usize] = 1.0;
            continue;
        }
        let patch = ball(c, r_u as i64);
        let tau = r_u as f64;
        let total: f64 = patch.iter().map(|(_, d)| (-d / tau).exp()).sum();
        for (p, d) in &patch {
            row[label_at(*p) as usize] += (-d / tau).exp() / total;
        }
        // All weights are positive, so the row leaves one-hot exactly when the
        // patch holds another label; comparing the float row would misjudge
        // rounding in the normalized sum.
        mask[i] = patch.iter().any(|(p, _)| label_at(*p) != own);
    }
    (probs, mask)
}

/// Distance in mm from every voxel to the nearest seed by exhaustive search.
pub fn edt_oracle(g: &GridGeometry, seeds: &[bool]) -> Vec<f64> {
    let s = g.spacing();
    let seed_pts: Vec<[usize; 3]> = (0..g.len()).filter(|&i| seeds[i]).map(|i| g.coords(i)).collect();
    (0..g.len())
        .map(|i| {
            let p = g.coords(i);
            seed_pts
                .iter()
                .map(|q| {
                    (0..3)
                        .map(|a| ((p[a] as f64 - q[a] as f64) * s[a]).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Voxels of `label` with a face neighbor of another label or on the border.
pub fn surface_oracle(v: &LabelVolume, label: LabelId) -> Vec<[usize; 3]> {
    let g = v.geometry();
    let d = g.dims();
    let mut out = Vec::new();
    for i in 0..g.len() {
        let p = g.coords(i);
        if v.get(p) != label {
            continue;
        }
        let mut surface = false;
        for a in 0..3 {
            for step in [-1i64, 1] {
                let q = p[a] as i64 + step;
                if q < 0 || q >= d[a] as i64 {
                    surface = true;
                } else {
                    let mut n = p;
                    n[a] = q as usize;
                    surface |= v.get(n) != label;
                }
            }
        }
        if surface {
            out.push(p);
        }
    }
    out
}

pub fn dsc_oracle(a: &LabelVolume, b: &LabelVolume, label: LabelId) -> f64 {
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        na += (x == label) as usize;
        nb += (y == label) as usize;
        both += (x == label && y == label) as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

/// Pooled symmetric (HD95, ASSD) from all pairwise surface distances.
pub fn hd95_assd_oracle(a: &LabelVolume, b: &LabelVolume, label: LabelId) -> Option<(f64, f64)> {
    let s = a.geometry().spacing();
    let sa = surface_oracle(a, label);
    let sb = surface_oracle(b, label);
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let dist = |p: &[usize; 3], q: &[usize; 3]| -> f64 {
        (0..3)
            .map(|k| ((p[k] as f64 - q[k] as f64) * s[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let nearest = |p: &[usize; 3], set: &[[usize; 3]]| set.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min);
    let mut pooled: Vec<f64> = sa.iter().map(|p| nearest(p, &sb)).collect();
    pooled.extend(sb.iter().map(|p| nearest(p, &sa)));
    let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
    pooled.sort_by(f64::total_cmp);
    let pos = 0.95 * (pooled.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(pooled.len() - 1);
    let frac = pos - lo as f64;
    Some((pooled[lo] + frac * (pooled[hi] - pooled[lo]), mean))
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
