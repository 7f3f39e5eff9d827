//! Synthetic nested-shell phantoms and bounded boundary noise.
//!
//! Random streams use ChaCha8 (`rand_chacha`) seeded with `seed_from_u64`,
//! consumed in linear voxel order, so outputs depend only on the
//! `PhantomSpec` and `NoiseSpec`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::metrics::squared_edt;
use crate::volume::{GridGeometry, LabelId, LabelVolume, ScalarMap, UncertaintyTable};
use crate::{Error, Result};

/// Name of the generator recorded in output metadata.
pub const RNG_NAME: &str = "ChaCha8Rng(seed_from_u64)";

/// Concentric spheres around the grid center; label `k` is the region inside
/// sphere `k - 1` but outside sphere `k`, label 0 is outside all of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    #[serde(default = "unit_spacing")]
    pub spacing: [f64; 3],
    /// Strictly decreasing sphere radii in voxels.
    pub radii: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Mean intensity per label, background first.
    pub intensity_means: Vec<f64>,
    #[serde(default)]
    pub intensity_sigma: f64,
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

impl PhantomSpec {
    pub fn num_labels(&self) -> usize {
        self.radii.len() + 1
    }

    pub fn geometry(&self) -> Result<GridGeometry> {
        GridGeometry::new(self.dims, self.spacing)
    }

    fn center(&self) -> [f64; 3] {
        self.dims.map(|n| (n as f64 - 1.0) / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        if self.radii.is_empty() {
            return Err(Error::validation("phantom needs at least one shell radius"));
        }
        if self.radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::validation("phantom radii must be finite and positive"));
        }
        if self.radii.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::validation("phantom radii must be strictly decreasing"));
        }
        let room = self.center().into_iter().fold(f64::INFINITY, f64::min);
        if self.radii[0] > room {
            return Err(Error::validation(format!(
                "outer radius {} does not fit in grid {:?} (max {room})",
                self.radii[0], self.dims
            )));
        }
        if self.intensity_means.len() != self.num_labels() {
            return Err(Error::validation(format!(
                "need {} intensity means, got {}",
                self.num_labels(),
                self.intensity_means.len()
            )));
        }
        if self.intensity_means.iter().any(|m| !m.is_finite())
            || !(self.intensity_sigma.is_finite() && self.intensity_sigma >= 0.0)
        {
            return Err(Error::validation("intensity parameters must be finite, sigma >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub clean: LabelVolume,
    pub intensity: ScalarMap,
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let g = spec.geometry()?;
    let c = spec.center();
    let clean = LabelVolume::from_fn(g, spec.num_labels(), |p| {
        let d = (0..3)
            .map(|a| (p[a] as f64 - c[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        spec.radii.iter().filter(|&&r| d <= r).count() as LabelId
    })?;
    let mut values: Vec<f64> = clean
        .labels()
        .iter()
        .map(|&l| spec.intensity_means[l as usize])
        .collect();
    if spec.intensity_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.intensity_sigma)
            .map_err(|e| Error::validation(format!("intensity noise: {e}")))?;
        values.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    Ok(Phantom {
        intensity: ScalarMap::new(g, values)?,
        clean,
    })
}

/// Per-label boundary displacement budget (voxels) for noise injection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub budgets: Vec<u32>,
    #[serde(default)]
    pub seed: u64,
    /// Chance that an eligible band voxel is flipped.
    #[serde(default = "default_flip_probability")]
    pub flip_probability: f64,
}

fn default_flip_probability() -> f64 {
    0.5
}

impl NoiseSpec {
    pub fn new(budgets: Vec<u32>, seed: u64) -> Self {
        NoiseSpec {
            budgets,
            seed,
            flip_probability: default_flip_probability(),
        }
    }

    /// The uncertainty table matching these budgets.
    pub fn uncertainty_table(&self) -> Result<UncertaintyTable> {
        UncertaintyTable::new(self.budgets.clone())
    }

    fn validate(&self, num_labels: usize) -> Result<()> {
        if self.budgets.len() < num_labels {
            return Err(Error::validation(format!(
                "noise spec has {} budgets for {num_labels} labels",
                self.budgets.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::validation("flip probability must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Flips voxels near inter-label boundaries to the adjacent label.
///
/// A voxel of label `a` is eligible when some other label `b` lies within
/// Euclidean distance `min(budget_a, budget_b)` (voxel units); it takes the
/// nearest such `b` (lowest id on ties) with probability `flip_probability`.
/// If no eligible voxel flips by chance, the one with the lowest draw flips.
pub fn inject_boundary_noise(clean: &LabelVolume, noise: &NoiseSpec) -> Result<LabelVolume> {
    let l = clean.num_labels();
    noise.validate(l)?;
    let g = GridGeometry::new(clean.geometry().dims(), [1.0; 3])?;
    let ids = clean.labels();
    let budgets = &noise.budgets;

    let mut dist: Vec<Option<Vec<f64>>> = Vec::with_capacity(l);
    for b in 0..l as LabelId {
        let seeds: Vec<bool> = ids.iter().map(|&x| x == b).collect();
        dist.push(if budgets[b as usize] > 0 && seeds.iter().any(|&s| s) {
            Some(squared_edt(&g, &seeds)?)
        } else {
            None
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let mut noisy = ids.to_vec();
    let mut flipped = 0usize;
    let mut lowest: Option<(f64, usize, LabelId)> = None;
    for (i, &a) in ids.iter().enumerate() {
        let ba = budgets[a as usize];
        if ba == 0 {
            continue;
        }
        let mut best: Option<(f64, LabelId)> = None;
        for (b, d) in dist.iter().enumerate() {
            let (b, Some(d)) = (b as LabelId, d) else { continue };
            if b == a {
                continue;
            }
            let w = ba.min(budgets[b as usize]) as f64;
            let d2 = d[i];
            if d2 <= w * w && best.is_none_or(|(bd, _)| d2 < bd) {
                best = Some((d2, b));
            }
        }
        let Some((_, b)) = best else { continue };
        let draw: f64 = rng.random();
        if draw < noise.flip_probability {
            noisy[i] = b;
            flipped += 1;
        }
        if lowest.is_none_or(|(ld, _, _)| draw < ld) {
            lowest = Some((draw, i, b));
        }
    }
    if flipped == 0 {
        if let Some((_, i, b)) = lowest {
            noisy[i] = b;
        }
    }
    LabelVolume::new(*clean.geometry(), l, noisy)
}
