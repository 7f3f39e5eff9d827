//! Typed 3D volumes and grid geometry.
//!
//! Every volume is stored flat with x varying fastest, then y, then z.
//! Per-voxel vectors (probabilities, scores) are stored row-major: the `L`
//! entries of voxel `i` occupy `[i * L, (i + 1) * L)`.

mod ball;
mod io;
mod uncertainty;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use ball::{index_ball, BallOffsets};
pub use io::{
    read_header, read_labels, read_probs, read_scalar, read_scores, read_volume, volume_paths,
    write_volume, write_volume_as, ElementType, Volume, VolumeHeader, VolumeKind, VolumeRef,
};
pub use uncertainty::{UncertaintyTable, DEFAULT_MAX_UNCERTAINTY};

/// Label identifier. Id 0 is background.
pub type LabelId = u16;

/// Tolerance on probability row sums.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGeometry", into = "RawGeometry")]
pub struct GridGeometry {
    dims: [usize; 3],
    spacing: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct RawGeometry {
    dims: [usize; 3],
    spacing: [f64; 3],
}

impl TryFrom<RawGeometry> for GridGeometry {
    type Error = Error;

    fn try_from(raw: RawGeometry) -> Result<Self> {
        GridGeometry::new(raw.dims, raw.spacing)
    }
}

impl From<GridGeometry> for RawGeometry {
    fn from(g: GridGeometry) -> Self {
        RawGeometry {
            dims: g.dims,
            spacing: g.spacing,
        }
    }
}

impl GridGeometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::validation(format!(
                "grid dims must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::validation(format!(
                "grid spacing must be finite and positive, got {spacing:?}"
            )));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::validation("voxel count overflows usize"))?;
        Ok(GridGeometry { dims, spacing })
    }

    /// Unit-spaced cubic grid.
    pub fn cube(n: usize) -> Result<Self> {
        GridGeometry::new([n, n, n], [1.0; 3])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn with_spacing(&self, spacing: [f64; 3]) -> Result<Self> {
        GridGeometry::new(self.dims, spacing)
    }

    /// Number of voxels.
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, [x, y, z]: [usize; 3]) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let rest = index / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    pub fn contains(&self, p: [i64; 3]) -> bool {
        (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < self.dims[a])
    }

    /// Same dims (spacing is allowed to differ).
    pub fn same_grid(&self, other: &GridGeometry) -> bool {
        self.dims == other.dims
    }

    pub(crate) fn check_same_grid(&self, other: &GridGeometry, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::validation(format!(
                "{what}: geometry mismatch {:?} vs {:?}",
                self.dims, other.dims
            )))
        }
    }
}

/// Hard per-voxel labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    geometry: GridGeometry,
    num_labels: usize,
    labels: Vec<LabelId>,
}

impl LabelVolume {
    pub fn new(geometry: GridGeometry, num_labels: usize, labels: Vec<LabelId>) -> Result<Self> {
        if num_labels < 2 || num_labels > LabelId::MAX as usize + 1 {
            return Err(Error::validation(format!(
                "number of labels must be in [2, 65536], got {num_labels}"
            )));
        }
        if labels.len() != geometry.len() {
            return Err(Error::validation(format!(
                "label payload has {} voxels, geometry needs {}",
                labels.len(),
                geometry.len()
            )));
        }
        if let Some((i, &l)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= num_labels)
        {
            return Err(Error::validation(format!(
                "label id {l} at voxel {i} is not below L = {num_labels}"
            )));
        }
        Ok(LabelVolume {
            geometry,
            num_labels,
            labels,
        })
    }

    /// Volume filled with one label.
    pub fn filled(geometry: GridGeometry, num_labels: usize, label: LabelId) -> Result<Self> {
        LabelVolume::new(geometry, num_labels, vec![label; geometry.len()])
    }

    pub fn from_fn(
        geometry: GridGeometry,
        num_labels: usize,
        mut f: impl FnMut([usize; 3]) -> LabelId,
    ) -> Result<Self> {
        let labels = (0..geometry.len()).map(|i| f(geometry.coords(i))).collect();
        LabelVolume::new(geometry, num_labels, labels)
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn labels(&self) -> &[LabelId] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<LabelId> {
        self.labels
    }

    #[inline]
    pub fn get(&self, p: [usize; 3]) -> LabelId {
        self.labels[self.geometry.index(p)]
    }

    /// Number of voxels carrying `label`.
    pub fn count(&self, label: LabelId) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Same labels on a grid with different spacing.
    pub fn with_spacing(&self, spacing: [f64; 3]) -> Result<Self> {
        Ok(LabelVolume {
            geometry: self.geometry.with_spacing(spacing)?,
            num_labels: self.num_labels,
            labels: self.labels.clone(),
        })
    }

    /// One-hot probability rows.
    pub fn one_hot(&self) -> ProbVolume {
        let l = self.num_labels;
        let mut probs = vec![0.0; self.labels.len() * l];
        for (i, &lab) in self.labels.iter().enumerate() {
            probs[i * l + lab as usize] = 1.0;
        }
        ProbVolume {
            geometry: self.geometry,
            num_labels: l,
            probs,
        }
    }
}

/// Per-voxel probability vectors over `L` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    geometry: GridGeometry,
    num_labels: usize,
    probs: Vec<f64>,
}

impl ProbVolume {
    pub fn new(geometry: GridGeometry, num_labels: usize, probs: Vec<f64>) -> Result<Self> {
        let vol = ProbVolume {
            geometry,
            num_labels,
            probs,
        };
        vol.validate()?;
        Ok(vol)
    }

    /// Checks shape, entry range and row sums.
    pub fn validate(&self) -> Result<()> {
        let l = self.num_labels;
        if l < 2 {
            return Err(Error::validation(format!(
                "number of labels must be at least 2, got {l}"
            )));
        }
        if self.probs.len() != self.geometry.len() * l {
            return Err(Error::validation(format!(
                "probability payload has {} entries, expected {} x {}",
                self.probs.len(),
                self.geometry.len(),
                l
            )));
        }
        for (i, row) in self.probs.chunks_exact(l).enumerate() {
            if let Some(p) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::validation(format!(
                    "probability {p} at voxel {i} is outside [0, 1]"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::validation(format!(
                    "probability row at voxel {i} sums to {s}"
                )));
            }
        }
        Ok(())
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Mutable access; callers are responsible for keeping rows on the simplex.
    pub fn probs_mut(&mut self) -> &mut [f64] {
        &mut self.probs
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.num_labels..(i + 1) * self.num_labels]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.probs.chunks_exact(self.num_labels)
    }

    /// Hard labels by row argmax; ties go to the lower id.
    pub fn argmax(&self) -> LabelVolume {
        let labels = self
            .rows()
            .map(|row| {
                let mut best = 0;
                for (k, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = k;
                    }
                }
                best as LabelId
            })
            .collect();
        LabelVolume {
            geometry: self.geometry,
            num_labels: self.num_labels,
            labels,
        }
    }
}

/// Pre-softmax scores, `N x L`, all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVolume {
    geometry: GridGeometry,
    num_labels: usize,
    scores: Vec<f64>,
}

impl ScoreVolume {
    pub fn new(geometry: GridGeometry, num_labels: usize, scores: Vec<f64>) -> Result<Self> {
        if num_labels < 2 {
            return Err(Error::validation(format!(
                "number of labels must be at least 2, got {num_labels}"
            )));
        }
        if scores.len() != geometry.len() * num_labels {
            return Err(Error::validation(format!(
                "score payload has {} entries, expected {} x {}",
                scores.len(),
                geometry.len(),
                num_labels
            )));
        }
        let vol = ScoreVolume {
            geometry,
            num_labels,
            scores,
        };
        vol.validate()?;
        Ok(vol)
    }

    pub fn validate(&self) -> Result<()> {
        match self.scores.iter().position(|s| !s.is_finite()) {
            Some(i) => Err(Error::validation(format!(
                "non-finite score at voxel {}",
                i / self.num_labels
            ))),
            None => Ok(()),
        }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn scores_mut(&mut self) -> &mut [f64] {
        &mut self.scores
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.num_labels..(i + 1) * self.num_labels]
    }
}

/// One real value per voxel: uncertainty maps, masks, intensities, distances.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    geometry: GridGeometry,
    values: Vec<f64>,
}

impl ScalarMap {
    pub fn new(geometry: GridGeometry, values: Vec<f64>) -> Result<Self> {
        if values.len() != geometry.len() {
            return Err(Error::validation(format!(
                "scalar payload has {} voxels, geometry needs {}",
                values.len(),
                geometry.len()
            )));
        }
        Ok(ScalarMap { geometry, values })
    }

    pub fn zeros(geometry: GridGeometry) -> Self {
        ScalarMap {
            geometry,
            values: vec![0.0; geometry.len()],
        }
    }

    /// Binary map with 1 where `mask` is set.
    pub fn from_mask(geometry: GridGeometry, mask: &[bool]) -> Result<Self> {
        ScalarMap::new(
            geometry,
            mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        )
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, p: [usize; 3]) -> f64 {
        self.values[self.geometry.index(p)]
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub(crate) fn check_binary(&self, what: &str) -> Result<()> {
        if self.is_binary() {
            Ok(())
        } else {
            Err(Error::validation(format!("{what} must contain only 0 and 1")))
        }
    }

    /// Voxels where the value is nonzero.
    pub fn to_mask(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v != 0.0).collect()
    }

    pub fn count_nonzero(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }
}
