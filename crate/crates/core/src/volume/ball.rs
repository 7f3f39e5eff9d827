use super::GridGeometry;
use crate::{Error, Result};

/// Integer offsets `k - i` with Euclidean norm at most `radius` (voxel units),
/// in linear-index order (z slowest, x fastest).
#[derive(Debug, Clone)]
pub struct BallOffsets {
    radius: f64,
    offsets: Vec<[i64; 3]>,
    distances: Vec<f64>,
}

impl BallOffsets {
    pub fn new(radius: f64) -> Result<Self> {
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(Error::validation(format!(
                "ball radius must be finite and nonnegative, got {radius}"
            )));
        }
        let reach = radius.floor() as i64;
        let mut offsets = Vec::new();
        let mut distances = Vec::new();
        for dz in -reach..=reach {
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let d = ((dx * dx + dy * dy + dz * dz) as f64).sqrt();
                    if d <= radius {
                        offsets.push([dx, dy, dz]);
                        distances.push(d);
                    }
                }
            }
        }
        Ok(BallOffsets {
            radius,
            offsets,
            distances,
        })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Largest absolute per-axis offset.
    pub fn reach(&self) -> usize {
        self.radius.floor() as usize
    }

    pub fn offsets(&self) -> &[[i64; 3]] {
        &self.offsets
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// All in-bounds voxels within Euclidean distance `radius` of `center`,
/// in ascending linear-index order.
pub fn index_ball(center: [usize; 3], radius: f64, geometry: &GridGeometry) -> Result<Vec<[usize; 3]>> {
    let c = center.map(|v| v as i64);
    if !geometry.contains(c) {
        return Err(Error::validation(format!(
            "ball center {center:?} outside grid {:?}",
            geometry.dims()
        )));
    }
    let ball = BallOffsets::new(radius)?;
    Ok(ball
        .offsets()
        .iter()
        .map(|o| [c[0] + o[0], c[1] + o[1], c[2] + o[2]])
        .filter(|p| geometry.contains(*p))
        .map(|p| p.map(|v| v as usize))
        .collect())
}
