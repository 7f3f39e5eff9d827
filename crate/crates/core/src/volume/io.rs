//! On-disk volume format: a JSON header next to a raw little-endian payload.
//!
//! `<name>.json` describes the grid and element type; `<name>.raw` holds the
//! voxels in x-fastest order. Labels are unsigned 16-bit integers,
//! probabilities, scores and scalar maps are 32-bit floats by default (64-bit
//! floats on request). Per-voxel vectors are stored row-major.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GridGeometry, LabelId, LabelVolume, ProbVolume, ScalarMap, ScoreVolume};
use crate::{Error, Result, FORMAT_VERSION};

const BYTE_ORDER: &str = "little-endian";
const ORDER: &str = "x-fastest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Labels,
    Probabilities,
    Scores,
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementType {
    U16,
    F32,
    F64,
}

impl ElementType {
    pub fn size(self) -> usize {
        match self {
            ElementType::U16 => 2,
            ElementType::F32 => 4,
            ElementType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub format_version: u32,
    pub kind: VolumeKind,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: ElementType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_labels: Option<usize>,
    pub byte_order: String,
    pub order: String,
    /// Payload file name, relative to the header's directory.
    pub payload: String,
}

/// Any volume the format can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Labels(LabelVolume),
    Probs(ProbVolume),
    Scores(ScoreVolume),
    Scalar(ScalarMap),
}

impl Volume {
    pub fn kind(&self) -> VolumeKind {
        match self {
            Volume::Labels(_) => VolumeKind::Labels,
            Volume::Probs(_) => VolumeKind::Probabilities,
            Volume::Scores(_) => VolumeKind::Scores,
            Volume::Scalar(_) => VolumeKind::Scalar,
        }
    }
}

impl From<LabelVolume> for Volume {
    fn from(v: LabelVolume) -> Self {
        Volume::Labels(v)
    }
}

impl From<ProbVolume> for Volume {
    fn from(v: ProbVolume) -> Self {
        Volume::Probs(v)
    }
}

impl From<ScoreVolume> for Volume {
    fn from(v: ScoreVolume) -> Self {
        Volume::Scores(v)
    }
}

impl From<ScalarMap> for Volume {
    fn from(v: ScalarMap) -> Self {
        Volume::Scalar(v)
    }
}

/// Borrowed view accepted by the writers.
#[derive(Debug, Clone, Copy)]
pub enum VolumeRef<'a> {
    Labels(&'a LabelVolume),
    Probs(&'a ProbVolume),
    Scores(&'a ScoreVolume),
    Scalar(&'a ScalarMap),
}

impl<'a> From<&'a LabelVolume> for VolumeRef<'a> {
    fn from(v: &'a LabelVolume) -> Self {
        VolumeRef::Labels(v)
    }
}

impl<'a> From<&'a ProbVolume> for VolumeRef<'a> {
    fn from(v: &'a ProbVolume) -> Self {
        VolumeRef::Probs(v)
    }
}

impl<'a> From<&'a ScoreVolume> for VolumeRef<'a> {
    fn from(v: &'a ScoreVolume) -> Self {
        VolumeRef::Scores(v)
    }
}

impl<'a> From<&'a ScalarMap> for VolumeRef<'a> {
    fn from(v: &'a ScalarMap) -> Self {
        VolumeRef::Scalar(v)
    }
}

impl<'a> From<&'a Volume> for VolumeRef<'a> {
    fn from(v: &'a Volume) -> Self {
        match v {
            Volume::Labels(v) => VolumeRef::Labels(v),
            Volume::Probs(v) => VolumeRef::Probs(v),
            Volume::Scores(v) => VolumeRef::Scores(v),
            Volume::Scalar(v) => VolumeRef::Scalar(v),
        }
    }
}

/// Header and payload paths for `path`, which may name the header
/// (`vol.json`) or the shared stem (`vol`).
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = if path.extension().is_some_and(|e| e == "json") {
        path.with_extension("")
    } else {
        path.to_path_buf()
    };
    let mut header = stem.clone().into_os_string();
    header.push(".json");
    let mut payload = stem.into_os_string();
    payload.push(".raw");
    (header.into(), payload.into())
}

/// Writes `vol` with floats as 32-bit values.
pub fn write_volume<'a>(vol: impl Into<VolumeRef<'a>>, path: &Path) -> Result<()> {
    write_volume_as(vol, path, ElementType::F32)
}

/// Writes `vol`, storing float payloads as `float_type` (`F32` or `F64`).
/// Labels are always 16-bit.
pub fn write_volume_as<'a>(
    vol: impl Into<VolumeRef<'a>>,
    path: &Path,
    float_type: ElementType,
) -> Result<()> {
    if float_type == ElementType::U16 {
        return Err(Error::validation("float payload type must be f32 or f64"));
    }
    let vol = vol.into();
    let (header_path, payload_path) = volume_paths(path);
    let (kind, geometry, num_labels, dtype, bytes) = match vol {
        VolumeRef::Labels(v) => {
            let mut bytes = Vec::with_capacity(v.labels().len() * 2);
            for l in v.labels() {
                bytes.extend_from_slice(&l.to_le_bytes());
            }
            (VolumeKind::Labels, *v.geometry(), Some(v.num_labels()), ElementType::U16, bytes)
        }
        VolumeRef::Probs(v) => {
            v.validate()?;
            (
                VolumeKind::Probabilities,
                *v.geometry(),
                Some(v.num_labels()),
                float_type,
                encode_floats(v.probs(), float_type),
            )
        }
        VolumeRef::Scores(v) => {
            v.validate()?;
            (
                VolumeKind::Scores,
                *v.geometry(),
                Some(v.num_labels()),
                float_type,
                encode_floats(v.scores(), float_type),
            )
        }
        VolumeRef::Scalar(v) => {
            if v.values().iter().any(|x| x.is_nan()) {
                return Err(Error::validation("scalar map contains NaN"));
            }
            (VolumeKind::Scalar, *v.geometry(), None, float_type, encode_floats(v.values(), float_type))
        }
    };
    let header = VolumeHeader {
        format_version: FORMAT_VERSION,
        kind,
        dims: geometry.dims(),
        spacing: geometry.spacing(),
        dtype,
        num_labels,
        byte_order: BYTE_ORDER.to_string(),
        order: ORDER.to_string(),
        payload: payload_path
            .file_name()
            .expect("payload path has a file name")
            .to_string_lossy()
            .into_owned(),
    };
    let text = serde_json::to_string_pretty(&header).expect("header serializes") + "\n";
    std::fs::write(&payload_path, bytes).map_err(|e| Error::io(&payload_path, e))?;
    std::fs::write(&header_path, text).map_err(|e| Error::io(&header_path, e))?;
    Ok(())
}

fn encode_floats(values: &[f64], dtype: ElementType) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * dtype.size());
    match dtype {
        ElementType::F32 => values
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        ElementType::F64 => values
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        ElementType::U16 => unreachable!("labels are encoded separately"),
    }
    out
}

fn decode_floats(bytes: &[u8], dtype: ElementType) -> Vec<f64> {
    match dtype {
        ElementType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        ElementType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        ElementType::U16 => unreachable!("labels are decoded separately"),
    }
}

pub fn read_header(path: &Path) -> Result<VolumeHeader> {
    let (header_path, _) = volume_paths(path);
    let text = std::fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&header_path, e))
}

/// Reads and validates a volume of any kind.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let (header_path, _) = volume_paths(path);
    let header = read_header(path)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::validation(format!(
            "{}: unsupported format version {}",
            header_path.display(),
            header.format_version
        )));
    }
    if header.byte_order != BYTE_ORDER || header.order != ORDER {
        return Err(Error::validation(format!(
            "{}: expected byte_order {BYTE_ORDER:?} and order {ORDER:?}",
            header_path.display()
        )));
    }
    let geometry = GridGeometry::new(header.dims, header.spacing)?;
    let per_voxel = match header.kind {
        VolumeKind::Labels | VolumeKind::Scalar => 1,
        VolumeKind::Probabilities | VolumeKind::Scores => header
            .num_labels
            .ok_or_else(|| Error::validation("header lacks num_labels"))?,
    };
    let dtype_ok = match header.kind {
        VolumeKind::Labels => header.dtype == ElementType::U16,
        _ => header.dtype != ElementType::U16,
    };
    if !dtype_ok {
        return Err(Error::validation(format!(
            "{}: dtype {:?} not allowed for {:?}",
            header_path.display(),
            header.dtype,
            header.kind
        )));
    }

    let payload_path = header_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&header.payload);
    let bytes = std::fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let expected = geometry.len() * per_voxel * header.dtype.size();
    if bytes.len() != expected {
        return Err(Error::validation(format!(
            "{}: payload has {} bytes, header implies {expected}",
            payload_path.display(),
            bytes.len()
        )));
    }

    Ok(match header.kind {
        VolumeKind::Labels => {
            let labels: Vec<LabelId> = bytes
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect();
            let l = header
                .num_labels
                .ok_or_else(|| Error::validation("header lacks num_labels"))?;
            Volume::Labels(LabelVolume::new(geometry, l, labels)?)
        }
        VolumeKind::Probabilities => Volume::Probs(ProbVolume::new(
            geometry,
            per_voxel,
            decode_floats(&bytes, header.dtype),
        )?),
        VolumeKind::Scores => Volume::Scores(ScoreVolume::new(
            geometry,
            per_voxel,
            decode_floats(&bytes, header.dtype),
        )?),
        VolumeKind::Scalar => Volume::Scalar(ScalarMap::new(
            geometry,
            decode_floats(&bytes, header.dtype),
        )?),
    })
}

fn wrong_kind(path: &Path, want: VolumeKind, got: VolumeKind) -> Error {
    Error::validation(format!(
        "{}: expected a {want:?} volume, found {got:?}",
        path.display()
    ))
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    match read_volume(path)? {
        Volume::Labels(v) => Ok(v),
        other => Err(wrong_kind(path, VolumeKind::Labels, other.kind())),
    }
}

pub fn read_probs(path: &Path) -> Result<ProbVolume> {
    match read_volume(path)? {
        Volume::Probs(v) => Ok(v),
        other => Err(wrong_kind(path, VolumeKind::Probabilities, other.kind())),
    }
}

pub fn read_scores(path: &Path) -> Result<ScoreVolume> {
    match read_volume(path)? {
        Volume::Scores(v) => Ok(v),
        other => Err(wrong_kind(path, VolumeKind::Scores, other.kind())),
    }
}

pub fn read_scalar(path: &Path) -> Result<ScalarMap> {
    match read_volume(path)? {
        Volume::Scalar(v) => Ok(v),
        other => Err(wrong_kind(path, VolumeKind::Scalar, other.kind())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_label_volume_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridGeometry::cube(2).unwrap();
        let lv = LabelVolume::new(g, 2, vec![0, 1, 1, 0, 0, 0, 1, 1]).unwrap();
        let path = dir.path().join("tiny");
        write_volume(&lv, &path).unwrap();
        let back = read_labels(&dir.path().join("tiny.json")).unwrap();
        assert_eq!(back.geometry().len(), 8);
        assert_eq!(back, lv);
        assert_eq!(std::fs::read(dir.path().join("tiny.raw")).unwrap().len(), 16);
    }

    #[test]
    fn payload_size_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridGeometry::cube(4).unwrap();
        let map = ScalarMap::zeros(g);
        let path = dir.path().join("m");
        write_volume(&map, &path).unwrap();
        let raw = dir.path().join("m.raw");
        let bytes = std::fs::read(&raw).unwrap();
        std::fs::write(&raw, &bytes[..63 * 4]).unwrap();
        let err = read_volume(&path).unwrap_err();
        assert!(err.to_string().contains("payload has 252 bytes"), "{err}");
    }

    #[test]
    fn off_simplex_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridGeometry::new([1, 1, 1], [1.0; 3]).unwrap();
        let pv = ProbVolume::new(g, 2, vec![0.5, 0.5]).unwrap();
        let path = dir.path().join("p");
        write_volume_as(&pv, &path, ElementType::F64).unwrap();
        let mut bytes = 0.5f64.to_le_bytes().to_vec();
        bytes.extend_from_slice(&0.5001f64.to_le_bytes());
        std::fs::write(dir.path().join("p.raw"), bytes).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn label_id_out_of_range_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridGeometry::new([2, 1, 1], [1.0; 3]).unwrap();
        let lv = LabelVolume::new(g, 2, vec![0, 1]).unwrap();
        let path = dir.path().join("l");
        write_volume(&lv, &path).unwrap();
        std::fs::write(dir.path().join("l.raw"), [0u8, 0, 2, 0]).unwrap();
        assert!(read_volume(&path).is_err());
    }

    #[test]
    fn nan_probabilities_refused_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridGeometry::new([1, 1, 1], [1.0; 3]).unwrap();
        let mut pv = ProbVolume::new(g, 2, vec![0.5, 0.5]).unwrap();
        pv.probs_mut()[0] = f64::NAN;
        assert!(write_volume(&pv, &dir.path().join("nan")).is_err());
        assert!(!dir.path().join("nan.json").exists());
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_volume(&dir.path().join("nope.json")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn zero_dim_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let header = VolumeHeader {
            format_version: FORMAT_VERSION,
            kind: VolumeKind::Scalar,
            dims: [0, 2, 2],
            spacing: [1.0; 3],
            dtype: ElementType::F32,
            num_labels: None,
            byte_order: BYTE_ORDER.into(),
            order: ORDER.into(),
            payload: "z.raw".into(),
        };
        std::fs::write(dir.path().join("z.json"), serde_json::to_string(&header).unwrap()).unwrap();
        std::fs::write(dir.path().join("z.raw"), []).unwrap();
        assert!(matches!(read_volume(&dir.path().join("z.json")), Err(Error::Validation(_))));
    }
}
