use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LabelId;
use crate::{Error, Result};

/// Default upper bound `R` on boundary uncertainty, in voxels.
pub const DEFAULT_MAX_UNCERTAINTY: u32 = 4;

/// Boundary uncertainty per label, in voxels.
///
/// Serialized as a JSON object `{"<label id>": voxels}` that must cover every
/// id from 0 (background) up to the largest key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, u32>", into = "BTreeMap<String, u32>")]
pub struct UncertaintyTable {
    per_label: Vec<u32>,
}

impl UncertaintyTable {
    /// Entry `k` is the uncertainty of label `k`.
    pub fn new(per_label: Vec<u32>) -> Result<Self> {
        if per_label.is_empty() {
            return Err(Error::validation("uncertainty table is empty"));
        }
        if per_label.len() > LabelId::MAX as usize + 1 {
            return Err(Error::validation("uncertainty table has too many labels"));
        }
        Ok(UncertaintyTable { per_label })
    }

    /// Same uncertainty for `num_labels` labels.
    pub fn uniform(num_labels: usize, voxels: u32) -> Result<Self> {
        UncertaintyTable::new(vec![voxels; num_labels])
    }

    pub fn get(&self, label: LabelId) -> Option<u32> {
        self.per_label.get(label as usize).copied()
    }

    pub fn per_label(&self) -> &[u32] {
        &self.per_label
    }

    pub fn len(&self) -> usize {
        self.per_label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_label.is_empty()
    }

    /// Upper bound `R` on boundary uncertainty.
    pub fn max_uncertainty(&self) -> u32 {
        self.per_label.iter().copied().max().unwrap_or(0)
    }

    pub(crate) fn check_covers(&self, num_labels: usize) -> Result<()> {
        if self.per_label.len() < num_labels {
            return Err(Error::validation(format!(
                "uncertainty table covers labels 0..{} but volume has L = {num_labels}",
                self.per_label.len()
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("table serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

impl TryFrom<BTreeMap<String, u32>> for UncertaintyTable {
    type Error = Error;

    fn try_from(map: BTreeMap<String, u32>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (k, v) in map {
            let id: LabelId = k
                .trim()
                .parse()
                .map_err(|_| Error::validation(format!("uncertainty key {k:?} is not a label id")))?;
            entries.insert(id, v);
        }
        let mut per_label = Vec::with_capacity(entries.len());
        for (expected, (id, v)) in entries.into_iter().enumerate() {
            if id as usize != expected {
                return Err(Error::validation(format!(
                    "uncertainty table is missing label {expected}"
                )));
            }
            per_label.push(v);
        }
        UncertaintyTable::new(per_label)
    }
}

impl From<UncertaintyTable> for BTreeMap<String, u32> {
    fn from(t: UncertaintyTable) -> Self {
        t.per_label
            .into_iter()
            .enumerate()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_json_map() {
        let t: UncertaintyTable = serde_json::from_str(r#"{"0": 1, "2": 4, "1": 0}"#).unwrap();
        assert_eq!(t.per_label(), &[1, 0, 4]);
        assert_eq!(t.max_uncertainty(), 4);
        let back: UncertaintyTable =
            serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn missing_label_rejected() {
        assert!(serde_json::from_str::<UncertaintyTable>(r#"{"0": 1, "2": 4}"#).is_err());
        assert!(serde_json::from_str::<UncertaintyTable>(r#"{"1": 1}"#).is_err());
        assert!(serde_json::from_str::<UncertaintyTable>(r#"{"0": -1}"#).is_err());
        assert!(serde_json::from_str::<UncertaintyTable>(r#"{}"#).is_err());
    }
}
