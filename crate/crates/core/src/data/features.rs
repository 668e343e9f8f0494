//! Precomputed image features, stored as JSON Lines:
//! `{"image_id": str, "kind": "global"|"regional", "vectors": [[f64, ...], ...]}`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows in a global feature grid (7 × 7).
pub const GLOBAL_REGIONS: usize = 49;
/// Upper bound on regions of interest per image.
pub const MAX_REGIONS: usize = 36;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Global,
    Regional,
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FeatureKind::Global => "global",
            FeatureKind::Regional => "regional",
        })
    }
}

/// `rows × dim` feature matrix for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub image_id: String,
    pub kind: FeatureKind,
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl ImageFeatures {
    pub fn new(image_id: impl Into<String>, kind: FeatureKind, vectors: Vec<Vec<f64>>) -> Result<Self> {
        let image_id = image_id.into();
        let rows = vectors.len();
        match kind {
            FeatureKind::Global if rows != GLOBAL_REGIONS => {
                return Err(Error::Format(format!(
                    "{image_id}: global features need {GLOBAL_REGIONS} rows, got {rows}"
                )))
            }
            FeatureKind::Regional if !(1..=MAX_REGIONS).contains(&rows) => {
                return Err(Error::Format(format!(
                    "{image_id}: regional features need 1..={MAX_REGIONS} rows, got {rows}"
                )))
            }
            _ => {}
        }
        let dim = vectors[0].len();
        if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::Format(format!("{image_id}: ragged or empty feature vectors")));
        }
        let data: Vec<f64> = vectors.concat();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format(format!("{image_id}: non-finite feature value")));
        }
        Ok(Self {
            image_id,
            kind,
            rows,
            dim,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vectors(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    image_id: String,
    kind: FeatureKind,
    vectors: Vec<Vec<f64>>,
}

/// Features of one kind keyed by image id.
#[derive(Debug, Clone, Default)]
pub struct FeatureTable {
    pub kind: Option<FeatureKind>,
    pub map: BTreeMap<String, Arc<ImageFeatures>>,
    /// Records that replaced an earlier record with the same image id.
    pub duplicates: usize,
}

impl FeatureTable {
    pub fn get(&self, image_id: &str) -> Option<&Arc<ImageFeatures>> {
        self.map.get(image_id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Feature dimension shared by every record, if the table is non-empty.
    pub fn dim(&self) -> Option<usize> {
        self.map.values().next().map(|f| f.dim())
    }

    pub fn insert(&mut self, f: ImageFeatures) {
        if self.map.insert(f.image_id.clone(), Arc::new(f)).is_some() {
            self.duplicates += 1;
        }
    }
}

pub fn load_features(path: impl AsRef<Path>, kind: FeatureKind) -> Result<FeatureTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_features_str(&text, kind).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_features_str(text: &str, kind: FeatureKind) -> Result<FeatureTable> {
    let mut table = FeatureTable {
        kind: Some(kind),
        ..FeatureTable::default()
    };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        if rec.kind != kind {
            return Err(Error::Format(format!(
                "line {}: expected {kind} features, found {}",
                i + 1,
                rec.kind
            )));
        }
        let f = ImageFeatures::new(rec.image_id, rec.kind, rec.vectors)
            .map_err(|e| match e {
                Error::Format(m) => Error::Format(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        if let (Some(d), true) = (table.dim(), !table.is_empty()) {
            if d != f.dim() {
                return Err(Error::Format(format!(
                    "line {}: feature dim {} differs from earlier records ({d})",
                    i + 1,
                    f.dim()
                )));
            }
        }
        let id = f.image_id.clone();
        let before = table.duplicates;
        table.insert(f);
        if table.duplicates > before {
            warn!("duplicate image id {id}; keeping the last record");
        }
    }
    Ok(table)
}

/// One JSON object per line, in the given order.
pub fn write_features<'a>(features: impl IntoIterator<Item = &'a ImageFeatures>) -> Result<String> {
    let mut out = String::new();
    for f in features {
        let rec = Record {
            image_id: f.image_id.clone(),
            kind: f.kind,
            vectors: f.vectors(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, kind: &str, rows: usize, dim: usize) -> String {
        let vectors: Vec<Vec<f64>> = (0..rows).map(|r| vec![r as f64 * 0.5; dim]).collect();
        serde_json::json!({"image_id": id, "kind": kind, "vectors": vectors}).to_string()
    }

    #[test]
    fn accepts_global_grid() {
        let t = parse_features_str(&record("a", "global", 49, 8), FeatureKind::Global).unwrap();
        let f = t.get("a").unwrap();
        assert_eq!((f.rows(), f.dim()), (49, 8));
    }

    #[test]
    fn rejects_short_global_grid() {
        let e = parse_features_str(&record("a", "global", 48, 8), FeatureKind::Global);
        assert!(matches!(e, Err(Error::Format(_))));
    }

    #[test]
    fn accepts_regional_rois() {
        let t = parse_features_str(&record("r", "regional", 3, 1024), FeatureKind::Regional).unwrap();
        let f = t.get("r").unwrap();
        assert_eq!((f.rows(), f.dim()), (3, 1024));
    }

    #[test]
    fn regional_row_bounds() {
        assert!(parse_features_str(&record("r", "regional", 37, 4), FeatureKind::Regional).is_err());
        assert!(parse_features_str(&record("r", "regional", 36, 4), FeatureKind::Regional).is_ok());
        let empty = r#"{"image_id":"r","kind":"regional","vectors":[]}"#;
        assert!(matches!(
            parse_features_str(empty, FeatureKind::Regional),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn rejects_non_finite_and_malformed() {
        let nan = r#"{"image_id":"r","kind":"regional","vectors":[[NaN]]}"#;
        assert!(matches!(parse_features_str(nan, FeatureKind::Regional), Err(Error::Format(_))));
        let huge = r#"{"image_id":"r","kind":"regional","vectors":[[1e999]]}"#;
        assert!(matches!(parse_features_str(huge, FeatureKind::Regional), Err(Error::Format(_))));
        let ragged = r#"{"image_id":"r","kind":"regional","vectors":[[1,2],[3]]}"#;
        assert!(matches!(parse_features_str(ragged, FeatureKind::Regional), Err(Error::Format(_))));
        let extra = r#"{"image_id":"r","kind":"regional","vectors":[[1]],"x":1}"#;
        assert!(matches!(parse_features_str(extra, FeatureKind::Regional), Err(Error::Format(_))));
    }

    #[test]
    fn kind_mismatch_is_a_format_error() {
        let e = parse_features_str(&record("a", "regional", 2, 4), FeatureKind::Global);
        assert!(matches!(e, Err(Error::Format(_))));
    }

    #[test]
    fn duplicate_ids_keep_last() {
        let text = format!("{}\n{}\n", record("a", "regional", 2, 4), record("a", "regional", 5, 4));
        let t = parse_features_str(&text, FeatureKind::Regional).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.duplicates, 1);
        assert_eq!(t.get("a").unwrap().rows(), 5);
    }

    #[test]
    fn write_then_parse_round_trips() {
        let f = ImageFeatures::new("z", FeatureKind::Regional, vec![vec![0.1, -2.5e-7], vec![3.0, 1.0 / 3.0]])
            .unwrap();
        let text = write_features([&f]).unwrap();
        let t = parse_features_str(&text, FeatureKind::Regional).unwrap();
        assert_eq!(**t.get("z").unwrap(), f);
    }
}
