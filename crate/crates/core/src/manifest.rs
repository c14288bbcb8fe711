//! Dataset manifests: one CSV row per patient binding id, volume path,
//! optional mask paths and the binary outcome label.
//!
//! Columns: `patient_id,volume,heart_mask,aorta_mask,label` (header row
//! mandatory, mask cells may be empty). Paths are stored as written; relative
//! paths are resolved against the manifest's directory on load.

use crate::error::{Error, Result};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub volume_path: PathBuf,
    pub heart_mask_path: Option<PathBuf>,
    pub aorta_mask_path: Option<PathBuf>,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<PatientRecord>,
}

const COLUMNS: [&str; 5] = ["patient_id", "volume", "heart_mask", "aorta_mask", "label"];

impl DatasetManifest {
    pub fn new(records: Vec<PatientRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidManifest("manifest has no records".into()));
        }
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.patient_id.as_str()) {
                return Err(Error::DuplicatePatient(r.patient_id.clone()));
            }
            if r.label > 1 {
                return Err(Error::InvalidManifest(format!(
                    "patient `{}`: label must be 0 or 1, got {}",
                    r.patient_id, r.label
                )));
            }
        }
        Ok(DatasetManifest { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// (negatives, positives) counts.
    pub fn label_counts(&self) -> (usize, usize) {
        let pos = self.records.iter().filter(|r| r.label == 1).count();
        (self.records.len() - pos, pos)
    }
}

fn parse_label(s: &str, patient_id: &str) -> Result<u8> {
    match s.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::InvalidManifest(format!(
            "patient `{patient_id}`: label must be 0 or 1, got `{other}`"
        ))),
    }
}

fn opt_path(base: &Path, cell: &str) -> Option<PathBuf> {
    let cell = cell.trim();
    if cell.is_empty() {
        None
    } else {
        Some(resolve(base, cell))
    }
}

fn resolve(base: &Path, cell: &str) -> PathBuf {
    let p = PathBuf::from(cell);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
            ),
            _ => Error::Csv(e),
        })?;

    let headers = reader.headers()?.clone();
    for required in COLUMNS {
        if !headers.iter().any(|h| h == required) {
            return Err(Error::InvalidManifest(format!(
                "missing required column `{required}`"
            )));
        }
    }
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (ci, cv, ch, ca, cl) = (
        col("patient_id"),
        col("volume"),
        col("heart_mask"),
        col("aorta_mask"),
        col("label"),
    );

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let get = |i: usize| row.get(i).unwrap_or("");
        let patient_id = get(ci).to_string();
        if patient_id.is_empty() {
            return Err(Error::InvalidManifest(format!(
                "row {}: empty patient_id",
                records.len() + 2
            )));
        }
        let label = parse_label(get(cl), &patient_id)?;
        records.push(PatientRecord {
            volume_path: resolve(&base, get(cv)),
            heart_mask_path: opt_path(&base, get(ch)),
            aorta_mask_path: opt_path(&base, get(ca)),
            patient_id,
            label,
        });
    }
    DatasetManifest::new(records)
}

/// Write the manifest CSV. Paths under `path`'s directory are stored
/// relative to it so a dataset directory can be moved wholesale.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let rel = |p: &Path| -> String {
        p.strip_prefix(base)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    writer.write_record(COLUMNS)?;
    for r in &manifest.records {
        writer.write_record([
            r.patient_id.as_str(),
            &rel(&r.volume_path),
            &r.heart_mask_path.as_deref().map(rel).unwrap_or_default(),
            &r.aorta_mask_path.as_deref().map(rel).unwrap_or_default(),
            if r.label == 1 { "1" } else { "0" },
        ])?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;
    use tempfile::tempdir;

    fn record(id: &str, label: u8) -> PatientRecord {
        PatientRecord {
            patient_id: id.to_string(),
            volume_path: PathBuf::from(format!("{id}.mvol.json")),
            heart_mask_path: None,
            aorta_mask_path: None,
            label,
        }
    }

    #[test]
    fn single_row_manifest() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(
            &p,
            "patient_id,volume,heart_mask,aorta_mask,label\nP1,P1.mvol.json,,,1\n",
        )
        .unwrap();
        let m = read_manifest(&p).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.records[0].patient_id, "P1");
        assert_eq!(m.records[0].label, 1);
        assert!(m.records[0].heart_mask_path.is_none());
        assert_eq!(m.records[0].volume_path, dir.path().join("P1.mvol.json"));
    }

    #[test]
    fn label_counts_mirror_cohort() {
        // 249 rows: 174 negative, 75 positive
        let records: Vec<_> = (0..249)
            .map(|i| record(&format!("P{i:03}"), if i < 174 { 0 } else { 1 }))
            .collect();
        let m = DatasetManifest::new(records).unwrap();
        assert_eq!(m.label_counts(), (174, 75));

        let dir = tempdir().unwrap();
        let p = dir.path().join("cohort.csv");
        write_manifest(&m, &p).unwrap();
        let back = read_manifest(&p).unwrap();
        assert_eq!(back.label_counts(), (174, 75));
        assert_eq!(back.len(), 249);
    }

    #[test]
    fn duplicate_patient_id_names_the_id() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(
            &p,
            "patient_id,volume,heart_mask,aorta_mask,label\nP7,a,,,0\nP7,b,,,1\n",
        )
        .unwrap();
        match read_manifest(&p) {
            Err(Error::DuplicatePatient(id)) => assert_eq!(id, "P7"),
            other => panic!("expected DuplicatePatient, got {other:?}"),
        }
    }

    #[test]
    fn bad_label_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(
            &p,
            "patient_id,volume,heart_mask,aorta_mask,label\nP1,a,,,2\n",
        )
        .unwrap();
        assert!(matches!(read_manifest(&p), Err(Error::InvalidManifest(_))));
    }

    #[test]
    fn missing_column_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "patient_id,volume,label\nP1,a,0\n").unwrap();
        match read_manifest(&p) {
            Err(Error::InvalidManifest(msg)) => assert!(msg.contains("heart_mask")),
            other => panic!("expected InvalidManifest, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_preserves_order() {
        let dir = tempdir().unwrap();
        let m = DatasetManifest::new(vec![record("B", 1), record("A", 0), record("C", 1)]).unwrap();
        let p = dir.path().join("m.csv");
        write_manifest(&m, &p).unwrap();
        let back = read_manifest(&p).unwrap();
        let ids: Vec<_> = back.records.iter().map(|r| r.patient_id.as_str()).collect();
        assert_eq!(ids, ["B", "A", "C"]);
    }
}
