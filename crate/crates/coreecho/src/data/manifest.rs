//! CSV manifest: `FileName,Label,Split`, one row per video.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // Uppercase on disk, matching the EchoNet file-list convention.
        let s = match self {
            Split::Train => "TRAIN",
            Split::Val => "VAL",
            Split::Test => "TEST",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub file_name: String,
    pub label: f64,
    pub split: Split,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["FileName", "Label", "Split"])?;
    for r in rows {
        w.write_record([
            r.file_name.as_str(),
            &format!("{}", r.label),
            &r.split.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    {
        let headers = reader.headers()?;
        let expect = ["FileName", "Label", "Split"];
        if headers.len() != 3 || headers.iter().zip(expect).any(|(a, b)| a != b) {
            return Err(Error::Data(format!(
                "{}: manifest header {:?}, expected {:?}",
                path.display(),
                headers,
                expect
            )));
        }
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        if rec.len() != 3 {
            return Err(Error::Data(format!(
                "{}: manifest row with {} fields",
                path.display(),
                rec.len()
            )));
        }
        let label: f64 = rec[1]
            .parse()
            .map_err(|_| Error::Data(format!("{}: bad label {:?}", path.display(), &rec[1])))?;
        rows.push(ManifestRow {
            file_name: rec[0].to_string(),
            label,
            split: rec[2].parse()?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let rows = vec![
            ManifestRow {
                file_name: "a.vten".into(),
                label: 55.25,
                split: Split::Train,
            },
            ManifestRow {
                file_name: "b.vten".into(),
                label: 1.0,
                split: Split::Test,
            },
        ];
        write_manifest(&path, &rows).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), rows);
    }

    #[test]
    fn manifest_rejects_wrong_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        std::fs::write(&path, "File,EF,Fold\nx,1,TRAIN\n").unwrap();
        assert!(read_manifest(&path).is_err());
    }
}
