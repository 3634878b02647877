//! Trial manifest: one JSON object per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AadError, Result};
use crate::train::Split;

/// Where a trial came from: its recording and the half-open span of raw
/// samples (64 Hz EEG grid) it covers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub trial: usize,
    pub source: String,
    pub span: [u64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl ManifestEntry {
    pub fn overlaps(&self, other: &ManifestEntry) -> bool {
        self.source == other.source && self.span[0] < other.span[1] && other.span[0] < self.span[1]
    }
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line)
            .map_err(|err| AadError::Format(format!("{} line {}: {err}", path.display(), i + 1)))?;
        if e.span[0] >= e.span[1] {
            return Err(AadError::Format(format!("{} line {}: empty span", path.display(), i + 1)));
        }
        out.push(e);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_lines_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let entries = vec![
            ManifestEntry { trial: 0, source: "rec00".into(), span: [0, 192], split: Some(Split::Train) },
            ManifestEntry { trial: 1, source: "rec00".into(), span: [64, 256], split: None },
        ];
        write_manifest(&entries, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"trial":0,"source":"rec00","span":[0,192],"split":"train"}"#);
        assert_eq!(read_manifest(&path).unwrap(), entries);
        assert!(entries[0].overlaps(&entries[1]));
    }
}
