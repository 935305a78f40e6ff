use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape mean and standard deviation of one speaker in one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeStatsRow {
    pub speaker_id: String,
    pub session_id: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

pub fn read_shape_stats(path: impl AsRef<Path>) -> Result<Vec<ShapeStatsRow>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::json(format!("{}:{}", path.display(), n + 1), e))?,
        );
    }
    Ok(rows)
}

pub fn write_shape_stats(path: impl AsRef<Path>, rows: &[ShapeStatsRow]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::json("shape stats row", e))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip_and_provenance_is_optional() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stats.jsonl");
        let rows = vec![ShapeStatsRow {
            speaker_id: "a".into(),
            session_id: "s1".into(),
            mean: vec![2.0],
            std: vec![1.0],
            seed: None,
            config_hash: None,
        }];
        write_shape_stats(&p, &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "{\"speaker_id\":\"a\",\"session_id\":\"s1\",\"mean\":[2.0],\"std\":[1.0]}\n"
        );
        assert_eq!(read_shape_stats(&p).unwrap(), rows);
    }
}
