//! Demonstration set files: a JSON document with a dimension header and one
//! record per (observation, target) pair.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Demonstration, LearnError};

pub const DEMO_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DemoFile {
    format_version: u32,
    obs_dim: usize,
    target_dim: usize,
    count: usize,
    records: Vec<Demonstration>,
}

pub fn save_demos<W: Write>(demos: &[Demonstration], sink: W) -> Result<(), LearnError> {
    let first = demos.first().ok_or(LearnError::Empty)?;
    let doc = DemoFile {
        format_version: DEMO_FORMAT_VERSION,
        obs_dim: first.obs.len(),
        target_dim: first.target.len(),
        count: demos.len(),
        records: demos.to_vec(),
    };
    serde_json::to_writer(sink, &doc).map_err(|e| LearnError::Format(e.to_string()))
}

pub fn load_demos<R: Read>(source: R) -> Result<Vec<Demonstration>, LearnError> {
    let doc: DemoFile = serde_json::from_reader(source).map_err(|e| LearnError::Format(e.to_string()))?;
    if doc.format_version != DEMO_FORMAT_VERSION {
        return Err(LearnError::Format(format!("unsupported format version {}", doc.format_version)));
    }
    if doc.records.len() != doc.count {
        return Err(LearnError::Format(format!("header says {} records, found {}", doc.count, doc.records.len())));
    }
    for (i, r) in doc.records.iter().enumerate() {
        if r.obs.len() != doc.obs_dim || r.target.len() != doc.target_dim {
            return Err(LearnError::Format(format!("record {i} does not match the header dimensions")));
        }
    }
    Ok(doc.records)
}

pub fn save_demos_file(demos: &[Demonstration], path: impl AsRef<Path>) -> Result<(), LearnError> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    save_demos(demos, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_demos_file(path: impl AsRef<Path>) -> Result<Vec<Demonstration>, LearnError> {
    load_demos(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Demonstration> {
        vec![
            Demonstration { obs: vec![0.1, 1.0 / 3.0], target: vec![-0.5] },
            Demonstration { obs: vec![2e-17, -7.25], target: vec![1.0] },
        ]
    }

    #[test]
    fn round_trip_is_exact() {
        let mut buf = Vec::new();
        save_demos(&sample(), &mut buf).unwrap();
        assert_eq!(load_demos(buf.as_slice()).unwrap(), sample());
    }

    #[test]
    fn count_and_dimension_checks() {
        let mut buf = Vec::new();
        save_demos(&sample(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let bad = text.replacen("\"count\":2", "\"count\":3", 1);
        assert!(load_demos(bad.as_bytes()).is_err());
        let bad = text.replacen("\"obs_dim\":2", "\"obs_dim\":3", 1);
        assert!(load_demos(bad.as_bytes()).is_err());
        assert!(load_demos(&text.as_bytes()[..20]).is_err());
    }
}
