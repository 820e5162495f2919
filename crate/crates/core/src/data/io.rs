//! JSON-lines dataset files and JSON reports.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::sample::ModalitySample;
use crate::error::{Error, Result};

pub fn samples_to_jsonl(samples: &[ModalitySample]) -> String {
    let mut s = String::new();
    for x in samples {
        s.push_str(&serde_json::to_string(x).expect("samples serialise"));
        s.push('\n');
    }
    s
}

pub fn write_jsonl(path: &Path, samples: &[ModalitySample]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(samples_to_jsonl(samples).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ModalitySample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s = serde_json::from_str(&line).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("value serialises");
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthSpec;

    #[test]
    fn jsonl_round_trip() {
        let spec = SynthSpec {
            classes: 2,
            samples_per_class: 4,
            image_dims: [2, 2, 1],
            vocab_size: 20,
            text_dropout: 0.5,
            ..Default::default()
        };
        let ds = spec.generate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.jsonl");
        write_jsonl(&p, &ds.train).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), ds.train);
        assert!(read_jsonl(&dir.path().join("missing.jsonl")).is_err());
    }
}
