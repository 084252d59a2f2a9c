//! Labeled-packet manifest: one `class_id,hex_payload` line per packet, with
//! a sidecar listing class names one per line in id order.

use std::io::{BufRead, Write};

use crate::ingest::IngestError;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const CLASSES_FILE: &str = "classes.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub class_id: usize,
    pub payload: Vec<u8>,
}

pub fn write_manifest<W: Write>(mut w: W, entries: impl IntoIterator<Item = (usize, impl AsRef<[u8]>)>) -> Result<(), IngestError> {
    for (class_id, payload) in entries {
        writeln!(w, "{class_id},{}", hex::encode(payload))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest<R: BufRead>(r: R) -> Result<Vec<ManifestEntry>, IngestError> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || IngestError::Manifest(format!("line {}: {line:?}", n + 1));
        let (id, hex_payload) = line.split_once(',').ok_or_else(bad)?;
        let class_id = id.trim().parse().map_err(|_| bad())?;
        let payload = hex::decode(hex_payload.trim()).map_err(|_| bad())?;
        out.push(ManifestEntry { class_id, payload });
    }
    Ok(out)
}

pub fn write_class_names<W: Write>(mut w: W, names: &[String]) -> Result<(), IngestError> {
    for name in names {
        writeln!(w, "{name}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_class_names<R: BufRead>(r: R) -> Result<Vec<String>, IngestError> {
    let mut names = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.is_empty() {
            names.push(line);
        }
    }
    Ok(names)
}
