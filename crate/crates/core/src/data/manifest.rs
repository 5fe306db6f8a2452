//! Split manifests: CSV files with a `filename,label,split` header.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::episode::{ClassIndex, SampleId, Split, SplitManifest};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 3] = ["filename", "label", "split"];

/// One row of a manifest: where the image lives and which class it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Path relative to the dataset root, or a generator key for in-memory data.
    pub key: String,
    pub class: String,
    pub split: Split,
}

/// A parsed manifest. `SampleId(i)` refers to `records[i]`.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub splits: SplitManifest,
    pub index: ClassIndex,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    /// Groups records into a class index and split manifest.
    pub fn from_records(records: Vec<SampleRecord>) -> Self {
        let mut splits = SplitManifest::default();
        let mut index = ClassIndex::new();
        for (i, r) in records.iter().enumerate() {
            index.insert(&r.class, SampleId(i as u32));
            splits.classes_mut(r.split).insert(r.class.clone());
        }
        Self {
            splits,
            index,
            records,
        }
    }

    pub fn record(&self, id: SampleId) -> &SampleRecord {
        &self.records[id.0 as usize]
    }
}

/// Reads a manifest from disk.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(file, path)
}

/// Parses manifest CSV from any reader; `path` is only used in diagnostics.
pub fn parse_manifest<R: std::io::Read>(reader: R, path: &Path) -> Result<Manifest> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(parse_err(
            1,
            format!("expected header `{}`, found `{}`", MANIFEST_HEADER.join(","), headers.iter().collect::<Vec<_>>().join(",")),
        ));
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let (key, class, split) = (&row[0], &row[1], &row[2]);
        if key.is_empty() || class.is_empty() {
            return Err(parse_err(line, "empty filename or label".into()));
        }
        let split = Split::parse(split).ok_or_else(|| parse_err(line, format!("unknown split {split:?}")))?;
        if !seen.insert((key.to_string(), class.to_string())) {
            return Err(Error::DuplicateSample {
                path: path.to_path_buf(),
                line,
                sample: key.into(),
                class: class.into(),
            });
        }
        records.push(SampleRecord {
            key: key.into(),
            class: class.into(),
            split,
        });
    }

    let manifest = Manifest::from_records(records);
    for split in Split::ALL {
        if manifest.splits.classes(split).is_empty() {
            return Err(Error::EmptySplit {
                split: split.name().into(),
            });
        }
    }
    Ok(manifest)
}

/// Writes records in manifest format.
pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let to_err = |e: csv::Error| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record(MANIFEST_HEADER).map_err(to_err)?;
    for r in records {
        w.write_record([r.key.as_str(), r.class.as_str(), r.split.name()])
            .map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
