//! Append-only registry of model hashes, one JSON record per line.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoding::{PiracyHash, PiracyHashRecord};
use crate::error::{Error, Result};
use crate::similarity::{weighted_distance, DistanceWeights, MatchResult};
use crate::tamper_hash::{TamperHash, TamperHashRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryRecord {
    pub model_id: String,
    pub piracy_hash: PiracyHashRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tamper_hash: Option<TamperHashRecord>,
    /// RFC 3339 UTC timestamp.
    pub created_at: String,
    #[serde(default)]
    pub notes: String,
}

impl RegistryRecord {
    pub fn new(
        model_id: impl Into<String>,
        piracy: &PiracyHash,
        tamper: Option<&TamperHash>,
        notes: impl Into<String>,
    ) -> Self {
        RegistryRecord {
            model_id: model_id.into(),
            piracy_hash: piracy.to_record(),
            tamper_hash: tamper.map(TamperHash::to_record),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            notes: notes.into(),
        }
    }

    pub fn piracy(&self) -> Result<PiracyHash> {
        let mut h = PiracyHash::from_record(&self.piracy_hash)?;
        h.model_id = Some(self.model_id.clone());
        Ok(h)
    }

    pub fn tamper(&self) -> Result<Option<TamperHash>> {
        self.tamper_hash.as_ref().map(TamperHash::from_record).transpose()
    }
}

/// Everything readable from a registry file. Lines that fail to parse are
/// listed in `corrupt` and skipped.
#[derive(Debug, Default)]
pub struct RegistryContents {
    pub records: Vec<RegistryRecord>,
    pub corrupt: Vec<Error>,
}

#[derive(Debug, Default)]
pub struct QueryOutcome {
    /// Ascending by distance, ties by model id.
    pub matches: Vec<MatchResult>,
    /// Unreadable lines and records hashed under other settings.
    pub skipped: Vec<Error>,
}

impl QueryOutcome {
    pub fn best(&self) -> Option<&MatchResult> {
        self.matches.first()
    }
}

#[derive(Debug, Clone)]
pub struct Registry {
    path: PathBuf,
}

impl Registry {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Registry { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends `record` unless its model id is already present. Holds an
    /// exclusive advisory lock for the duration.
    pub fn register(&self, record: &RegistryRecord) -> Result<()> {
        let io = |e| Error::io(&self.path, e);
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&self.path)
            .map_err(io)?;
        file.lock().map_err(io)?;
        let mut text = String::new();
        file.read_to_string(&mut text).map_err(io)?;
        let existing = parse_lines(text.as_bytes())?;
        if existing.records.iter().any(|r| r.model_id == record.model_id) {
            return Err(Error::DuplicateModel(record.model_id.clone()));
        }
        let mut line = serde_json::to_string(record).expect("record serializes");
        if !text.is_empty() && !text.ends_with('\n') {
            line.insert(0, '\n');
        }
        line.push('\n');
        file.seek(SeekFrom::End(0)).map_err(io)?;
        file.write_all(line.as_bytes()).map_err(io)?;
        file.flush().map_err(io)?;
        Ok(())
    }

    /// Reads all records; a missing file is an empty registry.
    pub fn load(&self) -> Result<RegistryContents> {
        let file = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Ok(RegistryContents::default())
            }
            Err(e) => return Err(Error::io(&self.path, e)),
        };
        file.lock_shared().map_err(|e| Error::io(&self.path, e))?;
        parse_lines(BufReader::new(file)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(&self.path, source),
            other => other,
        })
    }

    pub fn query(&self, hash: &PiracyHash, weights: &DistanceWeights) -> Result<QueryOutcome> {
        let contents = self.load()?;
        let mut outcome = QueryOutcome {
            matches: Vec::with_capacity(contents.records.len()),
            skipped: contents.corrupt,
        };
        for record in &contents.records {
            match record.piracy().and_then(|h| weighted_distance(hash, &h, weights)) {
                Ok(m) => outcome.matches.push(m),
                Err(e) => outcome.skipped.push(Error::InvalidArgument(format!(
                    "record `{}`: {e}",
                    record.model_id
                ))),
            }
        }
        outcome.matches.sort_by(|a, b| {
            a.distance
                .total_cmp(&b.distance)
                .then_with(|| a.model_id.cmp(&b.model_id))
        });
        Ok(outcome)
    }
}

fn parse_lines(reader: impl BufRead) -> Result<RegistryContents> {
    let mut out = RegistryContents::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<registry>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RegistryRecord>(&line) {
            Ok(r) => out.records.push(r),
            Err(e) => out.corrupt.push(Error::CorruptRecord {
                line: i + 1,
                reason: e.to_string(),
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bits::BitVector;

    fn hash(fill: bool) -> PiracyHash {
        PiracyHash {
            model_id: None,
            segments: 1,
            bits: 2,
            capacity: 1,
            hos_bits: BitVector::from_iter([fill, fill, false, true]),
            struct_bits: BitVector::from_iter([false, fill, true, true]),
            config_digest: "d".into(),
        }
    }

    #[test]
    fn register_and_query() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::new(dir.path().join("reg.jsonl"));
        assert!(reg.query(&hash(true), &DistanceWeights::default()).unwrap().matches.is_empty());

        reg.register(&RegistryRecord::new("b", &hash(false), None, "")).unwrap();
        reg.register(&RegistryRecord::new("a", &hash(true), None, "note")).unwrap();
        reg.register(&RegistryRecord::new("c", &hash(true), None, "")).unwrap();
        let dup = reg.register(&RegistryRecord::new("a", &hash(false), None, ""));
        assert!(matches!(dup, Err(Error::DuplicateModel(_))));

        let out = reg.query(&hash(true), &DistanceWeights::default()).unwrap();
        let ids: Vec<_> = out.matches.iter().map(|m| m.model_id.clone().unwrap()).collect();
        assert_eq!(ids, ["a", "c", "b"]);
        assert_eq!(out.best().unwrap().distance, 0.0);
    }

    #[test]
    fn corrupt_lines_are_reported_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reg.jsonl");
        let reg = Registry::new(&path);
        reg.register(&RegistryRecord::new("a", &hash(true), None, "")).unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        writeln!(f, "{{not json").unwrap();
        drop(f);
        reg.register(&RegistryRecord::new("b", &hash(false), None, "")).unwrap();

        let out = reg.query(&hash(true), &DistanceWeights::default()).unwrap();
        assert_eq!(out.matches.len(), 2);
        assert_eq!(out.skipped.len(), 1);
        assert!(matches!(out.skipped[0], Error::CorruptRecord { line: 2, .. }));
    }

    #[test]
    fn foreign_settings_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::new(dir.path().join("reg.jsonl"));
        let mut other = hash(true);
        other.config_digest = "elsewhere".into();
        reg.register(&RegistryRecord::new("x", &other, None, "")).unwrap();
        let out = reg.query(&hash(true), &DistanceWeights::default()).unwrap();
        assert!(out.matches.is_empty());
        assert_eq!(out.skipped.len(), 1);
    }
}
