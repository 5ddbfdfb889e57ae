//! Feature archives and manifests.
//!
//! Archive layout (little-endian): magic `XVF1`, version (u32), record count
//! (u64), then per record: utterance id (u32 length + UTF-8), frame count
//! (u32), frame dim (u32), f32 frame data row-major.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::CorpusError;
use crate::tensor::Tensor;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"XVF1";
pub const ARCHIVE_VERSION: u32 = 1;
pub const MANIFEST_HEADER: &str = "utt_id\tspeaker_id\tdomain\tlanguage\tframes";

/// One utterance (or one embedding, stored as a single frame). Values are
/// stored as f32, so only f32-representable data round-trips exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub frames: Tensor,
}

pub fn encode_archive(records: &[FeatureRecord]) -> Result<Vec<u8>, CorpusError> {
    check_unique(records.iter().map(|r| r.id.as_str()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(ARCHIVE_MAGIC);
    buf.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        let (rows, cols) = r.frames.dims();
        buf.extend_from_slice(&(r.id.len() as u32).to_le_bytes());
        buf.extend_from_slice(r.id.as_bytes());
        buf.extend_from_slice(&(rows as u32).to_le_bytes());
        buf.extend_from_slice(&(cols as u32).to_le_bytes());
        for v in r.frames.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(CorpusError::DuplicateId(id.to_string()));
        }
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CorpusError> {
        if self.buf.len().saturating_sub(self.pos) < n {
            return Err(CorpusError::Truncated {
                offset: self.pos,
                what: what.to_string(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CorpusError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_archive(buf: &[u8]) -> Result<Vec<FeatureRecord>, CorpusError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != ARCHIVE_MAGIC {
        return Err(CorpusError::Header("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != ARCHIVE_VERSION {
        return Err(CorpusError::Header(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(r.take(8, "record count")?.try_into().expect("8 bytes"));
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let start = r.pos;
        let len = r.u32("record id length")? as usize;
        let id = String::from_utf8(r.take(len, "record id")?.to_vec())
            .map_err(|_| CorpusError::Header(format!("invalid UTF-8 id at byte offset {start}")))?;
        let rows = r.u32("frame count")? as usize;
        let cols = r.u32("frame dim")? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CorpusError::Header(format!("record size overflow at byte offset {start}")))?;
        let data = r
            .take(n, "frame data")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId(id));
        }
        records.push(FeatureRecord {
            id,
            frames: Tensor::matrix(rows, cols, data),
        });
    }
    if r.pos != buf.len() {
        return Err(CorpusError::Header(format!(
            "{} trailing bytes after offset {}",
            buf.len() - r.pos,
            r.pos
        )));
    }
    Ok(records)
}

pub fn write_archive(path: &Path, records: &[FeatureRecord]) -> Result<(), CorpusError> {
    crate::io::write_atomic(path, &encode_archive(records)?)?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<Vec<FeatureRecord>, CorpusError> {
    decode_archive(&fs::read(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl FromStr for Domain {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(CorpusError::Manifest {
                line: 0,
                msg: format!("unknown domain {other:?}"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub utt_id: String,
    pub speaker_id: String,
    pub domain: Domain,
    pub language: String,
    pub frames: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn format(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                r.utt_id,
                r.speaker_id,
                r.domain.name(),
                r.language,
                r.frames
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == MANIFEST_HEADER => {}
            _ => {
                return Err(CorpusError::Manifest {
                    line: 1,
                    msg: "missing header".into(),
                })
            }
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| CorpusError::Manifest { line: i + 1, msg };
            let fields: Vec<&str> = line.split('\t').collect();
            let [utt, spk, domain, lang, frames] = fields[..] else {
                return Err(bad(format!("expected 5 fields, got {}", fields.len())));
            };
            records.push(ManifestRecord {
                utt_id: utt.to_string(),
                speaker_id: spk.to_string(),
                domain: domain.parse().map_err(|_| bad(format!("unknown domain {domain:?}")))?,
                language: lang.to_string(),
                frames: frames.parse().map_err(|_| bad(format!("bad frame count {frames:?}")))?,
            });
        }
        check_unique(records.iter().map(|r| r.utt_id.as_str()))?;
        Ok(Manifest { records })
    }

    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        crate::io::write_atomic(path, self.format().as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CorpusError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Dense speaker indices in order of first appearance.
    pub fn speaker_labels(&self) -> Vec<usize> {
        let ids: Vec<&str> = self.records.iter().map(|r| r.speaker_id.as_str()).collect();
        let mut map = std::collections::HashMap::new();
        ids.iter()
            .map(|id| {
                let next = map.len();
                *map.entry(*id).or_insert(next)
            })
            .collect()
    }

    pub fn speaker_count(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.speaker_id.as_str())
            .collect::<HashSet<_>>()
            .len()
    }

    /// Checks that every archive record has a manifest row with a matching
    /// frame count, and vice versa.
    pub fn check_archive(&self, records: &[FeatureRecord]) -> Result<(), CorpusError> {
        if records.len() != self.records.len() {
            return Err(CorpusError::Mismatch(format!(
                "archive has {} records, manifest has {}",
                records.len(),
                self.records.len()
            )));
        }
        let rows: std::collections::HashMap<&str, usize> =
            self.records.iter().map(|r| (r.utt_id.as_str(), r.frames)).collect();
        for r in records {
            match rows.get(r.id.as_str()) {
                None => return Err(CorpusError::Mismatch(format!("{} missing from manifest", r.id))),
                Some(&n) if n != r.frames.rows() => {
                    return Err(CorpusError::Mismatch(format!(
                        "{} has {} frames, manifest says {n}",
                        r.id,
                        r.frames.rows()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}
