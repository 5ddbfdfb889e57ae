//! Versioned little-endian model checkpoints.
//!
//! Layout: magic `ADVD`, format version (u32), config as a length-prefixed
//! JSON document (u32 + UTF-8), blob count (u32), then one blob per tensor:
//! name length (u32), UTF-8 name, rank (u32), dims (u32 each), f64 data.
//! Blob names carry a group prefix: `extractor/`, `heads/`, `critic/` or
//! `running/` (batch-norm statistics, `<layer>.bn.mean` / `.var`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autodiff::ParamSet;
use crate::tensor::Tensor;

use super::{NetworkConfig, NetworkError, NetworkParams, RunningStats};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ADVD";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_blob(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    let (r, c) = t.dims();
    put_u32(buf, 2);
    put_u32(buf, r as u32);
    put_u32(buf, c as u32);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(params: &NetworkParams) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    let cfg = serde_json::to_vec(&params.config).expect("config serializes");
    put_u32(&mut buf, cfg.len() as u32);
    buf.extend_from_slice(&cfg);
    let mut blobs: Vec<(String, Tensor)> = Vec::new();
    for (group, set) in [
        ("extractor", &params.extractor),
        ("heads", &params.heads),
        ("critic", &params.critic),
    ] {
        for (name, p) in set.iter() {
            blobs.push((format!("{group}/{name}"), p.value.clone()));
        }
    }
    for (key, rs) in &params.running {
        blobs.push((format!("running/{key}.mean"), Tensor::row(rs.mean.clone())));
        blobs.push((format!("running/{key}.var"), Tensor::row(rs.var.clone())));
    }
    put_u32(&mut buf, blobs.len() as u32);
    for (name, t) in &blobs {
        put_blob(&mut buf, name, t);
    }
    buf
}

/// Writes a checkpoint via a temporary file and rename.
pub fn write_checkpoint(path: &Path, params: &NetworkParams) -> Result<(), NetworkError> {
    crate::io::write_atomic(path, &encode_checkpoint(params))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetworkError> {
        if self.pos + n > self.buf.len() {
            return Err(NetworkError::Format(format!("truncated at byte offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NetworkError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, NetworkError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, NetworkError> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| NetworkError::Format(format!("invalid UTF-8 before offset {}", self.pos)))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<NetworkParams, NetworkError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(NetworkError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(NetworkError::Format(format!("unsupported version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let config: NetworkConfig =
        serde_json::from_slice(r.take(cfg_len)?).map_err(|e| NetworkError::Format(format!("config: {e}")))?;
    config.validate()?;
    let count = r.u32()?;
    let mut extractor = ParamSet::new();
    let mut heads = ParamSet::new();
    let mut critic = ParamSet::new();
    let mut stats: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let t = Tensor::new(dims, data).map_err(|e| NetworkError::Format(e.to_string()))?;
        let (group, key) = name
            .split_once('/')
            .ok_or_else(|| NetworkError::Format(format!("blob without group: {name}")))?;
        let set = match group {
            "extractor" => &mut extractor,
            "heads" => &mut heads,
            "critic" => &mut critic,
            "running" => {
                stats.insert(key.to_string(), t);
                continue;
            }
            other => return Err(NetworkError::Format(format!("unknown group {other}"))),
        };
        if set.contains(key) {
            return Err(NetworkError::Format(format!("duplicate blob {name}")));
        }
        set.insert(key, t);
    }
    if r.pos != buf.len() {
        return Err(NetworkError::Format(format!(
            "{} trailing bytes after offset {}",
            buf.len() - r.pos,
            r.pos
        )));
    }
    let mut running = BTreeMap::new();
    for (key, mean) in &stats {
        if let Some(layer) = key.strip_suffix(".mean") {
            let var = stats
                .get(&format!("{layer}.var"))
                .ok_or_else(|| NetworkError::Format(format!("missing variance for {layer}")))?;
            running.insert(
                layer.to_string(),
                RunningStats {
                    mean: mean.data().to_vec(),
                    var: var.data().to_vec(),
                },
            );
        }
    }
    Ok(NetworkParams {
        config,
        extractor,
        heads,
        critic,
        running,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<NetworkParams, NetworkError> {
    decode_checkpoint(&fs::read(path)?)
}
