//! Dataset readers, checkpoint persistence and plain-text outputs.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! "MDSM1" | u32 header length | JSON header | f64 payload | u64 FNV-1a of payload
//! ```
//!
//! The header names every parameter tensor with its shape, in payload order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Config, DataKind};
use crate::error::{Error, Result};
use crate::net::{EnergyNet, NetConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MDSM1";
pub const CHECKPOINT_EXTENSION: &str = "ckpt";
const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

pub fn load_dataset(path: &Path, kind: DataKind) -> Result<Tensor> {
    match kind {
        DataKind::Csv2d => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_csv(&text)
        }
        DataKind::IdxImages => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            parse_idx_images(&bytes)
        }
        DataKind::Ring => Err(Error::config("ring data are synthetic and have no file")),
    }
}

/// Rows of comma-separated floats; blank lines are skipped.
pub fn parse_csv(text: &str) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("line {}: cannot parse {field:?} as a number", i + 1)))?;
            data.push(v);
        }
        let w = data.len() - before;
        if *width.get_or_insert(w) != w {
            return Err(Error::Format(format!(
                "line {}: {w} fields, expected {}",
                i + 1,
                width.unwrap()
            )));
        }
        rows += 1;
    }
    let Some(w) = width else {
        return Err(Error::Format("no data rows".into()));
    };
    Tensor::new([rows, w], data).map_err(|_| Error::Format("non-finite value in CSV".into()))
}

/// IDX image file (magic 2051, then N, rows, cols as big-endian u32), one
/// flattened row per image with bytes scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::Format("truncated IDX header".into()))
    };
    let magic = word(0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!("IDX magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}")));
    }
    let (n, r, c) = (word(1)? as usize, word(2)? as usize, word(3)? as usize);
    let d = r * c;
    let payload = &bytes[16..];
    if payload.len() < n * d {
        return Err(Error::Format(format!(
            "IDX payload has {} bytes, header promises {}",
            payload.len(),
            n * d
        )));
    }
    let data = payload[..n * d].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new([n, d], data)
}

/// Encodes images as an IDX file; values are clamped to `[0, 1]` and rounded.
pub fn encode_idx_images(images: &Tensor, rows: usize, cols: usize) -> Result<Vec<u8>> {
    let [n, d] = images.shape()[..] else {
        return Err(Error::dim("encode_idx_images", "expected a matrix"));
    };
    if d != rows * cols {
        return Err(Error::dim("encode_idx_images", format!("{d} values per row, {rows}x{cols} images")));
    }
    let mut out = Vec::with_capacity(16 + n * d);
    for w in [IDX_IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&w.to_be_bytes());
    }
    out.extend(images.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Rows as comma-separated shortest round-trip decimals, no header.
pub fn to_csv(x: &Tensor) -> String {
    let mut out = String::new();
    for row in x.row_iter() {
        let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub step: usize,
    pub net: NetConfig,
    pub manifest: Vec<ManifestEntry>,
    /// The resolved run configuration, when saved from a configured run.
    pub config: Option<Config>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub net: EnergyNet,
}

pub fn encode_checkpoint(net: &EnergyNet, step: usize, config: Option<&Config>) -> Vec<u8> {
    let header = CheckpointHeader {
        step,
        net: net.config().clone(),
        manifest: net
            .config()
            .param_manifest()
            .into_iter()
            .map(|(name, shape)| ManifestEntry { name, shape })
            .collect(),
        config: config.cloned(),
    };
    let header = serde_json::to_vec(&header).expect("header is serializable");
    let mut payload = Vec::with_capacity(8 * net.param_count());
    for p in net.params() {
        for v in p.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 4 + header.len() + payload.len() + 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let m = CHECKPOINT_MAGIC.len();
    if bytes.len() < m + 4 || &bytes[..m] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not an MDSM1 checkpoint".into()));
    }
    let hlen = u32::from_le_bytes(bytes[m..m + 4].try_into().unwrap()) as usize;
    let body = &bytes[m + 4..];
    if body.len() < hlen + 8 {
        return Err(Error::Corruption("file shorter than its header declares".into()));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Corruption(format!("unreadable header: {e}")))?;
    let rest = &body[hlen..];
    let (payload, tail) = rest.split_at(rest.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a64(payload) != stored {
        return Err(Error::Corruption("payload checksum mismatch".into()));
    }
    let expected: Vec<ManifestEntry> = header
        .net
        .param_manifest()
        .into_iter()
        .map(|(name, shape)| ManifestEntry { name, shape })
        .collect();
    if expected != header.manifest {
        return Err(Error::Compatibility(
            "parameter manifest does not match the network configuration".into(),
        ));
    }
    let total: usize = expected.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if payload.len() != 8 * total {
        return Err(Error::Compatibility(format!(
            "payload holds {} values, manifest needs {total}",
            payload.len() / 8
        )));
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let params = expected
        .iter()
        .map(|e| {
            let n = e.shape.iter().product();
            Tensor::new(e.shape.clone(), values.by_ref().take(n).collect())
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|_| Error::Corruption("non-finite parameter".into()))?;
    let net = EnergyNet::from_params(header.net.clone(), params)?;
    Ok(Checkpoint { header, net })
}

pub fn save_checkpoint(net: &EnergyNet, step: usize, config: Option<&Config>, path: &Path) -> Result<()> {
    write_file(path, encode_checkpoint(net, step, config))
}

/// Loads `path`, or `path.ckpt` when `path` itself does not exist.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let path = resolve_checkpoint_path(path);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    decode_checkpoint(&bytes)
}

fn resolve_checkpoint_path(path: &Path) -> PathBuf {
    if path.exists() {
        return path.to_path_buf();
    }
    let mut with_ext = path.as_os_str().to_owned();
    with_ext.push(".");
    with_ext.push(CHECKPOINT_EXTENSION);
    PathBuf::from(with_ext)
}

/// Loads a checkpoint and checks that it matches `config`'s network shape.
pub fn load_checkpoint_for(path: &Path, net: &NetConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.header.net.input_dim != net.input_dim || ck.header.net.hidden_dims != net.hidden_dims {
        return Err(Error::Compatibility(format!(
            "checkpoint has input {} and hidden {:?}, configuration expects {} and {:?}",
            ck.header.net.input_dim, ck.header.net.hidden_dims, net.input_dim, net.hidden_dims
        )));
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_rows() {
        let t = parse_csv("1.0,2.0\n3.0,4.0").unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(parse_csv("1,2\n3").is_err());
        assert!(parse_csv("1,x").is_err());
        assert!(parse_csv("").is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let t = Tensor::matrix(2, 2, vec![0.1, 1.0 / 3.0, -2.5e-300, 7.0]).unwrap();
        assert_eq!(parse_csv(&to_csv(&t)).unwrap(), t);
    }

    #[test]
    fn idx_scaling() {
        let mut bytes = Vec::new();
        for w in [2051u32, 1, 2, 2] {
            bytes.extend_from_slice(&w.to_be_bytes());
        }
        bytes.extend_from_slice(&[0, 255, 128, 64]);
        let t = parse_idx_images(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 4]);
        assert_eq!(t.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
        bytes[3] = 0x01;
        assert!(matches!(parse_idx_images(&bytes), Err(Error::Format(_))));
        bytes[3] = 0x03;
        bytes.pop();
        assert!(matches!(parse_idx_images(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }
}
