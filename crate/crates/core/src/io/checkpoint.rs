//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! "LPRB" | version u32 | arch_len u32 | architecture JSON
//!        | prov_len u32 | provenance JSON | tensor_count u32
//!        | { name_len u32 | name | dtype u8 | rank u32 | extents u64×rank | f64 payload }*
//!        | SHA-256 of every preceding byte
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Architecture, ModelGraph};
use crate::train::{TrainConfig, TrainMode};

pub const MAGIC: &[u8; 4] = b"LPRB";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const CHECKSUM_LEN: usize = 32;

/// How a checkpoint's weights came about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub mode: TrainMode,
    /// Hex SHA-256 of the training configuration's JSON form.
    pub train_config_digest: String,
    pub epochs: usize,
    pub seed: u64,
}

impl Provenance {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        let json = serde_json::to_vec(cfg).expect("train config serializes");
        Self {
            mode: cfg.mode,
            train_config_digest: hex(&Sha256::digest(json)),
            epochs: cfg.epochs,
            seed: cfg.seed,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelGraph,
    pub provenance: Provenance,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_blob(buf: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(buf, bytes.len() as u32);
    buf.extend_from_slice(bytes);
}

pub fn encode_checkpoint(model: &ModelGraph, provenance: &Provenance) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_blob(&mut buf, &serde_json::to_vec(model.architecture()).expect("architecture serializes"));
    put_blob(&mut buf, &serde_json::to_vec(provenance).expect("provenance serializes"));
    let tensors = model.named_tensors();
    put_u32(&mut buf, tensors.len() as u32);
    for (name, t) in tensors {
        put_blob(&mut buf, name.as_bytes());
        buf.push(DTYPE_F64);
        put_u32(&mut buf, t.rank() as u32);
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = Sha256::digest(&buf);
    buf.extend_from_slice(&sum);
    buf
}

pub fn save_checkpoint(path: &Path, model: &ModelGraph, provenance: &Provenance) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_checkpoint(model, provenance)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: PathBuf::from(self.path),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn blob(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.u32(what)? as usize;
        self.take(n, what)
    }

    fn json<T: serde::de::DeserializeOwned>(&mut self, what: &str) -> Result<T> {
        let at = self.pos;
        let b = self.blob(what)?;
        serde_json::from_slice(b).map_err(|e| Error::Format {
            path: PathBuf::from(self.path),
            offset: at as u64,
            message: format!("bad {what}: {e}"),
        })
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.err("not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < 8 + CHECKSUM_LEN {
        return Err(r.err("file too short for a checksum"));
    }
    let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != sum {
        return Err(Error::Corrupt(path.to_path_buf()));
    }
    let mut r = Reader { bytes: body, pos: 8, path };
    let arch: Architecture = r.json("architecture")?;
    let provenance: Provenance = r.json("provenance")?;
    let mut model = arch.build(0)?;
    let count = r.u32("tensor count")? as usize;
    let mut slots = model.named_tensors_mut();
    if count != slots.len() {
        return Err(r.err(format!("{count} tensors stored, architecture has {}", slots.len())));
    }
    for (expected, tensor) in slots.iter_mut() {
        let at = r.pos;
        let name = std::str::from_utf8(r.blob("tensor name")?).map_err(|_| r.err("tensor name is not UTF-8"))?;
        if name != expected {
            r.pos = at;
            return Err(r.err(format!("expected tensor {expected}, found {name}")));
        }
        if r.take(1, "dtype")?[0] != DTYPE_F64 {
            return Err(r.err(format!("unsupported dtype for {name}")));
        }
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.u64("extent").map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        if shape != tensor.shape() {
            return Err(r.err(format!("{name} has shape {shape:?}, expected {:?}", tensor.shape())));
        }
        let payload = r.take(8 * tensor.numel(), "payload")?;
        for (dst, src) in tensor.data_mut().iter_mut().zip(payload.chunks_exact(8)) {
            *dst = f64::from_le_bytes(src.try_into().expect("8 bytes"));
        }
    }
    drop(slots);
    if r.pos != body.len() {
        return Err(r.err("trailing bytes after the last tensor"));
    }
    Ok(Checkpoint { model, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_mini_resnet;

    fn sample() -> (ModelGraph, Provenance) {
        let m = build_mini_resnet([1, 32, 32], 10, 1, 4, 11).unwrap();
        (m, Provenance::from_config(&TrainConfig::cifar_reference()))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (m, p) = sample();
        let bytes = encode_checkpoint(&m, &p);
        let c = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(c.provenance, p);
        for ((n1, a), (n2, b)) in m.named_tensors().iter().zip(c.model.named_tensors()) {
            assert_eq!(n1, &n2);
            assert!(a.bit_eq(b), "{n1}");
        }
    }

    #[test]
    fn flipped_payload_byte_is_corruption() {
        let (m, p) = sample();
        let mut bytes = encode_checkpoint(&m, &p);
        let i = bytes.len() - CHECKSUM_LEN - 100;
        bytes[i] ^= 0x10;
        assert!(matches!(decode_checkpoint(&bytes, Path::new("x")), Err(Error::Corrupt(_))));
    }

    #[test]
    fn other_version_needs_upgrade() {
        let (m, p) = sample();
        let mut bytes = encode_checkpoint(&m, &p);
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        match decode_checkpoint(&bytes, Path::new("x")) {
            Err(Error::CheckpointVersion { found: 2, expected: 1 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_truncation() {
        assert!(matches!(
            decode_checkpoint(b"NOPE\x01\0\0\0", Path::new("x")),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(decode_checkpoint(b"LP", Path::new("x")), Err(Error::Format { .. })));
    }
}
