//! Binary checkpoint format.
//!
//! ```text
//! "RIBCAM1"                 7 bytes
//! version                   u32
//! arch block                u32 length + UTF-8 key=value lines
//! rng seed                  u64
//! tensor count              u32
//! per tensor:               u16 name length, name, u8 ndim, u32 dims, f32 payload
//! digest                    u64, first 8 bytes of SHA-256 over all payloads
//! ```
//!
//! Every integer and float is little-endian.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, Error, Result};
use crate::model::{build_network, ArchSpec, Network};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"RIBCAM1";
pub const FORMAT_VERSION: u32 = 1;

fn tensor_names(net: &Network) -> Vec<(String, &Tensor, &Tensor)> {
    net.param_layers()
        .into_iter()
        .map(|i| {
            let (w, b) = net.params_of(i);
            (net.layers()[i].name.clone(), w, b)
        })
        .collect()
}

/// Serializes `net`. Only networks built from an [`ArchSpec`] can be saved.
pub fn encode_checkpoint(net: &Network) -> Result<Vec<u8>> {
    let arch = net
        .arch()
        .ok_or_else(|| Error::validation("network", "only networks built from an architecture can be checkpointed"))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let text = arch.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&net.rng_seed().to_le_bytes());
    let tensors: Vec<(String, &Tensor)> = tensor_names(net)
        .into_iter()
        .flat_map(|(n, w, b)| [(format!("{n}.weight"), w), (format!("{n}.bias"), b)])
        .collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut digest = Sha256::new();
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            let b = v.to_le_bytes();
            out.extend_from_slice(&b);
            digest.update(b);
        }
    }
    out.extend_from_slice(&digest_prefix(digest).to_le_bytes());
    Ok(out)
}

fn digest_prefix(d: Sha256) -> u64 {
    let full = d.finalize();
    u64::from_le_bytes(full[..8].try_into().expect("8 bytes"))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses and verifies a checkpoint. Nothing is returned unless the magic,
/// version, digest and every tensor shape check out.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let len = r.u32("architecture length")? as usize;
    let text = std::str::from_utf8(r.take(len, "architecture block")?)
        .map_err(|e| CheckpointError::BadArch(e.to_string()))?;
    let arch = ArchSpec::parse(text).map_err(CheckpointError::BadArch)?;
    let seed = r.u64("rng seed")?;
    let count = r.u32("tensor count")? as usize;

    let mut digest = Sha256::new();
    let mut tensors = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let nlen = r.u16("tensor name length")? as usize;
        let name = String::from_utf8(r.take(nlen, "tensor name")?.to_vec())
            .map_err(|_| CheckpointError::ArchMismatch("tensor name is not UTF-8".into()))?;
        let ndim = r.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("tensor dims")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or(CheckpointError::Truncated("tensor payload"))?;
        let payload = r.take(n, "tensor payload")?;
        digest.update(payload);
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((name, shape, data));
    }
    let stored = r.u64("digest")?;
    let computed = digest_prefix(digest);
    if stored != computed {
        return Err(CheckpointError::DigestMismatch { stored, computed }.into());
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::ArchMismatch(format!("{} trailing bytes", bytes.len() - r.pos)).into());
    }

    let mut net = build_network(&arch, seed).map_err(|e| CheckpointError::BadArch(e.to_string()))?;
    let expected: Vec<(String, Vec<usize>)> = tensor_names(&net)
        .into_iter()
        .flat_map(|(n, w, b)| [(format!("{n}.weight"), w.shape().to_vec()), (format!("{n}.bias"), b.shape().to_vec())])
        .collect();
    if expected.len() != tensors.len() {
        return Err(CheckpointError::ArchMismatch(format!(
            "architecture has {} tensors, file has {}",
            expected.len(),
            tensors.len()
        ))
        .into());
    }
    for ((en, es), (n, s, _)) in expected.iter().zip(&tensors) {
        if en != n || es != s {
            return Err(CheckpointError::ArchMismatch(format!("expected {en} {es:?}, found {n} {s:?}")).into());
        }
    }
    let layers = net.param_layers();
    let mut it = tensors.into_iter();
    for i in layers {
        let (w, b) = net.layer_params_mut(i).expect("parameter layer");
        let (_, ws, wd) = it.next().expect("count checked");
        let (_, bs, bd) = it.next().expect("count checked");
        *w = Tensor::new(ws, wd)?;
        *b = Tensor::new(bs, bd)?;
    }
    Ok(net)
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(net)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
