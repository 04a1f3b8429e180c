//! Versioned container for named `f64` arrays plus a JSON metadata block.
//!
//! Layout: magic `IVFA`, `u32` format version, `u64` header length, the JSON
//! header (`{"meta": .., "tensors": [{name, shape}]}`), then every tensor's
//! little-endian `f64` payload in header order. Values round-trip bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"IVFA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub fn to_bytes(meta: &serde_json::Value, tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let header = Header {
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let payload: usize = tensors.iter().map(|(_, t)| t.numel() * 8).sum();
    let mut out = Vec::with_capacity(16 + header.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let bad = |why: &str| Error::Checkpoint(why.to_owned());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a tensor archive (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported archive version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut offset = 16 + hlen;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 8 * n)
            .ok_or_else(|| Error::Checkpoint(format!("truncated payload for {}", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += 8 * n;
        tensors.push((e.name, Tensor::new(e.shape, data)));
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok((header.meta, tensors))
}

pub fn write(path: &Path, meta: &serde_json::Value, tensors: &[(String, Tensor)]) -> Result<()> {
    let bytes = to_bytes(meta, tensors)?;
    // write-then-rename so an interrupted run never leaves a torn file
    let tmp = path.with_extension("partial");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(values in proptest::collection::vec(any::<f64>(), 1..40), split in 0usize..40) {
            let split = split.min(values.len());
            let a = Tensor::new(vec![split], values[..split].to_vec());
            let b = Tensor::new(vec![1, values.len() - split], values[split..].to_vec());
            let meta = serde_json::json!({"step": 3});
            let bytes = to_bytes(&meta, &[("a".into(), a.clone()), ("b".into(), b.clone())]).unwrap();
            let (m, ts) = from_bytes(&bytes).unwrap();
            prop_assert_eq!(m, meta);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&ts[0].1), bits(&a));
            prop_assert_eq!(bits(&ts[1].1), bits(&b));
        }
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(from_bytes(b"nope").is_err());
        let bytes = to_bytes(&serde_json::json!({}), &[("x".into(), Tensor::ones(&[4]))]).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        assert!(from_bytes(&wrong).is_err());
    }
}
