//! Self-describing binary container for named tensors.
//!
//! Layout: magic line, `u64` little-endian header length, a JSON header
//! (caller metadata plus the tensor directory), then every tensor's values as
//! little-endian floats of the recorded width, in directory order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor, FLOAT_BYTES};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    float_bytes: usize,
    meta: Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub fn encode(magic: &str, meta: Value, tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let header = Header {
        float_bytes: FLOAT_BYTES,
        meta,
        tensors: tensors
            .iter()
            .map(|(n, t)| Entry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let body: usize = tensors.iter().map(|(_, t)| t.len() * FLOAT_BYTES).sum();
    let mut out = Vec::with_capacity(magic.len() + 9 + header.len() + body);
    out.extend_from_slice(magic.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(magic: &str, bytes: &[u8], origin: &Path) -> Result<(Value, Vec<(String, Tensor)>)> {
    let bad = |detail: String| Error::Format {
        path: origin.to_path_buf(),
        detail,
    };
    let prefix_len = magic.len() + 1;
    if bytes.len() < prefix_len + 8 || &bytes[..magic.len()] != magic.as_bytes() || bytes[magic.len()] != b'\n' {
        return Err(bad(format!("missing `{magic}` magic")));
    }
    let mut len_bytes = [0u8; 8];
    len_bytes.copy_from_slice(&bytes[prefix_len..prefix_len + 8]);
    let hlen = u64::from_le_bytes(len_bytes) as usize;
    let start = prefix_len + 8;
    let header_bytes = bytes
        .get(start..start.saturating_add(hlen))
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.float_bytes != 4 && header.float_bytes != 8 {
        return Err(bad(format!("unsupported float width {}", header.float_bytes)));
    }
    let mut cursor = start + hlen;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let len = n * header.float_bytes;
        let raw = bytes
            .get(cursor..cursor + len)
            .ok_or_else(|| bad(format!("truncated data for `{}`", e.name)))?;
        cursor += len;
        let values: Vec<Float> = if header.float_bytes == 8 {
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Float)
                .collect()
        } else {
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Float)
                .collect()
        };
        let t = Tensor::from_vec(&e.shape, values).map_err(|err| bad(format!("`{}`: {err}", e.name)))?;
        tensors.push((e.name, t));
    }
    if cursor != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - cursor)));
    }
    Ok((header.meta, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, -2.5, 3.25, 1e-300 as Float]).unwrap();
        let b = Tensor::ones(&[3]);
        let bytes = encode("TESTMAG", serde_json::json!({"k": 1}), &[("a".into(), &a), ("b".into(), &b)]);
        let (meta, ts) = decode("TESTMAG", &bytes, Path::new("mem")).unwrap();
        assert_eq!(meta["k"], 1);
        assert_eq!(ts[0].1, a);
        assert_eq!(ts[1].0, "b");
        assert!(decode("OTHER", &bytes, Path::new("mem")).is_err());
        assert!(decode("TESTMAG", &bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }
}
