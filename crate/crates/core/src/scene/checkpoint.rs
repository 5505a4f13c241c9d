//! Binary checkpoint format.
//!
//! Layout (all little-endian):
//!   magic "MURF" | version u32 | count u32
//!   per tensor: name_len u16 | name utf-8 | dtype u8 (0 = f32) | rank u8 |
//!               dims u64 each | payload f32 row-major
//!
//! Tensors are stored as f32 regardless of the runtime precision; loading
//! into an f64 engine upcasts. Names starting with `config.` are reserved
//! for model-shape scalars and are ignored by strict parameter matching.

use crate::error::Error;
use crate::nn::Params;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;
use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"MURF";
pub const VERSION: u32 = 1;

pub struct RawEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn save_entries(path: &Path, entries: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, dims, data) in entries {
        let nb = name.as_bytes();
        assert!(nb.len() <= u16::MAX as usize, "parameter name too long");
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(0u8); // dtype f32
        buf.push(dims.len() as u8);
        for &d in dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Serialize named parameters (plus any extra entries like `config.*`).
pub fn save_params<T: Scalar>(
    path: &Path,
    params: &Params<T>,
    extra: &[(String, Vec<usize>, Vec<f32>)],
) -> Result<()> {
    let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = extra.to_vec();
    for (name, t) in params {
        entries.push((
            name.clone(),
            t.shape().to_vec(),
            t.data().iter().map(|v| v.to_f32()).collect(),
        ));
    }
    save_entries(path, &entries)
}

pub fn load_entries(path: &Path) -> Result<Vec<RawEntry>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file while reading {what} (at byte {pos})"
            )));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, want {VERSION}"
        )));
    }
    let count = u32::from_le_bytes(take(4, "count")?.try_into().unwrap());
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let nlen = u16::from_le_bytes(take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(nlen, "name")?)
            .map_err(|_| Error::Checkpoint("non-utf8 tensor name".into()))?
            .to_string();
        let dtype = take(1, "dtype")?[0];
        if dtype != 0 {
            return Err(Error::Checkpoint(format!("unknown dtype {dtype} for `{name}`")));
        }
        let rank = take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u64::from_le_bytes(take(8, "dim")?.try_into().unwrap()) as usize);
        }
        let numel: usize = dims.iter().product();
        let payload = take(4 * numel, "payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(RawEntry { name, dims, data });
    }
    Ok(out)
}

/// Copy checkpoint values into existing parameters by name.
///
/// Strict mode: every non-`config.` entry must match a parameter (unknown
/// names rejected), every parameter must be present, and shapes must match.
/// Non-strict: load the intersection (used to seed the fine stage from a
/// coarse checkpoint).
pub fn load_into_params<T: Scalar>(path: &Path, params: &Params<T>, strict: bool) -> Result<()> {
    let raw = load_entries(path)?;
    let mut param_map: HashMap<&str, &Tensor<T>> = HashMap::new();
    for (name, t) in params {
        param_map.insert(name.as_str(), t);
    }
    let mut seen: HashSet<String> = HashSet::new();
    for entry in &raw {
        if entry.name.starts_with("config.") {
            continue;
        }
        match param_map.get(entry.name.as_str()) {
            Some(t) => {
                if t.shape() != entry.dims.as_slice() {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch for `{}`: file {:?} vs model {:?}",
                        entry.name,
                        entry.dims,
                        t.shape()
                    )));
                }
                let mut d = t.data_mut();
                for (dst, &src) in d.iter_mut().zip(&entry.data) {
                    *dst = T::from_f64(src as f64);
                }
                seen.insert(entry.name.clone());
            }
            None if strict => {
                return Err(Error::Checkpoint(format!(
                    "unknown tensor `{}` in checkpoint (strict mode)",
                    entry.name
                )));
            }
            None => {}
        }
    }
    if strict {
        for (name, _) in params {
            if !seen.contains(name) {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` missing from checkpoint"
                )));
            }
        }
    }
    Ok(())
}

/// Read back the `config.*` scalar entries as (key, value) pairs.
pub fn load_config_entries(path: &Path) -> Result<Vec<(String, f64)>> {
    let raw = load_entries(path)?;
    Ok(raw
        .iter()
        .filter(|e| e.name.starts_with("config."))
        .map(|e| (e.name["config.".len()..].to_string(), e.data[0] as f64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_fixture() -> Params<f64> {
        vec![
            ("a.weight".to_string(), Tensor::leaf(&[2, 3], (0..6).map(|v| v as f64 * 0.5).collect(), true)),
            ("b.bias".to_string(), Tensor::leaf(&[4], vec![1.0, -2.0, 3.5, 0.25], true)),
        ]
    }

    #[test]
    fn roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let params = params_fixture();
        save_params(&p, &params, &[]).unwrap();
        let restored = params_fixture();
        for (_, t) in &restored {
            let mut d = t.data_mut();
            d.iter_mut().for_each(|v| *v = 99.0);
        }
        load_into_params(&p, &restored, true).unwrap();
        for ((_, a), (_, b)) in params.iter().zip(&restored) {
            // stored as f32; both sides pass through the same downcast
            let av: Vec<f32> = a.data().iter().map(|v| *v as f32).collect();
            let bv: Vec<f32> = b.data().iter().map(|v| *v as f32).collect();
            assert_eq!(av, bv);
            for (x, y) in av.iter().zip(&bv) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn truncated_file_is_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_params(&p, &params_fixture(), &[]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
        match load_into_params(&p, &params_fixture(), true) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("want checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_tensor_rejected_in_strict_mode() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_params(
            &p,
            &params_fixture(),
            &[("mystery.blob".to_string(), vec![1], vec![7.0])],
        )
        .unwrap();
        match load_into_params(&p, &params_fixture(), true) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("mystery.blob"), "{msg}"),
            other => panic!("want checkpoint error, got {other:?}"),
        }
        // non-strict ignores it
        load_into_params(&p, &params_fixture(), false).unwrap();
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        std::fs::write(&p, b"NOPE....").unwrap();
        assert!(matches!(
            load_into_params(&p, &params_fixture(), true),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn config_entries_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_params(
            &p,
            &params_fixture(),
            &[("config.subsample".to_string(), vec![1], vec![8.0])],
        )
        .unwrap();
        let cfg = load_config_entries(&p).unwrap();
        assert_eq!(cfg, vec![("subsample".to_string(), 8.0)]);
        // strict load ignores the reserved namespace
        load_into_params(&p, &params_fixture(), true).unwrap();
    }

    #[test]
    fn shape_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_params(&p, &params_fixture(), &[]).unwrap();
        let mut other = params_fixture();
        other[0].1 = Tensor::leaf(&[3, 2], vec![0.0; 6], true);
        assert!(matches!(
            load_into_params(&p, &other, true),
            Err(Error::Checkpoint(_))
        ));
    }
}
