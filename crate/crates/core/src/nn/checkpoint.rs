//! Binary checkpoint container.
//!
//! Layout (all integers little-endian, documented in docs/formats.md):
//!
//! ```text
//! magic   b"TPCK"
//! version u32            (currently 1)
//! meta    u32 len + UTF-8 JSON bytes (free-form string map)
//! count   u32
//! entry*  name: u32 len + UTF-8 bytes
//!         ndim: u32, dims: ndim x u64
//!         data: product(dims) x f64 LE
//! ```
//!
//! Entries are written in sorted name order, so identical stores produce
//! byte-identical files. Only parameter values are persisted; optimizer
//! moments are transient training state.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{CoreError, Result};

const MAGIC: &[u8; 4] = b"TPCK";
pub const FORMAT_VERSION: u32 = 1;

pub type Meta = BTreeMap<String, String>;

pub fn save(path: &Path, store: &ParamStore, meta: &Meta) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let meta_json = serde_json::to_string(meta)
        .map_err(|e| CoreError::parse(path.display().to_string(), e.to_string()))?;
    w.write_all(&(meta_json.len() as u32).to_le_bytes())?;
    w.write_all(meta_json.as_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, entry) in store.iter() {
        entry.value.ensure_finite(&format!("checkpoint entry `{name}`"))?;
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(entry.value.shape().len() as u32).to_le_bytes())?;
        for &d in entry.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in entry.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore, Meta)> {
    let mut r = BufReader::new(File::open(path)?);
    let loc = path.display().to_string();
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, &loc, "magic")?;
    if &magic != MAGIC {
        return Err(CoreError::parse(&loc, "bad magic, not a checkpoint file"));
    }
    let version = read_u32(&mut r, &loc, "version")?;
    if version != FORMAT_VERSION {
        return Err(CoreError::parse(&loc, format!("unsupported version {version}")));
    }
    let meta_len = read_u32(&mut r, &loc, "meta length")? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    read_exact(&mut r, &mut meta_bytes, &loc, "meta")?;
    let meta: Meta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| CoreError::parse(&loc, format!("meta json: {e}")))?;
    let count = read_u32(&mut r, &loc, "entry count")?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let field = format!("entry {i}");
        let name_len = read_u32(&mut r, &loc, &field)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, &loc, &field)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CoreError::parse(&loc, format!("{field}: name not UTF-8")))?;
        let ndim = read_u32(&mut r, &loc, &field)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut buf = [0u8; 8];
            read_exact(&mut r, &mut buf, &loc, &field)?;
            shape.push(u64::from_le_bytes(buf) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut buf = [0u8; 8];
            read_exact(&mut r, &mut buf, &loc, &field)?;
            data.push(f64::from_le_bytes(buf));
        }
        let t = Tensor::new(shape, data)?;
        t.ensure_finite(&format!("checkpoint entry `{name}`"))?;
        store.insert(&name, t)?;
    }
    // trailing bytes mean the writer and reader disagree about the layout
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(CoreError::parse(&loc, "trailing bytes after last entry"));
    }
    Ok((store, meta))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], loc: &str, field: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| CoreError::parse(loc, format!("truncated while reading {field}")))
}

fn read_u32(r: &mut impl Read, loc: &str, field: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, loc, field)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::init_linear;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut rng = crate::rng::seeded(5);
        let mut store = ParamStore::new();
        init_linear(&mut store, "a", 3, 4, &mut rng).unwrap();
        init_linear(&mut store, "b", 7, 2, &mut rng).unwrap();
        let mut meta = Meta::new();
        meta.insert("kind".into(), "test".into());
        save(&path, &store, &meta).unwrap();
        let (loaded, meta2) = load(&path).unwrap();
        assert_eq!(meta2.get("kind").map(String::as_str), Some("test"));
        for name in ["a.w", "a.b", "b.w", "b.b"] {
            assert_eq!(store.value(name).unwrap(), loaded.value(name).unwrap());
        }
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = crate::rng::seeded(9);
        let mut store = ParamStore::new();
        init_linear(&mut store, "x", 5, 5, &mut rng).unwrap();
        let p1 = dir.path().join("1.ckpt");
        let p2 = dir.path().join("2.ckpt");
        save(&p1, &store, &Meta::new()).unwrap();
        save(&p2, &store, &Meta::new()).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut rng = crate::rng::seeded(5);
        let mut store = ParamStore::new();
        init_linear(&mut store, "a", 3, 4, &mut rng).unwrap();
        save(&path, &store, &Meta::new()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 11]).unwrap();
        assert!(matches!(load(&path), Err(CoreError::Parse { .. })));
    }
}
