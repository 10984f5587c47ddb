//! Versioned binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "PCMP"
//! version u32      currently 1
//! count   u32      number of named tensors
//! per tensor, in ascending name order:
//!   name_len u32, name bytes (UTF-8)
//!   rank     u32, dims u64 x rank
//!   payload  f64 x product(dims)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PCMP";
pub const VERSION: u32 = 1;

pub fn write_container<W: Write>(w: &mut W, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_container<R: Read>(r: &mut R) -> Result<BTreeMap<String, Tensor>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version} (expected {VERSION})"
        )));
    }
    let count = read_u32(r)? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        if name_len > 1 << 20 {
            return Err(Error::Format(format!("tensor name too long: {name_len}")));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| Error::Format(format!("tensor name not UTF-8: {e}")))?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor rank too large: {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            let d = u64::from_le_bytes(b);
            numel = numel.saturating_mul(d);
            shape.push(d as usize);
        }
        if numel > 1 << 28 {
            return Err(Error::Format(format!("tensor too large: {numel} elements")));
        }
        let mut data = Vec::with_capacity(numel as usize);
        for _ in 0..numel {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.insert(name, Tensor::new(shape, data)?);
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_to_file(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut buf = Vec::new();
    write_container(&mut buf, tensors)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_from_file(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = std::fs::read(path)?;
    read_container(&mut bytes.as_slice())
}

/// Serializes to bytes (for checksums and byte-equality tests).
pub fn to_bytes(tensors: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_container(&mut buf, tensors).expect("in-memory write cannot fail");
    buf
}

/// FNV-1a 64-bit checksum, hex-encoded. Used for provenance stamps.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let mut m = BTreeMap::new();
        m.insert(
            "a.weight".to_string(),
            Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
        );
        m.insert("b".to_string(), Tensor::scalar(-0.0));
        let bytes = to_bytes(&m);
        let back = read_container(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        for (k, t) in &m {
            let u = &back[k];
            assert_eq!(t.shape(), u.shape());
            for (x, y) in t.data().iter().zip(u.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut m = BTreeMap::new();
        m.insert("t".into(), Tensor::scalar(1.0));
        let mut bytes = to_bytes(&m);
        bytes[0] = b'X';
        assert!(matches!(
            read_container(&mut bytes.as_slice()),
            Err(Error::Format(_))
        ));
        let mut bytes2 = to_bytes(&m);
        bytes2[4] = 99;
        assert!(matches!(
            read_container(&mut bytes2.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn deterministic_bytes() {
        let mut m = BTreeMap::new();
        m.insert("z".into(), Tensor::scalar(2.0));
        m.insert("a".into(), Tensor::scalar(1.0));
        assert_eq!(to_bytes(&m), to_bytes(&m.clone()));
    }
}
