//! `T2FP` parameter checkpoints.
//!
//! Layout (little-endian): magic `T2FP`, u16 version, u32 parameter count,
//! then per parameter: u16 name length, UTF-8 name, u8 rank, rank × u32 dims,
//! and the f64 values. Parameters are written in name order.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"T2FP";
pub const VERSION: u16 = 1;

/// Write every parameter whose name starts with `prefix`.
pub fn write_params<W: Write>(store: &ParamStore, prefix: &str, w: &mut W) -> Result<()> {
    let selected: Vec<_> = store
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .collect();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(selected.len() as u32).to_le_bytes())?;
    for (name, p) in selected {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        let rank = u8::try_from(p.shape.len())
            .map_err(|_| Error::Format(format!("rank too large for {name}")))?;
        w.write_all(&[rank])?;
        for &d in &p.shape {
            let d =
                u32::try_from(d).map_err(|_| Error::Format(format!("dim too large for {name}")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &p.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Truncated,
        _ => Error::Io(e),
    })
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_params<R: Read>(r: &mut R) -> Result<ParamStore> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected T2FP")));
    }
    let version = read_u16(r)?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let count = read_u32(r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u16(r)? as usize;
        let mut name = vec![0u8; len];
        read_exact(r, &mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        read_exact(r, &mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        read_exact(r, &mut raw)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(&name, &shape, values)?;
    }
    Ok(store)
}

pub fn save_params(store: &ParamStore, prefix: &str, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(store, prefix, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamStore> {
    let mut r = BufReader::new(File::open(path)?);
    read_params(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            "vae.enc.w",
            &[2, 3],
            vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, 0.1, -0.0],
        )
        .unwrap();
        s.insert("vae.enc.b", &[3], vec![0.5, 0.25, 1e-300])
            .unwrap();
        s.insert("other.x", &[], vec![7.0]).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let mut buf = Vec::new();
        write_params(&s, "", &mut buf).unwrap();
        let back = read_params(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 3);
        for (name, p) in s.iter() {
            let q = back.get(name).unwrap();
            assert_eq!(p.shape, q.shape);
            let a: Vec<u64> = p.values.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = q.values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        let mut again = Vec::new();
        write_params(&back, "", &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_params(&sample(), "vae.", &mut buf).unwrap();
        assert_eq!(&buf[..4], b"T2FP");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        assert_eq!(u32::from_le_bytes(buf[6..10].try_into().unwrap()), 2);
        // first parameter in name order is vae.enc.b
        assert_eq!(u16::from_le_bytes([buf[10], buf[11]]), 9);
        assert_eq!(&buf[12..21], b"vae.enc.b");
        assert_eq!(buf[21], 1);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut buf = Vec::new();
        write_params(&sample(), "", &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_params(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
        let short = &buf[..buf.len() - 3];
        assert!(matches!(
            read_params(&mut &short[..]),
            Err(Error::Truncated)
        ));
        let mut ver = buf.clone();
        ver[4] = 9;
        assert!(matches!(
            read_params(&mut ver.as_slice()),
            Err(Error::Version(9))
        ));
    }
}
