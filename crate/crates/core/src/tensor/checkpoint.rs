//! Flat binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"FHCK"
//! version  u32
//! count    u32
//! count x { name_len u32, name [u8; name_len] (UTF-8),
//!           ndim u32, dims [u64; ndim], data [f64 bits; prod(dims)] }
//! ```

use std::io::{self, Read, Write};

use super::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"FHCK";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub name: String,
    pub tensor: Tensor,
}

pub fn write_checkpoint<W: Write>(mut w: W, records: &[CheckpointRecord]) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for rec in records {
        let name = rec.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = rec.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in rec.tensor.data() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> io::Result<Vec<CheckpointRecord>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(invalid("not a checkpoint file"));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(invalid(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| invalid(e.to_string()))?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<io::Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| read_u64(&mut r).map(f64::from_bits))
            .collect::<io::Result<Vec<_>>>()?;
        let tensor = Tensor::new(shape, data).map_err(|e| invalid(e.to_string()))?;
        out.push(CheckpointRecord { name, tensor });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            vals in proptest::collection::vec(any::<f64>(), 1..40),
            name in "[a-z/_.0-9]{1,24}",
        ) {
            let n = vals.len();
            let recs = vec![
                CheckpointRecord { name: name.clone(), tensor: Tensor::new([n], vals.clone()).unwrap() },
                CheckpointRecord { name: "scalar".into(), tensor: Tensor::scalar(-0.0) },
            ];
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &recs).unwrap();
            let back = read_checkpoint(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[0].name, &name);
            let bits: Vec<u64> = back[0].tensor.data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = vals.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, want);
            prop_assert_eq!(back[1].tensor.data()[0].to_bits(), (-0.0f64).to_bits());
        }
    }

    #[test]
    fn wrong_magic_or_version_rejected() {
        assert!(read_checkpoint(&b"XXXX\x01\0\0\0\0\0\0\0"[..]).is_err());
        assert!(read_checkpoint(&b"FHCK\x02\0\0\0\0\0\0\0"[..]).is_err());
        assert!(read_checkpoint(&b"FHCK\x01\0\0\0\0\0\0\0"[..]).unwrap().is_empty());
    }
}
