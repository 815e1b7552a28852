//! VXF1 tensor container: `"VXF1"`, `u32` rank, `rank` x `u64` dims, then
//! row-major `f64` values, all little-endian.

use std::fs;
use std::io::Read;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VXF1";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode(mut bytes: &[u8]) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(&mut bytes, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Container(format!("bad magic {magic:?}")));
    }
    let mut u32b = [0u8; 4];
    read_exact(&mut bytes, &mut u32b, "rank")?;
    let rank = u32::from_le_bytes(u32b) as usize;
    let mut dims = Vec::with_capacity(rank.min(16));
    let mut u64b = [0u8; 8];
    for _ in 0..rank {
        read_exact(&mut bytes, &mut u64b, "dims")?;
        dims.push(
            usize::try_from(u64::from_le_bytes(u64b))
                .map_err(|_| Error::Container("dimension overflows usize".into()))?,
        );
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Container("element count overflows".into()))?;
    if bytes.len() != n * 8 {
        return Err(Error::Container(format!(
            "expected {} payload bytes for dims {dims:?}, found {}",
            n * 8,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(dims, data)
}

fn read_exact(src: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    src.read_exact(buf)
        .map_err(|_| Error::Container(format!("truncated while reading {what}")))
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"VXF1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..24], &1u64.to_le_bytes());
        assert_eq!(&b[24..32], &1.5f64.to_le_bytes());
        assert_eq!(b.len(), 40);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let t = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let b = encode(&t);
        assert!(decode(&b[..b.len() - 1]).is_err());
        assert!(decode(&b[..6]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in prop::collection::vec(0usize..4, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| f64::from_bits(seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(i as u64)))
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let a: Vec<u64> = back.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = t.data().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
