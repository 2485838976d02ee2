//! Binary tensor container.
//!
//! Layout: the magic `DYSK`, a little-endian `u32` format version, then
//! records until end of file. Each record is a `u32` name length, the UTF-8
//! name bytes, a `u32` rank, one `u32` per extent, and the payload as
//! little-endian `f64`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DYSK";
pub const VERSION: u32 = 1;

pub fn write_records(mut w: impl Write, records: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&u32_len(name.len())?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&u32_len(t.rank())?.to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&u32_len(e)?.to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")))
}

pub fn read_records(mut r: impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("missing DYSK magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let n = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(n)?.to_vec())
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
        let rank = cur.u32()? as usize;
        let shape = (0..rank).map(|_| cur.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let payload = cur.take(count.checked_mul(8).ok_or_else(|| Error::Format("payload too large".into()))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("truncated container at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn save(path: impl AsRef<Path>, records: &[(String, Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    write_records(&mut buf, records)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    read_records(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        let t = Tensor::new(vec![2], vec![1.0, -0.5]).unwrap();
        write_records(&mut buf, &[("ab".into(), t)]).unwrap();
        assert_eq!(&buf[..4], b"DYSK");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..14], b"ab");
        assert_eq!(&buf[14..18], &1u32.to_le_bytes());
        assert_eq!(&buf[18..22], &2u32.to_le_bytes());
        assert_eq!(&buf[22..30], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 38);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_records(&b"NOPE\x01\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        write_records(&mut buf, &[("x".into(), Tensor::zeros(&[3]))]).unwrap();
        buf.pop();
        assert!(read_records(&buf[..]).is_err());
    }

    #[test]
    fn scalar_record_has_rank_zero() {
        let mut buf = Vec::new();
        write_records(&mut buf, &[("s".into(), Tensor::scalar(2.5))]).unwrap();
        let back = read_records(&buf[..]).unwrap();
        assert_eq!(back[0].1.rank(), 0);
        assert_eq!(back[0].1.item(), 2.5);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            records in prop::collection::vec(
                ("[a-z_.0-9]{1,12}", prop::collection::vec(1usize..4, 0..4), any::<u64>()),
                0..5,
            )
        ) {
            let records: Vec<(String, Tensor)> = records
                .into_iter()
                .map(|(name, shape, seed)| {
                    let n: usize = shape.iter().product();
                    // arbitrary bit patterns, including NaN payloads and negative zero
                    let data = (0..n as u64)
                        .map(|i| f64::from_bits(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i)))
                        .collect();
                    (name, Tensor::new(shape, data).unwrap())
                })
                .collect();
            let mut buf = Vec::new();
            write_records(&mut buf, &records).unwrap();
            let back = read_records(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), records.len());
            for ((n1, t1), (n2, t2)) in records.iter().zip(&back) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
        }
    }
}
