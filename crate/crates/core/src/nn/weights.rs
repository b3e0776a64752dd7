//! Weight file: `CBUW`, version, length-prefixed JSON header, then tensor records.
//! All integers are little-endian `u32`.

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CBUW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub header: String,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(file: &WeightFile) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    put_u32(&mut out, file.header.len())?;
    out.extend_from_slice(file.header.as_bytes());
    for (name, t) in &file.tensors {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated weight file while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode(bytes: &[u8]) -> Result<WeightFile> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            "CBUW"
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported weight file version {version}, expected {VERSION}")));
    }
    let hlen = r.u32("header length")?;
    let header = std::str::from_utf8(r.take(hlen, "header")?)
        .map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?
        .to_string();
    let mut tensors = Vec::new();
    while !r.done() {
        let nlen = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(nlen, "name")?)
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32("rank")?;
        if rank > 8 {
            return Err(Error::Format(format!("tensor `{name}` has implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
        let raw = r.take(n, "tensor data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(WeightFile { header, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightFile {
        WeightFile {
            header: "{\"a\":1}".into(),
            tensors: vec![
                ("w".into(), Tensor::new([2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e-7]).unwrap()),
                ("b".into(), Tensor::new([1], vec![f32::from_bits(0x7fc0_0001)]).unwrap()),
            ],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let f = sample();
        let back = decode(&encode(&f).unwrap()).unwrap();
        assert_eq!(back.header, f.header);
        for ((n1, t1), (n2, t2)) in f.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn truncation_is_detected_everywhere() {
        let bytes = encode(&sample()).unwrap();
        for cut in 0..bytes.len() {
            // cutting exactly between records is a valid shorter file
            if let Ok(f) = decode(&bytes[..cut]) {
                assert!(f.tensors.len() < 2);
            }
        }
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_magic_is_named() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        match decode(&bytes) {
            Err(Error::Format(m)) => assert!(m.contains("magic") && m.contains("XXXX")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn layout_is_little_endian() {
        let bytes = encode(&WeightFile { header: String::new(), tensors: vec![] }).unwrap();
        assert_eq!(bytes, b"CBUW\x01\0\0\0\0\0\0\0");
    }
}
