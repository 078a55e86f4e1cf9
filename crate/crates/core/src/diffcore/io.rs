//! The LTF1 tensor container.
//!
//! Layout: the 4-byte magic `LTF1`, one `u8` rank, `rank` little-endian
//! `u32` dimensions, then the elements as row-major little-endian `f64`.
//! Several tensors may be concatenated back to back in one file.

use std::fs;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{LtfeError, Result};

pub const MAGIC: &[u8; 4] = b"LTF1";

fn format_err(offset: usize, message: impl Into<String>) -> LtfeError {
    LtfeError::Format {
        offset,
        message: message.into(),
    }
}

pub fn encode(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(format_err(0, format!("rank {} exceeds 255", t.rank())));
    }
    out.extend_from_slice(MAGIC);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| format_err(out.len(), format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn to_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(5 + 4 * t.rank() + 8 * t.len());
    encode(t, &mut out)?;
    Ok(out)
}

/// Decodes one tensor starting at `*pos`, advancing `*pos` past it.
/// Error offsets are absolute positions in `bytes`.
pub fn decode(bytes: &[u8], pos: &mut usize) -> Result<Tensor> {
    let start = *pos;
    let need = |at: usize, n: usize, what: &str| -> Result<()> {
        if bytes.len() < at + n {
            Err(format_err(
                bytes.len(),
                format!("truncated {what}: needed {n} bytes at offset {at}"),
            ))
        } else {
            Ok(())
        }
    };
    need(start, 4, "magic")?;
    if &bytes[start..start + 4] != MAGIC {
        let bad = (0..4).find(|&i| bytes[start + i] != MAGIC[i]).unwrap_or(0);
        return Err(format_err(start + bad, "bad magic, expected \"LTF1\""));
    }
    need(start + 4, 1, "rank")?;
    let rank = bytes[start + 4] as usize;
    let mut at = start + 5;
    need(at, 4 * rank, "dimensions")?;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        if d == 0 {
            return Err(format_err(at, "zero-sized dimension"));
        }
        shape.push(d);
        at += 4;
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(start + 5, "element count overflows"))?;
    need(at, n.saturating_mul(8), "data")?;
    let data = bytes[at..at + 8 * n]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    *pos = at + 8 * n;
    Tensor::new(shape, data).map_err(|e| format_err(start, e.to_string()))
}

/// Decodes exactly one tensor; trailing bytes are an error.
pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let t = decode(bytes, &mut pos)?;
    if pos != bytes.len() {
        return Err(format_err(pos, "trailing bytes after tensor"));
    }
    Ok(t)
}

/// Decodes a back-to-back sequence of tensors.
pub fn all_from_bytes(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut pos = 0;
    let mut out = Vec::new();
    while pos < bytes.len() {
        out.push(decode(bytes, &mut pos)?);
    }
    Ok(out)
}

fn io_err(path: &Path, source: std::io::Error) -> LtfeError {
    LtfeError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    from_bytes(&bytes)
}

pub fn write_file(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, to_bytes(t)?).map_err(|e| io_err(path, e))
}

pub fn read_all(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    all_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let b = to_bytes(&t).unwrap();
        assert_eq!(&b[..4], b"LTF1");
        assert_eq!(b[4], 2);
        assert_eq!(&b[5..9], &2u32.to_le_bytes());
        assert_eq!(&b[9..13], &1u32.to_le_bytes());
        assert_eq!(&b[13..21], &1.5f64.to_le_bytes());
        assert_eq!(b.len(), 29);
    }

    #[test]
    fn reports_failing_offsets() {
        let t = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let mut b = to_bytes(&t).unwrap();
        b[2] = b'X';
        match from_bytes(&b) {
            Err(LtfeError::Format { offset, .. }) => assert_eq!(offset, 2),
            other => panic!("expected format error, got {other:?}"),
        }
        let b = to_bytes(&t).unwrap();
        match from_bytes(&b[..20]) {
            Err(LtfeError::Format { offset, message }) => {
                assert_eq!(offset, 20);
                assert!(message.contains("data"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
        let mut b = to_bytes(&t).unwrap();
        b.push(0);
        assert!(matches!(from_bytes(&b), Err(LtfeError::Format { offset: 33, .. })));
    }

    #[test]
    fn concatenated_stream() {
        let a = Tensor::scalar(4.0);
        let b = Tensor::zeros(&[2, 2, 3]);
        let mut bytes = to_bytes(&a).unwrap();
        bytes.extend(to_bytes(&b).unwrap());
        assert_eq!(all_from_bytes(&bytes).unwrap(), vec![a, b]);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_identical(
            shape in prop::collection::vec(1usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| f64::from_bits(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(i as u32) & 0x7FEF_FFFF_FFFF_FFFF))
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = from_bytes(&to_bytes(&t).unwrap()).unwrap();
            prop_assert_eq!(t.shape(), back.shape());
            for (a, b) in t.data().iter().zip(back.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
