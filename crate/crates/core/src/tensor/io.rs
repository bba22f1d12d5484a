//! Binary tensor records and named checkpoints.
//!
//! Tensor record (all integers little-endian):
//!
//! | bytes        | field                                  |
//! |--------------|----------------------------------------|
//! | 4            | magic `MRLT`                           |
//! | 1            | dtype (0 = f32, 1 = f64)               |
//! | 1            | rank                                   |
//! | 8 x rank     | extents as u64                         |
//! | numel x size | payload in row-major order             |
//!
//! A checkpoint is a plain concatenation of entries, each a u16 name length,
//! the UTF-8 name, then one tensor record.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::{DType, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MRLT";

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::Format(format!("rank {} does not fit in one byte", t.rank())))?;
    w.write_all(MAGIC)?;
    w.write_all(&[t.dtype().code(), rank])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match t.dtype() {
        DType::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        DType::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_exact_or_format<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut head = [0u8; 6];
    read_exact_or_format(r, &mut head, "tensor header")?;
    if &head[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            &head[..4],
            MAGIC
        )));
    }
    let dtype = DType::from_code(head[4])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", head[4])))?;
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        read_exact_or_format(r, &mut b, "tensor extents")?;
        shape.push(
            usize::try_from(u64::from_le_bytes(b))
                .map_err(|_| Error::Format("extent exceeds address space".into()))?,
        );
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflows".into()))?;
    let mut payload = vec![0u8; numel * dtype.size_of()];
    read_exact_or_format(r, &mut payload, "tensor payload")?;
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Tensor::from_vec_dtype(data, &shape, dtype).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_checkpoint<W: Write>(w: &mut W, entries: &[(String, Tensor)]) -> Result<()> {
    for (name, t) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {} bytes", name.len())))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut entries = Vec::new();
    loop {
        let mut len = [0u8; 2];
        match r.read(&mut len[..1])? {
            0 => break,
            _ => read_exact_or_format(r, &mut len[1..], "entry name length")?,
        }
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact_or_format(r, &mut name, "entry name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("entry name is not valid UTF-8".into()))?;
        entries.push((name, read_tensor(r)?));
    }
    Ok(entries)
}

pub fn save_checkpoint(path: impl AsRef<Path>, entries: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::from_vec_dtype(vec![1.0, -2.0], &[2, 1], DType::F32).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut expected = b"MRLT".to_vec();
        expected.extend([0u8, 2]);
        expected.extend(2u64.to_le_bytes());
        expected.extend(1u64.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let err = read_tensor(&mut &b"XXXX\x01\x01"[..]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_tensor(&mut &buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_entries_keep_order() {
        let entries = vec![
            ("b".to_string(), Tensor::scalar(2.0)),
            ("a.weight".to_string(), Tensor::from_vec(vec![1.0; 6], &[2, 3]).unwrap()),
        ];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &entries).unwrap();
        let back = read_checkpoint(&mut &buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "b");
        assert_eq!(back[1].1.shape(), &[2, 3]);
    }

    proptest! {
        #[test]
        fn round_trip_preserves_values(
            dims in prop::collection::vec(1usize..4, 1..4),
            seed in any::<u64>(),
            f64_dtype in any::<bool>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| ((seed.wrapping_mul(i as u64 + 1) % 10_007) as f64 - 5000.0) / 37.0)
                .collect();
            let dtype = if f64_dtype { DType::F64 } else { DType::F32 };
            let t = Tensor::from_vec_dtype(data, &dims, dtype).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back = read_tensor(&mut &buf[..]).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert_eq!(back.dtype(), dtype);
            prop_assert_eq!(back.data(), t.data());
        }
    }
}
