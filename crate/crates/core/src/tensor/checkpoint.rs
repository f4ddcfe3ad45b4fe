//! Parameter checkpoint format:
//!
//! ```text
//! "ROTENS1\n"
//! repeated: name_len u32 LE | name (UTF-8) | 4 × dim u32 LE | values f64 LE
//! ```

use std::io::{Read, Write};

use super::{numel, Result, Tensor4, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ROTENS1\n";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor4,
}

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Checkpoint(e.to_string())
}

pub fn write_checkpoint<W: Write>(mut out: W, entries: &[NamedTensor]) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    for entry in entries {
        let name = entry.name.as_bytes();
        let len = u32::try_from(name.len()).map_err(|_| {
            TensorError::Checkpoint(format!("name of {} bytes too long", name.len()))
        })?;
        out.write_all(&len.to_le_bytes()).map_err(io_err)?;
        out.write_all(name).map_err(io_err)?;
        for d in entry.tensor.shape() {
            let d = u32::try_from(d)
                .map_err(|_| TensorError::Checkpoint(format!("dimension {d} exceeds u32")))?;
            out.write_all(&d.to_le_bytes()).map_err(io_err)?;
        }
        let mut buf = Vec::with_capacity(entry.tensor.len() * 8);
        for v in entry.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(TensorError::Checkpoint(format!(
                "truncated {what} at byte offset {}",
                self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<NamedTensor>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(io_err)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(CHECKPOINT_MAGIC.len(), "magic")? != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let mut entries = Vec::new();
    while cur.pos < bytes.len() {
        let len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|e| TensorError::Checkpoint(format!("name is not UTF-8: {e}")))?
            .to_owned();
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = cur.u32("dims")? as usize;
        }
        let count = numel(shape)?;
        let raw = cur.take(
            count
                .checked_mul(8)
                .ok_or(TensorError::SizeOverflow(shape))?,
            "values",
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        entries.push(NamedTensor {
            name,
            tensor: Tensor4::from_vec(shape, data)?,
        });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in proptest::collection::vec(any::<f64>(), 0..40),
            name in "[a-z0-9._#]{0,12}",
        ) {
            let t = Tensor4::from_vec([1, values.len(), 1, 1], values.clone()).unwrap();
            let entries = vec![
                NamedTensor { name: name.clone(), tensor: t },
                NamedTensor { name: "tail".into(), tensor: Tensor4::zeros([0, 0, 0, 0]).unwrap() },
            ];
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &entries).unwrap();
            let back = read_checkpoint(buf.as_slice()).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[0].name, &name);
            let bits: Vec<u64> = back[0].tensor.data().iter().map(|v| v.to_bits()).collect();
            let expect: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, expect);
        }
    }

    #[test]
    fn layout_is_as_documented() {
        let entries = vec![NamedTensor {
            name: "w".into(),
            tensor: Tensor4::from_vec([1, 1, 1, 2], vec![1.0, -2.5]).unwrap(),
        }];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &entries).unwrap();
        let mut expect = b"ROTENS1\n".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.push(b'w');
        for d in [1u32, 1, 1, 2] {
            expect.extend_from_slice(&d.to_le_bytes());
        }
        expect.extend_from_slice(&1.0f64.to_le_bytes());
        expect.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn truncation_and_magic_errors() {
        assert!(read_checkpoint(&b"NOTMAGIC"[..]).is_err());
        let entries = vec![NamedTensor {
            name: "w".into(),
            tensor: Tensor4::vector(vec![1.0, 2.0]),
        }];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &entries).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_checkpoint(buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("byte offset"));
    }
}
