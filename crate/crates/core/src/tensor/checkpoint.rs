//! Binary tensor archive.
//!
//! Layout (little-endian): magic `MSCT`, version `u32`, entry count `u32`,
//! then per entry: name length `u16`, UTF-8 name, dtype `u8` (0 = f64),
//! rank `u8`, extents `u32 × rank`, raw data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MSCT";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

pub fn write_checkpoint(path: impl AsRef<Path>, entries: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint_to(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn write_checkpoint_to<W: Write>(w: &mut W, entries: &[(String, Tensor)]) -> Result<()> {
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::Contract("too many checkpoint entries".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Contract(format!("entry name too long: {name}")))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Contract(format!("rank too large for {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[DTYPE_F64, rank])?;
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Contract(format!("extent too large for {name}")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    read_checkpoint_from(&mut BufReader::new(File::open(path)?))
}

struct Cursor<'a, R> {
    r: &'a mut R,
    offset: usize,
}

impl<R: Read> Cursor<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.r.read_exact(&mut buf).map_err(|_| Error::Parse {
            offset: self.offset,
            msg: "unexpected end of checkpoint".into(),
        })?;
        self.offset += N;
        Ok(buf)
    }

    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.offset,
            msg: msg.into(),
        })
    }
}

pub fn read_checkpoint_from<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { r, offset: 0 };
    if &c.bytes::<4>()? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: "bad magic, expected MSCT".into(),
        });
    }
    let version = u32::from_le_bytes(c.bytes()?);
    if version != VERSION {
        return c.fail(format!("unsupported version {version}"));
    }
    let count = u32::from_le_bytes(c.bytes()?) as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = u16::from_le_bytes(c.bytes()?) as usize;
        let mut name = vec![0u8; len];
        for b in name.iter_mut() {
            *b = c.bytes::<1>()?[0];
        }
        let name = match String::from_utf8(name) {
            Ok(s) => s,
            Err(_) => return c.fail("entry name is not UTF-8"),
        };
        let [dtype, rank] = c.bytes::<2>()?;
        if dtype != DTYPE_F64 {
            return c.fail(format!("unsupported dtype {dtype}"));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(c.bytes()?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(c.bytes()?));
        }
        let t = match Tensor::new(&shape, data) {
            Ok(t) => t,
            Err(e) => return c.fail(format!("entry {name}: {e}")),
        };
        out.push((name, t));
    }
    Ok(out)
}
