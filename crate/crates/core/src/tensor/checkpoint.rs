//! Binary checkpoint format for [`ParameterSet`]s.
//!
//! Layout (little-endian): magic `EPCK`, `u32` version, `u32` tensor count,
//! then per tensor in name order: `u32` name length, UTF-8 name, `u32` rank,
//! `u64` per dimension, `u8` grad flag, and the `f64` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ParameterSet, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"EPCK";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(params: &ParameterSet, mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&[t.grad_enabled() as u8])?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Parse {
            line: 0,
            msg: format!("checkpoint truncated at byte {}", self.pos),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParameterSet> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::io("<checkpoint stream>", e))?;
    let bad = |msg: &str| Error::Parse {
        line: 0,
        msg: msg.to_string(),
    };
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    if c.u32()? != VERSION {
        return Err(bad("unsupported checkpoint version"));
    }
    let count = c.u32()?;
    let mut set = ParameterSet::new();
    for _ in 0..count {
        let nlen = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(nlen)?)
            .map_err(|_| bad("parameter name is not UTF-8"))?
            .to_string();
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let grad = c.take(1)?[0] != 0;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| c.u64().map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        set.insert(name, Tensor::new(shape, data)?.with_grad(grad))?;
    }
    if c.pos != buf.len() {
        return Err(bad("trailing bytes after checkpoint"));
    }
    Ok(set)
}

pub fn save_checkpoint(params: &ParameterSet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf).expect("writing to a Vec cannot fail");
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterSet> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(f)
}
