//! Little-endian cursor that reports byte offsets in its errors.

use crate::error::{Error, Result};

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::parse(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(Error::parse(
                0,
                format!("bad magic {got:?}, expected {:?}", String::from_utf8_lossy(magic)),
            ));
        }
        Ok(())
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// `ndim` then `ndim` dimensions, returning the dims and their product.
    pub fn dims(&mut self, max_ndim: u32) -> Result<(Vec<usize>, usize)> {
        let at = self.pos;
        let ndim = self.u32("ndim")?;
        if ndim > max_ndim {
            return Err(Error::parse(at, format!("ndim {ndim} exceeds limit {max_ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim as usize);
        let mut count: usize = 1;
        for _ in 0..ndim {
            let at = self.pos;
            let d = self.u32("dimension")? as usize;
            count = count
                .checked_mul(d)
                .ok_or_else(|| Error::parse(at, "element count overflows"))?;
            dims.push(d);
        }
        Ok((dims, count))
    }

    /// `count` little-endian `f32` values widened to `f64`.
    pub fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let at = self.pos;
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| Error::parse(at, "payload size overflows"))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect())
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::parse(self.pos, format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub(crate) fn dim_u32(d: usize) -> Result<u32> {
    u32::try_from(d).map_err(|_| Error::shape(format!("dimension {d} does not fit in u32")))
}
