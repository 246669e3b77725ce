//! `CKP1` checkpoint files.
//!
//! Layout, all integers `u32` little-endian:
//!
//! ```text
//! "CKP1" | count | { name_len | name (UTF-8) | ndim | dims[ndim] | f32 LE payload }*
//! ```

use std::fs;
use std::path::Path;

use super::tensor::Tensor;
use crate::bytes::{dim_u32, put_f32s, put_u32, Reader};
use crate::error::{Error, Result};

pub const CKP1_MAGIC: &[u8; 4] = b"CKP1";
const MAX_NDIM: u32 = 16;

pub fn encode_ckp1<'a, I>(entries: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(CKP1_MAGIC);
    put_u32(&mut out, dim_u32(entries.len())?);
    for (name, t) in entries {
        put_u32(&mut out, dim_u32(name.len())?);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, dim_u32(t.ndim())?);
        for &d in t.shape() {
            put_u32(&mut out, dim_u32(d)?);
        }
        put_f32s(&mut out, t.data());
    }
    Ok(out)
}

pub fn decode_ckp1(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(bytes);
    r.magic(CKP1_MAGIC)?;
    let count = r.u32("tensor count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let at = r.offset();
        let len = r.u32("name length")? as usize;
        let raw = r.take(len, "tensor name")?;
        let name = std::str::from_utf8(raw)
            .map_err(|e| Error::parse(at + 4 + e.valid_up_to(), "tensor name is not UTF-8"))?
            .to_owned();
        let (dims, n) = r.dims(MAX_NDIM)?;
        let data = r.f32s(n, "tensor payload")?;
        entries.push((name, Tensor::new(&dims, data)?));
    }
    r.finish()?;
    Ok(entries)
}

pub fn save_ckp1(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode_ckp1(entries.iter().map(|(n, t)| (n.as_str(), t)))?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_ckp1(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_ckp1(&fs::read(path)?)
}
