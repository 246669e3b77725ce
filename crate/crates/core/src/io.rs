//! File formats: OCT1 arrays, binary PGM images and the split manifest.

use std::fmt::Write as _;
use std::path::Path;

use crate::array::Array2;
use crate::bytes::{dim_u32, put_f32s, put_u32, Reader};
use crate::error::{Error, Result};
use crate::phantom::Split;

pub const OCT1_MAGIC: &[u8; 4] = b"OCT1";
pub const OCT1_F32: u32 = 0;
const OCT1_MAX_NDIM: u32 = 8;

/// `OCT1`, ndim, dims, dtype, row-major `f32` payload; all little-endian.
pub fn encode_oct1(dims: &[usize], data: &[f64]) -> Result<Vec<u8>> {
    let count: usize = dims.iter().product();
    if count != data.len() {
        return Err(Error::shape(format!("dims {dims:?} hold {count} values, got {}", data.len())));
    }
    let mut out = Vec::with_capacity(16 + 4 * dims.len() + 4 * count);
    out.extend_from_slice(OCT1_MAGIC);
    put_u32(&mut out, dim_u32(dims.len())?);
    for &d in dims {
        put_u32(&mut out, dim_u32(d)?);
    }
    put_u32(&mut out, OCT1_F32);
    put_f32s(&mut out, data);
    Ok(out)
}

pub fn decode_oct1(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut r = Reader::new(bytes);
    r.magic(OCT1_MAGIC)?;
    let (dims, count) = r.dims(OCT1_MAX_NDIM)?;
    let at = r.offset();
    let dtype = r.u32("dtype")?;
    if dtype != OCT1_F32 {
        return Err(Error::parse(at, format!("unsupported dtype code {dtype}")));
    }
    let data = r.f32s(count, "payload")?;
    r.finish()?;
    Ok((dims, data))
}

/// A stack of equally sized 2-D arrays as a `[n, rows, cols]` OCT1 file.
pub fn encode_stack(stack: &[Array2]) -> Result<Vec<u8>> {
    let (rows, cols) = stack.first().map_or((0, 0), Array2::shape);
    let mut data = Vec::with_capacity(stack.len() * rows * cols);
    for a in stack {
        if a.shape() != (rows, cols) {
            return Err(Error::shape("stack members differ in shape"));
        }
        data.extend_from_slice(a.as_slice());
    }
    encode_oct1(&[stack.len(), rows, cols], &data)
}

/// Reads a 3-D file as a stack; a 2-D file is a stack of one.
pub fn decode_stack(bytes: &[u8]) -> Result<Vec<Array2>> {
    let (dims, data) = decode_oct1(bytes)?;
    let (n, rows, cols) = match dims[..] {
        [r, c] => (1, r, c),
        [n, r, c] => (n, r, c),
        _ => return Err(Error::shape(format!("expected a 2-D or 3-D array, got dims {dims:?}"))),
    };
    let plane = rows * cols;
    (0..n)
        .map(|i| Array2::from_vec(rows, cols, data[i * plane..(i + 1) * plane].to_vec()))
        .collect()
}

pub fn save_stack(path: &Path, stack: &[Array2]) -> Result<()> {
    std::fs::write(path, encode_stack(stack)?)?;
    Ok(())
}

pub fn load_stack(path: &Path) -> Result<Vec<Array2>> {
    decode_stack(&std::fs::read(path)?)
}

/// 8-bit binary PGM of an image in `[0, 1]`; values are clamped and
/// rounded to the nearest level.
pub fn encode_pgm(img: &Array2) -> Result<Vec<u8>> {
    if !img.all_finite() {
        return Err(Error::domain("cannot export a non-finite image"));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.cols(), img.rows()).into_bytes();
    out.extend(img.as_slice().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Parses a binary PGM with `maxval ≤ 255` into `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Array2> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::parse(0, "not a binary PGM (missing P5 magic)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // Whitespace and comments, then a decimal number.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(pos, format!("expected header field {}", ["width", "height", "maxval"][i])));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| Error::parse(start, format!("header value {text} out of range")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::parse(pos, "expected one whitespace byte after maxval"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::parse(pos - 1, format!("unsupported maxval {maxval}")));
    }
    let count = w
        .checked_mul(h)
        .ok_or_else(|| Error::parse(pos, "image size overflows"))?;
    let mut r = Reader::new(&bytes[pos..]);
    let px = r.take(count, "pixel data").map_err(|e| shift(e, pos))?;
    r.finish().map_err(|e| shift(e, pos))?;
    let scale = maxval as f64;
    if let Some(i) = px.iter().position(|&p| p as usize > maxval) {
        return Err(Error::parse(pos + i, format!("pixel value exceeds maxval {maxval}")));
    }
    Array2::from_vec(h, w, px.iter().map(|&p| p as f64 / scale).collect())
}

fn shift(e: Error, by: usize) -> Error {
    match e {
        Error::Parse { offset, message } => Error::Parse {
            offset: offset + by,
            message,
        },
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub eye_id: String,
    pub split: Split,
    /// Volume path, relative to the manifest's directory.
    pub path: String,
}

pub const MANIFEST_HEADER: &str = "patient_id\teye_id\tsplit\tpath";

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::from(MANIFEST_HEADER);
    s.push('\n');
    for e in entries {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", e.patient_id, e.eye_id, e.split.as_str(), e.path);
    }
    s
}

/// Tab-separated manifest with the [`MANIFEST_HEADER`] line.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut offset = 0;
    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, raw) in text.split_inclusive('\n').enumerate() {
        let line = raw.trim_end_matches(['\n', '\r']);
        let start = offset;
        offset += raw.len();
        if i == 0 {
            if line != MANIFEST_HEADER {
                return Err(Error::parse(start, "manifest header must be patient_id, eye_id, split, path"));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 || cols.iter().any(|c| c.is_empty()) {
            return Err(Error::parse(start, format!("expected 4 non-empty tab-separated fields, got {}", cols.len())));
        }
        let split_at = start + cols[0].len() + cols[1].len() + 2;
        let split = Split::parse(cols[2])
            .ok_or_else(|| Error::parse(split_at, format!("unknown split {:?}", cols[2])))?;
        if !seen.insert(cols[1].to_owned()) {
            return Err(Error::parse(start + cols[0].len() + 1, format!("duplicate eye id {}", cols[1])));
        }
        entries.push(ManifestEntry {
            patient_id: cols[0].to_owned(),
            eye_id: cols[1].to_owned(),
            split,
            path: cols[3].to_owned(),
        });
    }
    if offset == 0 {
        return Err(Error::parse(0, "empty manifest"));
    }
    Ok(entries)
}
