//! Parameter checkpoint container.
//!
//! Layout: the 8-byte magic `AADWTSv1`, then one record per named tensor
//! until end of file: name length (u16 LE), UTF-8 name, rank (u8), extents
//! (u32 LE each), then the values as f32 LE in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{AadError, Result};
use crate::scalar::Scalar;

pub const WEIGHTS_MAGIC: &[u8; 8] = b"AADWTSv1";

pub(crate) fn write_header<W: Write>(out: &mut W, name: &str, shape: &[usize]) -> Result<()> {
    let name_len = u16::try_from(name.len()).map_err(|_| AadError::invalid(format!("tensor name too long: {name}")))?;
    let rank = u8::try_from(shape.len()).map_err(|_| AadError::invalid("tensor rank exceeds 255"))?;
    out.write_all(&name_len.to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&[rank])?;
    for &e in shape {
        let e = u32::try_from(e).map_err(|_| AadError::invalid("tensor extent exceeds u32"))?;
        out.write_all(&e.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn write_f32s<W: Write, T: Scalar>(out: &mut W, values: &[T]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Fills `buf` completely; `Ok(false)` on clean end of file before any byte.
pub(crate) fn read_exact_or_eof<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(AadError::Truncated("record cut short".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

pub(crate) fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    if !read_exact_or_eof(input, buf)? {
        return Err(AadError::Truncated(format!("missing {what}")));
    }
    Ok(())
}

pub(crate) fn read_u32<R: Read>(input: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one record header, or `None` at end of file.
pub(crate) fn read_header<R: Read>(input: &mut R) -> Result<Option<(String, Vec<usize>)>> {
    let mut len = [0u8; 2];
    if !read_exact_or_eof(input, &mut len)? {
        return Ok(None);
    }
    let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
    read_exact(input, &mut name, "tensor name")?;
    let name = String::from_utf8(name).map_err(|_| AadError::Format("tensor name is not UTF-8".into()))?;
    let mut rank = [0u8; 1];
    read_exact(input, &mut rank, "tensor rank")?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        shape.push(read_u32(input, "tensor extent")? as usize);
    }
    if shape.is_empty() || shape.contains(&0) {
        return Err(AadError::Format(format!("tensor {name} has invalid shape {shape:?}")));
    }
    Ok(Some((name, shape)))
}

pub(crate) fn read_f32s<R: Read, T: Scalar>(input: &mut R, count: usize, what: &str) -> Result<Vec<T>> {
    let mut buf = vec![0u8; count * 4];
    read_exact(input, &mut buf, what)?;
    Ok(buf.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect())
}

pub(crate) fn check_magic<R: Read>(input: &mut R, magic: &'static [u8; 8]) -> Result<()> {
    let mut m = [0u8; 8];
    read_exact(input, &mut m, "magic")?;
    if &m != magic {
        return Err(AadError::BadMagic { expected: std::str::from_utf8(magic).unwrap_or("?") });
    }
    Ok(())
}

pub fn write_checkpoint<W: Write, T: Scalar>(out: &mut W, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    out.write_all(WEIGHTS_MAGIC)?;
    for (name, t) in tensors {
        write_header(out, name, t.shape())?;
        write_f32s(out, t.data())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read, T: Scalar>(input: &mut R) -> Result<Vec<(String, Tensor<T>)>> {
    check_magic(input, WEIGHTS_MAGIC)?;
    let mut out = Vec::new();
    while let Some((name, shape)) = read_header(input)? {
        let numel = shape.iter().product();
        let data = read_f32s(input, numel, &format!("payload of {name}"))?;
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_is_fixed() {
        let t = Tensor::from_vec(&[1, 2], vec![1.0f32, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("ab".to_string(), t.clone())]).unwrap();
        let mut want = b"AADWTSv1".to_vec();
        want.extend_from_slice(&[2, 0, b'a', b'b', 2, 1, 0, 0, 0, 2, 0, 0, 0]);
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, want);
        let back: Vec<(String, Tensor<f32>)> = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, vec![("ab".to_string(), t)]);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let t = Tensor::from_vec(&[3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("w".to_string(), t)]).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint::<_, f32>(&mut bad.as_slice()), Err(AadError::BadMagic { .. })));
        let cut = &buf[..buf.len() - 2];
        assert!(matches!(read_checkpoint::<_, f32>(&mut &cut[..]), Err(AadError::Truncated(_))));
    }
}
