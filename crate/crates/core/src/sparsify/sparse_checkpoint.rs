//! Sparse checkpoint: the dense container's per-tensor header, followed by
//! the advertised zero count (u32), a run-length bitmap of non-zero
//! positions (u32 run count, then u32 run lengths alternating non-zero /
//! zero, starting with non-zero) and only the non-zero values as f32 LE.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{AadError, Result};
use crate::scalar::Scalar;
use crate::tensor::checkpoint::{check_magic, read_f32s, read_header, read_u32, write_f32s, write_header};
use crate::tensor::Tensor;

pub const SPARSE_MAGIC: &[u8; 8] = b"AADSPSv1";

fn runs<T: Scalar>(data: &[T]) -> Vec<u32> {
    let mut out = Vec::new();
    let (mut want_nonzero, mut len) = (true, 0u32);
    for v in data {
        if (*v != T::zero()) == want_nonzero {
            len += 1;
        } else {
            out.push(len);
            want_nonzero = !want_nonzero;
            len = 1;
        }
    }
    out.push(len);
    out
}

pub fn write_sparse_checkpoint<W: Write, T: Scalar>(out: &mut W, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    out.write_all(SPARSE_MAGIC)?;
    for (name, t) in tensors {
        write_header(out, name, t.shape())?;
        // f32 storage: values that round to zero become structural zeros
        let data: Vec<f32> = t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
        let nonzero: Vec<f32> = data.iter().copied().filter(|v| *v != 0.0).collect();
        let zeros = (data.len() - nonzero.len()) as u32;
        out.write_all(&zeros.to_le_bytes())?;
        let r = runs(&data);
        out.write_all(&(r.len() as u32).to_le_bytes())?;
        for len in r {
            out.write_all(&len.to_le_bytes())?;
        }
        write_f32s(out, &nonzero)?;
    }
    Ok(())
}

pub fn read_sparse_checkpoint<R: Read, T: Scalar>(input: &mut R) -> Result<Vec<(String, Tensor<T>)>> {
    check_magic(input, SPARSE_MAGIC)?;
    let mut out = Vec::new();
    while let Some((name, shape)) = read_header(input)? {
        let numel: usize = shape.iter().product();
        let advertised = read_u32(input, "zero count")? as usize;
        let n_runs = read_u32(input, "run count")? as usize;
        if n_runs > numel + 1 {
            return Err(AadError::Format(format!("{name}: {n_runs} runs for {numel} entries")));
        }
        let mut lengths = Vec::with_capacity(n_runs);
        for _ in 0..n_runs {
            lengths.push(read_u32(input, "run length")? as usize);
        }
        if lengths.iter().sum::<usize>() != numel {
            return Err(AadError::Format(format!("{name}: bitmap runs do not cover {numel} entries")));
        }
        let nonzero: usize = lengths.iter().step_by(2).sum();
        if numel - nonzero != advertised {
            return Err(AadError::Format(format!(
                "{name}: advertises {advertised} zeros, bitmap holds {}",
                numel - nonzero
            )));
        }
        let values: Vec<T> = read_f32s(input, nonzero, &format!("values of {name}"))?;
        if values.iter().any(|v| *v == T::zero()) {
            return Err(AadError::Format(format!("{name}: stored value is zero where the bitmap says non-zero")));
        }
        let mut dense = Vec::with_capacity(numel);
        let mut vals = values.into_iter();
        for (i, &len) in lengths.iter().enumerate() {
            if i % 2 == 0 {
                dense.extend(vals.by_ref().take(len));
            } else {
                dense.extend(std::iter::repeat_n(T::zero(), len));
            }
        }
        out.push((name, Tensor::from_vec(&shape, dense)?));
    }
    Ok(out)
}

pub fn save_sparse_checkpoint<T: Scalar>(path: &Path, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_sparse_checkpoint(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn load_sparse_checkpoint<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    read_sparse_checkpoint(&mut BufReader::new(File::open(path)?))
}
