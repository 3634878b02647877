//! Trial container.
//!
//! Layout: magic `AADTRLv1`, six u32 LE header fields (`n_trials`, `eeg_T`,
//! `n_elec`, `spec_T`, `n_freq`, `duration_ms`), then per trial a label
//! byte followed by the EEG, `spec_a` and `spec_b` as row-major f32 LE.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::dsp::{eeg_len, spec_frames, SUPPORTED_DURATIONS};
use crate::error::{AadError, Result};
use crate::model::{TrialBatch, N_ELECTRODES, N_FREQ_BINS};
use crate::scalar::Scalar;
use crate::tensor::checkpoint::{check_magic, read_exact, read_u32};
use crate::tensor::Tensor;

pub const TRIALS_MAGIC: &[u8; 8] = b"AADTRLv1";
const HEADER_BYTES: u64 = 8 + 6 * 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrialDims {
    pub eeg_t: usize,
    pub n_elec: usize,
    pub spec_t: usize,
    pub n_freq: usize,
    pub duration_ms: u32,
}

impl TrialDims {
    pub fn for_duration(duration_s: usize) -> Self {
        TrialDims {
            eeg_t: eeg_len(duration_s),
            n_elec: N_ELECTRODES,
            spec_t: spec_frames(duration_s),
            n_freq: N_FREQ_BINS,
            duration_ms: (duration_s * 1000) as u32,
        }
    }

    pub fn duration_s(&self) -> usize {
        self.duration_ms as usize / 1000
    }

    fn eeg_len(&self) -> usize {
        self.eeg_t * self.n_elec
    }

    fn spec_len(&self) -> usize {
        self.spec_t * self.n_freq
    }

    pub fn record_bytes(&self) -> u64 {
        1 + 4 * (self.eeg_len() + 2 * self.spec_len()) as u64
    }

    /// Header fields must describe one of the supported trial layouts.
    pub fn validate(&self) -> Result<()> {
        let d = self.duration_s();
        if !self.duration_ms.is_multiple_of(1000) || !SUPPORTED_DURATIONS.contains(&d) {
            return Err(AadError::DimensionMismatch(format!("unsupported trial duration {} ms", self.duration_ms)));
        }
        let want = Self::for_duration(d);
        if *self != want {
            return Err(AadError::DimensionMismatch(format!(
                "{d} s trials need EEG {}x{} and spectrograms {}x{}, header says {}x{} and {}x{}",
                want.eeg_t, want.n_elec, want.spec_t, want.n_freq, self.eeg_t, self.n_elec, self.spec_t, self.n_freq
            )));
        }
        Ok(())
    }

    fn check_record(&self, r: &TrialRecord) -> Result<()> {
        let eeg = [self.eeg_t, self.n_elec];
        let spec = [self.spec_t, self.n_freq];
        if r.eeg.shape() != eeg || r.spec_a.shape() != spec || r.spec_b.shape() != spec {
            return Err(AadError::DimensionMismatch(format!(
                "record has EEG {:?} and spectrograms {:?}/{:?}, container holds {eeg:?} and {spec:?}",
                r.eeg.shape(),
                r.spec_a.shape(),
                r.spec_b.shape()
            )));
        }
        if r.label > 1 {
            return Err(AadError::invalid(format!("label must be 0 or 1, got {}", r.label)));
        }
        Ok(())
    }
}

/// One trial. `label` 0 means the listener attends the speaker of `spec_a`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub label: u8,
    pub eeg: Tensor<f32>,
    pub spec_a: Tensor<f32>,
    pub spec_b: Tensor<f32>,
}

fn write_header<W: Write>(out: &mut W, dims: &TrialDims, n_trials: usize) -> Result<()> {
    out.write_all(TRIALS_MAGIC)?;
    let n = u32::try_from(n_trials).map_err(|_| AadError::invalid("too many trials for one container"))?;
    for v in [n, dims.eeg_t as u32, dims.n_elec as u32, dims.spec_t as u32, dims.n_freq as u32, dims.duration_ms] {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_header<R: Read>(input: &mut R) -> Result<(TrialDims, usize)> {
    check_magic(input, TRIALS_MAGIC)?;
    let mut f = [0u32; 6];
    for (v, what) in f.iter_mut().zip(["n_trials", "eeg_T", "n_elec", "spec_T", "n_freq", "duration_ms"]) {
        *v = read_u32(input, what)?;
    }
    let dims = TrialDims {
        eeg_t: f[1] as usize,
        n_elec: f[2] as usize,
        spec_t: f[3] as usize,
        n_freq: f[4] as usize,
        duration_ms: f[5],
    };
    dims.validate()?;
    Ok((dims, f[0] as usize))
}

fn encode_record(r: &TrialRecord, buf: &mut Vec<u8>) {
    buf.clear();
    buf.push(r.label);
    for t in [&r.eeg, &r.spec_a, &r.spec_b] {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn decode_record(dims: &TrialDims, bytes: &[u8]) -> Result<TrialRecord> {
    let label = bytes[0];
    if label > 1 {
        return Err(AadError::Format(format!("label byte {label} is not 0 or 1")));
    }
    let floats = |range: std::ops::Range<usize>| -> Vec<f32> {
        bytes[1 + 4 * range.start..1 + 4 * range.end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    };
    let (e, s) = (dims.eeg_len(), dims.spec_len());
    Ok(TrialRecord {
        label,
        eeg: Tensor::from_vec(&[dims.eeg_t, dims.n_elec], floats(0..e))?,
        spec_a: Tensor::from_vec(&[dims.spec_t, dims.n_freq], floats(e..e + s))?,
        spec_b: Tensor::from_vec(&[dims.spec_t, dims.n_freq], floats(e + s..e + 2 * s))?,
    })
}

/// Streams records into a container whose trial count is fixed up front.
pub struct TrialWriter {
    out: BufWriter<File>,
    dims: TrialDims,
    expected: usize,
    written: usize,
    buf: Vec<u8>,
}

impl TrialWriter {
    pub fn create(path: &Path, dims: TrialDims, n_trials: usize) -> Result<Self> {
        dims.validate()?;
        let mut out = BufWriter::new(File::create(path)?);
        write_header(&mut out, &dims, n_trials)?;
        Ok(TrialWriter { out, dims, expected: n_trials, written: 0, buf: Vec::new() })
    }

    pub fn push(&mut self, record: &TrialRecord) -> Result<()> {
        self.dims.check_record(record)?;
        if self.written == self.expected {
            return Err(AadError::invalid(format!("container was declared with {} trials", self.expected)));
        }
        encode_record(record, &mut self.buf);
        self.out.write_all(&self.buf)?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.written != self.expected {
            return Err(AadError::invalid(format!("wrote {} of {} declared trials", self.written, self.expected)));
        }
        self.out.flush()?;
        Ok(())
    }
}

/// Writes `records` (which must share one layout) to `path`.
pub fn write_trials(records: &[TrialRecord], path: &Path) -> Result<()> {
    let first = records.first().ok_or_else(|| AadError::invalid("no trials to write"))?;
    let (t, d) = (first.eeg.shape()[0], first.eeg.shape()[0] / crate::dsp::EEG_RATE as usize);
    let dims = TrialDims::for_duration(d);
    if dims.eeg_t != t {
        return Err(AadError::DimensionMismatch(format!("EEG length {t} is not a whole supported duration")));
    }
    let mut w = TrialWriter::create(path, dims, records.len())?;
    for r in records {
        w.push(r)?;
    }
    w.finish()
}

/// Loads a whole container into memory.
pub fn read_trials(path: &Path) -> Result<(TrialDims, Vec<TrialRecord>)> {
    let mut input = BufReader::new(File::open(path)?);
    let (dims, n) = read_header(&mut input)?;
    let mut buf = vec![0u8; dims.record_bytes() as usize];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        read_exact(&mut input, &mut buf, &format!("trial {i} of {n}"))?;
        out.push(decode_record(&dims, &buf)?);
    }
    if input.read(&mut [0u8; 1])? != 0 {
        return Err(AadError::Format(format!("trailing bytes after {n} trials")));
    }
    Ok((dims, out))
}

/// Random access to trials, by index.
pub trait TrialSource: Sync {
    fn len(&self) -> usize;
    fn dims(&self) -> TrialDims;
    fn trial(&self, index: usize) -> Result<TrialRecord>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stacks the given trials into a batch plus their labels.
    fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(TrialBatch<T>, Vec<usize>)> {
        let dims = self.dims();
        let b = indices.len();
        let mut eeg = Vec::with_capacity(b * dims.eeg_len());
        let mut spec_a = Vec::with_capacity(b * dims.spec_len());
        let mut spec_b = Vec::with_capacity(b * dims.spec_len());
        let mut labels = Vec::with_capacity(b);
        for &i in indices {
            let r = self.trial(i)?;
            labels.push(r.label as usize);
            eeg.extend(r.eeg.data().iter().map(|&v| T::lit(v as f64)));
            spec_a.extend(r.spec_a.data().iter().map(|&v| T::lit(v as f64)));
            spec_b.extend(r.spec_b.data().iter().map(|&v| T::lit(v as f64)));
        }
        let batch = TrialBatch {
            eeg: Tensor::from_vec(&[b, dims.eeg_t, dims.n_elec], eeg)?,
            spec_a: Tensor::from_vec(&[b, dims.spec_t, dims.n_freq], spec_a)?,
            spec_b: Tensor::from_vec(&[b, dims.spec_t, dims.n_freq], spec_b)?,
        };
        Ok((batch, labels))
    }
}

/// Trials held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialSet {
    pub dims: TrialDims,
    pub records: Vec<TrialRecord>,
}

impl TrialSet {
    pub fn new(dims: TrialDims, records: Vec<TrialRecord>) -> Result<Self> {
        dims.validate()?;
        for r in &records {
            dims.check_record(r)?;
        }
        Ok(TrialSet { dims, records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (dims, records) = read_trials(path)?;
        Ok(TrialSet { dims, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = TrialWriter::create(path, self.dims, self.records.len())?;
        for r in &self.records {
            w.push(r)?;
        }
        w.finish()
    }
}

impl TrialSource for TrialSet {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn dims(&self) -> TrialDims {
        self.dims
    }

    fn trial(&self, index: usize) -> Result<TrialRecord> {
        self.records
            .get(index)
            .cloned()
            .ok_or_else(|| AadError::invalid(format!("trial {index} out of range ({} trials)", self.records.len())))
    }
}

/// A container read lazily from disk; suited to sets too large for memory.
#[derive(Debug)]
pub struct TrialFile {
    path: PathBuf,
    dims: TrialDims,
    n_trials: usize,
    file: Mutex<File>,
}

impl TrialFile {
    /// Validates the header and that the payload covers every trial.
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path)?;
        let (dims, n_trials) = read_header(&mut file)?;
        let need = HEADER_BYTES + n_trials as u64 * dims.record_bytes();
        let have = file.metadata()?.len();
        if have < need {
            return Err(AadError::Truncated(format!(
                "{}: header announces {n_trials} trials ({need} bytes), file has {have} bytes",
                path.display()
            )));
        }
        if have > need {
            return Err(AadError::Format(format!("{}: {} trailing bytes", path.display(), have - need)));
        }
        Ok(TrialFile { path: path.to_path_buf(), dims, n_trials, file: Mutex::new(file) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn labels(&self) -> Result<Vec<u8>> {
        (0..self.n_trials).map(|i| self.trial(i).map(|r| r.label)).collect()
    }
}

impl TrialSource for TrialFile {
    fn len(&self) -> usize {
        self.n_trials
    }

    fn dims(&self) -> TrialDims {
        self.dims
    }

    fn trial(&self, index: usize) -> Result<TrialRecord> {
        if index >= self.n_trials {
            return Err(AadError::invalid(format!("trial {index} out of range ({} trials)", self.n_trials)));
        }
        let size = self.dims.record_bytes();
        let mut buf = vec![0u8; size as usize];
        {
            let mut f = self.file.lock().map_err(|_| AadError::Format("trial file lock poisoned".into()))?;
            f.seek(SeekFrom::Start(HEADER_BYTES + index as u64 * size))?;
            read_exact(&mut *f, &mut buf, &format!("trial {index}"))?;
        }
        decode_record(&self.dims, &buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, seed: f32) -> TrialRecord {
        let d = TrialDims::for_duration(2);
        TrialRecord {
            label,
            eeg: Tensor::from_fn(&[d.eeg_t, d.n_elec], |i| seed + i as f32 * 1e-3),
            spec_a: Tensor::from_fn(&[d.spec_t, d.n_freq], |i| seed * 2.0 + i as f32),
            spec_b: Tensor::from_fn(&[d.spec_t, d.n_freq], |i| -(i as f32) / 7.0),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let recs = vec![record(0, 0.5), record(1, -1.25), record(1, f32::MIN_POSITIVE)];
        write_trials(&recs, &path).unwrap();
        let (dims, back) = read_trials(&path).unwrap();
        assert_eq!(dims, TrialDims::for_duration(2));
        assert_eq!(back, recs);
        let file = TrialFile::open(&path).unwrap();
        assert_eq!(file.trial(1).unwrap(), recs[1]);
        let (batch, labels) = file.batch::<f32>(&[2, 0]).unwrap();
        assert_eq!(labels, [1, 0]);
        assert_eq!(batch.eeg.shape(), [2, 128, 10]);
        let size = std::fs::metadata(&path).unwrap().len();
        assert_eq!(size, HEADER_BYTES + 3 * dims.record_bytes());
    }

    #[test]
    fn corrupted_magic_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        write_trials(&[record(0, 1.0)], &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[3] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_trials(&path), Err(AadError::BadMagic { .. })));
        assert!(matches!(TrialFile::open(&path), Err(AadError::BadMagic { .. })));
    }

    #[test]
    fn overstated_trial_count_is_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        write_trials(&[record(0, 1.0), record(1, 2.0)], &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&5u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_trials(&path), Err(AadError::Truncated(_))));
        assert!(matches!(TrialFile::open(&path), Err(AadError::Truncated(_))));
    }

    #[test]
    fn inconsistent_header_is_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        write_trials(&[record(0, 1.0)], &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[12..16].copy_from_slice(&129u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_trials(&path), Err(AadError::DimensionMismatch(_))));
    }

    #[test]
    fn mixed_layouts_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut odd = record(0, 1.0);
        odd.spec_b = Tensor::zeros(&[100, 257]);
        let err = write_trials(&[record(1, 0.0), odd], &dir.path().join("t.bin"));
        assert!(matches!(err, Err(AadError::DimensionMismatch(_))));
    }
}
