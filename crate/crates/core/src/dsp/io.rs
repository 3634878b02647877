use std::path::Path;

use super::RawSignal;
use crate::error::{AadError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// EEG from CSV: a header row of electrode names, then one row per sample.
/// With `electrodes`, only those columns are kept, in the given order.
pub fn read_eeg_csv<T: Scalar>(path: &Path, sample_rate: u32, electrodes: Option<&[&str]>) -> Result<RawSignal<T>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let columns: Vec<usize> = match electrodes {
        None => (0..header.len()).collect(),
        Some(names) => names
            .iter()
            .map(|name| {
                header.iter().position(|h| h.eq_ignore_ascii_case(name)).ok_or_else(|| {
                    AadError::Format(format!("{}: no column for electrode {name}", path.display()))
                })
            })
            .collect::<Result<_>>()?,
    };
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        for &c in &columns {
            let field = record.get(c).ok_or_else(|| {
                AadError::Format(format!("{}: row {} has {} fields", path.display(), i + 2, record.len()))
            })?;
            let v: f64 = field.parse().map_err(|_| {
                AadError::Format(format!("{}: row {}: cannot parse {field:?} as a number", path.display(), i + 2))
            })?;
            data.push(T::lit(v));
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(AadError::Format(format!("{}: no samples", path.display())));
    }
    RawSignal::new(Tensor::from_vec(&[rows, columns.len()], data)?, sample_rate)
}

/// Mono 16-bit PCM WAV, scaled to [-1, 1).
pub fn read_wav_mono<T: Scalar>(path: &Path) -> Result<RawSignal<T>> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(AadError::Format(format!(
            "{}: expected mono 16-bit PCM, got {} channel(s), {} bits, {:?}",
            path.display(),
            spec.channels,
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| T::lit(v as f64 / 32768.0)))
        .collect::<std::result::Result<Vec<T>, _>>()?;
    if samples.is_empty() {
        return Err(AadError::Format(format!("{}: no samples", path.display())));
    }
    RawSignal::mono(samples, spec.sample_rate)
}

/// Writes channel 0 as mono 16-bit PCM, clipping to the representable range.
pub fn write_wav_mono<T: Scalar>(path: &Path, signal: &RawSignal<T>) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for v in signal.channel(0) {
        writer.write_sample((v * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_selects_electrodes_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("eeg.csv");
        std::fs::write(&p, "Cz,F7,X\n1,2,3\n4,5,6\n").unwrap();
        let s: RawSignal<f64> = read_eeg_csv(&p, 128, Some(&["F7", "cz"])).unwrap();
        assert_eq!(s.samples().data(), &[2.0, 1.0, 5.0, 4.0]);
        assert!(read_eeg_csv::<f64>(&p, 128, Some(&["Pz"])).is_err());
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let x = RawSignal::mono(vec![0.0f64, 0.5, -0.5, -1.0], 16_000).unwrap();
        write_wav_mono(&p, &x).unwrap();
        let y: RawSignal<f64> = read_wav_mono(&p).unwrap();
        assert_eq!(y.sample_rate(), 16_000);
        assert_eq!(y.channel(0), x.channel(0));
    }
}
