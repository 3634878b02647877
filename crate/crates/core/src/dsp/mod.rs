//! Signal conditioning: zero-phase filtering, rational resampling,
//! segmentation, per-trial normalization and magnitude spectrograms.

mod filter;
mod io;
mod resample;
mod segment;
mod stft;

pub use filter::{highpass_filter, lowpass_filter, Sos};
pub use io::{read_eeg_csv, read_wav_mono, write_wav_mono};
pub use resample::resample;
pub use segment::{normalize_trial, segment_trials};
pub use stft::{stft_spectrogram, Spectrogram, FFT_SIZE, HOP, N_BINS};

use crate::error::{AadError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The ten electrodes the model consumes, in input column order.
pub const ELECTRODES: [&str; 10] = ["F7", "F3", "F4", "F8", "T7", "C3", "Cz", "C4", "T8", "Pz"];
pub const EEG_RATE: u32 = 64;
pub const AUDIO_RATE: u32 = 16_000;
pub const EEG_LOWPASS_HZ: f64 = 32.0;
pub const EEG_HIGHPASS_HZ: f64 = 1.0;
pub const SUPPORTED_DURATIONS: [usize; 4] = [2, 3, 4, 5];

/// EEG samples per trial at 64 Hz.
pub fn eeg_len(duration_s: usize) -> usize {
    EEG_RATE as usize * duration_s
}

/// Spectrogram frames per trial: `floor(16000 d / 320) + 1`.
pub fn spec_frames(duration_s: usize) -> usize {
    AUDIO_RATE as usize * duration_s / HOP + 1
}

pub fn check_duration(duration_s: usize) -> Result<()> {
    if SUPPORTED_DURATIONS.contains(&duration_s) {
        Ok(())
    } else {
        Err(AadError::invalid(format!("trial duration must be one of 2, 3, 4, 5 s, got {duration_s}")))
    }
}

/// Multichannel samples `[n_samples, n_channels]` at a fixed rate.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSignal<T> {
    samples: Tensor<T>,
    sample_rate: u32,
}

impl<T: Scalar> RawSignal<T> {
    pub fn new(samples: Tensor<T>, sample_rate: u32) -> Result<Self> {
        if samples.rank() != 2 {
            return Err(AadError::invalid(format!("signal must be [samples, channels], got {:?}", samples.shape())));
        }
        if sample_rate == 0 {
            return Err(AadError::invalid("sample rate must be positive"));
        }
        if !samples.is_finite() {
            return Err(AadError::invalid("signal contains non-finite samples"));
        }
        Ok(RawSignal { samples, sample_rate })
    }

    /// Single-channel convenience constructor.
    pub fn mono(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        let n = samples.len();
        Self::new(Tensor::from_vec(&[n, 1], samples)?, sample_rate)
    }

    pub fn from_channels(channels: &[Vec<f64>], sample_rate: u32) -> Result<Self> {
        let n = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != n) {
            return Err(AadError::invalid("channels differ in length"));
        }
        let ch = channels.len();
        let data = (0..n * ch).map(|i| T::lit(channels[i % ch][i / ch])).collect();
        Self::new(Tensor::from_vec(&[n, ch], data)?, sample_rate)
    }

    pub fn samples(&self) -> &Tensor<T> {
        &self.samples
    }

    pub fn into_samples(self) -> Tensor<T> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn n_samples(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn n_channels(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.sample_rate as f64
    }

    /// Column `c` widened to f64.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        let ch = self.n_channels();
        self.samples.data()[c..].iter().step_by(ch).map(|v| v.as_f64()).collect()
    }

    pub fn channels(&self) -> Vec<Vec<f64>> {
        (0..self.n_channels()).map(|c| self.channel(c)).collect()
    }

    /// Applies `f` to every channel independently; output channels may
    /// change length but must agree with each other.
    pub(crate) fn map_channels(&self, rate: u32, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        let out: Vec<Vec<f64>> = self.channels().iter().map(|c| f(c)).collect();
        Self::from_channels(&out, rate)
    }
}

/// Raw EEG to normalized trials `[64 d, channels]`: 1 Hz high-pass, 32 Hz
/// low-pass, resampling to 64 Hz, 1 s hop segmentation, per-trial scaling.
pub fn preprocess_eeg<T: Scalar>(raw: &RawSignal<T>, duration_s: usize) -> Result<Vec<Tensor<T>>> {
    check_duration(duration_s)?;
    let x = highpass_filter(raw, EEG_HIGHPASS_HZ)?;
    // at or below 64 Hz the 32 Hz band edge is already the Nyquist limit
    let x = if raw.sample_rate() > 2 * EEG_LOWPASS_HZ as u32 { lowpass_filter(&x, EEG_LOWPASS_HZ)? } else { x };
    let x = resample(&x, EEG_RATE)?;
    segment_trials(&x, duration_s as f64, 1.0)?.iter().map(normalize_trial).collect()
}

/// Mono audio to per-trial magnitude spectrograms `[50 d + 1, 257]`,
/// aligned with [`preprocess_eeg`]'s segments.
pub fn preprocess_audio<T: Scalar>(raw: &RawSignal<T>, duration_s: usize) -> Result<Vec<Tensor<T>>> {
    check_duration(duration_s)?;
    if raw.n_channels() != 1 {
        return Err(AadError::invalid(format!("audio must be mono, got {} channels", raw.n_channels())));
    }
    let x = resample(raw, AUDIO_RATE)?;
    segment_trials(&x, duration_s as f64, 1.0)?
        .into_iter()
        .map(|seg| {
            let trial = RawSignal::new(seg, AUDIO_RATE)?;
            Ok(stft_spectrogram(&trial, duration_s)?.magnitudes)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_dimensions_for_every_duration() {
        for d in SUPPORTED_DURATIONS {
            assert_eq!((eeg_len(d), spec_frames(d)), (64 * d, 50 * d + 1));
            let eeg = RawSignal::<f32>::from_channels(
                &(0..10).map(|c| (0..(d + 2) * 256).map(|i| ((i * (c + 3)) as f64 * 0.01).sin()).collect()).collect::<Vec<_>>(),
                256,
            )
            .unwrap();
            let trials = preprocess_eeg(&eeg, d).unwrap();
            assert_eq!(trials.len(), 3);
            assert_eq!(trials[0].shape(), &[64 * d, 10]);
            let audio = RawSignal::<f32>::mono(vec![0.1; (d + 1) * 16_000], AUDIO_RATE).unwrap();
            let specs = preprocess_audio(&audio, d).unwrap();
            assert_eq!(specs.len(), 2);
            assert_eq!(specs[0].shape(), &[50 * d + 1, 257]);
        }
    }

    #[test]
    fn unsupported_duration_rejected() {
        let x = RawSignal::<f32>::mono(vec![0.0; 1000], 64).unwrap();
        assert!(preprocess_eeg(&x, 6).is_err());
    }
}
