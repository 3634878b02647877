//! Magnitude spectrogram: periodic Hann window of 512 samples, hop 320,
//! reflection-padded by half a window on each side.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{RawSignal, AUDIO_RATE};
use crate::error::{AadError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FFT_SIZE: usize = 512;
pub const HOP: usize = 320;
pub const N_BINS: usize = FFT_SIZE / 2 + 1;

/// `|STFT|` as `[frames, bins]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram<T> {
    pub magnitudes: Tensor<T>,
    pub frame_hop_s: f64,
    pub window_s: f64,
}

impl<T: Scalar> Spectrogram<T> {
    pub fn n_frames(&self) -> usize {
        self.magnitudes.shape()[0]
    }

    pub fn n_bins(&self) -> usize {
        self.magnitudes.shape()[1]
    }
}

fn hann_periodic() -> Vec<f64> {
    (0..FFT_SIZE)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / FFT_SIZE as f64).cos())
        .collect()
}

/// `frames = floor(N / hop) + 1`.
pub(crate) fn magnitudes(x: &[f64], fft: &Arc<dyn Fft<f64>>, window: &[f64]) -> (usize, Vec<f64>) {
    let n = x.len();
    let half = FFT_SIZE / 2;
    // numpy-style "reflect": the edge sample is not repeated
    let reflect = |k: isize| -> f64 {
        let period = 2 * (n as isize - 1);
        let mut k = k.rem_euclid(period.max(1));
        if k >= n as isize {
            k = period - k;
        }
        x[k as usize]
    };
    let frames = n / HOP + 1;
    let mut out = Vec::with_capacity(frames * N_BINS);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for f in 0..frames {
        let start = (f * HOP) as isize - half as isize;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(reflect(start + i as isize) * window[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        out.extend(buf[..N_BINS].iter().map(|c| c.norm()));
    }
    (frames, out)
}

/// Spectrogram of a mono 16 kHz trial of exactly `trial_len_s` seconds.
pub fn stft_spectrogram<T: Scalar>(audio: &RawSignal<T>, trial_len_s: usize) -> Result<Spectrogram<T>> {
    if audio.sample_rate() != AUDIO_RATE || audio.n_channels() != 1 {
        return Err(AadError::invalid(format!(
            "spectrogram needs mono {AUDIO_RATE} Hz audio, got {} channel(s) at {} Hz",
            audio.n_channels(),
            audio.sample_rate()
        )));
    }
    let expected = trial_len_s * AUDIO_RATE as usize;
    if audio.n_samples() != expected {
        return Err(AadError::invalid(format!(
            "{trial_len_s} s trial needs {expected} samples, got {}",
            audio.n_samples()
        )));
    }
    let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
    let (frames, mags) = magnitudes(&audio.channel(0), &fft, &hann_periodic());
    Ok(Spectrogram {
        magnitudes: Tensor::from_vec(&[frames, N_BINS], mags.into_iter().map(T::lit).collect())?,
        frame_hop_s: HOP as f64 / AUDIO_RATE as f64,
        window_s: FFT_SIZE as f64 / AUDIO_RATE as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_counts_follow_trial_duration() {
        for (d, frames) in [(2, 101), (3, 151), (4, 201), (5, 251)] {
            let x = RawSignal::mono(vec![0.0f32; d * 16_000], AUDIO_RATE).unwrap();
            let s = stft_spectrogram(&x, d).unwrap();
            assert_eq!((s.n_frames(), s.n_bins()), (frames, 257));
            assert!(s.magnitudes.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn pure_tone_peaks_at_bin_32() {
        let x: Vec<f64> =
            (0..48_000).map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 16_000.0).sin()).collect();
        let s = stft_spectrogram(&RawSignal::mono(x, AUDIO_RATE).unwrap(), 3).unwrap();
        for f in 1..150 {
            let row = &s.magnitudes.data()[f * N_BINS..(f + 1) * N_BINS];
            let argmax = (0..N_BINS).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, 32, "frame {f}");
        }
    }

    #[test]
    fn wrong_length_rejected() {
        let x = RawSignal::mono(vec![0.0f64; 47_999], AUDIO_RATE).unwrap();
        assert!(stft_spectrogram(&x, 3).is_err());
    }

    #[test]
    fn window_is_periodic_hann() {
        let w = hann_periodic();
        assert_eq!(w[0], 0.0);
        assert!((w[256] - 1.0).abs() < 1e-15);
        assert!((w[1] - w[511]).abs() < 1e-15);
    }
}
