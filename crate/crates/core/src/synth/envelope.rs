//! Broadband envelope via the analytic signal.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::dsp::{lowpass_filter, resample, RawSignal, EEG_LOWPASS_HZ, EEG_RATE};
use crate::error::{AadError, Result};

/// `|x + i H{x}|`, computed by zeroing the negative half of the spectrum.
pub fn analytic_magnitude(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    let half = n / 2;
    for (k, c) in buf.iter_mut().enumerate().skip(1) {
        if k < n.div_ceil(2) {
            *c *= 2.0;
        } else if !(n.is_multiple_of(2) && k == half) {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.norm() / n as f64).collect()
}

/// Envelope of mono audio at 64 Hz: analytic-signal magnitude, 32 Hz
/// low-pass, resampling, and clipping of filter undershoot at zero.
pub fn hilbert_envelope(audio: &RawSignal<f64>) -> Result<Vec<f64>> {
    if audio.n_channels() != 1 {
        return Err(AadError::invalid(format!("envelope needs mono audio, got {} channels", audio.n_channels())));
    }
    let mag = analytic_magnitude(&audio.channel(0));
    let mut env = RawSignal::mono(mag, audio.sample_rate())?;
    if audio.sample_rate() > 2 * EEG_LOWPASS_HZ as u32 {
        env = lowpass_filter(&env, EEG_LOWPASS_HZ)?;
    }
    let env = resample(&env, EEG_RATE)?;
    Ok(env.channel(0).into_iter().map(|v| v.max(0.0)).collect())
}
