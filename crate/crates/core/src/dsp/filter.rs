//! Fourth-order Butterworth sections applied forward and backward.

use super::RawSignal;
use crate::error::{AadError, Result};
use crate::scalar::Scalar;

pub const ORDER: usize = 4;

/// One biquad `b0 + b1 z^-1 + b2 z^-2 / 1 + a1 z^-1 + a2 z^-2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sos {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Sos {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Transposed direct-form-II state that is at rest for a unit constant input.
    fn steady_state(&self) -> [f64; 2] {
        let k = self.dc_gain();
        let z2 = self.b[2] - self.a[1] * k;
        let z1 = self.b[1] - self.a[0] * k + z2;
        [z1, z2]
    }

    fn run(&self, x: &mut [f64], mut z: [f64; 2]) {
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        for v in x.iter_mut() {
            let y = b0 * *v + z[0];
            z[0] = b1 * *v - a1 * y + z[1];
            z[1] = b2 * *v - a2 * y;
            *v = y;
        }
    }

    fn pole_radius(&self) -> f64 {
        // complex pair: |z|^2 = a2
        let disc = self.a[0] * self.a[0] - 4.0 * self.a[1];
        if disc < 0.0 {
            self.a[1].sqrt()
        } else {
            let s = disc.sqrt();
            ((-self.a[0] + s) / 2.0).abs().max(((-self.a[0] - s) / 2.0).abs())
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Band {
    Low,
    High,
}

/// Bilinear-transform Butterworth design; pole pairs share a section.
fn design(order: usize, cutoff: f64, fs: f64, band: Band) -> Vec<Sos> {
    let warped = 2.0 * fs * (std::f64::consts::PI * cutoff / fs).tan();
    (0..order / 2)
        .map(|k| {
            let theta = std::f64::consts::PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
            // s-plane pole on the unit circle; a high-pass maps p -> 1/p,
            // which for |p| = 1 is the conjugate, so the digital poles match.
            let (re, im) = (warped * theta.cos(), warped * theta.sin());
            let t = 2.0 * fs;
            // z = (t + s) / (t - s)
            let den = (t - re).powi(2) + im * im;
            let zr = ((t + re) * (t - re) - im * im) / den;
            let zi = ((t + re) * im + im * (t - re)) / den;
            let a = [-2.0 * zr, zr * zr + zi * zi];
            match band {
                Band::Low => {
                    let g = (1.0 + a[0] + a[1]) / 4.0;
                    Sos { b: [g, 2.0 * g, g], a }
                }
                Band::High => {
                    let g = (1.0 - a[0] + a[1]) / 4.0;
                    Sos { b: [g, -2.0 * g, g], a }
                }
            }
        })
        .collect()
}

/// Samples until the slowest pole decays below 1e-6.
fn transient_len(sections: &[Sos]) -> usize {
    let r = sections.iter().map(Sos::pole_radius).fold(0.0, f64::max);
    if r <= 0.0 {
        return 1;
    }
    ((1e-6f64).ln() / r.ln()).ceil() as usize
}

fn cascade(sections: &[Sos], x: &mut [f64]) {
    let mut scale = x[0];
    for s in sections {
        let zi = s.steady_state();
        s.run(x, [zi[0] * scale, zi[1] * scale]);
        scale *= s.dc_gain();
    }
}

/// Zero-phase filtering of one channel with odd extension at both ends.
fn filtfilt(sections: &[Sos], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return x.to_vec();
    }
    let pad = transient_len(sections).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|k| 2.0 * x[0] - x[k]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|k| 2.0 * x[n - 1] - x[n - 1 - k]));
    cascade(sections, &mut ext);
    ext.reverse();
    cascade(sections, &mut ext);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

fn check_cutoff(cutoff: f64, fs: u32) -> Result<()> {
    if !(cutoff > 0.0 && cutoff < fs as f64 / 2.0) {
        return Err(AadError::invalid(format!(
            "cutoff {cutoff} Hz must lie strictly between 0 and the Nyquist frequency {} Hz",
            fs as f64 / 2.0
        )));
    }
    Ok(())
}

pub fn lowpass_filter<T: Scalar>(signal: &RawSignal<T>, cutoff: f64) -> Result<RawSignal<T>> {
    check_cutoff(cutoff, signal.sample_rate())?;
    let sos = design(ORDER, cutoff, signal.sample_rate() as f64, Band::Low);
    signal.map_channels(signal.sample_rate(), |c| filtfilt(&sos, c))
}

pub fn highpass_filter<T: Scalar>(signal: &RawSignal<T>, cutoff: f64) -> Result<RawSignal<T>> {
    check_cutoff(cutoff, signal.sample_rate())?;
    let sos = design(ORDER, cutoff, signal.sample_rate() as f64, Band::High);
    signal.map_channels(signal.sample_rate(), |c| filtfilt(&sos, c))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, fs: u32, seconds: f64) -> RawSignal<f64> {
        let n = (fs as f64 * seconds) as usize;
        let x = (0..n).map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / fs as f64).sin()).collect();
        RawSignal::mono(x, fs).unwrap()
    }

    fn peak(s: &RawSignal<f64>) -> f64 {
        s.samples().max_abs()
    }

    /// Peak over the middle half, away from the edges.
    fn interior_peak(s: &RawSignal<f64>) -> f64 {
        let x = s.channel(0);
        let n = x.len();
        x[n / 4..3 * n / 4].iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    #[test]
    fn lowpass_passes_dc() {
        let x = RawSignal::mono(vec![1.0; 3000], 2500).unwrap();
        let y = lowpass_filter(&x, 32.0).unwrap();
        assert!(y.channel(0).iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn lowpass_rejects_500_hz() {
        // whole cycles with both end samples on zero crossings: the odd
        // extension pivots on the end samples, so this is the steady state
        let y = lowpass_filter(&sine(500.0, 2500, 4.0004), 32.0).unwrap();
        assert!(peak(&y) < 1e-3, "peak {}", peak(&y));
    }

    #[test]
    fn lowpass_keeps_1_hz() {
        let y = lowpass_filter(&sine(1.0, 2500, 10.0), 32.0).unwrap();
        assert!(interior_peak(&y) >= 0.99);
    }

    #[test]
    fn highpass_removes_dc() {
        let x = RawSignal::mono(vec![5.0; 2000], 64).unwrap();
        assert!(peak(&highpass_filter(&x, 1.0).unwrap()) < 5e-3);
        let z = RawSignal::mono(vec![0.0; 100], 64).unwrap();
        assert_eq!(peak(&highpass_filter(&z, 1.0).unwrap()), 0.0);
    }

    #[test]
    fn highpass_keeps_16_hz() {
        let y = highpass_filter(&sine(16.0, 64, 20.0), 1.0).unwrap();
        assert!(interior_peak(&y) >= 0.99);
    }

    #[test]
    fn cutoff_at_nyquist_is_rejected() {
        let x = sine(1.0, 64, 1.0);
        assert!(lowpass_filter(&x, 32.0).is_err());
        assert!(highpass_filter(&x, 0.0).is_err());
    }

    #[test]
    fn refiltering_in_band_sine_is_stable() {
        let once = lowpass_filter(&sine(4.0, 256, 10.0), 32.0).unwrap();
        let twice = lowpass_filter(&once, 32.0).unwrap();
        let ratio = interior_peak(&twice) / interior_peak(&once);
        assert!((ratio - 1.0).abs() < 0.01);
    }

    #[test]
    fn design_matches_analog_magnitude_law() {
        // |H|^2 of a zero-phase pass equals the squared Butterworth response
        // evaluated at the prewarped frequency.
        let fs = 2500.0;
        let sos = design(ORDER, 32.0, fs, Band::Low);
        for f in [5.0, 32.0, 100.0] {
            let w = 2.0 * std::f64::consts::PI * f / fs;
            let (c1, s1, c2, s2) = (w.cos(), w.sin(), (2.0 * w).cos(), (2.0 * w).sin());
            let mut mag = 1.0;
            for s in &sos {
                let num = ((s.b[0] + s.b[1] * c1 + s.b[2] * c2).powi(2) + (s.b[1] * s1 + s.b[2] * s2).powi(2)).sqrt();
                let den = ((1.0 + s.a[0] * c1 + s.a[1] * c2).powi(2) + (s.a[0] * s1 + s.a[1] * s2).powi(2)).sqrt();
                mag *= num / den;
            }
            let ratio = (std::f64::consts::PI * f / fs).tan() / (std::f64::consts::PI * 32.0 / fs).tan();
            let analog = 1.0 / (1.0 + ratio.powi(2 * ORDER as i32)).sqrt();
            assert!((mag - analog).abs() < 1e-9, "{f} Hz: {mag} vs {analog}");
        }
    }
}
