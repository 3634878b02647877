//! Rational-ratio polyphase resampling with a Kaiser-windowed sinc.

use super::RawSignal;
use crate::error::{AadError, Result};
use crate::scalar::Scalar;

const KAISER_BETA: f64 = 8.6;
/// Filter half-length in upsampled samples, per unit of `max(L, M)`.
const HALF_LEN_FACTOR: usize = 10;
/// Passband edge as a fraction of the target Nyquist frequency.
const CUTOFF_FRACTION: f64 = 0.9;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let (mut term, mut sum, mut k) = (1.0, 1.0, 1.0);
    while term > 1e-17 * sum {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// One sub-filter per output phase, each scaled to unit DC gain.
struct Polyphase {
    up: usize,
    down: usize,
    /// Per phase `r`: taps for input offsets `i_min ..`; output sample
    /// at upsampled index `q L + r` reads input `q - i`.
    phases: Vec<(i64, Vec<f64>)>,
}

impl Polyphase {
    fn new(up: usize, down: usize) -> Self {
        let m = up.max(down);
        let half = (HALF_LEN_FACTOR * m) as i64;
        let fc = CUTOFF_FRACTION / m as f64;
        let norm = bessel_i0(KAISER_BETA);
        let h = |d: i64| -> f64 {
            let r = d as f64 / half as f64;
            let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / norm;
            fc * sinc(fc * d as f64) * w
        };
        let l = up as i64;
        let phases = (0..l)
            .map(|r| {
                let i_min = (-half - r).div_euclid(l) + i64::from((-half - r).rem_euclid(l) != 0);
                let i_max = (half - r).div_euclid(l);
                let mut taps: Vec<f64> = (i_min..=i_max).map(|i| h(r + i * l)).collect();
                let sum: f64 = taps.iter().sum();
                taps.iter_mut().for_each(|t| *t /= sum);
                (i_min, taps)
            })
            .collect();
        Polyphase { up, down, phases }
    }

    fn apply(&self, x: &[f64], n_out: usize) -> Vec<f64> {
        let n = x.len();
        // odd extension keeps level and slope continuous at the ends
        let at = |k: i64| -> f64 {
            if k < 0 {
                let j = ((-k) as usize).min(n - 1);
                2.0 * x[0] - x[j]
            } else if k as usize >= n {
                let j = (k as usize - (n - 1)).min(n - 1);
                2.0 * x[n - 1] - x[n - 1 - j]
            } else {
                x[k as usize]
            }
        };
        (0..n_out)
            .map(|j| {
                let c = (j * self.down) as i64;
                let (q, r) = (c.div_euclid(self.up as i64), c.rem_euclid(self.up as i64) as usize);
                let (i_min, taps) = &self.phases[r];
                taps.iter().enumerate().map(|(t, &w)| w * at(q - (i_min + t as i64))).sum()
            })
            .collect()
    }
}

/// Resamples every channel to `target_rate`; `n_out = round(n_in * target / source)`.
/// The anti-alias low-pass is built into the interpolation filter.
pub fn resample<T: Scalar>(signal: &RawSignal<T>, target_rate: u32) -> Result<RawSignal<T>> {
    if target_rate == 0 {
        return Err(AadError::invalid("target rate must be positive"));
    }
    let src = signal.sample_rate();
    if target_rate == src {
        return Ok(signal.clone());
    }
    let g = gcd(src as u64, target_rate as u64);
    let (up, down) = ((target_rate as u64 / g) as usize, (src as u64 / g) as usize);
    let n_in = signal.n_samples();
    let n_out = ((n_in as u128 * up as u128 + down as u128 / 2) / down as u128) as usize;
    if n_out == 0 {
        return Err(AadError::invalid(format!("{n_in} samples at {src} Hz resample to nothing at {target_rate} Hz")));
    }
    let filter = Polyphase::new(up, down);
    signal.map_channels(target_rate, |c| filter.apply(c, n_out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_length_law() {
        let x = RawSignal::mono(vec![0.0f64; 2500], 2500).unwrap();
        assert_eq!(resample(&x, 64).unwrap().n_samples(), 64);
        let x = RawSignal::mono(vec![0.0f64; 1000], 44_100).unwrap();
        assert_eq!(resample(&x, 16_000).unwrap().n_samples(), 363);
    }

    #[test]
    fn constant_is_preserved() {
        let x = RawSignal::mono(vec![0.7f64; 5000], 2500).unwrap();
        let y = resample(&x, 64).unwrap();
        assert!(y.channel(0).iter().all(|v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn sine_matches_analytic_samples() {
        let tau = 2.0 * std::f64::consts::PI;
        let x: Vec<f64> = (0..25_000).map(|i| (tau * 8.0 * i as f64 / 2500.0).sin()).collect();
        let y = resample(&RawSignal::mono(x, 2500).unwrap(), 64).unwrap().channel(0);
        assert_eq!(y.len(), 640);
        let err = (32..608).map(|j| (y[j] - (tau * 8.0 * j as f64 / 64.0).sin()).abs()).fold(0.0, f64::max);
        assert!(err < 1e-2, "max error {err}");
    }

    #[test]
    fn upsampling_interpolates() {
        let tau = 2.0 * std::f64::consts::PI;
        let x: Vec<f64> = (0..640).map(|i| (tau * 3.0 * i as f64 / 64.0).sin()).collect();
        let y = resample(&RawSignal::mono(x, 64).unwrap(), 256).unwrap().channel(0);
        let err = (100..2400).map(|j| (y[j] - (tau * 3.0 * j as f64 / 256.0).sin()).abs()).fold(0.0, f64::max);
        assert!(err < 1e-2, "max error {err}");
    }

    #[test]
    fn zero_rate_rejected() {
        let x = RawSignal::mono(vec![1.0f64; 10], 100).unwrap();
        assert!(resample(&x, 0).is_err());
    }

    #[test]
    fn bessel_reference_values() {
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-13);
    }
}
