//! Temporal response functions and TRF-driven EEG synthesis.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::{RawSignal, EEG_RATE, ELECTRODES};
use crate::error::{AadError, Result};

/// Taps on the 64 Hz grid covering lags 0–500 ms.
pub const TRF_TAPS: usize = 33;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrfRole {
    Attended,
    Ignored,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrfKernel {
    pub role: TrfRole,
    /// Impulse response at lags `0, 1/64, 2/64, …` s.
    pub taps: Vec<f64>,
}

impl TrfKernel {
    /// Unit impulse at lag zero: convolution becomes the identity.
    pub fn identity(role: TrfRole) -> Self {
        let mut taps = vec![0.0; TRF_TAPS];
        taps[0] = 1.0;
        TrfKernel { role, taps }
    }

    pub fn zero(role: TrfRole) -> Self {
        TrfKernel { role, taps: vec![0.0; TRF_TAPS] }
    }

    pub fn max_abs(&self) -> f64 {
        self.taps.iter().fold(0.0, |m, t| m.max(t.abs()))
    }

    /// Causal convolution with `x`, truncated to `x.len()` samples.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|t| self.taps.iter().take(t + 1).enumerate().map(|(k, &h)| h * x[t - k]).sum())
            .collect()
    }
}

/// Two Gaussian bumps (standard deviation `width_ms`) centred on the
/// 100 ms and 200 ms lags.
pub fn make_trf(role: TrfRole, peak_amp_100: f64, peak_amp_200: f64, width_ms: f64) -> Result<TrfKernel> {
    if !(peak_amp_100.is_finite() && peak_amp_200.is_finite()) {
        return Err(AadError::invalid("TRF peak amplitudes must be finite"));
    }
    if !(width_ms.is_finite() && width_ms > 0.0) {
        return Err(AadError::invalid(format!("TRF bump width must be positive, got {width_ms} ms")));
    }
    let sigma = width_ms / 1000.0;
    let bump = |t: f64, centre: f64| (-0.5 * ((t - centre) / sigma).powi(2)).exp();
    let taps = (0..TRF_TAPS)
        .map(|k| {
            let t = k as f64 / EEG_RATE as f64;
            peak_amp_100 * bump(t, 0.1) + peak_amp_200 * bump(t, 0.2)
        })
        .collect();
    Ok(TrfKernel { role, taps })
}

/// Mixing and noise settings for [`synthesize_eeg`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EegMix {
    /// Per-electrode source gains, in [`ELECTRODES`] order.
    pub gains: Vec<f64>,
    /// Per-electrode signal-to-noise ratio; `+inf` disables noise.
    pub snr_db: f64,
}

impl Default for EegMix {
    fn default() -> Self {
        EegMix { gains: default_gains(), snr_db: f64::INFINITY }
    }
}

/// Frontal electrodes strongest, falling off towards Pz.
pub fn default_gains() -> Vec<f64> {
    vec![1.0, 0.95, 0.95, 1.0, 0.85, 0.8, 0.75, 0.8, 0.85, 0.6]
}

/// EEG `[T, 10]` at 64 Hz. `label` 0 means `env_a` is attended. Each
/// electrode is `gain · source + noise`, where the noise is white Gaussian
/// rescaled so its realised power sits exactly `snr_db` below the
/// electrode's signal variance.
pub fn synthesize_eeg(
    env_a: &[f64],
    env_b: &[f64],
    label: u8,
    trf_att: &TrfKernel,
    trf_ign: &TrfKernel,
    mix: &EegMix,
    rng: &mut impl Rng,
) -> Result<RawSignal<f64>> {
    if env_a.len() != env_b.len() {
        return Err(AadError::invalid(format!("envelope lengths differ: {} vs {}", env_a.len(), env_b.len())));
    }
    if env_a.is_empty() {
        return Err(AadError::invalid("envelopes are empty"));
    }
    if label > 1 {
        return Err(AadError::invalid(format!("label must be 0 or 1, got {label}")));
    }
    if mix.gains.len() != ELECTRODES.len() {
        return Err(AadError::invalid(format!("need {} electrode gains, got {}", ELECTRODES.len(), mix.gains.len())));
    }
    if mix.snr_db.is_nan() {
        return Err(AadError::invalid("SNR must not be NaN"));
    }
    let (att, ign) = if label == 0 { (env_a, env_b) } else { (env_b, env_a) };
    let source: Vec<f64> = trf_att.apply(att).iter().zip(trf_ign.apply(ign)).map(|(a, b)| a + b).collect();
    let n = source.len();
    let channels: Vec<Vec<f64>> = mix
        .gains
        .iter()
        .map(|&g| {
            let clean: Vec<f64> = source.iter().map(|s| g * s).collect();
            if mix.snr_db == f64::INFINITY {
                return clean;
            }
            let mut noise: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let target = variance(&clean) / 10f64.powf(mix.snr_db / 10.0);
            let nm = noise.iter().sum::<f64>() / n as f64;
            noise.iter_mut().for_each(|v| *v -= nm);
            let realised = noise.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let scale = if realised > 0.0 { (target / realised).sqrt() } else { 0.0 };
            clean.iter().zip(&noise).map(|(c, e)| c + scale * e).collect()
        })
        .collect();
    RawSignal::from_channels(&channels, EEG_RATE)
}

/// Population variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn envs(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let b = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        (a, b)
    }

    fn unit_mix(snr_db: f64) -> EegMix {
        EegMix { gains: vec![1.0; 10], snr_db }
    }

    #[test]
    fn zero_amplitudes_give_zero_kernel() {
        let k = make_trf(TrfRole::Ignored, 0.0, 0.0, 30.0).unwrap();
        assert!(k.taps.iter().all(|&t| t == 0.0));
        assert_eq!(k.taps.len(), TRF_TAPS);
    }

    #[test]
    fn default_peaks_scale_linearly() {
        let att = make_trf(TrfRole::Attended, 1.0, -1.0, 30.0).unwrap();
        let ign = make_trf(TrfRole::Ignored, 0.4, -0.4, 30.0).unwrap();
        assert!((att.max_abs() / ign.max_abs() - 2.5).abs() < 1e-12);
        assert_ne!(att.taps, ign.taps);
    }

    #[test]
    fn first_bump_peaks_at_sample_six() {
        let k = make_trf(TrfRole::Attended, 1.0, 0.0, 30.0).unwrap();
        let peak = (0..TRF_TAPS).max_by(|&i, &j| k.taps[i].total_cmp(&k.taps[j])).unwrap();
        assert_eq!(peak, 6);
    }

    #[test]
    fn rejects_non_finite_amplitude() {
        assert!(make_trf(TrfRole::Attended, f64::NAN, 0.0, 30.0).is_err());
    }

    #[test]
    fn identity_kernel_reproduces_attended_envelope() {
        let (a, b) = envs(320, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (label, want) in [(0u8, &a), (1, &b)] {
            let eeg = synthesize_eeg(
                &a,
                &b,
                label,
                &TrfKernel::identity(TrfRole::Attended),
                &TrfKernel::zero(TrfRole::Ignored),
                &unit_mix(f64::INFINITY),
                &mut rng,
            )
            .unwrap();
            assert_eq!(eeg.samples().shape(), [320, 10]);
            for c in 0..10 {
                assert_eq!(&eeg.channel(c), want);
            }
        }
    }

    #[test]
    fn infinite_snr_is_deterministic_mixture() {
        let (a, b) = envs(200, 2);
        let att = make_trf(TrfRole::Attended, 1.0, -1.0, 30.0).unwrap();
        let ign = make_trf(TrfRole::Ignored, 0.4, -0.4, 30.0).unwrap();
        let mix = EegMix { gains: default_gains(), snr_db: f64::INFINITY };
        let x = synthesize_eeg(&a, &b, 0, &att, &ign, &mix, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let y = synthesize_eeg(&a, &b, 0, &att, &ign, &mix, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(x, y);
        let src: Vec<f64> = att.apply(&a).iter().zip(ign.apply(&b)).map(|(p, q)| p + q).collect();
        for (c, g) in default_gains().iter().enumerate() {
            let want: Vec<f64> = src.iter().map(|s| g * s).collect();
            assert_eq!(x.channel(c), want);
        }
    }

    #[test]
    fn zero_db_snr_is_exact_per_electrode() {
        let (a, b) = envs(640, 3);
        let att = make_trf(TrfRole::Attended, 1.0, -1.0, 30.0).unwrap();
        let ign = make_trf(TrfRole::Ignored, 0.4, -0.4, 30.0).unwrap();
        let mix = EegMix { gains: default_gains(), snr_db: 0.0 };
        let clean = synthesize_eeg(&a, &b, 1, &att, &ign, &EegMix { snr_db: f64::INFINITY, ..mix.clone() }, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let noisy = synthesize_eeg(&a, &b, 1, &att, &ign, &mix, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for c in 0..10 {
            let s = clean.channel(c);
            let noise: Vec<f64> = noisy.channel(c).iter().zip(&s).map(|(n, s)| n - s).collect();
            let p_noise = noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
            let db = 10.0 * (variance(&s) / p_noise).log10();
            assert!(db.abs() < 0.2, "electrode {c}: {db} dB");
        }
    }

    #[test]
    fn linear_in_envelopes() {
        let (a, b) = envs(256, 4);
        let att = make_trf(TrfRole::Attended, 1.0, -1.0, 30.0).unwrap();
        let ign = make_trf(TrfRole::Ignored, 0.4, -0.4, 30.0).unwrap();
        let mix = EegMix::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = synthesize_eeg(&a, &b, 0, &att, &ign, &mix, &mut rng).unwrap();
        let sa: Vec<f64> = a.iter().map(|v| 2.5 * v).collect();
        let sb: Vec<f64> = b.iter().map(|v| 2.5 * v).collect();
        let y = synthesize_eeg(&sa, &sb, 0, &att, &ign, &mix, &mut rng).unwrap();
        for (p, q) in x.samples().data().iter().zip(y.samples().data()) {
            assert!((2.5 * p - q).abs() < 1e-12 * (1.0 + q.abs()));
        }
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let k = TrfKernel::identity(TrfRole::Attended);
        let err = synthesize_eeg(&[1.0; 10], &[1.0; 9], 0, &k, &k, &EegMix::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(AadError::InvalidArgument(_))));
    }
}
