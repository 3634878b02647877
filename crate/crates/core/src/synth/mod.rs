//! Synthetic two-speaker trials: modulated-noise (or WAV) carriers, their
//! envelopes convolved with attended/ignored TRFs into 10-channel EEG at a
//! chosen SNR, the binary trial container and the JSON-lines manifest.
//!
//! Trials come from a handful of continuous recordings cut with a 1 s hop,
//! exactly as real data would be, so neighbouring trials overlap and the
//! split logic has something to protect against.

mod container;
mod envelope;
mod manifest;
mod trf;

pub use container::{
    read_trials, write_trials, TrialDims, TrialFile, TrialRecord, TrialSet, TrialSource, TrialWriter, TRIALS_MAGIC,
};
pub use envelope::{analytic_magnitude, hilbert_envelope};
pub use manifest::{read_manifest, write_manifest, ManifestEntry};
pub use trf::{default_gains, make_trf, synthesize_eeg, variance, EegMix, TrfKernel, TrfRole, TRF_TAPS};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::{
    check_duration, highpass_filter, lowpass_filter, preprocess_audio, preprocess_eeg, read_wav_mono, resample,
    RawSignal, AUDIO_RATE, EEG_RATE,
};
use crate::error::{AadError, Result};
use crate::train::{split_dataset, SplitFractions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Carrier {
    /// Band-limited noise (100–4000 Hz) under a rectified random envelope
    /// low-passed at 8 Hz.
    ModulatedNoise,
    /// Consecutive excerpts of two mono recordings, one per speaker.
    Wav { speaker_a: PathBuf, speaker_b: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_trials: usize,
    pub duration_s: usize,
    pub snr_db: f64,
    pub gains: Vec<f64>,
    pub seed: u64,
    pub carrier: Carrier,
    /// Continuous recordings the trials are cut from.
    pub n_recordings: usize,
    /// Peak amplitudes at the 100 ms and 200 ms lags.
    pub trf_attended: (f64, f64),
    pub trf_ignored: (f64, f64),
    pub trf_width_ms: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_trials: 1000,
            duration_s: 3,
            snr_db: -3.0,
            gains: default_gains(),
            seed: 0,
            carrier: Carrier::ModulatedNoise,
            n_recordings: 10,
            trf_attended: (1.0, -1.0),
            trf_ignored: (0.4, -0.4),
            trf_width_ms: 30.0,
        }
    }
}

/// Trials per recording; the remainder goes to the first recordings.
fn recording_sizes(n_trials: usize, n_recordings: usize) -> Vec<usize> {
    let r = n_recordings.min(n_trials);
    (0..r).map(|i| n_trials / r + usize::from(i < n_trials % r)).collect()
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        check_duration(self.duration_s)?;
        if self.n_trials == 0 {
            return Err(AadError::invalid("n_trials must be at least 1"));
        }
        if self.n_recordings == 0 {
            return Err(AadError::invalid("n_recordings must be at least 1"));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(AadError::invalid(format!("SNR must be a number or +inf, got {}", self.snr_db)));
        }
        if self.gains.len() != 10 || self.gains.iter().any(|g| !g.is_finite()) {
            return Err(AadError::invalid("need ten finite electrode gains"));
        }
        Ok(())
    }

    /// Seconds of audio each recording needs: `n - 1 + d` for `n` trials.
    pub fn recording_seconds(&self) -> Vec<usize> {
        recording_sizes(self.n_trials, self.n_recordings).iter().map(|n| n - 1 + self.duration_s).collect()
    }

    pub fn dims(&self) -> TrialDims {
        TrialDims::for_duration(self.duration_s)
    }

    fn kernels(&self) -> Result<(TrfKernel, TrfKernel)> {
        Ok((
            make_trf(TrfRole::Attended, self.trf_attended.0, self.trf_attended.1, self.trf_width_ms)?,
            make_trf(TrfRole::Ignored, self.trf_ignored.0, self.trf_ignored.1, self.trf_width_ms)?,
        ))
    }
}

fn gaussian(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn modulated_noise(seconds: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let n = seconds * AUDIO_RATE as usize;
    let white = RawSignal::mono(gaussian(n, rng), AUDIO_RATE)?;
    let band = lowpass_filter(&highpass_filter(&white, 100.0)?, 4000.0)?.channel(0);

    let slow = RawSignal::mono(gaussian(seconds * EEG_RATE as usize, rng), EEG_RATE)?;
    let slow = lowpass_filter(&slow, 8.0)?.channel(0);
    let sd = variance(&slow).sqrt().max(1e-12);
    let m: Vec<f64> = slow.iter().map(|z| (1.0 + z / sd).max(0.0)).collect();
    let m = resample(&RawSignal::mono(m, EEG_RATE)?, AUDIO_RATE)?.channel(0);

    let mut x: Vec<f64> = band.iter().zip(&m).map(|(c, g)| c * g.max(0.0)).collect();
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= 0.1 / rms);
    }
    Ok(x)
}

/// Both speakers' audio, sliced per recording.
enum CarrierSource {
    Noise,
    Wav([Vec<f64>; 2]),
}

impl CarrierSource {
    fn prepare(cfg: &SynthConfig) -> Result<Self> {
        match &cfg.carrier {
            Carrier::ModulatedNoise => Ok(CarrierSource::Noise),
            Carrier::Wav { speaker_a, speaker_b } => {
                let need_s: usize = cfg.recording_seconds().iter().sum();
                let load = |p: &Path| -> Result<Vec<f64>> {
                    let raw = resample(&read_wav_mono::<f64>(p)?, AUDIO_RATE)?;
                    if raw.n_samples() < need_s * AUDIO_RATE as usize {
                        return Err(AadError::invalid(format!(
                            "{} holds {:.1} s of audio; {} trials of {} s need {need_s} s",
                            p.display(),
                            raw.duration_s(),
                            cfg.n_trials,
                            cfg.duration_s
                        )));
                    }
                    Ok(raw.channel(0))
                };
                Ok(CarrierSource::Wav([load(speaker_a)?, load(speaker_b)?]))
            }
        }
    }

    fn take(&self, speaker: usize, offset_s: usize, seconds: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
        match self {
            CarrierSource::Noise => modulated_noise(seconds, rng),
            CarrierSource::Wav(audio) => {
                let fs = AUDIO_RATE as usize;
                Ok(audio[speaker][offset_s * fs..(offset_s + seconds) * fs].to_vec())
            }
        }
    }
}

/// Generates every trial in order, handing each to `sink` together with
/// its manifest entry (without split hint).
fn generate_with(cfg: &SynthConfig, mut sink: impl FnMut(TrialRecord, ManifestEntry) -> Result<()>) -> Result<()> {
    cfg.validate()?;
    let (trf_att, trf_ign) = cfg.kernels()?;
    let mix = EegMix { gains: cfg.gains.clone(), snr_db: cfg.snr_db };
    let carriers = CarrierSource::prepare(cfg)?;

    let mut label_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut labels: Vec<u8> = (0..cfg.n_trials).map(|i| (i % 2) as u8).collect();
    labels.shuffle(&mut label_rng);

    let d = cfg.duration_s;
    let span = (d * EEG_RATE as usize) as u64;
    let (mut trial, mut offset_s) = (0, 0);
    for (r, &n_r) in recording_sizes(cfg.n_trials, cfg.n_recordings).iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(r as u64 + 1);
        let seconds = n_r - 1 + d;
        let audio = [carriers.take(0, offset_s, seconds, &mut rng)?, carriers.take(1, offset_s, seconds, &mut rng)?];
        offset_s += seconds;
        let env: Vec<Vec<f64>> =
            audio.iter().map(|a| hilbert_envelope(&RawSignal::mono(a.clone(), AUDIO_RATE)?)).collect::<Result<_>>()?;
        let attended = r % 2;
        let raw = synthesize_eeg(&env[0], &env[1], attended as u8, &trf_att, &trf_ign, &mix, &mut rng)?;
        let eeg = preprocess_eeg(&RawSignal::<f32>::new(raw.samples().cast(), EEG_RATE)?, d)?;
        let specs = audio
            .iter()
            .map(|a| preprocess_audio::<f32>(&RawSignal::mono(a.iter().map(|&v| v as f32).collect(), AUDIO_RATE)?, d))
            .collect::<Result<Vec<_>>>()?;
        if eeg.len() != n_r || specs.iter().any(|s| s.len() != n_r) {
            return Err(AadError::Format(format!(
                "recording {r}: expected {n_r} trials, segmented {} EEG / {} / {}",
                eeg.len(),
                specs[0].len(),
                specs[1].len()
            )));
        }
        for (j, e) in eeg.into_iter().enumerate() {
            let label = labels[trial];
            // label 0: spec_a is the attended speaker
            let (a, b) = if label == 0 { (attended, 1 - attended) } else { (1 - attended, attended) };
            let record = TrialRecord { label, eeg: e, spec_a: specs[a][j].clone(), spec_b: specs[b][j].clone() };
            let start = j as u64 * EEG_RATE as u64;
            let entry = ManifestEntry { trial, source: format!("rec{r:02}"), span: [start, start + span], split: None };
            sink(record, entry)?;
            trial += 1;
        }
    }
    Ok(())
}

fn annotate_splits(manifest: &mut [ManifestEntry], seed: u64) -> Result<()> {
    let plan = split_dataset(manifest, &SplitFractions::default(), seed)?;
    for (e, s) in manifest.iter_mut().zip(plan.assignments()) {
        e.split = *s;
    }
    Ok(())
}

/// An in-memory synthetic dataset.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub trials: TrialSet,
    pub manifest: Vec<ManifestEntry>,
}

/// Builds the whole dataset in memory; manifest entries carry the default
/// split as a hint.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    let mut records = Vec::with_capacity(cfg.n_trials);
    let mut manifest = Vec::with_capacity(cfg.n_trials);
    generate_with(cfg, |r, e| {
        records.push(r);
        manifest.push(e);
        Ok(())
    })?;
    annotate_splits(&mut manifest, cfg.seed)?;
    Ok(SynthDataset { trials: TrialSet::new(cfg.dims(), records)?, manifest })
}

/// Streams the dataset to a container and manifest without holding the
/// trials in memory. Returns the per-class label counts.
pub fn generate_to_files(cfg: &SynthConfig, container: &Path, manifest_path: &Path) -> Result<[usize; 2]> {
    let mut writer = TrialWriter::create(container, cfg.dims(), cfg.n_trials)?;
    let mut manifest = Vec::with_capacity(cfg.n_trials);
    let mut counts = [0usize; 2];
    generate_with(cfg, |r, e| {
        counts[r.label as usize] += 1;
        writer.push(&r)?;
        manifest.push(e);
        Ok(())
    })?;
    writer.finish()?;
    annotate_splits(&mut manifest, cfg.seed)?;
    write_manifest(&manifest, manifest_path)?;
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n_trials: usize, seed: u64) -> SynthConfig {
        SynthConfig { n_trials, duration_s: 2, n_recordings: 2, seed, ..SynthConfig::default() }
    }

    #[test]
    fn recording_sizes_cover_all_trials() {
        assert_eq!(recording_sizes(4000, 10), vec![400; 10]);
        assert_eq!(recording_sizes(13, 4), vec![4, 3, 3, 3]);
        assert_eq!(recording_sizes(3, 10), vec![1, 1, 1]);
    }

    #[test]
    fn dimensions_and_balance() {
        let ds = generate_dataset(&small(12, 1)).unwrap();
        assert_eq!(ds.trials.records.len(), 12);
        let ones = ds.trials.records.iter().filter(|r| r.label == 1).count();
        assert_eq!(ones, 6);
        for r in &ds.trials.records {
            assert_eq!(r.eeg.shape(), [128, 10]);
            assert_eq!(r.spec_a.shape(), [101, 257]);
            assert_eq!(r.spec_b.shape(), [101, 257]);
        }
        assert_eq!(ds.manifest[6].source, "rec01");
        assert_eq!(ds.manifest[7].span, [64, 192]);
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(6, 3);
        let paths: Vec<_> = (0..2).map(|i| (dir.path().join(format!("{i}.bin")), dir.path().join(format!("{i}.jsonl")))).collect();
        for (c, m) in &paths {
            generate_to_files(&cfg, c, m).unwrap();
        }
        assert_eq!(std::fs::read(&paths[0].0).unwrap(), std::fs::read(&paths[1].0).unwrap());
        assert_eq!(std::fs::read(&paths[0].1).unwrap(), std::fs::read(&paths[1].1).unwrap());
        let other = generate_dataset(&small(6, 4)).unwrap();
        assert_ne!(TrialSet::load(&paths[0].0).unwrap(), other.trials);
    }

    #[test]
    fn short_wav_names_required_duration() {
        let dir = tempfile::tempdir().unwrap();
        let wav = dir.path().join("a.wav");
        crate::dsp::write_wav_mono(&wav, &RawSignal::mono(vec![0.1f64; 16_000], AUDIO_RATE).unwrap()).unwrap();
        let cfg = SynthConfig { carrier: Carrier::Wav { speaker_a: wav.clone(), speaker_b: wav }, ..small(6, 0) };
        let msg = generate_dataset(&cfg).unwrap_err().to_string();
        assert!(msg.contains("need 8 s"), "{msg}");
    }
}
