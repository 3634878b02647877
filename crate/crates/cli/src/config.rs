//! Flat `key=value` run configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use aad_core::model::AblationMode;
use aad_core::synth::{default_gains, Carrier, SynthConfig};
use aad_core::train::TrainConfig;
use serde::Serialize;

/// A usage problem: exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    OneShot,
    Sequential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CarrierKind {
    Noise,
    Wav,
}

/// Every key has a default; see [`RunConfig::KEYS`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub duration_s: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub eeg_dropout: f64,
    pub audio_dropout: f64,
    pub classifier_dropout: f64,
    pub checkpoint_every: usize,

    pub n_trials: usize,
    pub n_recordings: usize,
    pub snr_db: f64,
    pub trf_att_100: f64,
    pub trf_att_200: f64,
    pub trf_ign_100: f64,
    pub trf_ign_200: f64,
    pub trf_width_ms: f64,
    pub carrier: CarrierKind,
    pub wav_a: Option<PathBuf>,
    pub wav_b: Option<PathBuf>,

    pub eeg_csv: Option<PathBuf>,
    pub eeg_rate: u32,
    pub audio_a: Option<PathBuf>,
    pub audio_b: Option<PathBuf>,
    pub attended: String,

    pub data: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub split: String,
    pub ablation: String,
    pub sparsity: f64,
    pub schedule: ScheduleKind,
    pub finetune_epochs: usize,
    pub out_root: PathBuf,
    pub run_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = SynthConfig::default();
        RunConfig {
            duration_s: t.duration_s,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            seed: t.seed,
            eeg_dropout: t.eeg_dropout,
            audio_dropout: t.audio_dropout,
            classifier_dropout: t.classifier_dropout,
            checkpoint_every: t.checkpoint_every,
            n_trials: s.n_trials,
            n_recordings: s.n_recordings,
            snr_db: s.snr_db,
            trf_att_100: s.trf_attended.0,
            trf_att_200: s.trf_attended.1,
            trf_ign_100: s.trf_ignored.0,
            trf_ign_200: s.trf_ignored.1,
            trf_width_ms: s.trf_width_ms,
            carrier: CarrierKind::Noise,
            wav_a: None,
            wav_b: None,
            eeg_csv: None,
            eeg_rate: 64,
            audio_a: None,
            audio_b: None,
            attended: "a".into(),
            data: None,
            manifest: None,
            checkpoint: None,
            split: "test".into(),
            ablation: "inputs".into(),
            sparsity: 0.5,
            schedule: ScheduleKind::OneShot,
            finetune_epochs: 10,
            out_root: PathBuf::from("runs"),
            run_dir: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError(format!("invalid value {value:?} for key {key:?}")))
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Keys with their meaning; defaults come from [`RunConfig::default`].
    pub const KEYS: &'static [(&'static str, &'static str)] = &[
        ("duration_s", "trial length in seconds: 2, 3, 4 or 5"),
        ("epochs", "training epochs"),
        ("batch_size", "mini-batch size"),
        ("lr", "Adam learning rate"),
        ("seed", "seed for data generation, initialisation, shuffling and dropout"),
        ("eeg_dropout", "dropout after each EEG conv layer"),
        ("audio_dropout", "dropout after each audio conv layer"),
        ("classifier_dropout", "dropout after the BLSTM and hidden FC layers"),
        ("checkpoint_every", "checkpoint cadence in epochs (the final epoch is always saved)"),
        ("n_trials", "synthetic trials to generate"),
        ("n_recordings", "continuous synthetic recordings the trials are cut from"),
        ("snr_db", "per-electrode SNR of synthetic EEG (inf disables noise)"),
        ("trf_att_100", "attended TRF amplitude at 100 ms"),
        ("trf_att_200", "attended TRF amplitude at 200 ms"),
        ("trf_ign_100", "ignored TRF amplitude at 100 ms"),
        ("trf_ign_200", "ignored TRF amplitude at 200 ms"),
        ("trf_width_ms", "TRF bump standard deviation in ms"),
        ("carrier", "synthetic audio: noise or wav"),
        ("wav_a", "speaker A recording for carrier=wav"),
        ("wav_b", "speaker B recording for carrier=wav"),
        ("eeg_csv", "preprocess: EEG CSV with a header row naming the electrodes"),
        ("eeg_rate", "preprocess: EEG sampling rate in Hz"),
        ("audio_a", "preprocess: speaker A WAV"),
        ("audio_b", "preprocess: speaker B WAV"),
        ("attended", "preprocess: attended speaker, a or b"),
        ("data", "trial container"),
        ("manifest", "trial manifest (default: manifest.jsonl next to the container)"),
        ("checkpoint", "model checkpoint for eval, ablate and prune"),
        ("split", "split evaluated by eval and ablate: train, validation or test"),
        ("ablation", "ablate: inputs, all, or a comma list of none, zero_eeg, zero_audio, remove_blstm, remove_fc"),
        ("sparsity", "prune: target per-layer sparsity in [0, 1)"),
        ("schedule", "prune: one_shot or sequential"),
        ("finetune_epochs", "prune: fine-tuning epochs"),
        ("out_root", "parent directory of run directories"),
        ("run_dir", "explicit run directory (report: the run to summarise)"),
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key.trim() {
            "duration_s" => self.duration_s = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "eeg_dropout" => self.eeg_dropout = parse(key, v)?,
            "audio_dropout" => self.audio_dropout = parse(key, v)?,
            "classifier_dropout" => self.classifier_dropout = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "n_trials" => self.n_trials = parse(key, v)?,
            "n_recordings" => self.n_recordings = parse(key, v)?,
            "snr_db" => self.snr_db = parse(key, v)?,
            "trf_att_100" => self.trf_att_100 = parse(key, v)?,
            "trf_att_200" => self.trf_att_200 = parse(key, v)?,
            "trf_ign_100" => self.trf_ign_100 = parse(key, v)?,
            "trf_ign_200" => self.trf_ign_200 = parse(key, v)?,
            "trf_width_ms" => self.trf_width_ms = parse(key, v)?,
            "carrier" => {
                self.carrier = match v {
                    "noise" => CarrierKind::Noise,
                    "wav" => CarrierKind::Wav,
                    _ => return Err(ConfigError(format!("invalid value {v:?} for key \"carrier\" (noise or wav)"))),
                }
            }
            "wav_a" => self.wav_a = path(v),
            "wav_b" => self.wav_b = path(v),
            "eeg_csv" => self.eeg_csv = path(v),
            "eeg_rate" => self.eeg_rate = parse(key, v)?,
            "audio_a" => self.audio_a = path(v),
            "audio_b" => self.audio_b = path(v),
            "attended" => {
                if v != "a" && v != "b" {
                    return Err(ConfigError(format!("invalid value {v:?} for key \"attended\" (a or b)")));
                }
                self.attended = v.into();
            }
            "data" => self.data = path(v),
            "manifest" => self.manifest = path(v),
            "checkpoint" => self.checkpoint = path(v),
            "split" => {
                aad_core::train::Split::from_str(v).map_err(|e| ConfigError(e.to_string()))?;
                self.split = v.into();
            }
            "ablation" => {
                self.ablation = v.into();
                self.ablation_modes()?;
            }
            "sparsity" => self.sparsity = parse(key, v)?,
            "schedule" => {
                self.schedule = match v {
                    "one_shot" => ScheduleKind::OneShot,
                    "sequential" => ScheduleKind::Sequential,
                    _ => {
                        return Err(ConfigError(format!(
                            "invalid value {v:?} for key \"schedule\" (one_shot or sequential)"
                        )))
                    }
                }
            }
            "finetune_epochs" => self.finetune_epochs = parse(key, v)?,
            "out_root" => self.out_root = PathBuf::from(v),
            "run_dir" => self.run_dir = path(v),
            other => return Err(ConfigError(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` assignment.
    pub fn assign(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (k, v) = pair.split_once('=').ok_or_else(|| ConfigError(format!("expected key=value, got {pair:?}")))?;
        self.set(k, v)
    }

    /// Defaults, then the file (if any), then the command-line overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        if let Some(file) = file {
            let text = std::fs::read_to_string(file)
                .map_err(|e| ConfigError(format!("cannot read config {}: {e}", file.display())))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                cfg.assign(line).map_err(|e| ConfigError(format!("{}:{}: {e}", file.display(), i + 1)))?;
            }
        }
        for o in overrides {
            cfg.assign(o)?;
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            eeg_dropout: self.eeg_dropout,
            audio_dropout: self.audio_dropout,
            classifier_dropout: self.classifier_dropout,
            seed: self.seed,
            duration_s: self.duration_s,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn synth_config(&self) -> Result<SynthConfig, ConfigError> {
        let carrier = match self.carrier {
            CarrierKind::Noise => Carrier::ModulatedNoise,
            CarrierKind::Wav => match (&self.wav_a, &self.wav_b) {
                (Some(a), Some(b)) => Carrier::Wav { speaker_a: a.clone(), speaker_b: b.clone() },
                _ => return Err(ConfigError("carrier=wav needs wav_a and wav_b".into())),
            },
        };
        Ok(SynthConfig {
            n_trials: self.n_trials,
            duration_s: self.duration_s,
            snr_db: self.snr_db,
            gains: default_gains(),
            seed: self.seed,
            carrier,
            n_recordings: self.n_recordings,
            trf_attended: (self.trf_att_100, self.trf_att_200),
            trf_ignored: (self.trf_ign_100, self.trf_ign_200),
            trf_width_ms: self.trf_width_ms,
        })
    }

    pub fn ablation_modes(&self) -> Result<Vec<AblationMode>, ConfigError> {
        match self.ablation.as_str() {
            "inputs" => Ok(vec![AblationMode::None, AblationMode::ZeroEeg, AblationMode::ZeroAudio]),
            "all" => Ok(AblationMode::ALL.to_vec()),
            list => list
                .split(',')
                .map(|m| AblationMode::from_str(m.trim()).map_err(|e| ConfigError(e.to_string())))
                .collect(),
        }
    }

    pub fn manifest_path(&self, data: &Path) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| data.with_file_name("manifest.jsonl"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_documented_key_is_settable() {
        let defaults = RunConfig::default();
        let json = serde_json::to_value(&defaults).unwrap();
        for (key, _) in RunConfig::KEYS {
            let current = &json[key];
            let v = match current {
                serde_json::Value::Null => "x".to_string(),
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            RunConfig::default().set(key, &v).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
        assert_eq!(json.as_object().unwrap().len(), RunConfig::KEYS.len());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::load(None, &["epcohs=3".into()]).unwrap_err();
        assert!(err.0.contains("epcohs"));
    }
}
