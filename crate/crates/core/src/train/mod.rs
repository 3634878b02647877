//! Splitting, the training loop, evaluation and summary statistics.

mod split;
mod stats;

pub use split::{split_dataset, RecordingSplit, Split, SplitFractions, SplitPlan};
pub use stats::{
    median_last_k, signed_doubled_ranks, wilcoxon_brute_force_p, wilcoxon_signed_rank, WilcoxonMethod,
    WilcoxonResult, WILCOXON_EXACT_MAX_N,
};

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::check_duration;
use crate::error::{AadError, Result};
use crate::model::{argmax_rows, AadModel, AblationMode, Architecture, ModelConfig};
use crate::scalar::Scalar;
use crate::synth::TrialSource;
use crate::tensor::checkpoint::save_checkpoint;
use crate::tensor::{Adam, Mode, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eeg_dropout: f64,
    pub audio_dropout: f64,
    pub classifier_dropout: f64,
    pub seed: u64,
    pub duration_s: usize,
    /// Checkpoint cadence in epochs; the final epoch is always saved.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            batch_size: 32,
            lr: 5e-4,
            eeg_dropout: 0.25,
            audio_dropout: 0.4,
            classifier_dropout: 0.25,
            seed: 0,
            duration_s: 3,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_duration(self.duration_s)?;
        if self.epochs == 0 || self.batch_size < 2 || self.checkpoint_every == 0 {
            return Err(AadError::invalid("epochs and checkpoint_every must be positive and batch_size at least 2"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(AadError::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        for p in [self.eeg_dropout, self.audio_dropout, self.classifier_dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(AadError::invalid(format!("dropout must be in [0, 1), got {p}")));
            }
        }
        Ok(())
    }

    pub fn model_config(&self, architecture: Architecture) -> ModelConfig {
        let mut m = ModelConfig::with_duration(self.duration_s);
        m.eeg.dropout = self.eeg_dropout;
        m.audio.dropout = self.audio_dropout;
        m.classifier.dropout = self.classifier_dropout;
        m.architecture = architecture;
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
    pub n: usize,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

impl EvalResult {
    /// Per-trial correctness, in evaluation order.
    pub fn correct(&self) -> Vec<bool> {
        self.predictions.iter().zip(&self.labels).map(|(p, l)| p == l).collect()
    }
}

/// Accuracy (argmax, ties to class 0) and mean cross-entropy of class
/// probabilities `[N, C]` against `labels`.
pub fn score<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<(f64, f64)> {
    if probs.rank() != 2 || probs.rows() != labels.len() || labels.is_empty() {
        return Err(AadError::invalid(format!("{} labels for probabilities {:?}", labels.len(), probs.shape())));
    }
    let c = probs.cols();
    let pred = argmax_rows(probs);
    let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    let loss: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -probs.data()[i * c + l].as_f64().max(f64::MIN_POSITIVE).ln())
        .sum();
    let n = labels.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

/// Evaluation-mode accuracy and loss over `indices` of `data`.
pub fn evaluate<T: Scalar, S: TrialSource>(
    model: &AadModel<T>,
    data: &S,
    indices: &[usize],
    ablation: AblationMode,
    batch_size: usize,
) -> Result<EvalResult> {
    if indices.is_empty() {
        return Err(AadError::invalid("cannot evaluate an empty trial set"));
    }
    let mut predictions = Vec::with_capacity(indices.len());
    let mut all_labels = Vec::with_capacity(indices.len());
    let (mut correct, mut loss) = (0usize, 0.0);
    for chunk in indices.chunks(batch_size.max(1)) {
        let (batch, labels) = data.batch::<T>(chunk)?;
        let probs = model.predict(&batch, ablation)?;
        let (_, l) = score(&probs, &labels)?;
        let pred = argmax_rows(&probs);
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
        loss += l * chunk.len() as f64;
        predictions.extend(pred);
        all_labels.extend(labels);
    }
    let n = indices.len();
    Ok(EvalResult { accuracy: correct as f64 / n as f64, loss: loss / n as f64, n, predictions, labels: all_labels })
}

/// Splits a shuffled index list into batches; a lone trailing trial joins
/// the previous batch since batch norm needs two samples in training.
pub fn make_batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut batches: Vec<&[usize]> = order.chunks(batch_size).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        batches.pop();
        let n = batches.len();
        let start = (n - 1) * batch_size;
        batches[n - 1] = &order[start..];
    }
    batches
}

/// Per-epoch callbacks; used by fine-tuning to ramp and verify masks.
pub trait EpochHook<T: Scalar> {
    fn before_epoch(&mut self, _epoch: usize, _trainer: &mut Trainer<T>) -> Result<()> {
        Ok(())
    }

    fn after_epoch(&mut self, _epoch: usize, _trainer: &mut Trainer<T>, _metrics: &[EpochMetrics]) -> Result<()> {
        Ok(())
    }
}

impl<T: Scalar> EpochHook<T> for () {}

/// Mutable training state: model, optimizer, generator and optional
/// weight mask.
pub struct Trainer<T: Scalar> {
    pub model: AadModel<T>,
    pub adam: Adam<T>,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    keep: Option<Vec<Option<Vec<bool>>>>,
    epoch: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: AadModel<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if model.config().duration_s != cfg.duration_s {
            return Err(AadError::invalid(format!(
                "model expects {} s trials, config says {} s",
                model.config().duration_s,
                cfg.duration_s
            )));
        }
        let adam = Adam::new(cfg.lr, model.params());
        // stream 1 keeps shuffling/dropout apart from weight initialisation
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Trainer { model, adam, cfg, rng, keep: None, epoch: 0 })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn mask(&self) -> Option<&[Option<Vec<bool>>]> {
        self.keep.as_deref()
    }

    /// Installs a keep-mask aligned with the parameter store: masked weights
    /// and their Adam moments are zeroed now and after every update.
    pub fn set_mask(&mut self, keep: Option<Vec<Option<Vec<bool>>>>) -> Result<()> {
        if let Some(k) = &keep {
            let store = self.model.params();
            if k.len() != store.len() {
                return Err(AadError::invalid(format!("mask covers {} tensors, model has {}", k.len(), store.len())));
            }
            for (m, p) in k.iter().zip(store.iter()) {
                if let Some(m) = m {
                    if m.len() != p.value.numel() {
                        return Err(AadError::ShapeMismatch { expected: p.value.shape().to_vec(), actual: vec![m.len()] });
                    }
                }
            }
            for (m, p) in k.iter().zip(self.model.params_mut().iter_mut()) {
                if let Some(m) = m {
                    for (w, &keep) in p.value.data_mut().iter_mut().zip(m) {
                        if !keep {
                            *w = T::zero();
                        }
                    }
                }
            }
            self.adam.zero_moments(k);
        }
        self.keep = keep;
        Ok(())
    }

    /// One optimizer step; returns the batch loss and the number correct.
    pub fn step<S: TrialSource>(&mut self, data: &S, indices: &[usize]) -> Result<(f64, usize)> {
        let (batch, labels) = data.batch::<T>(indices)?;
        let replay = self.rng.clone();
        let bn = self.model.params().bn_snapshot();
        self.model.set_layer_checks(false);
        let mut tape = Tape::new();
        let vars = self.model.params().bind(&mut tape);
        let logits = self.model.forward(&mut tape, &vars, &batch, Mode::Train, AblationMode::None, &mut self.rng)?;
        let (loss, probs) = tape.softmax_cross_entropy(logits, &labels)?;
        let loss_value = tape.value(loss).data()[0].as_f64();
        if !loss_value.is_finite() {
            // replay the batch with per-layer checks to name the culprit
            drop(tape);
            self.model.params_mut().restore_bn(bn);
            self.model.set_layer_checks(true);
            let mut rng = replay;
            let mut tape = Tape::new();
            let vars = self.model.params().bind(&mut tape);
            self.model.forward(&mut tape, &vars, &batch, Mode::Train, AblationMode::None, &mut rng)?;
            return Err(AadError::NonFinite { layer: "loss".into() });
        }
        let correct = argmax_rows(&probs).iter().zip(&labels).filter(|(p, l)| p == l).count();
        tape.backward(loss)?;
        self.model.params_mut().collect_grads(&mut tape, &vars);
        self.adam.step(self.model.params_mut(), self.keep.as_deref());
        self.model.set_layer_checks(true);
        Ok((loss_value, correct))
    }

    /// One pass over `train` in a fresh seeded order. Loss and accuracy are
    /// running training-mode figures.
    pub fn train_epoch<S: TrialSource>(&mut self, data: &S, train: &[usize]) -> Result<EpochMetrics> {
        if train.len() < 2 {
            return Err(AadError::invalid("training needs at least two trials"));
        }
        let mut order = train.to_vec();
        order.shuffle(&mut self.rng);
        let (mut loss, mut correct) = (0.0, 0usize);
        for b in make_batches(&order, self.cfg.batch_size) {
            let (l, c) = self.step(data, b)?;
            loss += l * b.len() as f64;
            correct += c;
        }
        self.epoch += 1;
        let n = order.len() as f64;
        Ok(EpochMetrics { epoch: self.epoch, split: Split::Train, loss: loss / n, accuracy: correct as f64 / n })
    }

    /// Trains for `epochs` more epochs, evaluating validation and test after
    /// each. With `out`, metrics stream to `metrics.csv` and checkpoints are
    /// written every `checkpoint_every` epochs and at the end.
    pub fn fit<S: TrialSource>(
        &mut self,
        data: &S,
        plan: &SplitPlan,
        epochs: usize,
        out: Option<&Path>,
        hook: &mut dyn EpochHook<T>,
    ) -> Result<FitOutcome> {
        let train = plan.indices(Split::Train);
        let held: Vec<(Split, Vec<usize>)> = [Split::Validation, Split::Test]
            .into_iter()
            .map(|s| (s, plan.indices(s)))
            .filter(|(_, idx)| !idx.is_empty())
            .collect();
        let mut csv = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let mut f = File::create(dir.join("metrics.csv"))?;
                writeln!(f, "epoch,split,loss,accuracy")?;
                Some(f)
            }
            None => None,
        };
        let mut outcome = FitOutcome::default();
        let last = self.epoch + epochs;
        for _ in 0..epochs {
            hook.before_epoch(self.epoch + 1, self)?;
            let mut rows = vec![self.train_epoch(data, &train)?];
            for (split, idx) in &held {
                let r = evaluate(&self.model, data, idx, AblationMode::None, self.cfg.batch_size)?;
                rows.push(EpochMetrics { epoch: self.epoch, split: *split, loss: r.loss, accuracy: r.accuracy });
            }
            if let Some(f) = csv.as_mut() {
                for m in &rows {
                    writeln!(f, "{},{},{},{}", m.epoch, m.split, m.loss, m.accuracy)?;
                }
                f.flush()?;
            }
            hook.after_epoch(self.epoch, self, &rows)?;
            if let Some(dir) = out {
                if self.epoch.is_multiple_of(self.cfg.checkpoint_every) || self.epoch == last {
                    let path = dir.join(format!("checkpoint-epoch{:03}.bin", self.epoch));
                    save_checkpoint(&path, &self.model.params().named_tensors())?;
                    outcome.checkpoints.push(path);
                }
            }
            outcome.metrics.extend(rows);
        }
        Ok(outcome)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub checkpoints: Vec<PathBuf>,
}

impl FitOutcome {
    /// Per-epoch accuracies for one split, in epoch order.
    pub fn accuracies(&self, split: Split) -> Vec<f64> {
        accuracies(&self.metrics, split)
    }
}

pub fn accuracies(metrics: &[EpochMetrics], split: Split) -> Vec<f64> {
    metrics.iter().filter(|m| m.split == split).map(|m| m.accuracy).collect()
}

/// Reads a `metrics.csv` written by [`Trainer::fit`].
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(AadError::from)).collect()
}
