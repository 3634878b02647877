//! The joint classifier: an EEG CNN, one audio CNN shared by both
//! speakers, a BLSTM over the concatenated 48-step embedding, and an FC head.

mod config;
mod count;

pub use config::{
    AblationMode, Architecture, ClassifierConfig, CnnConfig, LayerPlan, LayerSpec, ModelConfig, EMBED_STEPS,
    N_ELECTRODES, N_FREQ_BINS, PAPER_PARAM_TOTAL,
};
pub use count::{LayerCount, ParamReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{check_duration, eeg_len, spec_frames};
use crate::error::{AadError, Result};
use crate::scalar::Scalar;
use crate::tensor::{BatchNormStats, BnId, Mode, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

/// A batch of trials: EEG `[B, T_e, 10]`, spectrograms `[B, T_s, 257]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialBatch<T> {
    pub eeg: Tensor<T>,
    pub spec_a: Tensor<T>,
    pub spec_b: Tensor<T>,
}

impl<T: Scalar> TrialBatch<T> {
    pub fn len(&self) -> usize {
        self.eeg.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    name: String,
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
    bn: BnId,
    plan: LayerPlan,
}

/// Intermediate outputs of the encoder, all on one tape.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub eeg: Var,
    pub audio_a: Var,
    pub audio_b: Var,
    pub concat: Var,
}

/// Embeddings of a batch: `[B, 48, 32]`, `[B, 48, 16]` twice, `[B, 48, 64]`.
#[derive(Clone, Debug)]
pub struct Embeddings<T> {
    pub eeg: Tensor<T>,
    pub audio_a: Tensor<T>,
    pub audio_b: Tensor<T>,
    pub concat: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct AadModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    eeg: Vec<ConvLayer>,
    audio: Vec<ConvLayer>,
    lstm: Option<[ParamId; 6]>,
    fc: Vec<(ParamId, ParamId)>,
    check_layers: bool,
}

fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

impl<T: Scalar> AadModel<T> {
    /// Builds the network with weights drawn uniformly from
    /// `±1/sqrt(fan_in)` (LSTM: `±1/sqrt(H)`, forget-gate bias 1).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        check_duration(config.duration_s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let eeg_plan = config.eeg.plan((eeg_len(config.duration_s), N_ELECTRODES))?;
        let audio_plan = config.audio.plan((spec_frames(config.duration_s), N_FREQ_BINS))?;
        let eeg = Self::build_cnn("eeg", &eeg_plan, &mut params, &mut rng);
        let audio = Self::build_cnn("audio", &audio_plan, &mut params, &mut rng);

        let eeg_feat = eeg_plan.last().map(|l| l.pooled.1 * l.conv.out_channels).unwrap_or(0);
        let audio_feat = audio_plan.last().map(|l| l.pooled.1 * l.conv.out_channels).unwrap_or(0);
        let concat_feat = eeg_feat + 2 * audio_feat;
        let cls = &config.classifier;
        if cls.n_classes < 2 || cls.hidden == 0 || cls.fc_widths.contains(&0) {
            return Err(AadError::invalid("classifier widths must be positive with at least two classes"));
        }

        let lstm = (config.architecture != Architecture::RemoveBlstm).then(|| {
            let h = cls.hidden;
            let bound = 1.0 / (h as f64).sqrt();
            let mut ids = Vec::with_capacity(6);
            for dir in ["fwd", "bwd"] {
                ids.push(params.add(format!("blstm.{dir}.w_ih"), ParamKind::Weight, uniform(&[concat_feat, 4 * h], bound, &mut rng)));
                ids.push(params.add(format!("blstm.{dir}.w_hh"), ParamKind::Weight, uniform(&[h, 4 * h], bound, &mut rng)));
                let mut bias: Tensor<T> = uniform(&[4 * h], bound, &mut rng);
                // gate order i, f, g, o
                bias.data_mut()[h..2 * h].iter_mut().for_each(|b| *b = T::one());
                ids.push(params.add(format!("blstm.{dir}.bias"), ParamKind::Bias, bias));
            }
            [ids[0], ids[1], ids[2], ids[3], ids[4], ids[5]]
        });
        let seq_feat = if lstm.is_some() { 2 * cls.hidden } else { concat_feat };
        let flat = EMBED_STEPS * seq_feat;

        let widths: Vec<usize> = match config.architecture {
            Architecture::RemoveFc => vec![cls.n_classes],
            _ => cls.fc_widths.iter().copied().chain([cls.n_classes]).collect(),
        };
        let mut fc = Vec::with_capacity(widths.len());
        let mut fan_in = flat;
        for (i, &w) in widths.iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight = params.add(format!("fc{}.weight", i + 1), ParamKind::Weight, uniform(&[fan_in, w], bound, &mut rng));
            let bias = params.add(format!("fc{}.bias", i + 1), ParamKind::Bias, uniform(&[w], bound, &mut rng));
            fc.push((weight, bias));
            fan_in = w;
        }
        Ok(AadModel { config, params, eeg, audio, lstm, fc, check_layers: true })
    }

    fn build_cnn(prefix: &str, plan: &[LayerPlan], params: &mut ParamStore<T>, rng: &mut impl Rng) -> Vec<ConvLayer> {
        plan.iter()
            .enumerate()
            .map(|(i, lp)| {
                let name = format!("{prefix}.layer{}", i + 1);
                let c = lp.conv.out_channels;
                let bound = 1.0 / (lp.conv.fan_in() as f64).sqrt();
                let weight = params.add(format!("{name}.conv.weight"), ParamKind::Weight, uniform(&lp.conv.weight_shape(), bound, rng));
                let bias = params.add(format!("{name}.conv.bias"), ParamKind::Bias, uniform(&[c], bound, rng));
                let gamma = params.add(format!("{name}.bn.gamma"), ParamKind::BnScale, Tensor::full(&[c], T::one()));
                let beta = params.add(format!("{name}.bn.beta"), ParamKind::BnShift, Tensor::zeros(&[c]));
                let bn = params.add_bn(format!("{name}.bn"), c);
                ConvLayer { name, weight, bias, gamma, beta, bn, plan: *lp }
            })
            .collect()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn eeg_plan(&self) -> Vec<LayerPlan> {
        self.eeg.iter().map(|l| l.plan).collect()
    }

    pub fn audio_plan(&self) -> Vec<LayerPlan> {
        self.audio.iter().map(|l| l.plan).collect()
    }

    /// Per-layer finiteness checks (on by default). With them off, a
    /// non-finite value only shows up in the loss; re-running the same
    /// batch with checks on names the first offending layer.
    pub fn set_layer_checks(&mut self, on: bool) {
        self.check_layers = on;
    }

    pub fn param_report(&self) -> ParamReport {
        ParamReport::from_store(&self.params)
    }

    fn check_inputs(&self, batch: &TrialBatch<T>) -> Result<()> {
        let d = self.config.duration_s;
        let b = batch.len();
        let want_eeg = [b, eeg_len(d), N_ELECTRODES];
        let want_spec = [b, spec_frames(d), N_FREQ_BINS];
        if batch.eeg.shape() != want_eeg {
            return Err(AadError::invalid(format!(
                "{d} s model expects EEG {want_eeg:?}, got {:?}",
                batch.eeg.shape()
            )));
        }
        for s in [&batch.spec_a, &batch.spec_b] {
            if s.shape() != want_spec {
                return Err(AadError::invalid(format!(
                    "{d} s model expects spectrograms {want_spec:?}, got {:?}",
                    s.shape()
                )));
            }
        }
        Ok(())
    }

    fn finite(on: bool, tape: &Tape<T>, v: Var, layer: &str) -> Result<()> {
        if !on || tape.value(v).is_finite() {
            Ok(())
        } else {
            Err(AadError::NonFinite { layer: layer.to_string() })
        }
    }

    /// `[B, T, F]` input through a CNN to `[B, 48, C * W]`.
    #[allow(clippy::too_many_arguments)]
    fn run_cnn(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        layers: &[ConvLayer],
        input: Var,
        dropout: f64,
        mode: Mode,
        rng: &mut impl Rng,
        stats: &mut [BatchNormStats<T>],
    ) -> Result<Var> {
        let check = self.check_layers;
        let s = tape.shape(input).to_vec();
        let mut x = tape.reshape(input, &[s[0], 1, s[1], s[2]])?;
        for l in layers {
            let y = tape.conv2d(x, vars[l.weight.0], vars[l.bias.0], &l.plan.conv)?;
            Self::finite(check, tape, y, &format!("{}.conv", l.name))?;
            let p = if l.plan.pool.is_identity(l.plan.conv_out.0, l.plan.conv_out.1) {
                y
            } else {
                let p = tape.maxpool2d(y, &l.plan.pool)?;
                tape.release(y);
                p
            };
            let n = tape.batchnorm(p, vars[l.gamma.0], vars[l.beta.0], &mut stats[l.bn.0], mode)?;
            Self::finite(check, tape, n, &format!("{}.bn", l.name))?;
            let d = tape.dropout(n, dropout, mode, rng)?;
            if d != n {
                tape.release(n);
            }
            let r = tape.relu(d);
            if d != n {
                tape.release(d);
            }
            if p != y {
                tape.release(p);
            }
            x = r;
        }
        let s = tape.shape(x).to_vec();
        let t = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(t, &[s[0], s[2], s[1] * s[3]])
    }

    fn masked_inputs(&self, tape: &mut Tape<T>, batch: &TrialBatch<T>, ablation: AblationMode) -> [Var; 3] {
        let zero_eeg = ablation == AblationMode::ZeroEeg;
        let zero_audio = ablation == AblationMode::ZeroAudio;
        let pick = |t: &Tensor<T>, zero: bool| if zero { Tensor::zeros(t.shape()) } else { t.clone() };
        [
            tape.leaf(pick(&batch.eeg, zero_eeg), false),
            tape.leaf(pick(&batch.spec_a, zero_audio), false),
            tape.leaf(pick(&batch.spec_b, zero_audio), false),
        ]
    }

    fn check_ablation(&self, ablation: AblationMode) -> Result<()> {
        let arch = ablation.architecture();
        if arch != Architecture::Full && arch != self.config.architecture {
            return Err(AadError::invalid(format!(
                "ablation {ablation} needs a model built with that architecture, this one is {:?}",
                self.config.architecture
            )));
        }
        Ok(())
    }

    /// Both CNNs and the concatenation. The audio CNN runs once per speaker
    /// with the same parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        batch: &TrialBatch<T>,
        mode: Mode,
        ablation: AblationMode,
        rng: &mut impl Rng,
        stats: &mut [BatchNormStats<T>],
    ) -> Result<EncoderVars> {
        self.check_inputs(batch)?;
        self.check_ablation(ablation)?;
        let [eeg_in, a_in, b_in] = self.masked_inputs(tape, batch, ablation);
        let eeg = self.run_cnn(tape, vars, &self.eeg, eeg_in, self.config.eeg.dropout, mode, rng, stats)?;
        let audio_a = self.run_cnn(tape, vars, &self.audio, a_in, self.config.audio.dropout, mode, rng, stats)?;
        let audio_b = self.run_cnn(tape, vars, &self.audio, b_in, self.config.audio.dropout, mode, rng, stats)?;
        let b = batch.len();
        let eeg_w = self.config.eeg.out_channels() * self.eeg.last().map_or(1, |l| l.plan.pooled.1);
        let audio_w = self.config.audio.out_channels() * self.audio.last().map_or(1, |l| l.plan.pooled.1);
        for (v, w) in [(eeg, eeg_w), (audio_a, audio_w), (audio_b, audio_w)] {
            if tape.shape(v) != [b, EMBED_STEPS, w] {
                return Err(AadError::ShapeMismatch { expected: vec![b, EMBED_STEPS, w], actual: tape.shape(v).to_vec() });
            }
        }
        let concat = tape.concat_last(&[eeg, audio_a, audio_b])?;
        Ok(EncoderVars { eeg, audio_a, audio_b, concat })
    }

    /// BLSTM (unless removed), flatten, FC head. Returns logits `[B, classes]`.
    pub fn classify(&self, tape: &mut Tape<T>, vars: &[Var], concat: Var, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
        let p = self.config.classifier.dropout;
        let b = tape.shape(concat)[0];
        let seq = match self.lstm {
            Some(ids) => {
                let y = tape.blstm(concat, ids.map(|id| vars[id.0]))?;
                Self::finite(self.check_layers, tape, y, "blstm")?;
                let d = tape.dropout(y, p, mode, rng)?;
                if d != y {
                    tape.release(y);
                }
                d
            }
            None => concat,
        };
        let flat_len = tape.shape(seq)[1] * tape.shape(seq)[2];
        let mut x = tape.reshape(seq, &[b, flat_len])?;
        let last = self.fc.len() - 1;
        for (i, &(w, bias)) in self.fc.iter().enumerate() {
            let y = tape.linear(x, vars[w.0], vars[bias.0])?;
            Self::finite(self.check_layers, tape, y, &format!("fc{}", i + 1))?;
            x = if i == last {
                y
            } else {
                let d = tape.dropout(y, p, mode, rng)?;
                let r = tape.relu(d);
                tape.release(y);
                tape.release(d);
                r
            };
        }
        Ok(x)
    }

    /// Full forward pass on `tape`; in training mode the running statistics
    /// in the parameter store are updated.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        vars: &[Var],
        batch: &TrialBatch<T>,
        mode: Mode,
        ablation: AblationMode,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let mut stats = self.params.bn_snapshot();
        let enc = self.encode(tape, vars, batch, mode, ablation, rng, &mut stats)?;
        let logits = self.classify(tape, vars, enc.concat, mode, rng)?;
        if mode == Mode::Train {
            self.params.restore_bn(stats);
        }
        Ok(logits)
    }

    /// Class probabilities `[B, classes]` in evaluation mode.
    pub fn predict(&self, batch: &TrialBatch<T>, ablation: AblationMode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let mut stats = self.params.bn_snapshot();
        // evaluation draws no random numbers; the generator is a placeholder
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = self.encode(&mut tape, &vars, batch, Mode::Eval, ablation, &mut rng, &mut stats)?;
        let logits = self.classify(&mut tape, &vars, enc.concat, Mode::Eval, &mut rng)?;
        Ok(crate::tensor::softmax_rows(tape.value(logits)))
    }

    /// Evaluation-mode embeddings, for inspection and shape checks.
    pub fn embeddings(&self, batch: &TrialBatch<T>, ablation: AblationMode) -> Result<Embeddings<T>> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let mut stats = self.params.bn_snapshot();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = self.encode(&mut tape, &vars, batch, Mode::Eval, ablation, &mut rng, &mut stats)?;
        Ok(Embeddings {
            eeg: tape.value(enc.eeg).clone(),
            audio_a: tape.value(enc.audio_a).clone(),
            audio_b: tape.value(enc.audio_b).clone(),
            concat: tape.value(enc.concat).clone(),
        })
    }
}

/// Predicted class per row; a tie goes to the lower class index.
pub fn argmax_rows<T: Scalar>(probs: &Tensor<T>) -> Vec<usize> {
    let c = probs.cols();
    probs
        .data()
        .chunks(c)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
        .collect()
}
