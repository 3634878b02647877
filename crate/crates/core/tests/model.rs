use aad_core::dsp::{eeg_len, spec_frames};
use aad_core::model::{
    argmax_rows, AadModel, AblationMode, Architecture, ModelConfig, TrialBatch, PAPER_PARAM_TOTAL,
};
use aad_core::tensor::{Mode, ParamKind, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch(b: usize, d: usize, seed: u64) -> TrialBatch<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |shape: &[usize], lo: f32, hi: f32| Tensor::from_fn(shape, |_| rng.random_range(lo..hi));
    TrialBatch {
        eeg: t(&[b, eeg_len(d), 10], -2.0, 2.0),
        spec_a: t(&[b, spec_frames(d), 257], 0.0, 3.0),
        spec_b: t(&[b, spec_frames(d), 257], 0.0, 3.0),
    }
}

fn slice(batch: &TrialBatch<f32>, i: usize) -> TrialBatch<f32> {
    let one = |t: &Tensor<f32>| {
        let per = t.numel() / t.shape()[0];
        let mut shape = t.shape().to_vec();
        shape[0] = 1;
        Tensor::from_vec(&shape, t.data()[i * per..(i + 1) * per].to_vec()).unwrap()
    };
    TrialBatch { eeg: one(&batch.eeg), spec_a: one(&batch.spec_a), spec_b: one(&batch.spec_b) }
}

#[test]
fn parameter_counts() {
    let model = AadModel::<f32>::new(ModelConfig::default(), 1).unwrap();
    let report = model.param_report();
    let layer = |name: &str| report.layers.iter().find(|l| l.layer == name).unwrap().clone();
    let l1 = layer("eeg.layer1");
    assert_eq!(l1.weights + l1.biases, 800);
    assert_eq!(l1.bn, 64);
    let eeg: usize = report.layers.iter().filter(|l| l.layer.starts_with("eeg.")).map(|l| l.total()).sum();
    let audio: usize = report.layers.iter().filter(|l| l.layer.starts_with("audio.")).map(|l| l.total()).sum();
    assert_eq!((eeg, audio, layer("blstm").total()), (51_328, 32_387, 24_832));
    assert_eq!(report.total, 409_029);
    assert_eq!(report.delta_to_reference, 409_029 - PAPER_PARAM_TOTAL as i64);
    let prunable: usize = model.params().iter().filter(|p| p.kind == ParamKind::Weight).map(|p| p.value.numel()).sum();
    assert_eq!(report.prunable, prunable);
    let text = report.to_string();
    assert!(text.contains("416741") && text.contains("-7712"), "{text}");
}

#[test]
fn embeddings_are_fixed_for_every_duration() {
    for d in [2, 3, 4, 5] {
        let model = AadModel::<f32>::new(ModelConfig::with_duration(d), 3).unwrap();
        let e = model.embeddings(&random_batch(2, d, d as u64), AblationMode::None).unwrap();
        assert_eq!(e.eeg.shape(), &[2, 48, 32], "{d} s");
        assert_eq!(e.audio_a.shape(), &[2, 48, 16]);
        assert_eq!(e.audio_b.shape(), &[2, 48, 16]);
        assert_eq!(e.concat.shape(), &[2, 48, 64]);
    }
}

#[test]
fn wrong_input_length_is_rejected() {
    let model = AadModel::<f32>::new(ModelConfig::default(), 3).unwrap();
    assert!(model.predict(&random_batch(1, 2, 0), AblationMode::None).is_err());
}

#[test]
fn concatenation_order_and_speaker_swap() {
    let model = AadModel::<f32>::new(ModelConfig::default(), 5).unwrap();
    let batch = random_batch(1, 3, 9);
    let e = model.embeddings(&batch, AblationMode::None).unwrap();
    let swapped = TrialBatch { eeg: batch.eeg.clone(), spec_a: batch.spec_b.clone(), spec_b: batch.spec_a.clone() };
    let s = model.embeddings(&swapped, AblationMode::None).unwrap();
    for t in 0..48 {
        let row = |x: &Tensor<f32>, lo: usize, hi: usize| x.data()[t * 64 + lo..t * 64 + hi].to_vec();
        assert_eq!(row(&e.concat, 0, 32), e.eeg.data()[t * 32..(t + 1) * 32]);
        assert_eq!(row(&e.concat, 32, 48), row(&s.concat, 48, 64));
        assert_eq!(row(&e.concat, 48, 64), row(&s.concat, 32, 48));
    }
}

#[test]
fn zero_spectrogram_gives_finite_embedding() {
    let model = AadModel::<f32>::new(ModelConfig::default(), 5).unwrap();
    let mut batch = random_batch(1, 3, 2);
    batch.spec_a = Tensor::zeros(batch.spec_a.shape());
    let e = model.embeddings(&batch, AblationMode::None).unwrap();
    assert!(e.audio_a.is_finite());
}

#[test]
fn probabilities_are_normalized_and_deterministic() {
    let model = AadModel::<f32>::new(ModelConfig::default(), 8).unwrap();
    let batch = random_batch(3, 3, 4);
    let p = model.predict(&batch, AblationMode::None).unwrap();
    for r in 0..3 {
        assert!((p.at(r, 0) as f64 + p.at(r, 1) as f64 - 1.0).abs() < 1e-6);
    }
    assert_eq!(p, model.predict(&batch, AblationMode::None).unwrap());
    assert_eq!(argmax_rows(&Tensor::from_vec(&[2, 2], vec![0.5f32, 0.5, 0.2, 0.8]).unwrap()), [0, 1]);
}

#[test]
fn batching_is_transparent() {
    let model = AadModel::<f32>::new(ModelConfig::default(), 8).unwrap();
    let batch = random_batch(3, 3, 4);
    let whole = model.embeddings(&batch, AblationMode::None).unwrap();
    for i in 0..3 {
        let single = model.embeddings(&slice(&batch, i), AblationMode::None).unwrap();
        let n = single.concat.numel();
        let part = &whole.concat.data()[i * n..(i + 1) * n];
        let diff = part.iter().zip(single.concat.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-4, "trial {i}: {diff}");
    }
}

#[test]
fn zero_eeg_ignores_eeg_content() {
    let model = AadModel::<f32>::new(ModelConfig::default(), 11).unwrap();
    let a = random_batch(2, 3, 1);
    let mut b = a.clone();
    b.eeg = random_batch(2, 3, 99).eeg;
    let pa = model.predict(&a, AblationMode::ZeroEeg).unwrap();
    assert_eq!(pa, model.predict(&b, AblationMode::ZeroEeg).unwrap());
    assert_ne!(pa, model.predict(&a, AblationMode::None).unwrap());
}

#[test]
fn removal_ablations_change_the_head() {
    let fc = |arch| {
        let cfg = ModelConfig { architecture: arch, ..ModelConfig::default() };
        AadModel::<f32>::new(cfg, 1).unwrap()
    };
    let m = fc(Architecture::RemoveFc);
    assert_eq!(m.params().get(m.params().find("fc1.weight").unwrap()).value.shape(), &[3072, 2]);
    assert!(m.params().find("fc2.weight").is_none());
    let p = m.predict(&random_batch(1, 3, 0), AblationMode::RemoveFc).unwrap();
    assert_eq!(p.shape(), &[1, 2]);
    let m = fc(Architecture::RemoveBlstm);
    assert!(m.params().find("blstm.fwd.w_ih").is_none());
    assert_eq!(m.params().get(m.params().find("fc1.weight").unwrap()).value.shape(), &[3072, 96]);
    m.predict(&random_batch(1, 3, 0), AblationMode::RemoveBlstm).unwrap();
    // a full model cannot evaluate a removal ablation
    assert!(fc(Architecture::Full).predict(&random_batch(1, 3, 0), AblationMode::RemoveFc).is_err());
}

#[test]
fn every_parameter_receives_gradient() {
    let mut model = AadModel::<f32>::new(ModelConfig::default(), 21).unwrap();
    let batch = random_batch(4, 3, 17);
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = model.forward(&mut tape, &vars, &batch, Mode::Train, AblationMode::None, &mut rng).unwrap();
    let (loss, _) = tape.softmax_cross_entropy(logits, &[0, 1, 1, 0]).unwrap();
    let l = tape.value(loss).data()[0] as f64;
    assert!((l - std::f64::consts::LN_2).abs() < 0.15, "initial loss {l}");
    tape.backward(loss).unwrap();
    model.params_mut().collect_grads(&mut tape, &vars);
    for p in model.params().iter() {
        let g = p.grad.as_ref().unwrap();
        // conv biases feeding batch norm are cancelled by the normalization;
        // their gradient is zero up to rounding
        let feeds_bn = p.kind == ParamKind::Bias && p.name.contains(".conv.");
        let max = g.max_abs();
        if feeds_bn {
            assert!(max < 1e-3, "{}: {max}", p.name);
        } else {
            assert!(max > 1e-9, "{} received no gradient", p.name);
        }
    }
}

#[test]
fn training_updates_running_statistics() {
    let mut model = AadModel::<f32>::new(ModelConfig::default(), 2).unwrap();
    let before = model.params().bn_snapshot();
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    model.forward(&mut tape, &vars, &random_batch(2, 3, 1), Mode::Train, AblationMode::None, &mut rng).unwrap();
    assert_ne!(before, model.params().bn_snapshot());
}
