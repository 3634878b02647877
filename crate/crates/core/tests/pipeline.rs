use aad_core::model::{AadModel, AblationMode, Architecture};
use aad_core::sparsify::{
    compute_prune_mask, finetune, load_sparse_checkpoint, magnitude_mask, save_sparse_checkpoint, FinetuneSchedule,
};
use aad_core::synth::{generate_dataset, ManifestEntry, SynthConfig, TrialSource};
use aad_core::tensor::ParamKind;
use aad_core::train::{evaluate, split_dataset, Split, SplitFractions, TrainConfig, Trainer};
use proptest::prelude::*;

fn recording(source: &str, first: usize, n: usize, len: u64, hop: u64) -> Vec<ManifestEntry> {
    (0..n)
        .map(|j| ManifestEntry {
            trial: first + j,
            source: source.into(),
            span: [j as u64 * hop, j as u64 * hop + len],
            split: None,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_never_overlap_and_track_fractions(
        sizes in prop::collection::vec(8usize..120, 1..6),
        len in 1u64..4,
        seed in any::<u64>(),
    ) {
        // trial length `len` seconds on a 1 s hop, in 64-sample units
        let mut m = Vec::new();
        for (r, &n) in sizes.iter().enumerate() {
            let first = m.len();
            m.extend(recording(&format!("rec{r}"), first, n, 64 * len, 64));
        }
        let plan = split_dataset(&m, &SplitFractions::default(), seed).unwrap();
        plan.check_disjoint(&m).unwrap();
        for r in &plan.recordings {
            if r.note.is_some() {
                prop_assert_eq!(r.train, r.n_trials);
                continue;
            }
            let kept = r.kept() as f64;
            prop_assert!((r.train as f64 - 0.75 * kept).abs() <= 1.0);
            prop_assert!((r.validation as f64 - 0.125 * kept).abs() <= 1.0);
            prop_assert!((r.test as f64 - 0.125 * kept).abs() <= 1.0);
            // each internal boundary costs at most len - 1 trials
            prop_assert!(r.trimmed <= 2 * (len as usize - 1));
        }
    }

    #[test]
    fn magnitude_mask_drops_the_smallest(
        w in prop::collection::vec(-1.0f64..1.0, 1..200),
        s in 0.0f64..0.99,
    ) {
        let keep = magnitude_mask(&w, s).unwrap();
        let dropped: Vec<f64> = w.iter().zip(&keep).filter(|(_, k)| !**k).map(|(x, _)| x.abs()).collect();
        let kept: Vec<f64> = w.iter().zip(&keep).filter(|(_, k)| **k).map(|(x, _)| x.abs()).collect();
        prop_assert_eq!(dropped.len(), (s * w.len() as f64 + 1e-9).floor() as usize);
        let max_dropped = dropped.iter().cloned().fold(0.0, f64::max);
        prop_assert!(kept.iter().all(|k| *k >= max_dropped));
    }
}

#[test]
fn synthetic_corpus_is_balanced_and_aligned() {
    let cfg = SynthConfig { n_trials: 30, duration_s: 2, n_recordings: 3, seed: 5, ..SynthConfig::default() };
    let d = generate_dataset(&cfg).unwrap();
    assert_eq!(d.trials.len(), 30);
    let labels = d.trials.records.iter().filter(|r| r.label == 1).count();
    assert_eq!(labels, 15);
    for (i, e) in d.manifest.iter().enumerate() {
        assert_eq!(e.trial, i);
        assert_eq!(e.span[1] - e.span[0], 128);
    }
    // hints mirror a fresh plan; trimmed boundary trials carry none
    let plan = split_dataset(&d.manifest, &SplitFractions::default(), 5).unwrap();
    assert!(d.manifest.iter().zip(plan.assignments()).all(|(e, s)| e.split == *s));
    let trimmed: usize = plan.recordings.iter().map(|r| r.trimmed).sum();
    assert_eq!(d.manifest.iter().filter(|e| e.split.is_none()).count(), trimmed);
    // a different seed gives different data
    let other = generate_dataset(&SynthConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(other.trials.records[0].eeg, d.trials.records[0].eeg);
}

#[test]
fn model_memorises_a_small_batch() {
    let cfg = SynthConfig { n_trials: 12, duration_s: 2, n_recordings: 1, seed: 2, ..SynthConfig::default() };
    let data = generate_dataset(&cfg).unwrap().trials;
    let tc = TrainConfig {
        duration_s: 2,
        batch_size: 12,
        lr: 1e-3,
        eeg_dropout: 0.0,
        audio_dropout: 0.0,
        classifier_dropout: 0.0,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(AadModel::<f32>::new(tc.model_config(Architecture::Full), 0).unwrap(), tc).unwrap();
    let idx: Vec<usize> = (0..12).collect();
    let (first, _) = trainer.step(&data, &idx).unwrap();
    let mut last = first;
    for _ in 0..24 {
        last = trainer.step(&data, &idx).unwrap().0;
    }
    assert!(last < 0.1 * first, "loss {first} -> {last}");
    let eval = evaluate(&trainer.model, &data, &idx, AblationMode::None, 12).unwrap();
    assert_eq!(eval.accuracy, 1.0);
}

#[test]
fn pruned_model_survives_a_sparse_checkpoint() {
    let cfg = SynthConfig { n_trials: 24, duration_s: 2, n_recordings: 2, seed: 8, ..SynthConfig::default() };
    let d = generate_dataset(&cfg).unwrap();
    let plan = split_dataset(&d.manifest, &SplitFractions::default(), 8).unwrap();
    let tc = TrainConfig { duration_s: 2, batch_size: 8, ..TrainConfig::default() };
    let mut trainer = Trainer::new(AadModel::<f32>::new(tc.model_config(Architecture::Full), 1).unwrap(), tc.clone()).unwrap();
    let out = finetune(&mut trainer, &d.trials, &plan, FinetuneSchedule::OneShot { sparsity: 0.7 }, 1, None).unwrap();
    assert_eq!(out.sparsity.len(), 1);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sparse.bin");
    save_sparse_checkpoint(&path, &trainer.model.params().named_tensors()).unwrap();
    let mut restored = AadModel::<f32>::new(tc.model_config(Architecture::Full), 99).unwrap();
    restored.params_mut().load_named(load_sparse_checkpoint(&path).unwrap()).unwrap();
    for (a, b) in trainer.model.params().iter().zip(restored.params().iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    let test = plan.indices(Split::Test);
    let p1 = evaluate(&trainer.model, &d.trials, &test, AblationMode::None, 8).unwrap();
    let p2 = evaluate(&restored, &d.trials, &test, AblationMode::None, 8).unwrap();
    assert_eq!(p1.predictions, p2.predictions);

    // re-pruning the restored weights at the same level finds the same zeros
    let again = compute_prune_mask(restored.params(), 0.7).unwrap();
    assert_eq!(again.pruned(), out.mask.pruned());
    assert!(restored.params().iter().filter(|p| p.kind != ParamKind::Weight).all(|p| p.value.data().iter().any(|v| *v != 0.0)));
}
