//! Generate a synthetic corpus and train on it, printing per-epoch metrics.
//!
//! usage: synth_train <dir> [n_trials] [epochs] [snr_db] [seed]

use std::path::PathBuf;
use std::time::Instant;

use aad_core::model::{AadModel, Architecture};
use aad_core::synth::{generate_to_files, read_manifest, SynthConfig, TrialFile};
use aad_core::train::{median_last_k, split_dataset, Split, SplitFractions, TrainConfig, Trainer};

fn main() -> aad_core::Result<()> {
    aad_core::tensor::retain_heap();
    let args: Vec<String> = std::env::args().collect();
    let dir = PathBuf::from(args.get(1).map_or("/tmp/aad-synth", String::as_str));
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (n_trials, epochs, snr_db, seed) = (arg(2, 4000.0) as usize, arg(3, 20.0) as usize, arg(4, -3.0), arg(5, 0.0) as u64);
    std::fs::create_dir_all(&dir)?;
    let (container, manifest) = (dir.join("trials.bin"), dir.join("manifest.jsonl"));
    let cfg = SynthConfig { n_trials, snr_db, seed, ..SynthConfig::default() };
    if !container.exists() {
        let t = Instant::now();
        let counts = generate_to_files(&cfg, &container, &manifest)?;
        println!("generated {n_trials} trials {counts:?} in {:?}", t.elapsed());
    }
    let data = TrialFile::open(&container)?;
    let plan = split_dataset(&read_manifest(&manifest)?, &SplitFractions::default(), seed)?;
    println!(
        "split: train {} / validation {} / test {}",
        plan.indices(Split::Train).len(),
        plan.indices(Split::Validation).len(),
        plan.indices(Split::Test).len()
    );
    let tc = TrainConfig { epochs, seed, ..TrainConfig::default() };
    let model = AadModel::<f32>::new(tc.model_config(Architecture::Full), seed)?;
    let mut trainer = Trainer::new(model, tc)?;
    let t = Instant::now();
    let out = dir.join("run");
    let mut test = Vec::new();
    for _ in 0..epochs {
        let fit = trainer.fit(&data, &plan, 1, Some(&out.join(format!("e{}", trainer.epoch() + 1))), &mut ())?;
        for m in &fit.metrics {
            println!("epoch {} {:<10} loss {:.4} acc {:.4}  [{:?}]", m.epoch, m.split, m.loss, m.accuracy, t.elapsed());
        }
        test.extend(fit.accuracies(Split::Test));
    }
    if test.len() >= 5 {
        println!("median last 5 test accuracy: {:.4}", median_last_k(&test, 5)?);
    }
    Ok(())
}
