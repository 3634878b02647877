//! One function per subcommand. Each writes into its own run directory.

use std::fs;
use std::path::{Path, PathBuf};

use aad_core::dsp::{preprocess_audio, preprocess_eeg, read_eeg_csv, read_wav_mono, EEG_RATE, ELECTRODES};
use aad_core::model::{AadModel, AblationMode, Architecture};
use aad_core::sparsify::{
    finetune, load_sparse_checkpoint, save_sparse_checkpoint, sparsity_report, FinetuneSchedule, SparsityReport,
};
use aad_core::synth::{TrialSource,
    generate_to_files, read_manifest, write_manifest, ManifestEntry, TrialDims, TrialFile, TrialRecord, TrialWriter,
};
use aad_core::tensor::checkpoint::load_checkpoint;
use aad_core::train::{
    accuracies, evaluate, median_last_k, read_metrics, split_dataset, wilcoxon_signed_rank, EpochMetrics, Split,
    SplitFractions, SplitPlan, Trainer,
};
use aad_core::AadError;
use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{ConfigError, RunConfig, ScheduleKind};
use crate::Command;

pub fn dispatch(command: Command, cfg: &RunConfig) -> Result<PathBuf> {
    if command == Command::Report {
        return report(cfg);
    }
    let dir = run_dir(command, cfg)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    match command {
        Command::Synth => synth(cfg, &dir)?,
        Command::Preprocess => preprocess(cfg, &dir)?,
        Command::Train => train(cfg, &dir)?,
        Command::Eval => eval(cfg, &dir)?,
        Command::Ablate => ablate(cfg, &dir)?,
        Command::Prune => prune(cfg, &dir)?,
        Command::Report => unreachable!(),
    }
    Ok(dir)
}

/// `<out_root>/<command>-<seed>-<timestamp>` unless `run_dir` is given.
fn run_dir(command: Command, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = match &cfg.run_dir {
        Some(d) => d.clone(),
        None => {
            let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
            let base = cfg.out_root.join(format!("{}-{}-{stamp}", command.name(), cfg.seed));
            let mut dir = base.clone();
            let mut k = 1;
            while dir.exists() {
                dir = PathBuf::from(format!("{}.{k}", base.display()));
                k += 1;
            }
            dir
        }
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str, command: &str) -> Result<&'a PathBuf> {
    value.as_ref().ok_or_else(|| ConfigError(format!("{command} needs {key}=<path>")).into())
}

struct Dataset {
    file: TrialFile,
    manifest: Vec<ManifestEntry>,
    plan: SplitPlan,
}

fn open_dataset(cfg: &RunConfig, command: &str) -> Result<Dataset> {
    let path = required(&cfg.data, "data", command)?;
    let file = TrialFile::open(path).with_context(|| format!("opening trial container {}", path.display()))?;
    if file.dims().duration_s() != cfg.duration_s {
        bail!("{} holds {} s trials but duration_s={}", path.display(), file.dims().duration_s(), cfg.duration_s);
    }
    let mpath = cfg.manifest_path(path);
    let manifest = read_manifest(&mpath).with_context(|| format!("reading manifest {}", mpath.display()))?;
    if manifest.len() != file.len() || manifest.iter().any(|e| e.trial >= file.len()) {
        bail!("manifest {} does not describe the {} trials in {}", mpath.display(), file.len(), path.display());
    }
    let plan = split_dataset(&manifest, &SplitFractions::default(), cfg.seed)?;
    for note in plan.notes() {
        eprintln!("warning: {note}");
    }
    Ok(Dataset { file, manifest, plan })
}

/// Dense or sparse checkpoint into a fresh model of `architecture`.
fn load_model(cfg: &RunConfig, path: &Path, architecture: Architecture) -> Result<AadModel<f32>> {
    let mut model = AadModel::new(cfg.train_config().model_config(architecture), cfg.seed)?;
    let tensors = match load_checkpoint(path) {
        Err(AadError::BadMagic { .. }) => load_sparse_checkpoint(path),
        other => other,
    }
    .with_context(|| format!("loading checkpoint {}", path.display()))?;
    model.params_mut().load_named(tensors).with_context(|| format!("checkpoint {} does not fit the model", path.display()))?;
    Ok(model)
}

fn summary(cfg: &RunConfig, model: &AadModel<f32>, metrics: &[EpochMetrics]) -> Value {
    let report = model.param_report();
    let test = accuracies(metrics, Split::Test);
    json!({
        "accuracy_median_last5": median_last_k(&test, 5).ok(),
        "accuracy_final": test.last(),
        "params_total": report.total,
        "params_prunable": report.prunable,
        "params_delta_to_reference": report.delta_to_reference,
        "sparsity_global": sparsity_report(model.params()).global_sparsity,
        "seed": cfg.seed,
        "config": cfg,
    })
}

fn synth(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let sc = cfg.synth_config()?;
    let (container, manifest) = (dir.join("trials.bin"), dir.join("manifest.jsonl"));
    let counts = generate_to_files(&sc, &container, &manifest)?;
    write_json(
        &dir.join("summary.json"),
        &json!({"n_trials": sc.n_trials, "label_counts": counts, "container": container, "manifest": manifest, "config": cfg}),
    )
}

fn preprocess(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let csv = required(&cfg.eeg_csv, "eeg_csv", "preprocess")?;
    let wav_a = required(&cfg.audio_a, "audio_a", "preprocess")?;
    let wav_b = required(&cfg.audio_b, "audio_b", "preprocess")?;
    let d = cfg.duration_s;
    let raw = read_eeg_csv::<f32>(csv, cfg.eeg_rate, Some(&ELECTRODES)).with_context(|| format!("reading {}", csv.display()))?;
    let eeg = preprocess_eeg(&raw, d)?;
    let specs = [wav_a, wav_b]
        .iter()
        .map(|p| -> Result<Vec<_>> {
            let audio = read_wav_mono::<f32>(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(preprocess_audio(&audio, d)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = eeg.len().min(specs[0].len()).min(specs[1].len());
    if n == 0 {
        bail!("recordings are shorter than one {d} s trial");
    }
    let attended = usize::from(cfg.attended == "b");
    let source = csv.file_stem().map_or("recording".into(), |s| s.to_string_lossy().into_owned());
    let container = dir.join("trials.bin");
    let mut writer = TrialWriter::create(&container, TrialDims::for_duration(d), n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut manifest = Vec::with_capacity(n);
    for (j, e) in eeg.into_iter().take(n).enumerate() {
        // present the attended speaker first or second at random
        let label = u8::from(rng.random_bool(0.5));
        let (a, b) = if label == 0 { (attended, 1 - attended) } else { (1 - attended, attended) };
        writer.push(&TrialRecord { label, eeg: e, spec_a: specs[a][j].clone(), spec_b: specs[b][j].clone() })?;
        let start = (j * EEG_RATE as usize) as u64;
        manifest.push(ManifestEntry { trial: j, source: source.clone(), span: [start, start + (d * EEG_RATE as usize) as u64], split: None });
    }
    writer.finish()?;
    let plan = split_dataset(&manifest, &SplitFractions::default(), cfg.seed)?;
    for (e, s) in manifest.iter_mut().zip(plan.assignments()) {
        e.split = *s;
    }
    write_manifest(&manifest, &dir.join("manifest.jsonl"))?;
    write_json(&dir.join("summary.json"), &json!({"n_trials": n, "container": container, "config": cfg}))
}

fn train(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let data = open_dataset(cfg, "train")?;
    write_json(&dir.join("split.json"), &serde_json::to_value(&data.plan.recordings)?)?;
    let tc = cfg.train_config();
    let model = AadModel::new(tc.model_config(Architecture::Full), cfg.seed)?;
    let mut trainer = Trainer::new(model, tc)?;
    let fit = trainer.fit(&data.file, &data.plan, cfg.epochs, Some(dir), &mut ())?;
    let mut s = summary(cfg, &trainer.model, &fit.metrics);
    s["checkpoints"] = json!(fit.checkpoints);
    write_json(&dir.join("summary.json"), &s)
}

fn eval_split(cfg: &RunConfig) -> Result<Split> {
    Ok(cfg.split.parse()?)
}

fn eval(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let ckpt = required(&cfg.checkpoint, "checkpoint", "eval")?;
    let data = open_dataset(cfg, "eval")?;
    let model = load_model(cfg, ckpt, Architecture::Full)?;
    let split = eval_split(cfg)?;
    let r = evaluate(&model, &data.file, &data.plan.indices(split), AblationMode::None, cfg.batch_size)?;
    let mut s = summary(cfg, &model, &[]);
    s["split"] = json!(split);
    s["accuracy"] = json!(r.accuracy);
    s["loss"] = json!(r.loss);
    s["n"] = json!(r.n);
    write_json(&dir.join("summary.json"), &s)
}

/// Accuracy per source recording, in a stable order.
fn per_recording(data: &Dataset, indices: &[usize], correct: &[bool]) -> Vec<(String, f64)> {
    let mut acc: std::collections::BTreeMap<&str, (usize, usize)> = Default::default();
    let source: std::collections::HashMap<usize, &str> =
        data.manifest.iter().map(|e| (e.trial, e.source.as_str())).collect();
    for (i, ok) in indices.iter().zip(correct) {
        let e = acc.entry(source[i]).or_default();
        e.0 += usize::from(*ok);
        e.1 += 1;
    }
    acc.into_iter().map(|(s, (c, n))| (s.to_string(), c as f64 / n as f64)).collect()
}

fn ablate(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let modes = cfg.ablation_modes()?;
    let data = open_dataset(cfg, "ablate")?;
    let split = eval_split(cfg)?;
    let indices = data.plan.indices(split);
    let mut dense = None;
    let mut rows = Vec::new();
    for mode in modes {
        let model = if mode.masks_inputs() || mode == AblationMode::None {
            if dense.is_none() {
                let ckpt = required(&cfg.checkpoint, "checkpoint", "ablate")?;
                dense = Some(load_model(cfg, ckpt, Architecture::Full)?);
            }
            dense.clone().expect("loaded above")
        } else {
            // architecture variants need their own training run
            let sub = dir.join(mode.name());
            let m = AadModel::new(cfg.train_config().model_config(mode.architecture()), cfg.seed)?;
            let mut trainer = Trainer::new(m, cfg.train_config())?;
            trainer.fit(&data.file, &data.plan, cfg.epochs, Some(&sub), &mut ())?;
            trainer.model
        };
        let eval_mode = if mode.masks_inputs() { mode } else { AblationMode::None };
        let r = evaluate(&model, &data.file, &indices, eval_mode, cfg.batch_size)?;
        let rec = per_recording(&data, &indices, &r.correct());
        eprintln!("{:<13} accuracy {:.4} loss {:.4} (n = {})", mode.name(), r.accuracy, r.loss, r.n);
        rows.push((mode, r, rec));
    }
    let baseline = rows.iter().find(|(m, ..)| *m == AblationMode::None).map(|(_, _, rec)| rec.clone());
    let mut csv = String::from("mode,accuracy,loss,n,wilcoxon_p_vs_none\n");
    let mut out = Vec::new();
    for (mode, r, rec) in &rows {
        let p = match &baseline {
            Some(base) if *mode != AblationMode::None => {
                let a: Vec<f64> = base.iter().map(|x| x.1).collect();
                let b: Vec<f64> = rec.iter().map(|x| x.1).collect();
                wilcoxon_signed_rank(&a, &b).ok().map(|w| w.p_value)
            }
            _ => None,
        };
        csv.push_str(&format!("{},{},{},{},{}\n", mode.name(), r.accuracy, r.loss, r.n, p.map_or(String::new(), |p| p.to_string())));
        out.push(json!({"mode": mode.name(), "accuracy": r.accuracy, "loss": r.loss, "n": r.n,
            "per_recording": rec, "wilcoxon_p_vs_none": p}));
    }
    fs::write(dir.join("ablation.csv"), csv)?;
    write_json(&dir.join("summary.json"), &json!({"split": split, "ablations": out, "config": cfg}))
}

fn prune(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let ckpt = required(&cfg.checkpoint, "checkpoint", "prune")?;
    if !(0.0..1.0).contains(&cfg.sparsity) {
        return Err(ConfigError(format!("sparsity must lie in [0, 1), got {}", cfg.sparsity)).into());
    }
    let data = open_dataset(cfg, "prune")?;
    let model = load_model(cfg, ckpt, Architecture::Full)?;
    let schedule = match cfg.schedule {
        ScheduleKind::OneShot => FinetuneSchedule::OneShot { sparsity: cfg.sparsity },
        ScheduleKind::Sequential => FinetuneSchedule::sequential(cfg.sparsity, cfg.finetune_epochs),
    };
    let mut trainer = Trainer::new(model, cfg.train_config())?;
    let out = finetune(&mut trainer, &data.file, &data.plan, schedule, cfg.finetune_epochs, Some(dir))?;
    let sparse = dir.join("pruned.bin");
    save_sparse_checkpoint(&sparse, &trainer.model.params().named_tensors())?;
    write_json(&dir.join("sparsity.json"), &serde_json::to_value(&out.sparsity)?)?;
    let mut s = summary(cfg, &trainer.model, &out.fit.metrics);
    s["schedule"] = serde_json::to_value(schedule)?;
    s["sparse_checkpoint"] = json!(sparse);
    write_json(&dir.join("summary.json"), &s)
}

fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let pruned = dir.join("pruned.bin");
    if pruned.exists() {
        return Ok(Some(pruned));
    }
    let mut found: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("checkpoint-epoch")))
        .collect();
    found.sort();
    Ok(found.pop())
}

fn write_sparsity_csv(path: &Path, r: &SparsityReport) -> Result<()> {
    let mut csv = String::from("layer,total,zeros,sparsity\n");
    for l in &r.layers {
        csv.push_str(&format!("{},{},{},{}\n", l.name, l.total, l.zeros, l.sparsity));
    }
    csv.push_str(&format!("global,{},{},{}\n", r.prunable_total, r.prunable_zeros, r.global_sparsity));
    fs::write(path, csv)?;
    Ok(())
}

/// Rebuilds the summary of an existing run from its artifacts alone.
fn report(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = required(&cfg.run_dir, "run_dir", "report")?.clone();
    if !dir.is_dir() {
        bail!("run directory {} does not exist", dir.display());
    }
    // the run's own configuration decides the model layout
    let mut run_cfg = cfg.clone();
    if let Ok(text) = fs::read_to_string(dir.join("config.json")) {
        let v: Value = serde_json::from_str(&text).context("parsing config.json")?;
        if let Some(d) = v["duration_s"].as_u64() {
            run_cfg.duration_s = d as usize;
        }
        if let Some(s) = v["seed"].as_u64() {
            run_cfg.seed = s;
        }
    }
    let metrics_path = dir.join("metrics.csv");
    let metrics = if metrics_path.exists() { read_metrics(&metrics_path)? } else { Vec::new() };
    let ckpt = latest_checkpoint(&dir)?;
    let mut s = match &ckpt {
        Some(p) => {
            let model = load_model(&run_cfg, p, Architecture::Full)?;
            let sp = sparsity_report(model.params());
            write_sparsity_csv(&dir.join("report_sparsity.csv"), &sp)?;
            let mut s = summary(&run_cfg, &model, &metrics);
            s["param_report"] = serde_json::to_value(model.param_report())?;
            s["sparsity_report"] = serde_json::to_value(&sp)?;
            s["checkpoint"] = json!(p);
            eprint!("{}", model.param_report());
            s
        }
        None => {
            let test = accuracies(&metrics, Split::Test);
            json!({"accuracy_median_last5": median_last_k(&test, 5).ok(), "params_total": null,
                "params_prunable": null, "sparsity_global": null, "config": run_cfg})
        }
    };
    s["epochs_recorded"] = json!(metrics.iter().map(|m| m.epoch).max());
    let mut csv = String::from("epoch,split,loss,accuracy\n");
    for m in &metrics {
        csv.push_str(&format!("{},{},{},{}\n", m.epoch, m.split, m.loss, m.accuracy));
    }
    fs::write(dir.join("report_metrics.csv"), csv)?;
    write_json(&dir.join("report.json"), &s)?;
    println!("{}", serde_json::to_string_pretty(&s)?);
    Ok(dir)
}
