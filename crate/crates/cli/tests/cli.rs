use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn aad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aad")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn kv(key: &str, path: &Path) -> String {
    format!("{key}={}", path.display())
}

#[test]
fn help_lists_every_key() {
    let o = aad(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for key in ["epochs", "lr", "snr_db", "sparsity", "schedule", "run_dir"] {
        assert!(text.contains(key), "{key} missing from help");
    }
}

#[test]
fn misspelled_key_exits_2() {
    let o = aad(&["train", "epcohs=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown config key \"epcohs\""), "{}", stderr(&o));
}

#[test]
fn bad_value_and_unknown_command_exit_2() {
    assert_eq!(aad(&["train", "epochs=many"]).status.code(), Some(2));
    assert_eq!(aad(&["fly"]).status.code(), Some(2));
}

#[test]
fn train_without_data_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = aad(&["train", &kv("run_dir", &dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("data"));
}

#[test]
fn missing_container_exits_1_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.bin");
    let o = aad(&["train", &kv("data", &missing), &kv("run_dir", &dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere.bin"), "{}", stderr(&o));
}

#[test]
fn command_line_overrides_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.conf");
    fs::write(&file, "# small corpus\nn_trials = 30\nseed=4\nduration_s=2\nn_recordings=2\n").unwrap();
    let run = dir.path().join("synth");
    let o = aad(&["synth", "--config", file.to_str().unwrap(), "n_trials=20", &kv("run_dir", &run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = json(&run.join("config.json"));
    assert_eq!(cfg["n_trials"], 20);
    assert_eq!(cfg["seed"], 4);
    let summary = json(&run.join("summary.json"));
    let counts: Vec<u64> = serde_json::from_value(summary["label_counts"].clone()).unwrap();
    assert_eq!(counts, [10, 10]);
    assert_eq!(fs::read_to_string(run.join("manifest.jsonl")).unwrap().lines().count(), 20);
}

#[test]
fn default_run_dir_is_timestamped_under_out_root() {
    let dir = tempfile::tempdir().unwrap();
    let o = aad(&["synth", "n_trials=8", "n_recordings=1", "duration_s=2", "seed=9", &kv("out_root", dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let printed = String::from_utf8_lossy(&o.stdout).trim().to_string();
    let name = Path::new(&printed).file_name().unwrap().to_string_lossy().into_owned();
    assert!(name.starts_with("synth-9-") && name.ends_with('Z'), "{name}");
    assert!(Path::new(&printed).join("trials.bin").exists());
}

/// synth -> train -> eval -> ablate -> prune -> report on a tiny corpus.
#[test]
fn full_pipeline_on_a_tiny_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s);
    let common = ["duration_s=2", "seed=1", "batch_size=8"];
    let run = |cmd: &str, extra: &[String]| {
        let mut args = vec![cmd.to_string()];
        args.extend(common.iter().map(|s| s.to_string()));
        args.extend(extra.iter().cloned());
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = aad(&args);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    };
    run("synth", &["n_trials=40".into(), "n_recordings=2".into(), kv("run_dir", &p("data"))]);
    let data = kv("data", &p("data/trials.bin"));

    run("train", &[data.clone(), "epochs=2".into(), "checkpoint_every=1".into(), kv("run_dir", &p("train"))]);
    let metrics = fs::read_to_string(p("train/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("epoch,split,loss,accuracy"));
    assert_eq!(metrics.lines().count(), 1 + 2 * 3);
    assert!(p("train/checkpoint-epoch001.bin").exists() && p("train/checkpoint-epoch002.bin").exists());
    let summary = json(&p("train/summary.json"));
    assert_eq!(summary["params_total"], 409_029);
    assert!(summary["params_prunable"].as_u64().unwrap() < 409_029);
    assert_eq!(summary["sparsity_global"], 0.0);
    assert!(summary["accuracy_median_last5"].is_null(), "two epochs have no median of five");
    let ckpt = kv("checkpoint", &p("train/checkpoint-epoch002.bin"));

    run("eval", &[data.clone(), ckpt.clone(), kv("run_dir", &p("eval"))]);
    let acc = json(&p("eval/summary.json"))["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    run("ablate", &[data.clone(), ckpt.clone(), kv("run_dir", &p("ablate"))]);
    let table = fs::read_to_string(p("ablate/ablation.csv")).unwrap();
    for mode in ["none", "zero_eeg", "zero_audio"] {
        assert!(table.lines().any(|l| l.starts_with(&format!("{mode},"))), "{table}");
    }

    run("prune", &[data, ckpt, "sparsity=0.5".into(), "finetune_epochs=1".into(), kv("run_dir", &p("prune"))]);
    let s = json(&p("prune/summary.json"));
    let global = s["sparsity_global"].as_f64().unwrap();
    assert!((global - 0.5).abs() < 0.01, "{global}");
    assert!(p("prune/pruned.bin").exists());

    // report rebuilds the summary from the pruned run's files
    let o = aad(&["report", &kv("run_dir", &p("prune"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&p("prune/report.json"));
    assert_eq!(r["params_total"], 409_029);
    assert!((r["sparsity_global"].as_f64().unwrap() - global).abs() < 1e-12);
    assert!(r["param_report"]["delta_to_reference"].as_i64().unwrap() == 409_029 - 416_741);
}

#[test]
fn report_on_missing_run_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = aad(&["report", &kv("run_dir", &dir.path().join("absent"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn preprocess_builds_trials_from_csv_and_wavs() {
    use aad_core::dsp::{write_wav_mono, RawSignal, ELECTRODES};
    let dir = tempfile::tempdir().unwrap();
    let seconds = 12;
    // extra column and shuffled order: only the named electrodes are kept
    let mut header: Vec<&str> = ELECTRODES.iter().rev().copied().collect();
    header.push("EOG");
    let mut csv = header.join(",") + "\n";
    for i in 0..128 * seconds {
        let row: Vec<String> = (0..header.len()).map(|c| format!("{:.4}", ((i * (c + 3)) as f64 * 0.05).sin())).collect();
        csv.push_str(&(row.join(",") + "\n"));
    }
    fs::write(dir.path().join("sub01.csv"), csv).unwrap();
    for (name, f) in [("a.wav", 220.0), ("b.wav", 330.0)] {
        let x: Vec<f64> = (0..16_000 * seconds).map(|i| 0.3 * (i as f64 * f * std::f64::consts::TAU / 16_000.0).sin()).collect();
        write_wav_mono(&dir.path().join(name), &RawSignal::<f64>::mono(x, 16_000).unwrap()).unwrap();
    }
    let run = dir.path().join("pre");
    let o = aad(&[
        "preprocess",
        "duration_s=3",
        "eeg_rate=128",
        &kv("eeg_csv", &dir.path().join("sub01.csv")),
        &kv("audio_a", &dir.path().join("a.wav")),
        &kv("audio_b", &dir.path().join("b.wav")),
        &kv("run_dir", &run),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    // 12 s with a 1 s hop gives 10 trials of 3 s
    assert_eq!(json(&run.join("summary.json"))["n_trials"], 10);
    let (dims, trials) = aad_core::synth::read_trials(&run.join("trials.bin")).unwrap();
    assert_eq!(dims.duration_s(), 3);
    assert_eq!(trials.len(), 10);
    assert_eq!(trials[0].eeg.shape(), [192, 10]);
    assert_eq!(trials[0].spec_a.shape(), [151, 257]);
    let manifest = fs::read_to_string(run.join("manifest.jsonl")).unwrap();
    assert!(manifest.lines().all(|l| l.contains("\"source\":\"sub01\"")));
}
