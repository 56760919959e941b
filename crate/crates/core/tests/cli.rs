mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::small_config;
use dlglc::pipeline::report::{without_wall_time, RunReport};
use dlglc::pipeline::run::read_audit_csv;
use dlglc::pipeline::RunConfig;

fn dlglc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlglc")).args(args).output().unwrap()
}

fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let p = dir.join("small.toml");
    std::fs::write(&p, cfg.to_toml().unwrap()).unwrap();
    p.display().to_string()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn bytes(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn run_then_report_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), &RunConfig { label_noise_rate: 0.2, ..small_config() });
    let out = tmp.path().join("run");
    let out_s = out.display().to_string();
    let truth = out.join("truth.json").display().to_string();

    let o = dlglc(&["run", "--config", &cfg_path, "--out", &out_s, "--truth-sidecar", &truth]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "config.toml",
        "world.json",
        "truth.json",
        "report.jsonl",
        "checkpoints/stage1_audio.json",
        "checkpoints/iter1_audio.json",
        "checkpoints/iter2_audio.json",
        "labels/iter0.json",
        "labels/iter2.json",
        "loss_records/iter1_audio.csv",
        "loss_records/iter2_audio.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let snapshot = RunConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!(snapshot.label_noise_rate, 0.2);

    let o = dlglc(&["report", &out_s]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "gmm.csv", "loss_values.csv", "loss_histogram.csv"] {
        assert!(out.join("plots").join(f).exists(), "{f}");
    }
    // plotted loss values are exactly the recorded ones
    let mut recorded = Vec::new();
    for it in 1..=2 {
        recorded.extend(read_audit_csv(&out.join(format!("loss_records/iter{it}_audio.csv"))).unwrap().into_iter().map(|r| (it, r)));
    }
    let mut rdr = csv::Reader::from_path(out.join("plots/loss_values.csv")).unwrap();
    let plotted: Vec<(usize, (usize, usize, f64, String))> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].parse().unwrap(), (r[2].parse().unwrap(), r[3].parse().unwrap(), r[4].parse().unwrap(), r[5].to_string()))
        })
        .collect();
    assert_eq!(plotted, recorded);
    let mut hist = csv::Reader::from_path(out.join("plots/loss_histogram.csv")).unwrap();
    let total: usize = hist.records().map(|r| r.unwrap()[6].parse::<usize>().unwrap()).sum();
    assert_eq!(total, recorded.len());

    let ck = out.join("checkpoints/iter2_audio.json").display().to_string();
    let o = dlglc(&["eval", "--out", &out_s, "--checkpoint", &ck]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let line: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(line["modality"], "audio");
    let eer = line["eer"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&eer));
    let report = RunReport::read(&out.join("report.jsonl")).unwrap();
    let logged = report.iter().find_map(|l| l.row.metric("eer", "audio").filter(|_| l.row.iteration() == 2)).unwrap();
    assert_eq!(eer, logged);
}

#[test]
fn stepwise_commands_match_a_full_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), &RunConfig { label_noise_rate: 0.2, ..small_config() });
    let (full, steps) = (tmp.path().join("full"), tmp.path().join("steps"));
    let (full_s, steps_s) = (full.display().to_string(), steps.display().to_string());
    assert_eq!(code(&dlglc(&["run", "--config", &cfg_path, "--out", &full_s])), 0);

    assert_eq!(code(&dlglc(&["gen-world", "--config", &cfg_path, "--out", &steps_s])), 0);
    // later steps read the snapshot written by gen-world
    assert_eq!(code(&dlglc(&["pretrain", "--out", &steps_s])), 0);
    for it in ["1", "2"] {
        let o = dlglc(&["iterate", "--iteration", it, "--out", &steps_s]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["world.json", "checkpoints/stage1_audio.json", "checkpoints/iter2_audio.json", "labels/iter1.json", "labels/iter2.json", "loss_records/iter2_audio.csv"] {
        assert_eq!(bytes(full.join(f)), bytes(steps.join(f)), "{f}");
    }
    let a = without_wall_time(&RunReport::read(&full.join("report.jsonl")).unwrap());
    let b = without_wall_time(&RunReport::read(&steps.join("report.jsonl")).unwrap());
    assert_eq!(a, b);
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.num_iterations = 0;
    let cfg_path = write_config(tmp.path(), &cfg);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&dlglc(&["run", "--config", &cfg_path, "--out", &a.display().to_string()])), 0);
    assert_eq!(code(&dlglc(&["run", "--config", &cfg_path, "--seed", "7", "--out", &b.display().to_string()])), 0);
    assert_eq!(RunConfig::load(&b.join("config.toml")).unwrap().seed, 7);
    assert_ne!(bytes(a.join("checkpoints/stage1_audio.json")), bytes(b.join("checkpoints/stage1_audio.json")));
}

#[test]
fn missing_inputs_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("empty").display().to_string();
    assert_eq!(code(&dlglc(&["eval", "--out", &out])), 2);
    assert_eq!(code(&dlglc(&["eval", "--out", &out, "--checkpoint", "nowhere.json"])), 2);
    assert_eq!(code(&dlglc(&["pretrain", "--out", &out])), 2);
    assert_eq!(code(&dlglc(&["report", &out])), 2);
    assert_eq!(code(&dlglc(&["run", "--config", "nowhere.toml", "--out", &out])), 2);

    let cfg_path = write_config(tmp.path(), &small_config());
    assert_eq!(code(&dlglc(&["gen-world", "--config", &cfg_path, "--out", &out])), 0);
    assert_eq!(code(&dlglc(&["iterate", "--iteration", "1", "--out", &out])), 2);
}

#[test]
fn bad_configs_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run").display().to_string();
    let unknown = tmp.path().join("unknown.toml");
    std::fs::write(&unknown, "seed = 1\nnot_a_field = 3\n").unwrap();
    assert_eq!(code(&dlglc(&["gen-world", "--config", &unknown.display().to_string(), "--out", &out])), 1);

    let invalid = tmp.path().join("invalid.toml");
    std::fs::write(&invalid, "num_clusters = 0\n").unwrap();
    assert_eq!(code(&dlglc(&["gen-world", "--config", &invalid.display().to_string(), "--out", &out])), 1);

    let noise = tmp.path().join("noise.toml");
    std::fs::write(&noise, "label_noise_rate = 1.5\n").unwrap();
    assert_eq!(code(&dlglc(&["gen-world", "--config", &noise.display().to_string(), "--out", &out])), 1);

    let cfg_path = write_config(tmp.path(), &small_config());
    assert_eq!(code(&dlglc(&["gen-world", "--config", &cfg_path, "--out", &out])), 0);
    assert_eq!(code(&dlglc(&["iterate", "--iteration", "0", "--out", &out])), 1);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&dlglc(&["frobnicate"])), 2);
    assert_eq!(code(&dlglc(&["iterate"])), 2);
    assert_eq!(code(&dlglc(&["--help"])), 0);
}
