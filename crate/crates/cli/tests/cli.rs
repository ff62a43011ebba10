//! End-to-end runs of the `nclip` binary on small worlds.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nclip::training::BatchStats;

const SMALL: [&str; 8] = [
    "--set",
    "world.num_pairs=640",
    "--set",
    "schedule.total_epochs=2",
    "--set",
    "schedule.warmup_epochs=1",
    "--set",
    "eval.heldout_pairs=128",
];

fn nclip(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nclip"))
        .current_dir(dir)
        .arg("-q")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL).collect()
}

#[test]
fn usage_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&nclip(d.path(), &["no-such-command"])), 2);
    assert_eq!(code(&nclip(d.path(), &["train", "--set", "objective.lamda2=1"])), 2);
    assert_eq!(
        code(&nclip(
            d.path(),
            &["gen-data", "--set", "world.max_concepts=99", "--out", "x.bin"]
        )),
        2
    );
    assert_eq!(code(&nclip(d.path(), &["eval", "--checkpoint", "missing.json"])), 2);
    assert_eq!(code(&nclip(d.path(), &["report", "--out", "r", "."])), 2);
    assert_eq!(code(&nclip(d.path(), &["--help"])), 0);
}

#[test]
fn gen_data_depends_on_seed() {
    let d = tempfile::tempdir().unwrap();
    for (seed, out) in [("0", "a.bin"), ("0", "b.bin"), ("1", "c.bin")] {
        let o = nclip(
            d.path(),
            &["gen-data", "--seed", seed, "--set", "world.num_pairs=64", "--out", out],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let read = |n: &str| fs::read(d.path().join(n)).unwrap();
    assert_eq!(read("a.bin"), read("b.bin"));
    assert_ne!(read("a.bin"), read("c.bin"));
}

#[test]
fn gradcheck_passes_and_catches_a_sign_flip() {
    let d = tempfile::tempdir().unwrap();
    let ok = nclip(d.path(), &["gradcheck", "--seeds", "2", "--shapes", "4x8"]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let flipped = nclip(
        d.path(),
        &[
            "gradcheck",
            "--loss",
            "clip",
            "--seeds",
            "1",
            "--shapes",
            "4x8",
            "--inject-sign-flip",
        ],
    );
    assert_eq!(code(&flipped), 1);
    assert_eq!(code(&nclip(d.path(), &["gradcheck", "--loss", "clipp"])), 2);
}

#[test]
fn train_resume_and_replay_are_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let o = nclip(d.path(), &with_small(&["train", "--out", "full"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let full = d.path().join("full");
    for f in [
        "config.json",
        "metrics.jsonl",
        "model.json",
        "summary.json",
        "checkpoints/epoch-0001.json",
    ] {
        assert!(full.join(f).is_file(), "missing {f}");
    }
    let log = fs::read(full.join("metrics.jsonl")).unwrap();

    // replaying the snapshot reproduces the log
    let o = nclip(d.path(), &["train", "--config", "full/config.json", "--out", "replay"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(d.path().join("replay/metrics.jsonl")).unwrap(), log);

    // resuming after the first epoch reproduces it too
    let o = nclip(d.path(), &with_small(&["train", "--out", "part", "--epochs", "2"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let part = d.path().join("part");
    let lines: Vec<&str> = std::str::from_utf8(&log).unwrap().lines().collect();
    fs::write(part.join("metrics.jsonl"), lines[..lines.len() / 2].join("\n") + "\n").unwrap();
    fs::remove_file(part.join("checkpoints/epoch-0002.json")).unwrap();
    let o = nclip(
        d.path(),
        &["train", "--out", "part", "--resume", "part/checkpoints/epoch-0001.json"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(part.join("metrics.jsonl")).unwrap(), log);

    let o = nclip(
        d.path(),
        &["train", "--out", "x", "--resume", "part/checkpoints/epoch-0009.json"],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn smoothness_only_training_reports_collapse() {
    let d = tempfile::tempdir().unwrap();
    let args = [
        "train",
        "--objective",
        "nclip",
        "--out",
        "run",
        "--set",
        "objective.lambda1=0",
        "--set",
        "objective.lambda2=1",
        "--set",
        "world.num_concepts=8",
        "--set",
        "world.noise_scale=0.5",
        "--set",
        "nclip_head.output_dim=32",
        "--set",
        "schedule.total_epochs=5",
        "--set",
        "schedule.warmup_epochs=1",
        "--set",
        "schedule.peak_lr=0.004",
    ];
    let o = nclip(d.path(), &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_ne!(summary["collapse"], "none", "{summary}");
    assert!(stderr(&o).contains("collapse detected"));
}

#[test]
fn eval_warns_about_untrained_heads() {
    let d = tempfile::tempdir().unwrap();
    let o = nclip(d.path(), &with_small(&["train", "--objective", "clip", "--out", "run"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = nclip(
        d.path(),
        &[
            "eval",
            "--checkpoint",
            "run/model.json",
            "--metric",
            "neg_ce",
            "--task",
            "zeroshot",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["warnings"].as_array().unwrap().len(), 1);
    assert!(stderr(&o).contains("did not train"));

    let o = nclip(
        d.path(),
        &[
            "eval",
            "--checkpoint",
            "run/model.json",
            "--task",
            "retrieval",
            "--task",
            "probe",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["warnings"].as_array().unwrap().is_empty());
    for key in [
        "retrieval.image_to_text.r@1",
        "retrieval.text_to_image.r@10",
        "probe.accuracy",
    ] {
        assert!(report["values"][key].is_number(), "missing {key}");
    }
}

#[test]
fn sweep_resumes_and_rejects_unknown_axes() {
    let d = tempfile::tempdir().unwrap();
    let base = with_small(&["sweep", "--axis", "objective.lambda2", "--out", "sw"]);
    let mut first = base.clone();
    first.extend(["--values", "1.0,1.5"]);
    let o = nclip(d.path(), &first);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let mut second = base.clone();
    second.extend(["--values", "1.0,1.5,2.0"]);
    let o = nclip(d.path(), &second);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(d.path().join("sw/sweep.csv")).unwrap();
    let status: Vec<String> = rdr.records().map(|r| r.unwrap()[3].to_string()).collect();
    assert_eq!(status, ["skipped", "skipped", "ran"]);

    let o = nclip(
        d.path(),
        &with_small(&["sweep", "--axis", "objective.lamda2", "--values", "1", "--out", "typo"]),
    );
    assert_eq!(code(&o), 2);
    assert!(!d.path().join("typo").exists());
}

#[test]
fn report_columns_match_the_metrics_schema() {
    let d = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = nclip(
            d.path(),
            &with_small(&["train", "--out", out, "--seed", if out == "a" { "0" } else { "1" }]),
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let o = nclip(d.path(), &["report", "a", "b", "--out", "rep"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(d.path().join("rep/runs/a.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, BatchStats::FIELDS);
    assert_eq!(rdr.records().count(), 20);
    let mut rdr = csv::Reader::from_path(d.path().join("rep/stats/row_std.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), ["step", "a", "b"]);
}
