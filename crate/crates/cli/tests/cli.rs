//! End-to-end runs of the `jebm` binary on tiny models.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clap::CommandFactory;
use jebm::data::load_dataset;
use jebm::model::load_checkpoint;
use jebm::rng::chain_streams;
use jebm::samplers::ancestral_sample;

const TINY: &str = r#"schema_version = 1

[model]
latent_dims = [2, 2]
data_dim = 2
energy_hidden = [8]
conditional_hidden = []
decoder_hidden = [8]
encoder_hidden = [8]

[prior_sampler]
steps = 5

[posterior_sampler]
steps = 5
step_size = 0.05

[trainer]
mode = "two_stage"
iterations = 6
batch_size = 16
seed = 3
log_every = 2
checkpoint_every = 3

[data]
source = "mixture"
n = 64
"#;

fn jebm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jebm")).args(args).output().expect("run jebm")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes `config` and trains on it; returns the output directory.
fn train(dir: &Path, config: &str) -> PathBuf {
    let cfg = dir.join("run.toml");
    fs::write(&cfg, config).unwrap();
    let out = dir.join("run");
    let o = jebm(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn lines(p: &Path) -> Vec<String> {
    fs::read_to_string(p).unwrap().lines().map(String::from).collect()
}

#[test]
fn zero_iterations_write_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), &TINY.replace("iterations = 6", "iterations = 0"));
    assert!(out.join("final/manifest.json").exists());
    assert!(!out.join("checkpoints").exists());
    assert_eq!(fs::read_to_string(out.join("metrics.jsonl")).unwrap(), "");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "completed");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn training_logs_and_checkpoints_on_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), TINY);
    let iters: Vec<u64> = lines(&out.join("metrics.jsonl"))
        .iter()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["iter"].as_u64().unwrap())
        .collect();
    assert_eq!(iters, [2, 4, 6]);
    assert!(out.join("checkpoints/iter-000003").exists());
    assert!(!out.join("checkpoints/iter-000006").exists());
}

#[test]
fn resume_appends_to_the_metrics_of_an_earlier_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), TINY);
    let cfg = dir.path().join("more.toml");
    fs::write(&cfg, TINY.replace("iterations = 6", "iterations = 8")).unwrap();
    let o = jebm(&["train", "--config", s(&cfg), "--out", s(&out), "--resume", s(&out.join("final"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let iters: Vec<u64> = lines(&out.join("metrics.jsonl"))
        .iter()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["iter"].as_u64().unwrap())
        .collect();
    assert_eq!(iters, [2, 4, 6, 8]);
}

#[test]
fn config_errors_exit_2_with_the_parse_location() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "schema_version = 1\n[model\n").unwrap();
    let o = jebm(&["train", "--config", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2"), "{}", err);

    fs::write(&bad, "schema_version = 7\n").unwrap();
    let o = jebm(&["train", "--config", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));

    let o = jebm(&["train", "--config", s(&dir.path().join("missing.toml")), "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    let o = jebm(&["sample", "--n", "3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_step_sampling_is_ancestral_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), TINY);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let o = jebm(&["sample", "--ckpt", s(&out), "--n", "7", "--steps", "0", "--seed", "4", "--out", s(p)]);
        assert!(o.status.success());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let model = load_checkpoint(&out.join("final")).unwrap().model;
    let mut rngs = chain_streams(4, "sample", 0, 7);
    let z = ancestral_sample(&model.prior, &mut rngs).unwrap();
    let mean = model.decoder.mean(z.layer(0)).unwrap();
    let got = load_dataset(&a).unwrap();
    for (g, m) in got.data().iter().zip(mean.data()) {
        assert_eq!(*g, *m as f32);
    }

    let empty = dir.path().join("empty.csv");
    let o = jebm(&["sample", "--ckpt", s(&out), "--n", "0", "--out", s(&empty)]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(&empty).unwrap(), "");
}

#[test]
fn chain_records_keep_every_tenth_step() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), TINY);
    let rec = dir.path().join("chains");
    let o = jebm(&[
        "sample", "--ckpt", s(&out), "--n", "3", "--steps", "40", "--out", s(&dir.path().join("x.ebmd")),
        "--record-chains", s(&rec),
    ]);
    assert!(o.status.success());
    // 3 chains, 5 snapshots, 2 layers of 2 coordinates.
    assert_eq!(lines(&rec.join("states.csv")).len(), 1 + 3 * 5 * 4);
    assert_eq!(lines(&rec.join("energy.csv")).len(), 1 + 3 * 41);
}

#[test]
fn viz_rows_are_chains_times_snapshots_per_layer() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), TINY);
    let data = dir.path().join("d.csv");
    fs::write(&data, "0,0\n1,1\n-1,0.5\n").unwrap();
    for (steps, snaps) in [("40", 5), ("0", 1)] {
        let v = dir.path().join(format!("viz{}", steps));
        let o = jebm(&[
            "viz-latent", "--ckpt", s(&out), "--data", s(&data), "--steps", steps, "--n-chains", "6", "--out", s(&v),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        for layer in 1..=2 {
            let prior = lines(&v.join(format!("prior_layer{}.csv", layer)));
            assert_eq!(prior[0], "chain,step,x,y");
            assert_eq!(prior.len() - 1, 6 * snaps);
            assert_eq!(lines(&v.join(format!("posterior_layer{}.csv", layer))).len() - 1, 3);
        }
    }
}

#[test]
fn ood_evaluation_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), TINY);
    let data = dir.path().join("d.csv");
    fs::write(&data, "0,0\n1,1\n-1,0.5\n2,-1\n").unwrap();
    let report = dir.path().join("r/ood.json");
    let run = |k: &str| {
        jebm(&[
            "eval-ood", "--ckpt", s(&out), "--in-data", s(&data), "--out-data", s(&data), "--k", k, "--report",
            s(&report),
        ])
    };
    assert_eq!(run("3").status.code(), Some(2));

    assert!(run("0").status.success());
    let rows = lines(&report.with_extension("csv"));
    assert_eq!(rows[0], "id,label,k,score,score_type");
    assert_eq!(rows.len(), 1 + 2 * 8);
    for r in rows.iter().filter(|r| r.ends_with(",LLR")) {
        assert_eq!(r.split(',').nth(3).unwrap(), "0");
    }

    // Identical sets score identically, so every ranking metric sits at chance.
    assert!(run("2").status.success());
    let reports: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for r in reports.as_array().unwrap() {
        assert_eq!(r["auroc"], 0.5);
        assert_eq!(r["positive_class"], "in-distribution");
    }
}

#[test]
fn anomaly_evaluation_needs_labels() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), TINY);
    let cfg = dir.path().join("run.toml");
    let unlabeled = dir.path().join("d.csv");
    let labeled = dir.path().join("d.ebmd");
    for p in [&unlabeled, &labeled] {
        assert!(jebm(&["gen-data", "--config", s(&cfg), "--out", s(p), "--n", "40"]).status.success());
    }
    let report = dir.path().join("ad.json");
    let o = jebm(&["eval-ad", "--ckpt", s(&out), "--data", s(&unlabeled), "--heldout-label", "1", "--report", s(&report)]);
    assert_eq!(o.status.code(), Some(2));
    let o = jebm(&["eval-ad", "--ckpt", s(&out), "--data", s(&labeled), "--heldout-label", "1", "--report", s(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let reports: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(reports[0]["positive_class"], "anomaly");
    assert_eq!(reports[0]["n_positive"].as_u64().unwrap() + reports[0]["n_negative"].as_u64().unwrap(), 40);
}

#[test]
fn gradcheck_passes_and_fails_on_a_corrupted_gradient() {
    assert_eq!(jebm(&["gradcheck", "--points", "2"]).status.code(), Some(0));
    assert_eq!(jebm(&["gradcheck", "--points", "2", "--corrupt"]).status.code(), Some(1));
    assert_eq!(jebm(&["gradcheck", "--dims", "2,x"]).status.code(), Some(2));
}

#[test]
fn ablation_reads_the_mixture_from_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), TINY);
    let table = dir.path().join("abl.csv");
    let o = jebm(&["ablate-steps", "--ckpt", s(&out), "--n", "50", "--steps-list", "0,5", "--out", s(&table)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = lines(&table);
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("0,") && rows[2].starts_with("5,"));
}

#[test]
fn every_flag_has_help_text() {
    let cmd = jebm_cli::Cli::command();
    for sub in cmd.get_subcommands() {
        for arg in sub.get_arguments() {
            if arg.is_hide_set() || ["help", "version"].contains(&arg.get_id().as_str()) {
                continue;
            }
            assert!(arg.get_help().is_some(), "{} --{} has no help", sub.get_name(), arg.get_id());
        }
    }
}
