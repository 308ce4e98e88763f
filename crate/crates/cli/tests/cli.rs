use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lung_anomaly::encode::{write_embeddings, Embedding, EmbeddingSet, Provenance};
use lung_anomaly::eval::MetricsReport;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lung-anomaly"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn cli")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

const FLOW_CONFIG: &str = r#"{"n_blocks": 2, "hidden": 8, "batch_size": 16, "epochs": 3}"#;

/// Runs the whole pipeline with relative paths inside `dir`.
fn pipeline(dir: &Path) {
    fs::write(dir.join("flow.json"), FLOW_CONFIG).unwrap();
    ok(
        dir,
        &[
            "synth",
            "--healthy",
            "10",
            "--diseased",
            "10",
            "--size",
            "40",
            "--seed",
            "1",
            "--out",
            "cohort",
        ],
    );
    ok(
        dir,
        &[
            "extract",
            "--manifest",
            "cohort/manifest.json",
            "--patch-size",
            "16",
            "--overlap",
            "0.2",
            "--seed",
            "2",
            "--out",
            "patches",
        ],
    );
    ok(
        dir,
        &[
            "make-pairs",
            "--patches",
            "patches",
            "--seed",
            "3",
            "--split",
            "train",
            "--out",
            "pairs",
        ],
    );
    for split in ["train", "val", "test"] {
        ok(
            dir,
            &[
                "featurize",
                "--patches",
                "patches",
                "--encoder",
                "handcrafted",
                "--split",
                split,
                "--out",
                &format!("{split}.emb1"),
            ],
        );
    }
    ok(
        dir,
        &[
            "featurize",
            "--encoder",
            "external",
            "--emb",
            "train.emb1",
            "--out",
            "copy.emb1",
        ],
    );
    ok(
        dir,
        &[
            "fit",
            "--emb",
            "train.emb1",
            "--model",
            "gmm",
            "--k",
            "2",
            "--seed",
            "4",
            "--out",
            "gmm2.model",
        ],
    );
    ok(
        dir,
        &[
            "fit",
            "--emb",
            "train.emb1",
            "--model",
            "nf",
            "--config",
            "flow.json",
            "--seed",
            "5",
            "--out",
            "nf.model",
        ],
    );
    for m in ["gmm2", "nf"] {
        let model = format!("{m}.model");
        ok(
            dir,
            &[
                "score",
                "--model",
                &model,
                "--emb",
                "val.emb1",
                "--labels",
                "patches",
                "--out",
                &format!("{m}.val.csv"),
            ],
        );
        ok(
            dir,
            &[
                "score",
                "--model",
                &model,
                "--emb",
                "test.emb1",
                "--labels",
                "cohort/manifest.json",
                "--out",
                &format!("{m}.test.csv"),
            ],
        );
        ok(
            dir,
            &[
                "evaluate",
                "--scores",
                &format!("{m}.test.csv"),
                "--val-scores",
                &format!("{m}.val.csv"),
                "--model",
                &model,
                "--out",
                &format!("{m}.json"),
            ],
        );
    }
    ok(
        dir,
        &["select", "--reports", "gmm2.json", "nf.json", "--out", "best.json"],
    );
}

#[test]
fn full_pipeline_emits_finite_report() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let report: MetricsReport =
        serde_json::from_str(&fs::read_to_string(dir.path().join("gmm2.json")).unwrap()).unwrap();
    assert!(report.auroc.is_finite() && (0.0..=1.0).contains(&report.auroc));
    assert_eq!(report.model, "gmm2");
    assert_eq!(report.n, 4);
    assert_eq!(
        fs::read(dir.path().join("copy.emb1")).unwrap(),
        fs::read(dir.path().join("train.emb1")).unwrap()
    );
    let best: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("best.json")).unwrap()).unwrap();
    assert!(best["selected"].is_string());
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for file in [
        "cohort/manifest.json",
        "cohort/healthy_0000.vol1.raw",
        "patches/patches.json",
        "patches/diseased_0003.pst1.raw",
        "pairs/pairs.raw",
        "pairs/pairs.json",
        "train.emb1",
        "gmm2.model",
        "nf.model",
        "nf.test.csv",
        "gmm2.json",
        "best.json",
    ] {
        assert_eq!(
            fs::read(a.path().join(file)).unwrap(),
            fs::read(b.path().join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn too_few_normal_rows_for_k_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut set = EmbeddingSet::new(2, Provenance::External);
    set.rows = (0..6)
        .map(|i| Embedding {
            values: vec![i as f32, (i * i) as f32],
            patient_id: "p".into(),
            patch_index: i,
            normal_flag: i < 4,
        })
        .collect();
    write_embeddings(&set, dir.path().join("four.emb1")).unwrap();
    let out = run(
        dir.path(),
        &["fit", "--emb", "four.emb1", "--model", "gmm", "--k", "8", "--out", "m"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n < k"));
    assert!(!dir.path().join("m").exists());
}

#[test]
fn no_normal_rows_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut set = EmbeddingSet::new(1, Provenance::External);
    set.rows.push(Embedding {
        values: vec![1.0],
        patient_id: "p".into(),
        patch_index: 0,
        normal_flag: false,
    });
    write_embeddings(&set, dir.path().join("x.emb1")).unwrap();
    let out = run(dir.path(), &["fit", "--emb", "x.emb1", "--model", "gmm", "--out", "m"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_codes_separate_bad_input_from_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let missing = run(
        dir.path(),
        &["fit", "--emb", "absent.emb1", "--model", "gmm", "--out", "m"],
    );
    assert_eq!(missing.status.code(), Some(1));
    let bad_strategy = run(
        dir.path(),
        &[
            "score",
            "--model",
            "m",
            "--emb",
            "e",
            "--strategy",
            "p50",
            "--labels",
            "l",
            "--out",
            "o",
        ],
    );
    assert_eq!(bad_strategy.status.code(), Some(2));
    fs::write(dir.path().join("bad.json"), r#"{"n_blocks": 2, "unknown": 1}"#).unwrap();
    let mut set = EmbeddingSet::new(1, Provenance::External);
    set.rows.push(Embedding {
        values: vec![1.0],
        patient_id: "p".into(),
        patch_index: 0,
        normal_flag: true,
    });
    write_embeddings(&set, dir.path().join("x.emb1")).unwrap();
    let bad_config = run(
        dir.path(),
        &[
            "fit", "--emb", "x.emb1", "--model", "nf", "--config", "bad.json", "--out", "m",
        ],
    );
    assert_eq!(bad_config.status.code(), Some(2));
}
