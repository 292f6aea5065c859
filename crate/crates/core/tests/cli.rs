use std::path::{Path, PathBuf};
use std::process::Command;

use mahascope::artifacts::{embedding_sections, model_from_section, samples_from_section, scores_from_section, MODEL_SECTION};
use mahascope::container::{read_container, write_container, Container, SectionKind};
use mahascope::embedding::extract_embeddings;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mahascope"))
}

fn run_ok(dir: &Path, args: &[&str]) {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn gen_and_train(dir: &Path) {
    run_ok(dir, &["gen-data", "--n", "40", "--size", "16", "--seed", "3", "--artefact", "square", "--artefact", "ring", "--out", "data.mood"]);
    run_ok(dir, &["train", "--data", "data.mood", "--preset", "mini-vgg", "--epochs", "1", "--seed", "3", "--out", "model.mood"]);
    run_ok(dir, &["fit-stats", "--model", "model.mood", "--data", "data.mood", "--out", "stats.mood"]);
    run_ok(dir, &["score", "--stats", "stats.mood", "--model", "model.mood", "--data", "data.mood", "--out", "scores.mood", "--csv-dir", "csv"]);
}

#[test]
fn full_pipeline_runs_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_and_train(dir);
    run_ok(dir, &["eval", "--scores", "scores.mood", "--out", "eval"]);
    run_ok(dir, &["combine", "--scores", "scores.mood", "--stats", "stats.mood", "--mode", "mbm", "--relu-only", "--out", "mbm"]);
    run_ok(dir, &["combine", "--csv-dir", "csv", "--stats", "stats.mood", "--mode", "weighted", "--fit-ood", "ood_ring-0.15-2", "--exclude-lhl", "--out", "weighted"]);
    run_ok(dir, &["sweep-thresholds", "--scores", "scores.mood", "--stats", "stats.mood", "--resolution", "4", "--out", "thresholds.json"]);
    run_ok(dir, &["fgsm", "--model", "model.mood", "--data", "data.mood", "--stats", "stats.mood", "--target", "branch:1", "--eps-grid", "0,0.01", "--out", "fgsm.json"]);

    let data = read_container(dir.join("data.mood")).unwrap();
    let names: Vec<&str> = data.sections.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["train", "id_test", "ood_square-0.1", "ood_ring-0.15-2"]);
    assert_eq!(samples_from_section(&data.sections[0]).unwrap().len(), 36);

    let csv = std::fs::read_to_string(dir.join("eval/auroc_ood_square-0.1.csv")).unwrap();
    let header_cols = csv.lines().next().unwrap().split(',').count();
    assert_eq!(header_cols, 1 + 15);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("eval/summary.json")).unwrap()).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 2);
    assert_eq!(summary[0]["lhl_module"], 13);

    let mbm: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("mbm/detector.json")).unwrap()).unwrap();
    assert_eq!(mbm["branches"]["branches"].as_array().unwrap().len(), 4);
    let weighted: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("weighted/detector.json")).unwrap()).unwrap();
    assert_eq!(weighted["weighted"]["include_lhl"], false);
    let th: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("thresholds.json")).unwrap()).unwrap();
    assert_eq!(th["result"]["detector"]["thresholds"].as_array().unwrap().len(), 4);
    let fgsm: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("fgsm.json")).unwrap()).unwrap();
    assert_eq!(fgsm["target_module"], 6);

    let again = tempfile::tempdir().unwrap();
    gen_and_train(again.path());
    for f in ["data.mood", "model.mood", "stats.mood", "scores.mood", "csv/id_test.csv"] {
        assert_eq!(std::fs::read(dir.join(f)).unwrap(), std::fs::read(again.path().join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn externally_written_embeddings_score_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_and_train(dir);
    let net = model_from_section(read_container(dir.join("model.mood")).unwrap().require(SectionKind::Model, MODEL_SECTION).unwrap()).unwrap();
    let data = read_container(dir.join("data.mood")).unwrap();
    let id_test = samples_from_section(data.require(SectionKind::Dataset, "id_test").unwrap()).unwrap();
    let imgs: Vec<_> = id_test.iter().map(|s| s.image.clone()).collect();
    let set = extract_embeddings(&net, &imgs, None).unwrap();

    // Same numbers laid out the way an external exporter would write them, in reverse module order.
    let mut sections = embedding_sections(&set).unwrap();
    sections.reverse();
    write_container(dir.join("external.mood"), &Container::new(sections)).unwrap();
    run_ok(dir, &["score", "--stats", "stats.mood", "--embeddings", "id_test=external.mood", "--out", "external_scores.mood"]);

    let internal = read_container(dir.join("scores.mood")).unwrap();
    let external = read_container(dir.join("external_scores.mood")).unwrap();
    let a = scores_from_section(internal.require(SectionKind::Scores, "id_test").unwrap()).unwrap();
    let b = scores_from_section(external.require(SectionKind::Scores, "id_test").unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn exit_codes_distinguish_io_and_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = bin().current_dir(tmp.path()).args(["eval", "--scores", "nope.mood", "--out", "x"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(3));
    let invalid = bin().current_dir(tmp.path()).args(["gen-data", "--n", "5", "--out", "d.mood"]).output().unwrap();
    assert_eq!(invalid.status.code(), Some(2));
    std::fs::write(tmp.path().join("junk.mood"), b"NOTMOOD").unwrap();
    let corrupt = bin().current_dir(tmp.path()).args(["eval", "--scores", "junk.mood", "--out", "x"]).output().unwrap();
    assert_eq!(corrupt.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&corrupt.stderr).contains("magic"));
    let bad_flag = bin().args(["score", "--bogus"]).output().unwrap();
    assert_eq!(bad_flag.status.code(), Some(2));
}

#[test]
fn profile_command_writes_one_column_per_module() {
    let tmp = tempfile::tempdir().unwrap();
    let out: PathBuf = tmp.path().join("profile");
    let manifest = serde_json::json!({
        "seeds": [0, 1, 2],
        "dataset": { "n": 40, "image_size": 16 },
        "artefacts": [{ "kind": "square", "area_fraction": 0.1 }],
        "preset": "mini-vgg",
        "train": { "epochs": 1, "batch_size": 8, "learning_rate": 0.02, "momentum": 0.9, "weight_decay": 0.0001, "seed": 0 },
        "output_dir": out,
    });
    std::fs::write(tmp.path().join("manifest.json"), manifest.to_string()).unwrap();
    run_ok(tmp.path(), &["profile", "--manifest", "manifest.json"]);
    let csv = std::fs::read_to_string(out.join("auroc_square-0.1.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 3 + 1);
    assert_eq!(lines[0].split(',').count() - 1, 15);
    assert!(lines[4].starts_with("mean,"));
}
