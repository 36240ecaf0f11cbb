use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ciqa::confounder::{save_dictionary, ConfounderDictionary};
use serde_json::Value;

fn ciqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ciqa"))
        .args(args)
        .env_remove("CIQA_CACHE_DIR")
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = ciqa(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    graph: PathBuf,
    manifest: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let bb = ok_json(&["make-backbone", "--arch", "tiny", "--seed", "1", "--out", p(dir.path())]);
    assert_eq!(bb["backbone_id"], "tiny-synth-1");
    let corpus = dir.path().join("corpus");
    let synth = ok_json(&[
        "synth", "--out", p(&corpus), "--refs", "2", "--size", "40", "--levels", "3", "--seed", "4",
    ]);
    assert_eq!(synth["records"], 18);
    Fixture {
        graph: PathBuf::from(bb["graph"].as_str().unwrap()),
        manifest: corpus.join("manifest.csv"),
        dir,
    }
}

#[test]
fn score_identical_pair_is_zero_and_errors_map_to_exit_codes() {
    let f = fixture();
    let r = f.dir.path().join("corpus/ref00/reference.png");
    let d = f.dir.path().join("corpus/ref00/gaussian_blur_2.png");
    let s = ok_json(&["score", p(&r), p(&r), "--graph", p(&f.graph), "--mode", "theta"]);
    assert_eq!(s["value"], 0.0);
    let s = ok_json(&["score", p(&r), p(&d), "--graph", p(&f.graph), "--mode", "theta", "--emit", "per-channel"]);
    assert!(s["value"].as_f64().unwrap() > 0.0);
    assert_eq!(s["per_channel_cost"].as_array().unwrap().len(), 2);

    let small = f.dir.path().join("small.png");
    image::RgbImage::new(36, 36).save(&small).unwrap();
    let out = ciqa(&["score", p(&r), p(&small), "--graph", p(&f.graph), "--mode", "theta"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ciqa(&["score", p(&r), p(&d), "--graph", p(&f.graph)]);
    assert_eq!(out.status.code(), Some(2));
    let out = ciqa(&["score", p(&r), p(&f.dir.path().join("missing.png")), "--graph", p(&f.graph), "--mode", "theta"]);
    assert_eq!(out.status.code(), Some(2));

    let empty = f.dir.path().join("empty.csv");
    std::fs::write(&empty, "ref,dist,mos\n").unwrap();
    let out = ciqa(&["benchmark", "--oracle", "--manifest", p(&empty)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn screen_is_deterministic_and_warns_when_nearly_empty() {
    let f = fixture();
    let a = f.dir.path().join("a.ciqa");
    let b = f.dir.path().join("b.ciqa");
    let base = ["screen", "--graph", p(&f.graph), "--manifest", p(&f.manifest), "--threads", "2"];
    let sa = ok_json(&[&base[..], &["--out", p(&a)]].concat());
    ok_json(&[&base[..], &["--out", p(&b)]].concat());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(sa["channel_counts"], serde_json::json!([8, 16]));
    assert_eq!(sa["calibration_pairs"], 18);

    let strict = f.dir.path().join("strict.ciqa");
    let out = ciqa(&[&base[..], &["--out", p(&strict), "--tau-rel", "0.99"]].concat());
    assert!(out.status.success());
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    let kept: u64 = summary["causal_counts"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
    assert!(kept * 10 < 24);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nearly empty"));

    let out = ciqa(&[&base[..], &["--out", p(&strict), "--tau-rel", "1.5"]].concat());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_with_all_ones_dictionary_matches_theta() {
    let f = fixture();
    let dict = f.dir.path().join("ones.ciqa");
    save_dictionary(&ConfounderDictionary::all_ones("tiny-synth-1", &[8, 16]), &dict).unwrap();
    let out_dir = f.dir.path().join("ablation");
    let rows = ok_json(&[
        "ablate", "--graph", p(&f.graph), "--dict", p(&dict), "--manifest", p(&f.manifest),
        "--emit", "per-channel", "--out", p(&out_dir),
    ]);
    let rows = rows.as_array().unwrap();
    let get = |m: &str| rows.iter().find(|r| r["mode"] == m).unwrap();
    assert_eq!(get("theta")["srcc"], get("gamma")["srcc"]);
    assert_eq!(get("theta")["plcc"], get("gamma")["plcc"]);
    assert!(rows.iter().all(|r| r["mode"] != "eta"));
    assert_eq!(get("gamma")["channel_weights"][1].as_array().unwrap().len(), 16);
    assert!(out_dir.join("ablation.json").is_file());

    let other = f.dir.path().join("other.ciqa");
    save_dictionary(&ConfounderDictionary::all_ones("vgg16-synth-0", &[8, 16]), &other).unwrap();
    let out = ciqa(&["ablate", "--graph", p(&f.graph), "--dict", p(&other), "--manifest", p(&f.manifest)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_benchmark_and_outputs() {
    let f = fixture();
    let out_dir = f.dir.path().join("bench");
    let r = ok_json(&["benchmark", "--oracle", "--manifest", p(&f.manifest), "--out", p(&out_dir)]);
    assert!((r["plcc"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!((r["srcc"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(out_dir.join("report.json").is_file());
    let scatter = std::fs::read_to_string(out_dir.join("scatter.csv")).unwrap();
    assert_eq!(scatter.lines().count(), 19);

    let r = ok_json(&["benchmark", "--graph", p(&f.graph), "--mode", "theta", "--manifest", p(&f.manifest)]);
    assert_eq!(r["n_pairs"], 18);
    assert_eq!(r["backbone_id"], "tiny-synth-1");
    let tsv = ciqa(&["benchmark", "--oracle", "--manifest", p(&f.manifest), "--tsv"]);
    assert_eq!(String::from_utf8_lossy(&tsv.stdout).lines().count(), 2);
}

#[test]
fn export_maps_and_invariance() {
    let f = fixture();
    let r = f.dir.path().join("corpus/ref01/reference.png");
    let d = f.dir.path().join("corpus/ref01/additive_noise_3.png");
    let maps = f.dir.path().join("maps");
    let s = ok_json(&["export-maps", p(&r), p(&d), "--graph", p(&f.graph), "--out", p(&maps)]);
    assert_eq!(s["files"], 24);
    assert_eq!(std::fs::read_dir(&maps).unwrap().count(), 24);
    assert!(maps.join("stage2_ch0015.png").is_file());

    let only = f.dir.path().join("maps1");
    let s = ok_json(&[
        "export-maps", p(&r), p(&d), "--graph", p(&f.graph), "--out", p(&only), "--stages", "1",
        "--intensity-index", "0",
    ]);
    assert_eq!(s["files"], 8);
    let img = image::open(only.join("stage1_ch0003.png")).unwrap().to_luma8();
    assert!(img.pixels().all(|px| px.0[0] == 0));
    let out = ciqa(&["export-maps", p(&r), p(&d), "--graph", p(&f.graph), "--out", p(&only), "--stages", "3"]);
    assert_eq!(out.status.code(), Some(2));

    let inv = ok_json(&["check-invariance", p(&r), p(&d), "--graph", p(&f.graph), "--mode", "theta"]);
    assert!(inv["max_score_deviation"].as_f64().unwrap() >= 0.0);
}

#[test]
fn tid_manifest_conversion() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::create_dir_all(root.join("reference_images")).unwrap();
    std::fs::create_dir_all(root.join("distorted_images")).unwrap();
    std::fs::write(root.join("reference_images/I01.BMP"), b"").unwrap();
    std::fs::write(root.join("mos.txt"), "5.5 i01_01_1.bmp\n3.0 i01_01_2.bmp\n").unwrap();
    let out = ciqa(&[
        "tid-manifest", "--mos-file", p(&root.join("mos.txt")), "--root", p(root), "--out", p(&root.join("m.csv")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = ciqa::datasets::load_csv_manifest(&root.join("m.csv")).unwrap();
    assert_eq!(m.records.len(), 2);
    assert!(m.normalized);
    assert_eq!(m.records[0].dist_path, root.join("distorted_images/i01_01_1.bmp"));
}
