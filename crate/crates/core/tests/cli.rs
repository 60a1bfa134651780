use std::path::Path;
use std::process::{Command, Output};

use amtl::dataset::read_features;
use amtl::model::{read_checkpoint, write_checkpoint, ModelConfig, ModelParams, Variant};

fn amtl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amtl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = amtl(args);
    assert!(
        out.status.success(),
        "amtl {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, n: usize) {
    ok(&["synth", "--n", &n.to_string(), "--planted", "5", "--seed", "3", "--out-dir", s(dir)]);
}

fn read_rows(path: &Path) -> Vec<(String, Vec<f64>)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let mut f = l.split(',');
            let id = f.next().unwrap().to_string();
            (id, f.map(|v| v.parse().unwrap()).collect())
        })
        .collect()
}

const SMALL: [&str; 8] = ["--set", "d_a=4", "--set", "head_hidden=8", "--set", "batch_size=8", "--set", "val_fraction=0.2"];

fn annotations(dir: &Path, bad: bool) -> std::path::PathBuf {
    let header = "image_id,annotator_id,d1,d2,d3,d4,d5,d6,d7,d8,d9,d10,d11,d12";
    let rows = [
        "img_a,x,7,1,4,4,4,4,4,4,4,4,4,4",
        "img_a,y,5,1,4,4,4,4,4,4,4,4,4,4",
        "img_a,z,6,2,4,4,4,4,4,4,4,4,4,1",
        "img_b,x,1,7,4,4,4,4,4,4,4,4,4,7",
        "img_b,y,4,6,4,4,4,4,4,4,4,4,4,2",
    ];
    let mut text = format!("{header}\n{}\n", rows.join("\n"));
    if bad {
        text = text.replace("img_b,y,4,6", "img_b,y,4,8");
    }
    let path = dir.join(if bad { "bad.csv" } else { "ann.csv" });
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn aggregate_labels_mean_and_median() {
    let dir = tempfile::tempdir().unwrap();
    let ann = annotations(dir.path(), false);
    let out = dir.path().join("mean.csv");
    let stdout = ok(&["aggregate-labels", "--annotations", s(&ann), "--out", s(&out)]);
    assert!(stdout.contains("2 rows x 12 columns"), "{stdout}");
    let rows = read_rows(&out);
    assert_eq!(rows[0].0, "img_a");
    let scale = |x: f64| (x - 4.0) / 6.0;
    let expect_a = [scale(6.0), scale(4.0 / 3.0), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, scale(3.0)];
    let expect_b = [scale(2.5), scale(6.5), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, scale(4.5)];
    for (got, want) in rows[0].1.iter().zip(expect_a).chain(rows[1].1.iter().zip(expect_b)) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    let out = dir.path().join("median.csv");
    ok(&["aggregate-labels", "--annotations", s(&ann), "--out", s(&out), "--label-mode", "median"]);
    let rows = read_rows(&out);
    assert!((rows[0].1[1] - scale(1.0)).abs() < 1e-12);
    assert!((rows[0].1[11] - scale(4.0)).abs() < 1e-12);
    assert!((rows[1].1[0] - scale(2.5)).abs() < 1e-12);
}

#[test]
fn malformed_rating_cites_line() {
    let dir = tempfile::tempdir().unwrap();
    let ann = annotations(dir.path(), true);
    let out = amtl(&["aggregate-labels", "--annotations", s(&ann), "--out", s(&dir.path().join("x.csv"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.csv:6") && err.contains('8'), "{err}");
    assert!(!dir.path().join("x.csv").exists());
}

#[test]
fn cv_writes_report_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 24);
    let out = dir.path().join("cv");
    let tiled = dir.path().join("tiled.amtf");
    let labels = dir.path().join("labels.csv");
    let mut args = vec!["cv", "--features", s(&tiled), "--labels", s(&labels), "--out-dir", s(&out)];
    args.extend(["--epochs", "1", "--folds", "2", "--runs", "1"]);
    args.extend(SMALL);
    ok(&args);
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 14);
    assert_eq!(lines[0], "# variant=attentive_mtl label_mode=mean folds=2 runs=1");
    assert_eq!(lines[1], "dimension,r_squared,pearson,rmse");
    assert!(lines[13].starts_with("general_interest,"));
    let logs = std::fs::read_to_string(out.join("folds.jsonl")).unwrap();
    assert_eq!(logs.lines().count(), 2);
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"epochs\": 1"));
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 20);
    let cfg = dir.path().join("run.conf");
    std::fs::write(
        &cfg,
        "features = tiled.amtf\nlabels = labels.csv\nout_dir = out\nepochs = 40\nfolds = 2\nruns = 1\nd_a = 4\nhead_hidden = 8\nval_fraction = 0.2\n",
    )
    .unwrap();
    ok(&["cv", "--config", s(&cfg), "--epochs", "1", "--seed", "4"]);
    let manifest = std::fs::read_to_string(dir.path().join("out/manifest.json")).unwrap();
    assert!(manifest.contains("\"epochs\": 1"), "{manifest}");
    assert!(manifest.contains("\"fold_seed\": 4"));
    assert!(manifest.contains("\"d_a\": 4"));
}

#[test]
fn whole_variant_without_whole_features_fails() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 20);
    let out = amtl(&[
        "cv",
        "--features",
        s(&dir.path().join("tiled.amtf")),
        "--labels",
        s(&dir.path().join("labels.csv")),
        "--out-dir",
        s(&dir.path().join("cv")),
        "--variant",
        "nonattentive_mtl",
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("configuration error") && err.contains("nonattentive_mtl"), "{err}");

    let out = amtl(&["cv", "--variant", "bogus"]);
    assert!(!out.status.success());
}

#[test]
fn predict_zero_checkpoint_and_repeatability() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 6);
    let mut config = ModelConfig::for_variant(Variant::AttentiveMtl);
    config.d_a = 4;
    config.head_hidden = 4;
    let ck = dir.path().join("zero.amtp");
    write_checkpoint(&ck, &ModelParams::zeros(&config).unwrap()).unwrap();
    let tiled = dir.path().join("tiled.amtf");
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    ok(&["predict", "--checkpoint", s(&ck), "--features", s(&tiled), "--out", s(&a)]);
    ok(&["predict", "--checkpoint", s(&ck), "--features", s(&tiled), "--out", s(&b)]);
    let text = std::fs::read_to_string(&a).unwrap();
    assert!(text.starts_with("image_id,d1,d2,"));
    let rows = read_rows(&a);
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|(_, v)| v.len() == 12 && v.iter().all(|&x| x == 0.0)));
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());

    // A whole-layout file does not fit an attentive checkpoint.
    let out = amtl(&[
        "predict",
        "--checkpoint",
        s(&ck),
        "--features",
        s(&dir.path().join("whole.amtf")),
        "--out",
        s(&a),
    ]);
    assert!(!out.status.success());
}

#[test]
fn predict_matches_cv_held_out_predictions() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 24);
    let out = dir.path().join("cv");
    let tiled = dir.path().join("tiled.amtf");
    let labels = dir.path().join("labels.csv");
    let mut args = vec!["cv", "--features", s(&tiled), "--labels", s(&labels)];
    args.extend(["--out-dir", s(&out), "--epochs", "2", "--folds", "2", "--runs", "1"]);
    args.extend(["--set", "save_checkpoints=true"]);
    args.extend(SMALL);
    ok(&args);
    let pred = dir.path().join("pred.csv");
    let ck = out.join("checkpoints/run0_fold1.amtp");
    assert!(read_checkpoint(&ck).is_ok());
    ok(&["predict", "--checkpoint", s(&ck), "--features", s(&tiled), "--out", s(&pred)]);
    let rows: std::collections::BTreeMap<_, _> = read_rows(&pred).into_iter().collect();
    let logs = std::fs::read_to_string(out.join("folds.jsonl")).unwrap();
    let fold1: serde_json::Value = serde_json::from_str(logs.lines().nth(1).unwrap()).unwrap();
    assert_eq!(fold1["fold"], 1);
    let held = fold1["held_out"].as_array().unwrap();
    assert_eq!(held.len(), 12);
    for h in held {
        let id = h["image_id"].as_str().unwrap();
        let logged: Vec<f64> = h["prediction"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert_eq!(&rows[id], &logged, "{id}");
    }
}

#[test]
fn attention_export_zero_context_is_flat() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 3);
    let mut config = ModelConfig::for_variant(Variant::AttentiveMtl);
    config.d_a = 4;
    config.head_hidden = 4;
    config.init_seed = 8;
    let mut params = amtl::model::init_params(&config).unwrap();
    params.slot_values_mut("primary[0].v").unwrap().fill(0.0);
    let ck = dir.path().join("flat.amtp");
    write_checkpoint(&ck, &params).unwrap();
    let out = dir.path().join("att");
    ok(&[
        "attention-export",
        "--checkpoint",
        s(&ck),
        "--features",
        s(&dir.path().join("tiled.amtf")),
        "--out-dir",
        s(&out),
    ]);
    let pgm = std::fs::read(out.join("img00000.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
    let pixels = &pgm[11..];
    assert_eq!(pixels.len(), 16);
    assert!(pixels.iter().all(|&p| p == pixels[0]));
    for file in ["img00001.primary.csv", "img00001.secondary.csv"] {
        let rows = read_rows(&out.join(file));
        assert!(!rows.is_empty());
        for (_, v) in rows {
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    assert_eq!(read_rows(&out.join("img00001.primary.csv")).len(), 4);
    assert_eq!(read_rows(&out.join("img00001.secondary.csv")).len(), 12);
    let meta = std::fs::read_to_string(out.join("attention_meta.json")).unwrap();
    assert!(meta.contains("min-max"));
}

#[test]
fn trained_heatmap_peaks_on_planted_cell() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 160);
    let out = dir.path().join("train");
    let tiled = dir.path().join("tiled.amtf");
    ok(&[
        "train",
        "--features",
        s(&tiled),
        "--labels",
        s(&dir.path().join("labels.csv")),
        "--out-dir",
        s(&out),
        "--epochs",
        "8",
        "--set",
        "d_a=16",
        "--set",
        "head_hidden=32",
        "--set",
        "batch_size=8",
    ]);
    let att = dir.path().join("att");
    ok(&[
        "attention-export",
        "--checkpoint",
        s(&out.join("model.amtp")),
        "--features",
        s(&tiled),
        "--out-dir",
        s(&att),
    ]);
    let ids: Vec<String> = read_features(&tiled).unwrap().iter().map(|r| r.image_id().to_string()).collect();
    let mut hits = 0;
    for id in ids.iter().take(40) {
        let pgm = std::fs::read(att.join(format!("{id}.pgm"))).unwrap();
        let pixels = &pgm[11..];
        let argmax = (0..16).max_by_key(|&j| pixels[j]).unwrap();
        hits += usize::from(argmax == 5);
    }
    assert_eq!(hits, 40);
}

#[test]
fn ablate_writes_five_variant_table() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 24);
    let out = dir.path().join("abl");
    let (tiled, whole, labels) = (
        dir.path().join("tiled.amtf"),
        dir.path().join("whole.amtf"),
        dir.path().join("labels.csv"),
    );
    let mut args = vec![
        "ablate",
        "--features",
        s(&tiled),
        "--whole-features",
        s(&whole),
        "--labels",
        s(&labels),
        "--out-dir",
        s(&out),
    ];
    args.extend(["--epochs", "1", "--folds", "2", "--runs", "1"]);
    args.extend(SMALL);
    args.extend(["--set", "shared_hidden_sizes=256,64", "--set", "task_hidden_sizes=32"]);
    let stdout = ok(&args);
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 * 12);
    for v in Variant::ALL {
        assert!(stdout.contains(v.name()), "{v}");
        assert_eq!(
            std::fs::read_to_string(out.join(format!("report_{v}.csv"))).unwrap().lines().count(),
            14
        );
    }
}
