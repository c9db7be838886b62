use std::path::Path;
use std::process::{Command, Output};

fn structcount(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_structcount"))
        .args(args)
        .args(["--log", "warn"])
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = structcount(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = structcount(&["eval", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(structcount(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn attention_kind_without_segmenter_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    ok(&["synth", "--out", p(&corpus), "--n", "4", "--seed", "1"]);
    let out = structcount(&[
        "train-counter",
        "--kind",
        "gwap",
        "--manifest",
        p(&corpus.join("manifest.tsv")),
        "--out",
        p(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("--ssnet"), "{err}");
}

#[test]
fn missing_manifest_reports_one_line() {
    let out = structcount(&["validate-manifest", "--manifest", "/nonexistent/m.tsv"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(String::from_utf8(out.stderr).unwrap().lines().count(), 1);
}

#[test]
fn synth_is_reproducible_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--out", p(d), "--n", "6", "--seed", "9", "--density", "dense"]);
    }
    for f in ["manifest.tsv", "images/s9-00003.png", "masks/s9-00003.png"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(ok(&["validate-manifest", "--manifest", p(&a.join("manifest.tsv"))]).contains("6 entries"));
    let config: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("run-config.json")).unwrap()).unwrap();
    assert_eq!(config["seed"], 9);
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus");
    let manifest = corpus.join("manifest.tsv");
    ok(&["synth", "--out", p(&corpus), "--n", "10", "--seed", "4", "--train-count", "6", "--val-count", "2"]);

    let ss = d.join("ss.ckpt");
    ok(&[
        "train-ssnet", "--manifest", p(&manifest), "--out", p(&ss), "--epochs", "1", "--widths", "4,6,8",
        "--head-channels", "8", "--patch-stride", "96", "--no-augment", "--lr", "1e-3",
    ]);
    let seg = d.join("seg/map");
    let image = corpus.join("images/s4-00000.png");
    ok(&["segment", "--model", p(&ss), "--image", p(&image), "--out", p(&seg), "--mask", p(&corpus.join("masks/s4-00000.png"))]);
    assert!(seg.with_extension("npy").exists() && seg.with_extension("png").exists());

    let model = d.join("fusion.ckpt");
    ok(&[
        "train-counter", "--kind", "fusion", "--manifest", p(&manifest), "--out", p(&model), "--backbone", "tiny-cnn",
        "--ssnet", p(&ss), "--epochs", "2", "--no-augment",
    ]);
    let evals = d.join("eval");
    let summary = ok(&["eval", "--model", p(&model), "--manifest", p(&manifest), "--out-dir", p(&evals)]);
    assert!(summary.contains("MAE"));
    for f in ["eval.bands.tsv", "eval.residuals.tsv", "eval.txt", "eval-rounded.bands.tsv", "run-config.json"] {
        assert!(evals.join(f).exists(), "{f}");
    }

    // a 1008×3024 mosaic of scenes
    let scene = image::open(&image).unwrap().to_rgb8();
    let big = image::RgbImage::from_fn(3024, 1008, |x, y| *scene.get_pixel(x % 336, y % 336));
    let big_path = d.join("big.png");
    big.save(&big_path).unwrap();
    let truth = d.join("truth.tsv");
    let rows: String = (0..27).map(|k| format!("{}\t{}\t{}\n", k / 9, k % 9, k)).collect();
    std::fs::write(&truth, format!("row\tcol\ttruth\n{rows}")).unwrap();
    let (t1, t2) = (d.join("tile1/cells.tsv"), d.join("tile2/cells.tsv"));
    ok(&["count-tile", "--model", p(&model), "--image", p(&big_path), "--out", p(&t1), "--workers", "1", "--truth", p(&truth)]);
    ok(&["count-tile", "--model", p(&model), "--image", p(&big_path), "--out", p(&t2), "--workers", "2", "--truth", p(&truth)]);
    let table = std::fs::read_to_string(&t1).unwrap();
    assert_eq!(table, std::fs::read_to_string(&t2).unwrap());
    assert_eq!(table.lines().filter(|l| !l.starts_with('#') && !l.starts_with("row")).count(), 27);

    let heat = d.join("tile1/heat.png");
    ok(&["render", "--cells", p(&t1), "--out", p(&heat), "--image", p(&big_path), "--opacity", "0.4"]);
    assert!(heat.exists());
    assert_eq!(std::fs::read_to_string(d.join("tile1/heat.cells.tsv")).unwrap(), table);
    let series = std::fs::read_to_string(d.join("tile1/heat.series.tsv")).unwrap();
    assert_eq!(series.lines().count(), 28);
}
