use safire::io::{write_binary_mask_png, write_heatmap};
use safire::{BinaryMask, Heatmap};
use std::path::Path;
use std::process::{Command, Output};

fn safire(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_safire"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn text(out: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn no_arguments_is_a_usage_error() {
    let out = safire(&[]);
    assert_eq!(code(&out), 1);
    assert!(text(&out).contains("Usage"), "{}", text(&out));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = safire(&["eval", "--prd", "x"]);
    assert_eq!(code(&out), 1);
    assert!(text(&out).contains("--pred"), "suggestion missing: {}", text(&out));
}

#[test]
fn help_succeeds_and_documents_flags() {
    let out = safire(&["infer", "--help"]);
    assert_eq!(code(&out), 0);
    let help = text(&out);
    for flag in ["--ckpt", "--image", "--grid", "--mode", "--cluster", "--m", "--out", "--seed", "--config", "--jobs"] {
        assert!(help.contains(flag), "{flag} not documented");
    }
}

#[test]
fn gradcheck_passes() {
    let out = safire(&["gradcheck", "--seed", "1"]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let last = stdout.lines().last().unwrap();
    let err: f64 = last.trim_start_matches("max relative error ").parse().unwrap();
    assert!(err < 1e-4, "{last}");
}

#[test]
fn eval_shape_mismatch_exits_2_with_both_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&gt).unwrap();
    write_heatmap(&Heatmap::new(8, 8, vec![0.25; 64]).unwrap(), &pred.join("a.safr")).unwrap();
    write_binary_mask_png(&BinaryMask::zeros(16, 12).unwrap(), &gt.join("a.png")).unwrap();
    let report = dir.path().join("r.csv");
    let out = safire(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--metric", "f1_fixed", "--out", p(&report)]);
    assert_eq!(code(&out), 2);
    let msg = text(&out);
    assert!(msg.contains("16x12") && msg.contains("8x8"), "{msg}");
}

#[test]
fn bad_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"cont": 3}"#).unwrap();
    let out = safire(&["gen", "--out", p(&dir.path().join("d")), "--config", p(&cfg)]);
    assert_eq!(code(&out), 2, "{}", text(&out));
    assert!(text(&out).contains("cont"));
}

/// Runs the whole pipeline at 64×64 into `root` and returns the paths of
/// every artifact.
fn pipeline(root: &Path, jobs: &str) -> Vec<std::path::PathBuf> {
    let data = root.join("data");
    let run = |args: &[&str]| {
        let out = safire(args);
        assert_eq!(code(&out), 0, "{args:?}: {}", text(&out));
        out
    };
    let cfg = root.join("pretrain.json");
    std::fs::write(&cfg, r#"{"epochs": 5, "batch_size": 3, "seed": 11}"#).unwrap();
    run(&["gen", "--out", p(&data), "--count", "6", "--size", "64", "--strong", "--seed", "3", "--jobs", jobs]);
    let pre = root.join("pre.ckpt");
    // The flag overrides the config's 5 epochs; the config's seed applies.
    run(&["pretrain", "--config", p(&cfg), "--data", p(&data), "--out", p(&pre), "--epochs", "2", "--jobs", jobs]);
    let model = root.join("model.ckpt");
    run(&[
        "train", "--data", p(&data), "--init", p(&pre), "--out", p(&model), "--epochs", "2", "--seed", "4", "--jobs", jobs,
    ]);
    let preds = root.join("pred");
    run(&[
        "infer", "--ckpt", p(&model), "--image", p(&data.join("images")), "--out", p(&preds), "--grid", "4", "--seed", "1",
        "--jobs", jobs,
    ]);
    let multi = root.join("multi");
    run(&[
        "infer", "--ckpt", p(&model), "--image", p(&data.join("images").join("00000.png")), "--out", p(&multi),
        "--mode", "multi", "--cluster", "dbscan", "--grid", "4",
    ]);
    let report = root.join("f1.csv");
    run(&["eval", "--pred", p(&preds), "--gt", p(&data.join("binary")), "--metric", "f1_fixed", "--out", p(&report)]);
    let rob = root.join("rob.csv");
    run(&[
        "robustness", "--ckpt", p(&model), "--data", p(&data), "--transform", "jpeg", "--levels", "100,60", "--grid",
        "4", "--out", p(&rob), "--seed", "1", "--jobs", jobs,
    ]);
    let mut files = vec![
        data.join("manifest.json"),
        pre.clone(),
        pre.with_extension("csv"),
        model.clone(),
        model.with_extension("csv"),
        report,
        rob,
        multi.join("00000.partition.png"),
        multi.join("00000.json"),
    ];
    for sub in ["images", "partitions", "binary"] {
        files.push(data.join(sub).join("00005.png"));
    }
    for ext in ["safr", "heatmap.png", "partition.png", "json"] {
        files.push(preds.join(format!("00003.{ext}")));
    }
    files
}

#[test]
fn pipeline_is_reproducible_and_independent_of_jobs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let fa = pipeline(a.path(), "1");
    let fb = pipeline(b.path(), "2");
    for (x, y) in fa.iter().zip(&fb) {
        let (bx, by) = (std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        // Sidecars embed the absolute image path.
        if x.extension().is_some_and(|e| e == "json") && x.file_name().unwrap() != "manifest.json" {
            let strip = |b: &[u8]| {
                let mut v: serde_json::Value = serde_json::from_slice(b).unwrap();
                v.as_object_mut().unwrap().remove("image");
                v
            };
            assert_eq!(strip(&bx), strip(&by), "{}", x.display());
        } else {
            assert_eq!(bx, by, "{} differs", x.display());
        }
    }

    let log = std::fs::read_to_string(a.path().join("pre.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "header plus two epochs: {log}");
    assert!(log.starts_with("epoch,loss,acc"));
    let train_log = std::fs::read_to_string(a.path().join("model.csv")).unwrap();
    assert!(train_log.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse::<f64>().is_ok());

    let rob = std::fs::read_to_string(a.path().join("rob.csv")).unwrap();
    let rows: Vec<&str> = rob.lines().collect();
    assert_eq!(rows[0], "transform,level,score,n_images");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("jpeg,100,") && rows[1].ends_with(",6"));

    // Identity-level robustness equals the clean evaluation of the same predictions.
    let f1 = std::fs::read_to_string(a.path().join("f1.csv")).unwrap();
    let mean: f64 = f1.lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    let identity: f64 = rows[1].split(',').nth(2).unwrap().parse().unwrap();
    assert_eq!(mean, identity);

    let sidecar: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.path().join("pred").join("00003.json")).unwrap()).unwrap();
    assert_eq!(sidecar["confidences"].as_array().unwrap().len(), 16);
    assert_eq!(sidecar["fallback"].as_array().unwrap().len(), 16);
    let sizes: u64 = sidecar["cluster_sizes"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(sizes, 16);
}
