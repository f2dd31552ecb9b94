use std::path::Path;
use std::process::{Command, Output};

fn semdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semdiff"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(semdiff(&["--help"]).status.code(), Some(0));
    assert_eq!(semdiff(&["train", "--help"]).status.code(), Some(0));
    assert_eq!(semdiff(&[]).status.code(), Some(1));
    assert_eq!(semdiff(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(semdiff(&["toy-gen"]).status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = semdiff(&["train", "--preset", "toy", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest"));
    let bad = semdiff(&["train", "--preset", "toy", "--set", "train.iterations=-3", "--manifest", "x", "--out", p(dir.path())]);
    assert_eq!(bad.status.code(), Some(2));
    let missing = semdiff(&["report", "--in", p(&dir.path().join("none.json"))]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn toy_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let gen = semdiff(&["toy-gen", "--out", p(&data), "--subjects", "4", "--slices", "2", "--seed", "3"]);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    let manifest = data.join("manifest.jsonl");
    assert!(manifest.is_file());
    assert!(data.join("toy_config.json").is_file());

    let run = dir.path().join("run");
    let tiny = [
        "--set", "schedule.timesteps=8",
        "--set", "model.base_width=8",
        "--set", "model.channel_multipliers=[1,2]",
        "--set", "model.attention_resolutions=[]",
        "--set", "model.num_res_blocks_per_level=1",
        "--set", "train.iterations=3",
        "--set", "train.batch_size=2",
        "--set", "train.log_every=1",
        "--set", "train.checkpoint_every=2",
    ];
    let mut args = vec!["train", "--preset", "toy", "--variant", "mask-guided", "--manifest", p(&manifest), "--out", p(&run)];
    args.extend(tiny);
    let tr = semdiff(&args);
    assert!(tr.status.success(), "{}", String::from_utf8_lossy(&tr.stderr));
    assert!(run.join("resolved_config.toml").is_file());
    let snapshot = std::fs::read_to_string(run.join("resolved_config.toml")).unwrap();
    assert!(snapshot.contains("MASK_GUIDED"));
    let rows = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(rows.lines().count(), 4);

    let samples = dir.path().join("samples");
    let sm = semdiff(&["sample", "--ckpt", p(&run), "--out", p(&samples), "--n", "2", "--seed", "5", "--max-masks", "2"]);
    assert!(sm.status.success(), "{}", String::from_utf8_lossy(&sm.stderr));
    let count = |d: &Path| std::fs::read_dir(d).unwrap().count();
    assert_eq!(count(&samples.join("samples")), 4);
    assert_eq!(count(&samples.join("real")), 2);
    assert!(samples.join("grid.png").is_file());
    assert!(samples.join("index.json").is_file());

    let report = dir.path().join("eval").join("report.json");
    let ev = semdiff(&["eval", "--run", p(&samples), "--label", "tiny", "--out", p(&report)]);
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
    assert!(report.is_file() && report.with_extension("csv").is_file());
    let stdout = String::from_utf8_lossy(&ev.stdout);
    assert!(stdout.contains("tiny") && stdout.contains("FID"));

    let table = dir.path().join("table");
    let rp = semdiff(&["report", "--in", p(&report), p(&report), "--out", p(&table)]);
    assert!(rp.status.success(), "{}", String::from_utf8_lossy(&rp.stderr));
    let csv = std::fs::read_to_string(table.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("method,FID,PSNR,SSIM"));
}

#[test]
fn ingest_converts_source_pngs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy");
    assert!(semdiff(&["toy-gen", "--out", p(&data), "--subjects", "2", "--slices", "1"]).status.success());
    // The toy PNGs double as source slices: HU + 1024 images with labels in the source range.
    let (imgs, labs) = (dir.path().join("img"), dir.path().join("lab"));
    std::fs::create_dir_all(&imgs).unwrap();
    std::fs::create_dir_all(&labs).unwrap();
    for split in ["train", "test"] {
        for entry in std::fs::read_dir(data.join(split).join("images")).unwrap() {
            let path = entry.unwrap().path();
            let name = path.file_name().unwrap();
            std::fs::copy(&path, imgs.join(name)).unwrap();
            std::fs::copy(data.join(split).join("masks").join(name), labs.join(name)).unwrap();
        }
    }
    let out = dir.path().join("ingested");
    let r = semdiff(&["ingest", "--images", p(&imgs), "--masks", p(&labs), "--out", p(&out), "--preset", "toy"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(out.join("manifest.jsonl").is_file());
    assert!(out.join("resolved_config.toml").is_file());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("ingest_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["slices"], 2);
    assert_eq!(summary["test_subjects"].as_array().unwrap().len(), 1);

    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let r = semdiff(&["ingest", "--images", p(&empty), "--masks", p(&labs), "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(2));
}
