use std::path::Path;
use std::process::{Command, Output};

fn freqfocus(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_freqfocus"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("FREQFOCUS_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

const TINY: [&str; 8] = ["--dataset", "synth:n=24,t=32", "--filters", "4,6", "--epochs", "3", "--batch-size", "8"];

#[test]
fn regulate_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["regulate"];
    args.extend(TINY);
    args.extend(["--depth", "3", "--alpha", "2", "--skips", "1", "--out", "r"]);
    let stdout = ok(&freqfocus(&args, dir.path()));
    assert!(stdout.contains("[regulated]"), "{stdout}");
    for f in ["runs.csv", "medians.csv", "ranks.csv", "report.json", "timings.csv", "plot_focus_scales.csv"] {
        assert!(dir.path().join("r").join(f).exists(), "{f}");
    }
    let runs = std::fs::read_to_string(dir.path().join("r/runs.csv")).unwrap();
    assert!(runs.starts_with("dataset,model,depth,variant,regulated,seed,train_accuracy,test_accuracy,params,flops,skipped"));
}

#[test]
fn config_file_and_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"dataset":{"source":"synth","instances":24,"length":32},"depths":[1,2],"filters":[4],"train":{"epochs":2},"seeds":[3]}"#,
    )
    .unwrap();
    let stdout = ok(&freqfocus(
        &["sweep-depth", "--config", "cfg.json", "--seed", "4", "--out", "s"],
        dir.path(),
    ));
    assert!(stdout.contains("degraded depths"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("s/report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["seeds"], serde_json::json!([4]));
    assert_eq!(report["config"]["kind"], "depth_sweep");
    assert_eq!(report["config"]["depths"], serde_json::json!([1, 2]));
}

#[test]
fn gradcam_and_merge() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["gradcam"];
    args.extend(TINY);
    args.extend(["--depth", "2", "--instance", "0,1", "--out", "g"]);
    ok(&freqfocus(&args, dir.path()));
    let cam = std::fs::read_to_string(dir.path().join("g/gradcam_seed0_i1.csv")).unwrap();
    let mut lines = cam.lines();
    assert_eq!(lines.next(), Some("t,E_t"));
    assert_eq!(lines.count(), 32);

    let mut args = vec!["train"];
    args.extend(TINY);
    args.extend(["--depth", "1", "--out", "t"]);
    ok(&freqfocus(&args, dir.path()));
    assert!(dir.path().join("t/model_resnet-1_seed0.ckpt").exists());

    let stdout = ok(&freqfocus(&["report", "g", "t", "--out", "m"], dir.path()));
    assert!(stdout.contains("average rank"));
    assert!(dir.path().join("m/ranks.csv").exists());
}

#[test]
fn file_datasets_and_data_root() {
    let dir = tempfile::tempdir().unwrap();
    let arch = dir.path().join("root/Toy");
    std::fs::create_dir_all(&arch).unwrap();
    let body = |n: usize| {
        let mut s = String::from("@problemName Toy\n@univariate true\n@equalLength true\n@classLabel true a b\n@data\n");
        for i in 0..n {
            let v: Vec<String> = (0..16).map(|t| ((t * (i % 2 + 1)) as f64 * 0.4).sin().to_string()).collect();
            s.push_str(&format!("{}:{}\n", v.join(","), if i % 2 == 0 { "a" } else { "b" }));
        }
        s
    };
    std::fs::write(arch.join("Toy_TRAIN.ts"), body(8)).unwrap();
    std::fs::write(arch.join("Toy_TEST.ts"), body(6)).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_freqfocus"))
        .args(["centroid-stats", "--dataset", "Toy", "--out", "c"])
        .current_dir(dir.path())
        .env("FREQFOCUS_DATA_ROOT", dir.path().join("root"))
        .output()
        .unwrap();
    let stdout = ok(&out);
    assert!(stdout.contains("train: centroid ratio mean"), "{stdout}");

    let missing = freqfocus(&["centroid-stats", "--dataset", "Toy", "--out", "c2"], dir.path());
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("FREQFOCUS_DATA_ROOT"));
}

#[test]
fn bad_arguments_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = freqfocus(&["train", "--depth", "0"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("depths"));
    let out = freqfocus(&["train", "--backbone", "vgg"], dir.path());
    assert!(!out.status.success());
    let out = freqfocus(&["regulate", "--epochs", "5", "--alpha", "5"], dir.path());
    assert!(String::from_utf8_lossy(&out.stderr).contains("regulation epoch"));
}
