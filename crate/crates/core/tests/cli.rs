use std::path::Path;
use std::process::Command;

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_centerpoint")).args(args).output().expect("binary runs")
}

fn write(path: &Path, text: &str) -> String {
    std::fs::write(path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

const SMALL_DATA: &str = "num_train = 6\nnum_test = 10\n[spec]\nwidth = 96\nheight = 96\ncount_range = [2, 5]\n";

const SHORT_RUN: &str = "iterations = 6\nbatch_size = 2\nwarmup_iters = 2\nlr_drop_iters = [4]\ncheckpoint_every = 3\n\
[sampling]\nchip_size = 64\n[single_stage.backbone]\nwidth = 8\n[two_stage.backbone]\nwidth = 8\n";

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_evaluate_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data_cfg = write(&d.join("data.toml"), SMALL_DATA);
    let run_cfg = write(&d.join("run.toml"), SHORT_RUN);
    let data = d.join("data");

    let out = cli(&["generate-data", "--config", &data_cfg, "--seed", "3", "--out-dir", s(&data), "--clutter-spectrum", "1,8"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("train/annotations.jsonl").is_file());
    assert!(data.join("test/images/test00009.png").is_file());

    let run = d.join("run");
    let out = cli(&["train", "--config", &run_cfg, "--data", s(&data), "--detector", "centerpoint-rcnn", "--seed", "1", "--out-dir", s(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics.json", "run.json", "loss_curve.csv", "config.toml", "detections.jsonl", "tables/summary.txt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert!(run.join("checkpoints/iter_000003.ckpt").is_file());
    let ckpt = run.join("checkpoints/iter_000006.ckpt");
    assert!(ckpt.is_file());
    let curve = std::fs::read_to_string(run.join("loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 7);
    assert!(curve.starts_with("iteration,lr,total,loss_cls,loss_loc,loss_rpn_cls,loss_rpn_loc"));

    let ev = d.join("eval");
    let out = cli(&["evaluate", "--data", s(&data), "--checkpoint", s(&ckpt), "--out-dir", s(&ev)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ev.join("tables/evaluation.txt").is_file());
    let from_ckpt: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();

    // the detections file written by training gives the same report
    let ev2 = d.join("eval2");
    let dets = run.join("detections.jsonl");
    let out = cli(&["evaluate", "--data", s(&data), "--detections", s(&dets), "--out-dir", s(&ev2)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let from_file: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev2.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(from_ckpt["map"], from_file["map"]);
    let trained: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(trained["report"]["map"], from_file["map"]);

    let cl = d.join("clutter");
    let out = cli(&["clutter-report", "--data", s(&data), "--checkpoint", s(&ckpt), "--out-dir", s(&cl)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(cl.join("tables/clutter.txt")).unwrap();
    assert!(table.contains("1%-10%") && table.contains("91%-100%"));

    let cmp = d.join("compare");
    let out = cli(&["compare", "--config", &run_cfg, "--data", s(&data), "--seeds", "0,1", "--out-dir", s(&cmp)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(cmp.join("tables/comparison.txt")).unwrap();
    assert!(table.contains("Centerpoint RetinaNet") && table.contains("RetinaNet (boxes)"));

    let sw = d.join("sweep");
    let out = cli(&["sweep-window", "--config", &run_cfg, "--data", s(&data), "--sizes", "20,70", "--out-dir", s(&sw)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(sw.join("tables/window_sweep.txt")).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("20") || l.starts_with("70")).count(), 2);
}

#[test]
fn non_convergence_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data_cfg = write(&d.join("data.toml"), SMALL_DATA);
    let run_cfg = write(
        &d.join("run.toml"),
        &format!("base_lr = 1e12\nclip_norm = 1e30\n{}", SHORT_RUN.replace("iterations = 6", "iterations = 30")),
    );
    let data = d.join("data");
    assert!(cli(&["generate-data", "--config", &data_cfg, "--out-dir", s(&data)]).status.success());
    let run = d.join("run");
    let out = cli(&["train", "--config", &run_cfg, "--data", s(&data), "--out-dir", s(&run)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["converged"], false);
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("bad.toml"), "lr_drop_factor = 2.0\n");
    let out = cli(&["train", "--config", &cfg, "--data", "nowhere", "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr_drop_factor"));
}
