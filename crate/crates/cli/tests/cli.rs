use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn deepgcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepgcn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, name: &str, seed: u64) -> String {
    let out = dir.join(name);
    let o = deepgcn(&[
        "synth",
        "--out",
        out.to_str().unwrap(),
        "--blocks",
        "2",
        "--points",
        "96",
        "--classes",
        "3",
        "--seed",
        &seed.to_string(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("manifest.pcds").to_str().unwrap().to_string()
}

const SMALL: &str = "backbone = residual\ndepth = 3 width = 8 k = 4\n\
                     fusion_width=8 head_width1=8 head_width2=8 # tiny\n";

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d", 3);
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let log = dir.path().join("log.csv");
    let o = deepgcn(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        &data,
        "--out",
        ckpt.to_str().unwrap(),
        "--epochs",
        "2",
        "--log",
        log.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("final train loss"));
    let log = fs::read_to_string(log).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,step,lr,loss,train_oa"));
    assert_eq!(log.lines().count(), 3);

    let report = dir.path().join("r.csv");
    let run_eval = || {
        deepgcn(&[
            "eval",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--data",
            &data,
            "--report",
            report.to_str().unwrap(),
        ])
    };
    let first = run_eval();
    assert!(first.status.success());
    let text = stdout(&first);
    assert!(text.contains("OA") && text.contains("mIoU") && text.contains("IoU[2]"));
    let csv = fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("metric,value\noa,"));
    // Evaluation is deterministic.
    assert_eq!(stdout(&run_eval()), text);
}

#[test]
fn missing_required_key_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d", 1);
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "backbone=plain width=8 k=4\n").unwrap();
    let o = deepgcn(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        &data,
        "--out",
        dir.path().join("m").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("depth"));
}

#[test]
fn unknown_key_and_bad_value_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d", 1);
    for body in [
        "backbone=plain depth=2 width=8 k=4 colour=red",
        "backbone=sideways depth=2 width=8 k=4",
        "backbone=plain depth=2 width=8 k=4 num_classes=7",
        "backbone=plain depth=2 width=8 k=400",
    ] {
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, body).unwrap();
        let o = deepgcn(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            &data,
            "--out",
            dir.path().join("m").to_str().unwrap(),
            "--epochs",
            "1",
        ]);
        assert_eq!(o.status.code(), Some(2), "{body}");
    }
}

#[test]
fn missing_data_is_usage_error() {
    let o = deepgcn(&[
        "eval",
        "--ckpt",
        "/nonexistent/m.ckpt",
        "--data",
        "/nonexistent/manifest.pcds",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_lists_config_keys() {
    let text = stdout(&deepgcn(&["train", "--help"]));
    for key in [
        "backbone",
        "aggregator",
        "dilation",
        "epsilon",
        "decay_steps",
        "batch_size",
    ] {
        assert!(text.contains(key), "{key} missing from help");
    }
}

#[test]
fn ablate_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d", 2);
    let test = synth(dir.path(), "t", 9);
    let out = dir.path().join("a.csv");
    let o = deepgcn(&[
        "ablate",
        "--grid",
        "backbone=plain,residual dilation=on,off depth=2 width=4 k=3 fusion_width=4 head_width1=4 head_width2=4",
        "--data",
        &data,
        "--test",
        &test,
        "--out",
        out.to_str().unwrap(),
        "--epochs",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "backbone,depth,width,k,dilation,stochastic,final_loss,oa,miou"
    );
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("plain,2,4,3,on,"));
    assert!(lines[4].starts_with("residual,2,4,3,off,"));
}

#[test]
fn ablate_marks_failed_cells() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d", 2);
    let out = dir.path().join("a.csv");
    let o = deepgcn(&[
        "ablate",
        "--grid",
        "k=3,500 backbone=plain depth=1 width=4 fusion_width=4 head_width1=4 head_width2=4",
        "--data",
        &data,
        "--out",
        out.to_str().unwrap(),
        "--epochs",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let csv = fs::read_to_string(out).unwrap();
    assert!(csv
        .lines()
        .nth(2)
        .unwrap()
        .ends_with("failed,failed,failed"));
}

#[test]
fn knn_check_passes() {
    let o = deepgcn(&["check", "knn"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| !l.contains("FAIL")));
}
