use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cdma(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdma")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let first = cdma(&["gen-data", "--preset", "smoke", "--dataset", s(&ds), "--seed", "3"]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let split = fs::read_to_string(ds.join("split.json")).unwrap();

    let again = cdma(&["gen-data", "--preset", "smoke", "--dataset", s(&ds), "--seed", "3"]);
    assert_eq!(code(&again), 1);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));

    let forced = cdma(&["gen-data", "--preset", "smoke", "--dataset", s(&ds), "--seed", "3", "--force"]);
    assert_eq!(code(&forced), 0);
    assert_eq!(fs::read_to_string(ds.join("split.json")).unwrap(), split);
}

#[test]
fn bad_configuration_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"optimizer": {"learning_rate": 0.1}}"#).unwrap();
    assert_eq!(code(&cdma(&["config", "-c", s(&cfg)])), 1);
    assert_eq!(code(&cdma(&["config", "--preset", "enormous"])), 1);
    assert_eq!(code(&cdma(&["train", "--preset", "smoke", "--variant", "magic"])), 1);
    assert_eq!(code(&cdma(&["gen-data", "--preset", "smoke", "--ratio", "1.5"])), 1);
    assert_eq!(code(&cdma(&["no-such-command"])), 1);
}

#[test]
fn missing_data_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = cdma(&[
        "train",
        "--preset",
        "smoke",
        "--dataset",
        s(&dir.path().join("absent")),
        "--out",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let ck = dir.path().join("garbage.tnsr");
    fs::write(&ck, b"not a tensor file").unwrap();
    let out = cdma(&["eval", "--preset", "smoke", "--checkpoint", s(&ck)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn config_prints_arms() {
    let out = cdma(&["config", "--preset", "smoke", "--arm", "baseline"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("\"variant\": \"sl\""), "{text}");
}

#[test]
fn train_then_eval_writes_csv_and_overlays() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let run = dir.path().join("run");
    assert_eq!(code(&cdma(&["gen-data", "--preset", "smoke", "--dataset", s(&ds)])), 0);
    let train = cdma(&["train", "--preset", "smoke", "--dataset", s(&ds), "--out", s(&run), "--epochs", "1"]);
    assert_eq!(code(&train), 0, "{}", String::from_utf8_lossy(&train.stderr));
    for f in ["metrics.csv", "steps.csv", "run_config.json", "last.tnsr", "last.json", "best.tnsr"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let eval = cdma(&["eval", "--preset", "smoke", "--dataset", s(&ds), "--out", s(&run), "--overlays"]);
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    let csv = fs::read_to_string(run.join("eval_test_csa.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "slide_id,dsc,ji");
    assert_eq!(lines.len(), 1 + 2 + 2);
    assert_eq!(fs::read_dir(run.join("overlays_test")).unwrap().count(), 2);

    let ens = cdma(&["eval", "--preset", "smoke", "--dataset", s(&ds), "--out", s(&run), "--branch", "ensemble", "--split", "val"]);
    assert_eq!(code(&ens), 0);
    assert!(run.join("eval_val_ensemble.csv").exists());
}

#[test]
fn selfcheck_detects_an_injected_fault() {
    let ok = cdma(&["selfcheck"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    let bad = cdma(&["selfcheck", "--inject-fault"]);
    assert_eq!(code(&bad), 3);
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL grad_conv2d"));
}
