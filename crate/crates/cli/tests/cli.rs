use std::process::{Command, Output};

fn pmkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmkd")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn training_without_seed_is_a_config_error() {
    let o = pmkd(&["train-teacher", "--arch", "tiny4"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("pmkd: "));
    assert_eq!(stderr(&o).lines().count(), 1);
}

#[test]
fn unknown_key_and_bad_values_exit_2() {
    for args in [
        &["param-report", "--set", "learning_rate=0.1"][..],
        &["param-report", "--set", "rho=9"],
        &["param-report", "--arch", "vgg11bn"],
        &["eval", "--checkpoint", "x.pmkd", "--repeat", "2"],
    ] {
        let o = pmkd(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn config_file_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "arch = tiny4\nalpha = lots\n").unwrap();
    let o = pmkd(&["param-report", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn corrupt_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.otfd");
    std::fs::write(&path, b"not a dataset").unwrap();
    let p = path.to_str().unwrap();
    let o = pmkd(&["eval", "--arch", "tiny4", "--checkpoint", p, "--dataset", p, "--runs-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn param_report_for_one_arch() {
    let o = pmkd(&["param-report", "--arch", "tiny4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    let row: Vec<&str> = out.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row[0], "tiny4");
    assert_eq!(row[3].parse::<f64>().unwrap(), 1.0 / 3.0);
}
