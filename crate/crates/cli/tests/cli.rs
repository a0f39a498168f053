use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use proptest::prelude::*;

fn memdfa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memdfa")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn tiny<'a>(out: &'a Path, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "--model",
        "mnist-fc3",
        "--dataset",
        "synthetic",
        "--limit-train",
        "200",
        "--limit-test",
        "50",
        "--batch",
        "50",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    args
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = memdfa(&["train", "--algo", "bp", "--model", "resnet", "--dataset", "synthetic", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&memdfa(&["train", "--algo", "bp", "--bogus"])), 2);
    assert_eq!(code(&memdfa(&["train", "--algo", "sgd"])), 2);
    assert_eq!(code(&memdfa(&["train", "--algo", "bp", "--batch", "0", "--dataset", "synthetic"])), 2);
    assert_eq!(code(&memdfa(&[])), 2);
    assert_eq!(code(&memdfa(&["--help"])), 0);
}

#[test]
fn missing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let empty = dir.path().join("nothing");
    fs::create_dir(&empty).unwrap();
    let o = memdfa(&[
        "train",
        "--algo",
        "dfa",
        "--model",
        "mnist-fc3",
        "--dataset",
        "mnist",
        "--data",
        empty.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&memdfa(&["profile", dir.path().join("absent.csv").to_str().unwrap()])), 3);
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let mut args = vec!["train", "--algo", "bp"];
    args.extend(tiny(&out, &["--lr", "1e30", "--epochs", "3"]));
    let o = memdfa(&args);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn zero_epochs_writes_header_only_history() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let mut args = vec!["train", "--algo", "memdfa"];
    args.extend(tiny(&out, &["--epochs", "0"]));
    let o = memdfa(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("history.csv")).unwrap(), "epoch,train_loss,test_accuracy\n");
    assert!(out.join("manifest").is_file());
}

#[test]
fn training_writes_one_history_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let mut args = vec!["train", "--algo", "fa"];
    args.extend(tiny(&out, &["--epochs", "2"]));
    assert_eq!(code(&memdfa(&args)), 0);
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    let rows: Vec<&str> = history.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for (i, row) in rows.iter().enumerate() {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[0], (i + 1).to_string());
        let acc: f64 = cols[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn compare_writes_a_row_per_algorithm() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let mut args = vec!["compare"];
    args.extend(tiny(&out, &["--epochs", "1"]));
    let o = memdfa(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("compare.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "algo,final_accuracy,peak_activation_bytes,forward_matmuls,backward_matmuls");
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    let algos: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(algos, ["bp", "fa", "dfa", "memdfa"]);
    let fwd = |i: usize| rows[i][3].parse::<u64>().unwrap();
    let bwd = |i: usize| rows[i][4].parse::<u64>().unwrap();
    assert_eq!(fwd(3), 2 * fwd(2));
    assert_eq!(bwd(3), bwd(2));
    for algo in algos {
        assert!(out.join(algo).join("history.csv").is_file());
        assert!(out.join(algo).join("memory.csv").is_file());
    }
}

#[test]
fn profile_header_only_reports_zero_peak() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    fs::write(&path, "seq,phase,kind,tag,bytes,live_bytes\n").unwrap();
    let o = memdfa(&["profile", path.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("peak live bytes        0\n"), "{text}");
}

#[test]
fn profile_reports_known_peak() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    fs::write(
        &path,
        "seq,phase,kind,tag,bytes,live_bytes\n\
         0,forward,alloc,activation:L0.z,400,1400\n\
         1,forward,alloc,activation:L0.a,400,1800\n\
         2,backward,free,activation:L0.z,400,1400\n\
         3,backward,alloc,activation:L0.delta,100,1500\n",
    )
    .unwrap();
    let o = memdfa(&["profile", "--sparkline", path.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("baseline bytes         1000\n"), "{text}");
    assert!(text.contains("peak live bytes        1800\n"), "{text}");
    assert!(text.contains("peak activation bytes  800\n"), "{text}");
    assert!(text.contains("live      |"));
}

#[test]
fn profile_agrees_with_exported_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let mut args = vec!["train", "--algo", "bp"];
    args.extend(tiny(&out, &["--epochs", "1"]));
    assert_eq!(code(&memdfa(&args)), 0);
    let csv = fs::read_to_string(out.join("memory.csv")).unwrap();
    let peak = csv
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap())
        .max()
        .unwrap();
    let o = memdfa(&["profile", out.join("memory.csv").to_str().unwrap()]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains(&format!("peak live bytes        {peak}\n")), "{text}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn malformed_csv_exits_2(
        row in prop_oneof![
            "[a-z]{1,8}",
            "[0-9]{1,3},forward,alloc,x,-[0-9]{1,4},[0-9]{1,4}",
            "0,sideways,alloc,activation:x,8,8",
            "0,forward,grow,activation:x,8,8",
            "0,forward,alloc,activation:x,8",
        ]
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, format!("seq,phase,kind,tag,bytes,live_bytes\n{row}\n")).unwrap();
        let o = memdfa(&["profile", path.to_str().unwrap()]);
        prop_assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    }
}
