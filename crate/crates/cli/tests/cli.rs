//! Exit codes and report files of the `tada` binary.

use std::path::PathBuf;
use std::process::{Command, Output};

fn tada(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tada")).args(args).output().expect("binary runs")
}

fn code(args: &[&str]) -> i32 {
    tada(args).status.code().expect("exited normally")
}

fn stdout(args: &[&str]) -> String {
    String::from_utf8(tada(args).stdout).unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("tada-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn passing_suites_exit_zero() {
    assert_eq!(code(&["equivalence", "--cases", "5"]), 0);
    assert_eq!(code(&["equivalence", "--cases", "5", "--dtype", "f32"]), 0);
    assert_eq!(code(&["gradcheck", "--cases", "2"]), 0);
}

#[test]
fn injected_fault_exits_one() {
    let out = tada(&["equivalence", "--cases", "3", "--fault-injection"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stdout).unwrap().contains("FAIL"));
}

#[test]
fn malformed_input_exits_two() {
    assert_eq!(code(&["gradcheck", "--dtype", "f32", "--cases", "1"]), 2);
    assert_eq!(code(&["cost", "no-such-preset"]), 2);
    assert_eq!(code(&["cost", "op", "--kind", "spatial", "--ci", "4"]), 2);
    assert_eq!(code(&["cost", "op", "--kind", "tadaconv", "--ci", "4", "--co", "4", "--k", "3", "--t", "2", "--h", "4", "--w", "4"]), 2);
    assert_eq!(code(&["demo", "--cases", "0"]), 2);
    assert_eq!(code(&["no-such-command"]), 2);
}

#[test]
fn op_cost_prints_exact_counts() {
    let s = stdout(&[
        "cost", "op", "--kind", "tadaconv", "--ci", "64", "--co", "64", "--k", "3", "--t", "8", "--h", "56", "--w", "56", "--r", "4",
    ]);
    assert!(s.contains("926795264") || s.contains("926,795,264"), "{s}");
    assert!(s.contains("43008") || s.contains("43,008"), "{s}");
}

#[test]
fn cost_compare_reports_a_delta() {
    let out = tada(&["cost", "tada2d50", "--convention", "executable", "--compare", "r2d50"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(!out.stdout.is_empty());
}

#[test]
fn report_files_are_byte_identical_across_runs() {
    for (name, args) in [
        ("eq", vec!["equivalence", "--cases", "4", "--seed", "3"]),
        ("grad", vec!["gradcheck", "--cases", "2", "--seed", "3"]),
        ("cost", vec!["cost", "r2plus1d50", "--convention", "appendixb"]),
    ] {
        let paths = [scratch(&format!("{name}-a.csv")), scratch(&format!("{name}-b.csv"))];
        for p in &paths {
            let mut a = args.clone();
            a.extend(["--out", p.to_str().unwrap()]);
            assert_eq!(code(&a), 0, "{name}");
        }
        let [a, b] = paths.map(|p| std::fs::read(p).unwrap());
        assert!(!a.is_empty());
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn demo_config_drives_a_short_run() {
    let cfg = scratch("demo.cfg");
    std::fs::write(&cfg, "seed = 5\ntrain_per_class = 8\ntest_per_class = 10\nmax_epochs = 2\nwidth = 8\n").unwrap();
    let out_a = scratch("demo-a.csv");
    let out_b = scratch("demo-b.csv");
    for p in [&out_a, &out_b] {
        let args = ["demo", "--model", "static", "--config", cfg.to_str().unwrap(), "--out", p.to_str().unwrap()];
        assert_eq!(code(&args), 0);
    }
    let csv = std::fs::read_to_string(&out_a).unwrap();
    assert!(csv.starts_with("seed,model,epoch,loss,train_accuracy,test_accuracy,reversed_accuracy"));
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(csv, std::fs::read_to_string(&out_b).unwrap());

    std::fs::write(&cfg, "train_per_class = 8\n").unwrap();
    assert_eq!(code(&["demo", "--config", cfg.to_str().unwrap()]), 2);
}
