//! Drives the `slicefold` binary and checks outputs and exit codes.

use std::path::PathBuf;
use std::process::{Command, Output};

use slicefold::asm::normalize_listing;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn listing(name: &str) -> String {
    root().join("listings").join(name).to_string_lossy().into_owned()
}

fn slicefold(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slicefold")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn fold_writes_the_golden_layout_and_corrmap() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.tasm");
    let map = dir.path().join("out.corr");
    let o = slicefold(&[
        "fold",
        &listing("running.sasm"),
        "-o",
        out.to_str().unwrap(),
        "--emit-corrmap",
        map.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let written = std::fs::read_to_string(&out).unwrap();
    let golden = std::fs::read_to_string(listing("running.tasm")).unwrap();
    assert_eq!(normalize_listing(&written).unwrap(), normalize_listing(&golden).unwrap());
    let corr = std::fs::read_to_string(&map).unwrap();
    assert!(corr.lines().all(|l| l.contains(" -> ")), "{corr}");
}

#[test]
fn folded_output_passes_strong_oni_and_balanced_source_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.tasm");
    assert_eq!(code(&slicefold(&["fold", &listing("running.sasm"), "-o", out.to_str().unwrap()])), 0);
    let pass = slicefold(&["check-oni", out.to_str().unwrap(), "--observer", "strong", "--policy", &listing("running.policy")]);
    assert_eq!(code(&pass), 0, "{}", stdout(&pass));
    let fail = slicefold(&["check-oni", &listing("running.sasm"), "--observer", "strong"]);
    assert_eq!(code(&fail), 1, "{}", stdout(&fail));
    assert!(stdout(&fail).contains("fail at step"));
    let weak = slicefold(&["check-oni", &listing("running.sasm"), "--observer", "weak"]);
    assert_eq!(code(&weak), 0, "{}", stdout(&weak));
}

#[test]
fn vulnerable_source_fails_weak_oni() {
    let o = slicefold(&[
        "check-oni",
        &listing("running_vulnerable.sasm"),
        "--observer",
        "weak",
        "--policy",
        &listing("running.policy"),
    ]);
    assert_eq!(code(&o), 1, "{}", stdout(&o));
}

#[test]
fn linearize_matches_golden_and_is_equivalent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("lin.sasm");
    let vulnerable = listing("running_vulnerable.sasm");
    assert_eq!(code(&slicefold(&["linearize", &vulnerable, "-o", out.to_str().unwrap()])), 0);
    let written = std::fs::read_to_string(&out).unwrap();
    let golden = std::fs::read_to_string(listing("running_linearized.sasm")).unwrap();
    assert_eq!(normalize_listing(&written).unwrap(), normalize_listing(&golden).unwrap());
    let policy = listing("running.policy");
    let eq = slicefold(&["check-correctness", &vulnerable, "--against", out.to_str().unwrap(), "--policy", &policy]);
    assert_eq!(code(&eq), 0, "{}", stdout(&eq));
    let oni = slicefold(&["check-oni", out.to_str().unwrap(), "--policy", &policy]);
    assert_eq!(code(&oni), 0, "{}", stdout(&oni));
}

#[test]
fn check_correctness_folds_and_runs_lockstep() {
    let o = slicefold(&["check-correctness", &listing("running.sasm")]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).starts_with("verdict=pass"));
}

#[test]
fn run_and_trace_report_state_and_observations() {
    let run = slicefold(&["run", &listing("deep_calls.sasm")]);
    assert_eq!(code(&run), 0);
    assert!(stdout(&run).contains("reg a0 = 11"), "{}", stdout(&run));

    let running = listing("running.sasm");
    let a = stdout(&slicefold(&["trace", &running, "--assignment", "0", "--observer", "weak"]));
    let b = stdout(&slicefold(&["trace", &running, "--assignment", "1", "--observer", "weak"]));
    assert!(a.starts_with("step=0 pc=0"));
    let obs = |t: &str| t.lines().map(|l| l.split(" obs=").nth(1).unwrap_or("").to_string()).collect::<Vec<_>>();
    assert_eq!(obs(&a), obs(&b));

    let set = slicefold(&["run", &running, "--set", "s1=40", "--set", "secret=0"]);
    assert!(stdout(&set).contains("halt=halted"), "{}", stdout(&set));
}

#[test]
fn hw_mode_rejects_wide_levels_and_deep_calls() {
    let wide = listing("wide_level.sasm");
    assert_eq!(code(&slicefold(&["fold", &wide])), 0);
    let o = slicefold(&["fold", &wide, "--hw-mode"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("LEVEL_TOO_WIDE"));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("deep.tasm");
    assert_eq!(code(&slicefold(&["fold", &listing("deep_calls.sasm"), "-o", out.to_str().unwrap()])), 0);
    assert_eq!(code(&slicefold(&["run", out.to_str().unwrap()])), 0);
    let hw = slicefold(&["run", out.to_str().unwrap(), "--hw-mode"]);
    assert_eq!(code(&hw), 1);
    assert!(stdout(&hw).contains("stuck"), "{}", stdout(&hw));
}

#[test]
fn cfg_dump_lists_blocks_edges_and_regions() {
    let o = slicefold(&["cfg-dump", &listing("running.sasm")]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("B0 -> B1"));
    assert!(text.contains("region B0 -> B3"), "{text}");
}

#[test]
fn bench_prints_verdicts_metrics_and_table() {
    let corpus = root().join("corpus");
    let o = slicefold(&["bench", corpus.to_str().unwrap(), "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("bench=modexp2 check=folded-strong verdict=pass"));
    assert!(text.contains("bench=fork variant=folded static="));
    assert!(text.contains("mean size ratio"));
}

#[test]
fn usage_and_parse_errors_exit_two() {
    assert_eq!(code(&slicefold(&["frobnicate"])), 2);
    assert_eq!(code(&slicefold(&["check-oni", &listing("running.sasm"), "--observer", "sideways"])), 2);
    assert_eq!(code(&slicefold(&["run", "/nonexistent.sasm"])), 2);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.sasm");
    std::fs::write(&bad, "    frob a0,a1\n").unwrap();
    assert_eq!(code(&slicefold(&["run", bad.to_str().unwrap()])), 2);
    let mixed = dir.path().join("mixed.sasm");
    std::fs::write(&mixed, "    s.br a0,x,x\nx:\n    lo.br zero,0:0:1\n").unwrap();
    assert_eq!(code(&slicefold(&["run", mixed.to_str().unwrap()])), 2);
    // No policy beside the input and none given.
    let lone = dir.path().join("lone.sasm");
    std::fs::write(&lone, "    addi a0,a0,1\n").unwrap();
    assert_eq!(code(&slicefold(&["check-oni", lone.to_str().unwrap()])), 2);
}
