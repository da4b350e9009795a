use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_glitchbench"));
    c.env_remove("GLITCHBENCH_TIMING");
    c
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["inject", "x.img", "--cycle", "notanumber", "--offset", "5"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
}

#[test]
fn asm_then_run_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("bnn.img");
    let o = run(&["asm", s(&fixtures().join("bnn.s")), "-o", s(&img)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["run", s(&img), "--timing", s(&fixtures().join("timing_ref.json"))]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("golden match: true"), "{out}");
    let inputs: Value = serde_json::from_str(&std::fs::read_to_string(fixtures().join("inputs.json")).unwrap()).unwrap();
    assert!(out.contains(&format!("output_log: [{}]", inputs["golden_labels"][0])), "{out}");
}

#[test]
fn run_json_reports_match() {
    let o = run(&["run", s(&fixtures().join("micro_load.s")), "--json"]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["golden_match"], true);
    assert_eq!(v["output_log"].as_array().unwrap().len(), 1);
}

#[test]
fn parse_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.s");
    std::fs::write(&bad, "addi x1, x0\nfoo x1\n").unwrap();
    let o = run(&["asm", s(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.s"));

    let missing = dir.path().join("missing.img");
    assert_eq!(code(&run(&["run", s(&missing)])), 2);

    let timing = dir.path().join("t.json");
    std::fs::write(&timing, "{ not json").unwrap();
    let src = fixtures().join("micro_alu_reg.s");
    assert_eq!(code(&run(&["run", s(&src), "--timing", s(&timing)])), 2);
    let o = bin()
        .args(["run", s(&src)])
        .env("GLITCHBENCH_TIMING", &timing)
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn not_halted_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("spin.s");
    std::fs::write(&src, "spin: j spin\n").unwrap();
    let o = run(&["run", s(&src), "--max-cycles", "100"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("NOT_HALTED"));
}

#[test]
fn offset_outside_domain_is_usage_error() {
    let src = fixtures().join("micro_load.s");
    assert_eq!(code(&run(&["inject", s(&src), "--cycle", "9", "--offset", "0.2"])), 1);
    assert_eq!(code(&run(&["inject", s(&src), "--cycle", "9", "--offset", "10.0"])), 1);
}

#[test]
fn static_rat_ranks_load_fetch_first() {
    let o = run(&["rat"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("iclass,stage,t_crit_ns,slack_ns,window_lo_ns,window_hi_ns,rank"));
    assert_eq!(lines.next(), Some("LOAD,IF_ID,8.600,1.200,1.000,8.800,1"));
}

#[test]
fn rat_writes_both_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["rat", s(&fixtures().join("micro_load.s")), "-o", s(dir.path())]);
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("rat_static.csv").exists());
    let dynamic = std::fs::read_to_string(dir.path().join("rat_dynamic.jsonl")).unwrap();
    assert!(dynamic.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));
    assert!(dynamic.contains("\"label\":\"bench\""));
}

/// First IF_ID window on a threshold load, from the dynamic RAT.
fn threshold_load_window(img: &Path) -> (u64, f64) {
    let o = run(&["rat", s(img), "--dynamic"]);
    assert_eq!(code(&o), 0);
    stdout(&o)
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .find(|w| {
            w["latch"] == "IF_ID"
                && w["iclass"] == "LOAD"
                && w["label"].as_str().is_some_and(|l| l.starts_with("l1_thr_") && !l.contains('+'))
                && w["occupants"]["ID"].is_null()
        })
        .map(|w| {
            let (lo, hi) = (w["lo_ns"].as_f64().unwrap(), w["hi_ns"].as_f64().unwrap());
            (w["cycle"].as_u64().unwrap(), ((lo + hi) / 2.0 * 1000.0).floor() / 1000.0)
        })
        .expect("threshold load window")
}

#[test]
fn inject_at_rat_window_replaces_load_with_nop() {
    let img = fixtures().join("bnn.img");
    let (cycle, mid) = threshold_load_window(&img);
    let o = run(&[
        "inject",
        s(&img),
        "--cycle",
        &cycle.to_string(),
        "--offset",
        &mid.to_string(),
        "--json",
    ]);
    assert_eq!(code(&o), 0);
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["outcome"], "NOP_REPLACEMENT");
    assert_eq!(r["root_cause"]["latch"], "IF_ID");
    assert_eq!(r["root_cause"]["field"], "instr_word");

    let o = run(&["inject", s(&img), "--cycle", &cycle.to_string(), "--offset", &mid.to_string()]);
    assert!(stdout(&o).contains("outcome: NOP_REPLACEMENT"));
}

#[test]
fn campaign_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let src = fixtures().join("micro_load.s");
    let out1 = dir.path().join("j1");
    let out4 = dir.path().join("j4");
    for (jobs, out) in [("1", &out1), ("4", &out4)] {
        let o = run(&[
            "campaign",
            s(&src),
            "--cycles",
            "5:15",
            "--offset-range",
            "1.0:8.9:0.1",
            "--policy",
            "STALE_BITS,ZERO_LATE_BITS",
            "--jobs",
            jobs,
            "-o",
            s(out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = std::fs::read(out1.join("report.json")).unwrap();
    assert_eq!(a, std::fs::read(out4.join("report.json")).unwrap());
    let report: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["records"].as_array().unwrap().len(), 10 * 80 * 2);
    let csv = std::fs::read_to_string(out1.join("records.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 10 * 80 * 2);

    let o = run(&["report", s(&out1.join("report.json")), "--format", "md"]);
    assert_eq!(code(&o), 0);
    let md = stdout(&o);
    assert!(md.contains("| stage |"));
    assert!(md.contains("| ID |"));

    let o = run(&["report", s(&out1.join("report.json")), "--format", "csv"]);
    let csv = stdout(&o);
    assert!(csv.starts_with("pc,instruction,iclass,executed_as,runs,"));
    assert!(csv.contains("lw "));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "[]").unwrap();
    assert_eq!(code(&run(&["report", s(&bad)])), 2);
}

#[test]
fn campaign_plan_file() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    let src = fixtures().join("micro_alu_reg.s");
    std::fs::write(
        &plan,
        serde_json::json!({
            "program": src,
            "cycles": {"lo": 0, "hi": 4},
            "offsets": {"lo_ns": 9.0, "hi_ns": 9.5, "step_ns": 0.5},
        })
        .to_string(),
    )
    .unwrap();
    let o = run(&["campaign", "--plan", s(&plan), "-o", s(dir.path()), "--json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["runs"], 8);
    assert_eq!(summary["outcomes"]["NO_EFFECT"], 8);

    std::fs::write(&plan, r#"{"cycles": {"lo": 0, "hi": 4}, "offsets": {"lo_ns": 0.1, "hi_ns": 9.5, "step_ns": 0.5}}"#).unwrap();
    assert_eq!(code(&run(&["campaign", s(&src), "--plan", s(&plan), "-o", s(dir.path())])), 1);
}

#[test]
fn workload_generation_matches_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["workload", "bnn", "-o", s(dir.path())])), 0);
    for f in ["bnn.s", "inputs.json", "bnn.seg0.bin", "bnn.seg1.bin", "bnn.img"] {
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(fixtures().join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(code(&run(&["workload", "micro", "--iclass", "load", "-o", s(dir.path())])), 0);
    assert_eq!(
        std::fs::read(dir.path().join("micro_load.s")).unwrap(),
        std::fs::read(fixtures().join("micro_load.s")).unwrap()
    );
    assert_eq!(code(&run(&["workload", "micro", "--iclass", "bogus"])), 1);
}
