use std::path::PathBuf;
use std::process::{Command, Output};

fn corpus(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus").join(rel)
}

fn minisan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_minisan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_three_reads_exits_one_with_one_report() {
    let o = minisan(&["run", corpus("scenarios/three_reads.ir").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    let v: Vec<&str> = out.lines().filter(|l| l.starts_with("VIOLATION")).collect();
    assert_eq!(v.len(), 1);
    assert!(v[0].starts_with("VIOLATION kind=heap-buffer-overflow addr=0x"));
    assert!(v[0].ends_with("access=r size=1 site=3"));
    assert!(out.contains("slow_checks_executed=2"));
}

#[test]
fn run_clean_exits_zero() {
    let o = minisan(&["run", corpus("juliet/cwe122/good_loop.ir").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(!stdout(&o).contains("VIOLATION"));
}

#[test]
fn slow_only_same_verdicts() {
    for f in ["juliet/cwe121/bad_loop_off_by_one.ir", "juliet/cwe121/good_loop.ir"] {
        let p = corpus(f);
        let a = minisan(&["run", p.to_str().unwrap()]);
        let b = minisan(&["run", "--mode", "slow-only", p.to_str().unwrap()]);
        assert_eq!(a.status.code(), b.status.code());
        let v = |o: &Output| stdout(o).lines().filter(|l| l.starts_with("VIOLATION")).map(String::from).collect::<Vec<_>>();
        assert_eq!(v(&a), v(&b));
    }
}

#[test]
fn fault_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("p.ir");
    std::fs::write(&f, "fn main { e: %x = call read_input() \n ret }").unwrap();
    let o = minisan(&["run", f.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("EXIT fault input-exhausted"));
    let o = minisan(&["run", "--input", "5", f.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn input_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("p.ir");
    std::fs::write(&f, "fn main { e: %a = call read_input() \n %b = call read_input() \n %c = add %a, %b \n ret %c }").unwrap();
    let i = dir.path().join("in.txt");
    std::fs::write(&i, "40\n0x2\n").unwrap();
    let o = minisan(&["run", "--input", &format!("@{}", i.display()), f.to_str().unwrap()]);
    assert!(stdout(&o).contains("EXIT normal value=42"));
}

#[test]
fn usage_errors() {
    assert_eq!(minisan(&["run", "/nonexistent.ir"]).status.code(), Some(64));
    assert_eq!(minisan(&["run", "--mode", "fast"]).status.code(), Some(64));
    assert_eq!(minisan(&["frobnicate"]).status.code(), Some(64));
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("bad.ir");
    std::fs::write(&f, "fn main { e: %y = add %x, 1 \n ret }").unwrap();
    let o = minisan(&["run", f.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(64));
    assert!(String::from_utf8_lossy(&o.stderr).contains("undefined register"));
}

#[test]
fn analyze_elimination_example() {
    let o = minisan(&["analyze", "--eliminations", corpus("elimination.ir").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let statuses: Vec<&str> = out
        .lines()
        .filter(|l| l.starts_with("SITE"))
        .map(|l| l.rsplit("status=").next().unwrap())
        .collect();
    assert_eq!(statuses, ["eliminated:unsat", "eliminated:unsat", "eliminated:loop", "eliminated:loop"]);
    assert!(out.contains("ELIMINATED rule=loop count=2"));

    let o = minisan(&["analyze", "--no-opt", corpus("elimination.ir").to_str().unwrap()]);
    assert_eq!(stdout(&o).matches("status=active").count(), 4);
    let o = minisan(&["analyze", "--opt-unsat", "0", corpus("elimination.ir").to_str().unwrap()]);
    assert_eq!(stdout(&o).matches("status=active").count(), 2);
}

#[test]
fn analyze_nested_loop_inner_sites_stay() {
    let o = minisan(&["analyze", corpus("bench/loops.ir").to_str().unwrap()]);
    let out = stdout(&o);
    let inner: Vec<&str> = out.lines().filter(|l| l.contains("fn=matrix block=inner")).collect();
    assert_eq!(inner.len(), 2);
    assert!(inner.iter().all(|l| !l.contains("eliminated:loop")));
}

#[test]
fn analyze_dump_shadow() {
    let o = minisan(&["analyze", "--dump-shadow", corpus("juliet/cwe126/bad_global_read.ir").to_str().unwrap()]);
    let out = stdout(&o);
    assert!(out.contains("; globals"));
    assert!(out.contains("00 00 04 f9"));
}

#[test]
fn corpus_summary() {
    let o = minisan(&["corpus", corpus("juliet").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("wide-char") && l.split_whitespace().nth(2) == Some("3")));
    assert!(!out.contains("MISMATCH"));

    let empty = tempfile::tempdir().unwrap();
    let o = minisan(&["corpus", empty.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("total"));
}

#[test]
fn corpus_reports_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("wrong.ir"),
        "; expect: double-free\n; category: cwe415\nfn main { e: %p = call malloc(8) \n call free(%p) \n ret }",
    )
    .unwrap();
    let o = minisan(&["corpus", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("MISMATCH"));
}

#[test]
fn diff_clean_and_straddle() {
    let o = minisan(&["diff", corpus("juliet/cwe126/good_heap_loop_read.ir").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("no divergence"));
    let loads = |mode: &str| -> u64 {
        out.lines()
            .find(|l| l.starts_with(&format!("RUN mode={mode} opt=off")))
            .and_then(|l| l.rsplit("shadow_loads=").next())
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!(loads("two-stage") < loads("slow-only"));

    let o = minisan(&["diff", corpus("scenarios/straddle.ir").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("DIVERGENCE class=known:straddle"));
}

#[test]
fn recover_mode_flag() {
    let p = corpus("scenarios/recover_two_stores.ir");
    let o = minisan(&["run", "--halt-on-error", "0", p.to_str().unwrap()]);
    assert_eq!(stdout(&o).matches("VIOLATION").count(), 2);
    let o = minisan(&["run", "--halt-on-error", "1", p.to_str().unwrap()]);
    assert_eq!(stdout(&o).matches("VIOLATION").count(), 1);
}

#[test]
fn structured_output_parses() {
    let o = minisan(&["run", "--format", "structured", corpus("scenarios/three_reads.ir").to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["exit_code"], 1);
    assert_eq!(v["result"]["reports"][0]["kind"], "heap-buffer-overflow");
}

#[test]
fn config_file_and_magic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "mode = \"slow-only\"\n[space]\nquarantine_capacity = 0\n").unwrap();
    let p = corpus("juliet/cwe416/bad_load.ir");
    // A zero quarantine recycles the chunk at once, but nothing has reused it
    // yet, so it still reads as freed memory.
    let o = minisan(&["run", "--config", cfg.to_str().unwrap(), p.to_str().unwrap()]);
    assert!(stdout(&o).starts_with("VIOLATION kind=heap-use-after-free"));
    assert!(stdout(&o).contains("fast_checks_executed=0"));
    let o = minisan(&["run", "--magic", "0x42", corpus("scenarios/three_reads.ir").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "colour = 1\n").unwrap();
    assert_eq!(minisan(&["run", "--config", bad.to_str().unwrap(), p.to_str().unwrap()]).status.code(), Some(64));
}

#[test]
fn seed_is_reproducible() {
    let a = minisan(&["run", "--seed", "17"]);
    let b = minisan(&["run", "--seed", "17"]);
    assert_eq!(a.stdout, b.stdout);
    let g1 = minisan(&["gen", "--seed", "17"]);
    let g2 = minisan(&["gen", "--seed", "18"]);
    assert_ne!(g1.stdout, g2.stdout);
}
