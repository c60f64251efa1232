use std::path::Path;
use std::process::{Command, Output};

fn crowbar(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crowbar"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn attack_succeeds_and_writes_artifacts() {
    let d = tempfile::tempdir().unwrap();
    let o = crowbar(&["attack", "--seed", "3", "--out-dir", "out"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("matches device: true"));
    for f in [
        "attempts.jsonl",
        "irom_dump.bin",
        "fek_dump.bin",
        "mb1.dec.bin",
        "report.json",
        "report.txt",
    ] {
        assert!(d.path().join("out").join(f).is_file(), "{f}");
    }
    let r = crowbar(&["report", "out/attempts.jsonl"], d.path());
    assert_eq!(r.status.code(), Some(0));
    assert!(stdout(&r).contains("successes"));
}

#[test]
fn exhausted_budget_exits_2() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(
        d.path().join("c.toml"),
        "seed = 1\n[grid]\nlengths_ns = [9000]\n[grid.offsets]\nlo_ns = 2600000\nhi_ns = 2610000\nstep_ns = 20\n[strategy]\nkind = \"RANDOM\"\n[budget]\nmax_attempts = 50\n",
    )
    .unwrap();
    let o = crowbar(&["attack", "--config", "c.toml", "--out-dir", "out"], d.path());
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.path().join("out/attempts.jsonl").is_file());
}

#[test]
fn resume_continues_a_log() {
    let d = tempfile::tempdir().unwrap();
    let a = crowbar(&["attack", "--seed", "3", "--out-dir", "a"], d.path());
    assert_eq!(a.status.code(), Some(0));
    let log = std::fs::read_to_string(d.path().join("a/attempts.jsonl")).unwrap();
    let half: Vec<&str> = log.lines().take(log.lines().count() / 2).collect();
    std::fs::write(d.path().join("partial.jsonl"), half.join("\n")).unwrap();
    let b = crowbar(&["attack", "--seed", "3", "--resume", "partial.jsonl", "--out-dir", "b"], d.path());
    assert_eq!(b.status.code(), Some(0), "{}", String::from_utf8_lossy(&b.stderr));
    assert_eq!(std::fs::read(d.path().join("b/attempts.jsonl")).unwrap(), log.as_bytes());
}

#[test]
fn errors_exit_1() {
    let d = tempfile::tempdir().unwrap();
    let o = crowbar(&["attack", "--config", "missing.toml"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.toml"));
    std::fs::write(d.path().join("bad.payload"), [0u8; 40]).unwrap();
    assert_eq!(crowbar(&["payload", "decode", "bad.payload"], d.path()).status.code(), Some(1));
    assert_eq!(crowbar(&["oracle", "--target", "NOPE"], d.path()).status.code(), Some(1));
}

#[test]
fn payload_commands_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let o = crowbar(&["payload", "build-dump", "--count", "0x1200", "-o", "dump.payload"], d.path());
    assert_eq!(o.status.code(), Some(0));
    let o = crowbar(&["payload", "decode", "dump.payload", "--code-out", "code.bin"], d.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("entry_addr:  0x52000000"));
    let o = crowbar(
        &[
            "payload",
            "encode",
            "--entry",
            "0x52000000",
            "--code",
            "code.bin",
            "-o",
            "again.payload",
        ],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        std::fs::read(d.path().join("again.payload")).unwrap(),
        std::fs::read(d.path().join("dump.payload")).unwrap()
    );
}

#[test]
fn oracle_and_feasibility_print_reports() {
    let d = tempfile::tempdir().unwrap();
    let o = crowbar(&["oracle"], d.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("cbz") && text.contains("bne"), "{text}");
    let o = crowbar(&["oracle", "--target", "FUSECHECK_HARDENED", "--corrupt"], d.path());
    assert_eq!(o.status.code(), Some(0));
    let o = crowbar(&["feasibility", "--out-dir", "f"], d.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("minimal crashing length:   13.00 us"));
    assert!(d.path().join("f/feasibility.json").is_file());
}

#[test]
fn generated_bundle_feeds_attack() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(
        crowbar(&["generate", "--seed", "4", "--out-dir", "dev"], d.path()).status.code(),
        Some(0)
    );
    std::fs::write(d.path().join("c.toml"), "seed = 2\n[image]\npath = \"dev\"\n").unwrap();
    let o = crowbar(&["attack", "--config", "c.toml", "--out-dir", "out"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}
