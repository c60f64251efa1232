use std::path::Path;
use std::process::Command;

fn run(config: &str, out: &Path) -> Option<i32> {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(config);
    Command::new(env!("CARGO_BIN_EXE_crowbar"))
        .args(["attack", "--config"])
        .arg(cfg)
        .arg("--out-dir")
        .arg(out)
        .output()
        .unwrap()
        .status
        .code()
}

#[test]
fn shipped_configs_behave_as_documented() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(run("attack.toml", &d.path().join("a")), Some(0));
    assert_eq!(run("hardened.toml", &d.path().join("h")), Some(2));
}
