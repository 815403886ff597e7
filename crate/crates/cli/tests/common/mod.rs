#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub const SMALL: &str = r#"
seed = 5
synthetic_groups = 6
synthetic_error_rate = 0.5

[experiment]
stage1_conditions = 12
stage2_groups = 6
test_cases = 4

[experiment.stage1]
steps = 6
batch = 2
log_every = 3

[experiment.stage2]
steps = 3
batch = 2
log_every = 1

[experiment.sample]
steps = 3
"#;

pub fn glyphforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glyphforge"))
        .args(args)
        .env_remove("GLYPHFORGE_DATA")
        .output()
        .expect("spawn glyphforge")
}

pub fn ok(args: &[&str]) -> Output {
    let out = glyphforge(args);
    assert!(
        out.status.success(),
        "glyphforge {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn fails(args: &[&str]) -> String {
    let out = glyphforge(args);
    assert!(
        !out.status.success(),
        "glyphforge {args:?} unexpectedly succeeded"
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn write_config(dir: &Path, name: &str, extra: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, format!("{SMALL}\n{extra}")).unwrap();
    path.to_str().unwrap().to_owned()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
