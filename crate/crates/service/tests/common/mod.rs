#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

pub fn recovery(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recovery")).args(args).output().expect("binary runs")
}

pub fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small simulated study and a short fit of it, shared by every test in
/// the binary.
pub struct Fixture {
    _dir: tempfile::TempDir,
    pub data: PathBuf,
    pub fit: PathBuf,
}

pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let fit = dir.path().join("fit");
        let out = recovery(&["simulate", "--n", "60", "--seed", "3", "--out", path(&data)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let out = recovery(&[
            "fit",
            "--data",
            path(&data),
            "--out",
            path(&fit),
            "--chains",
            "2",
            "--warmup",
            "400",
            "--keep",
            "400",
        ]);
        assert!(matches!(out.status.code(), Some(0 | 3)), "{}", String::from_utf8_lossy(&out.stderr));
        Fixture { _dir: dir, data, fit }
    })
}
