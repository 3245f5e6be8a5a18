#![allow(dead_code)]
//! Helpers for driving the `magic-nas` binary from tests.

pub mod desk;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/tiny.toml")
}

/// Runs the binary with `args`; the output root is always explicit.
pub fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_magic-nas"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("MAGIC_NAS_OUT")
        .output()
        .expect("binary runs")
}

pub fn run_ok(out: &Path, args: &[&str]) -> String {
    let o = run(out, args);
    assert!(o.status.success(), "{:?} failed: {}", args, String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Every file under `root` except the timestamp sidecars, keyed by relative
/// path.
pub fn artifacts(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "meta.json") {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// The first differing artifact between two output roots, if any.
pub fn first_difference(a: &Path, b: &Path) -> Option<String> {
    let (fa, fb) = (artifacts(a), artifacts(b));
    if fa.keys().ne(fb.keys()) {
        return Some(format!("file sets differ: {:?} vs {:?}", fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>()));
    }
    fa.iter().find(|(k, v)| fb[*k] != **v).map(|(k, _)| format!("{} differs", k.display()))
}

/// All six subcommands on the tiny config.
pub fn all_subcommands(out: &Path) {
    let cfg = tiny_config();
    let cfg = cfg.to_str().unwrap();
    run_ok(out, &["train", "-c", cfg]);
    run_ok(out, &["analyze", "-c", cfg]);
    run_ok(out, &["rank", "-c", cfg, "--jobs", "2"]);
    run_ok(out, &["mixing", "-c", cfg]);
    run_ok(out, &["search", "-c", cfg]);
    run_ok(out, &["standalone", "-c", cfg, "--child", "0.1.2"]);
}
