//! Compiles a C program against the generated header and the static
//! library. Skipped when no C compiler is on PATH.

use std::path::PathBuf;
use std::process::Command;

#[test]
fn c_program_links_and_runs() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("cc not found; skipping");
        return;
    }
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let lib = deps.join("libmpl_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "smoke exited with {:?}", out.status.code());
    let steps: usize = String::from_utf8(out.stdout).unwrap().trim().parse().unwrap();
    assert!((1..=200).contains(&steps));
}
