use std::path::{Path, PathBuf};
use std::process::Command;

fn has_cc() -> bool {
    Command::new("cc").arg("--version").output().is_ok_and(|o| o.status.success())
}

/// Directory holding this build's library artifacts (target/<profile>).
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links() {
    if !has_cc() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let tmp = tempfile::tempdir().unwrap();
    let obj = tmp.path().join("smoke.o");
    let st = Command::new("cc")
        .args(["-std=c11", "-Wall", "-Werror", "-c"])
        .arg("-I")
        .arg(root.join("include"))
        .arg(root.join("tests/c/smoke.c"))
        .arg("-o")
        .arg(&obj)
        .status()
        .unwrap();
    assert!(st.success(), "smoke.c failed to compile against the header");

    let lib = artifact_dir().join("libparamdrop_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; compiled only", lib.display());
        return;
    }
    let exe = tmp.path().join("smoke");
    let st = Command::new("cc")
        .arg(&obj)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(st.success(), "link failed");
    let cfg = root.join("../core/tests/scenarios/small.toml");
    let out = Command::new(&exe).arg(cfg).output().unwrap();
    assert!(out.status.success(), "{:?} {}", out.status, String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
