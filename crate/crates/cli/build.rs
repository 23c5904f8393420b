//! Bakes a build fingerprint into the binary for run manifests.

use std::path::Path;
use std::process::Command;

fn run(cmd: &str, args: &[&str]) -> Option<String> {
    let out = Command::new(cmd).args(args).output().ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

fn main() {
    let commit = run("git", &["rev-parse", "HEAD"]).unwrap_or_else(|| "unknown".into());
    let dirty = run("git", &["status", "--porcelain", "--untracked-files=no"])
        .map_or_else(|| "unknown".into(), |s| (!s.is_empty()).to_string());
    let rustc = std::env::var("RUSTC").unwrap_or_else(|_| "rustc".into());
    let rustc = run(&rustc, &["-V"]).unwrap_or_else(|| "unknown".into());
    println!("cargo:rustc-env=SEQOP_GIT_COMMIT={commit}");
    println!("cargo:rustc-env=SEQOP_GIT_DIRTY={dirty}");
    println!("cargo:rustc-env=SEQOP_RUSTC={rustc}");
    println!(
        "cargo:rustc-env=SEQOP_PROFILE={}",
        std::env::var("PROFILE").unwrap_or_default()
    );
    println!(
        "cargo:rustc-env=SEQOP_TARGET={}",
        std::env::var("TARGET").unwrap_or_default()
    );
    for f in ["../../.git/HEAD", "../../.git/index"] {
        if Path::new(f).exists() {
            println!("cargo:rerun-if-changed={f}");
        }
    }
    println!("cargo:rerun-if-changed=build.rs");
}
