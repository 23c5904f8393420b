//! `run.json`: what ran, with which fully resolved settings, on what build
//! and host, and what came out.

use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};

pub fn build_info() -> Value {
    json!({
        "version": env!("CARGO_PKG_VERSION"),
        "git_commit": env!("SEQOP_GIT_COMMIT"),
        "git_dirty": env!("SEQOP_GIT_DIRTY"),
        "rustc": env!("SEQOP_RUSTC"),
        "profile": env!("SEQOP_PROFILE"),
        "target": env!("SEQOP_TARGET"),
    })
}

pub fn host_info() -> Value {
    json!({
        "cpu": seqop_core::bench::cpu_model(),
        "cores": std::thread::available_parallelism().map_or(1, |n| n.get()),
        "seqop_threads": std::env::var("SEQOP_THREADS").ok(),
    })
}

pub struct Run<'a> {
    pub command: &'a str,
    pub args: Value,
    pub resolved: Value,
    pub result: Value,
    pub config_file: Option<&'a Path>,
    pub started: SystemTime,
    pub elapsed: Duration,
}

pub fn write(dir: &Path, run: &Run) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let doc = json!({
        "command": run.command,
        "args": run.args,
        "resolved": run.resolved,
        "config_file": run.config_file,
        "result": run.result,
        "build": build_info(),
        "host": host_info(),
        "started_unix_s": run.started.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        "elapsed_s": run.elapsed.as_secs_f64(),
    });
    let path = dir.join("run.json");
    let mut text = serde_json::to_string_pretty(&doc).map_err(std::io::Error::other)?;
    text.push('\n');
    std::fs::write(&path, text)?;
    Ok(path)
}
