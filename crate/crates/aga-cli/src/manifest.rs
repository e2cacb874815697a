//! Run manifests: one `manifest.json` per output directory, written before
//! any long computation starts. Everything except the timestamp is a pure
//! function of the invocation.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::error::CliError;

pub fn write_manifest(
    out_dir: &Path,
    command: &[String],
    config_hash: &str,
    seed: u64,
    corpus_hash: Option<&str>,
    outputs: &[&str],
) -> Result<(), CliError> {
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let value = serde_json::json!({
        "command": command,
        "config_hash": config_hash,
        "seed": seed,
        "started_unix": started,
        "corpus_hash": corpus_hash,
        "outputs": outputs,
    });
    let text = format!("{}\n", serde_json::to_string_pretty(&value).expect("manifest json"));
    std::fs::write(out_dir.join("manifest.json"), text)?;
    Ok(())
}
