//! Flat `key=value` configuration files mirroring the long flags.

use std::path::Path;

use anyhow::{bail, Context, Result};

const SUBCOMMANDS: [&str; 7] = [
    "run",
    "plan",
    "boundaries",
    "tables",
    "verify",
    "perm-example",
    "ext-child",
];

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key=value, got {raw:?}", no + 1);
        };
        let k = k.trim().trim_start_matches("--").replace('_', "-");
        if k.is_empty() || k == "config" {
            bail!("line {}: invalid key {k:?}", no + 1);
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    parse(&text).with_context(|| format!("in config {}", path.display()))
}

/// Inserts the file's flags right after the subcommand so that later
/// command-line flags override them. `true`/`false` values toggle switches.
pub fn splice(argv: &[String], pairs: &[(String, String)]) -> Result<Vec<String>> {
    let pos = argv
        .iter()
        .skip(1)
        .position(|a| SUBCOMMANDS.contains(&a.as_str()))
        .map(|p| p + 2)
        .context("no subcommand given")?;
    let mut flags = Vec::new();
    for (k, v) in pairs {
        match v.as_str() {
            "true" => flags.push(format!("--{k}")),
            "false" => {}
            _ => flags.push(format!("--{k}={v}")),
        }
    }
    let mut out = argv[..pos].to_vec();
    out.extend(flags);
    out.extend_from_slice(&argv[pos..]);
    Ok(out)
}
