//! Flat `key = value` configuration files.
//!
//! Keys are flag names with `_` or `-`; `#` starts a comment. File entries are spliced in
//! right after the subcommand name so that explicit flags, which come later, win.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{ArgMatches, CommandFactory};

use crate::args::Cli;
use crate::{usage, CliError, CliResult};

pub fn parse(text: &str) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(usage(format!("config line {}: expected `key = value`", no + 1)));
        };
        let key = k.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(usage(format!("config line {}: bad key {:?}", no + 1, k.trim())));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Splices the entries of the `--config` file, if any, into `argv`.
pub fn expand(argv: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path).map_err(|source| CliError::Io { path: path.clone(), source })?;
    let entries = parse(&text)?;
    let names: Vec<String> = Cli::command().get_subcommands().map(|c| c.get_name().to_string()).collect();
    let Some(pos) = argv.iter().position(|a| names.iter().any(|n| a.to_string_lossy() == *n)) else {
        return Ok(argv);
    };
    let mut out = argv[..=pos].to_vec();
    out.extend(entries.iter().map(|(k, v)| OsString::from(format!("--{k}={v}"))));
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

/// Every resolved flag of the invoked subcommand, defaults included, as config text.
pub fn resolved(matches: &ArgMatches) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    let Some((name, sub)) = matches.subcommand() else {
        return String::new();
    };
    let mut out = format!("# molrg {name}\n");
    let subcmd = cmd.find_subcommand(name).expect("matched subcommand exists");
    for arg in subcmd.get_arguments() {
        let id = arg.get_id().as_str();
        if id == "config" || id == "help" || id == "version" {
            continue;
        }
        if let Some(vals) = sub.get_raw(id) {
            let vals: Vec<String> = vals.map(|v| v.to_string_lossy().into_owned()).collect();
            let key = arg.get_long().unwrap_or(id).replace('-', "_");
            out.push_str(&format!("{key} = {}\n", vals.join(",")));
        }
    }
    out
}
