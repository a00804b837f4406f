//! Expansion of `--config FILE` into ordinary flags.
//!
//! Each key of the JSON object becomes `--key=value`, inserted right after the
//! subcommand so that flags typed on the command line, which come later and
//! override earlier occurrences, win.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use clap::Command;
use serde_json::Value;

/// Flags that take a value and may precede the subcommand.
const GLOBAL_VALUE_FLAGS: [&str; 2] = ["--threads", "--config"];

/// Returns `args` with the config file's flags spliced in, or unchanged when
/// no `--config` is given.
pub fn expand(cmd: &Command, args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = find_config(&args) else {
        return Ok(args);
    };
    let (at, path_to_sub) = subcommand_end(cmd, &args);
    let Some(sub) = path_to_sub else {
        // Missing subcommand: let clap report it.
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("{}", path.display()))?;
    let value: Value =
        serde_json::from_str(&text).with_context(|| format!("{}", path.display()))?;
    let tokens = flag_tokens(sub, &value, &path)?;
    let mut out = args;
    out.splice(at..at, tokens);
    Ok(out)
}

fn find_config(args: &[OsString]) -> Option<std::path::PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            return it.next().map(Into::into);
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
    }
    None
}

/// Index just past the subcommand name(s), and the innermost subcommand.
fn subcommand_end<'a>(cmd: &'a Command, args: &[OsString]) -> (usize, Option<&'a Command>) {
    let mut current = cmd;
    let mut found = None;
    let mut i = 1;
    while i < args.len() {
        let s = args[i].to_string_lossy();
        if GLOBAL_VALUE_FLAGS.contains(&s.as_ref()) {
            i += 2;
            continue;
        }
        if s.starts_with('-') {
            i += 1;
            continue;
        }
        match current.find_subcommand(s.as_ref()) {
            Some(sub) => {
                current = sub;
                found = Some(sub);
                i += 1;
                if !sub.has_subcommands() {
                    return (i, found);
                }
            }
            None => break,
        }
    }
    (i.min(args.len()), found)
}

fn flag_tokens(sub: &Command, value: &Value, path: &Path) -> Result<Vec<OsString>> {
    let Value::Object(map) = value else {
        bail!(
            "{}: expected a JSON object of flag names to values",
            path.display()
        );
    };
    let mut out = Vec::with_capacity(map.len());
    for (key, v) in map {
        let flag = key.replace('_', "-");
        if flag == "config" {
            bail!(
                "{}: a config file cannot name another config file",
                path.display()
            );
        }
        let known = flag == "threads"
            || sub
                .get_arguments()
                .any(|a| a.get_long() == Some(flag.as_str()));
        if !known {
            bail!(
                "{}: unknown key `{key}` for `{}`",
                path.display(),
                sub.get_name()
            );
        }
        match v {
            Value::Null => {}
            Value::Bool(_) => bail!(
                "{}: key `{key}` takes a value, not a boolean",
                path.display()
            ),
            _ => out.push(
                format!(
                    "--{flag}={}",
                    scalar(v).map_err(|e| anyhow!("{}: key `{key}`: {e}", path.display()))?
                )
                .into(),
            ),
        }
    }
    Ok(out)
}

fn scalar(v: &Value) -> std::result::Result<String, String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Array(items) => items
            .iter()
            .map(|x| match x {
                Value::Number(n) => Ok(n.to_string()),
                Value::String(s) => Ok(s.clone()),
                _ => Err("array entries must be numbers or strings".to_string()),
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(|parts| parts.join(",")),
        _ => Err("unsupported value type".to_string()),
    }
}
