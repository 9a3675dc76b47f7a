//! `--config FILE` support: a JSON object whose keys are flag names.
//!
//! Top-level keys apply to every subcommand; a key naming the subcommand may
//! hold an object of further keys for that subcommand alone. The values are
//! spliced into the argument list right after the subcommand, ahead of the
//! user's own flags, so anything given explicitly wins.

use std::ffi::OsString;
use std::fs;

use serde_json::{Map, Value};

const SUBCOMMANDS: [&str; 6] = ["norms", "merge", "expo", "search", "sweep", "lab"];
const GLOBAL_VALUE_FLAGS: [&str; 2] = ["--jobs", "--config"];

/// Returns `args` with the contents of any `--config` file expanded in place.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(path) = config_path(&args)? else {
        return Ok(args);
    };
    let Some(sub_at) = subcommand_index(&args) else {
        return Ok(args);
    };
    let sub = args[sub_at].to_string_lossy().into_owned();
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| format!("config {path} is not valid JSON: {e}"))?;
    let Value::Object(map) = value else {
        return Err(format!("config {path} must be a JSON object"));
    };

    let mut flags = Vec::new();
    for (key, value) in &map {
        if SUBCOMMANDS.contains(&key.as_str()) {
            continue;
        }
        push_flag(&mut flags, key, value)?;
    }
    if let Some(section) = map.get(&sub) {
        let Value::Object(section) = section else {
            return Err(format!("config section {sub:?} must be an object"));
        };
        push_section(&mut flags, section)?;
    }

    let mut out = args[..=sub_at].to_vec();
    out.extend(flags.into_iter().map(OsString::from));
    out.extend_from_slice(&args[sub_at + 1..]);
    Ok(out)
}

fn config_path(args: &[OsString]) -> Result<Option<String>, String> {
    let mut path = None;
    let mut iter = args.iter().skip(1).map(|a| a.to_string_lossy());
    while let Some(arg) = iter.next() {
        if arg == "--" {
            break;
        }
        if let Some(p) = arg.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else if arg == "--config" {
            let p = iter.next().ok_or("--config needs a file path")?;
            path = Some(p.into_owned());
        }
    }
    Ok(path)
}

fn subcommand_index(args: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let arg = args[i].to_string_lossy();
        if GLOBAL_VALUE_FLAGS.contains(&arg.as_ref()) {
            i += 2;
            continue;
        }
        if SUBCOMMANDS.contains(&arg.as_ref()) {
            return Some(i);
        }
        if !arg.starts_with('-') {
            return None;
        }
        i += 1;
    }
    None
}

fn push_section(flags: &mut Vec<String>, section: &Map<String, Value>) -> Result<(), String> {
    for (key, value) in section {
        push_flag(flags, key, value)?;
    }
    Ok(())
}

fn push_flag(flags: &mut Vec<String>, key: &str, value: &Value) -> Result<(), String> {
    if key == "config" {
        return Err("config files cannot name another config".into());
    }
    let flag = format!("--{}", key.replace('_', "-"));
    match value {
        Value::Bool(true) => flags.push(flag),
        Value::Bool(false) | Value::Null => {}
        Value::Number(n) => flags.extend([flag, n.to_string()]),
        Value::String(s) => flags.extend([flag, s.clone()]),
        Value::Array(items) => {
            for item in items {
                push_flag(flags, key, item)?;
            }
        }
        Value::Object(map) => {
            for (k, v) in map {
                let v = match v {
                    Value::Number(n) => n.to_string(),
                    Value::String(s) => s.clone(),
                    _ => return Err(format!("config {key}.{k} must be a number or string")),
                };
                flags.extend([flag.clone(), format!("{k}={v}")]);
            }
        }
    }
    Ok(())
}
