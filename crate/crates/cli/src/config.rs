//! Flag defaults from a `--config` JSON file.

use std::path::Path;

use clap::Command;
use serde_json::Value;

use crate::commands::CliError;

fn config_path(argv: &[String]) -> Option<String> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

fn flag_value(key: &str, v: &Value) -> Result<String, CliError> {
    Ok(match v {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        Value::Bool(b) => b.to_string(),
        Value::Array(items) => items
            .iter()
            .map(|i| flag_value(key, i))
            .collect::<Result<Vec<_>, _>>()?
            .join(","),
        _ => return Err(CliError::Usage(format!("config key {key:?} has an unsupported value"))),
    })
}

/// Sets the default of `--key` on `sub`; false when it has no such flag.
fn set_default(cmd: Command, sub: &str, key: &str, value: &str) -> (Command, bool) {
    let long = key.replace('_', "-");
    let id = cmd
        .find_subcommand(sub)
        .and_then(|sc| sc.get_arguments().find(|a| a.get_long() == Some(long.as_str())))
        .map(|a| a.get_id().to_string());
    let Some(id) = id else { return (cmd, false) };
    let value: &'static str = Box::leak(value.to_string().into_boxed_str());
    let cmd = cmd.mut_subcommand(sub, |sc| sc.mut_arg(id, |a| a.default_value(value).required(false)));
    (cmd, true)
}

/// Applies the config file named by `--config` in `argv`, if any.
pub fn apply_defaults(mut cmd: Command, argv: &[String]) -> Result<Command, CliError> {
    let Some(path) = config_path(argv) else { return Ok(cmd) };
    let bytes = std::fs::read(Path::new(&path)).map_err(|e| CliError::Usage(format!("reading config {path}: {e}")))?;
    let Value::Object(map) = serde_json::from_slice(&bytes).map_err(|e| CliError::Usage(format!("config {path}: {e}")))?
    else {
        return Err(CliError::Usage(format!("config {path} must be a JSON object")));
    };
    let subs: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for (key, value) in &map {
        if let (Some(sub), Value::Object(inner)) = (subs.iter().find(|s| *s == key), value) {
            for (k, v) in inner {
                let (c, found) = set_default(cmd, sub, k, &flag_value(k, v)?);
                cmd = c;
                if !found {
                    return Err(CliError::Usage(format!("config: {sub} has no flag --{}", k.replace('_', "-"))));
                }
            }
            continue;
        }
        let v = flag_value(key, value)?;
        let mut any = false;
        for sub in &subs {
            let (c, found) = set_default(cmd, sub, key, &v);
            cmd = c;
            any |= found;
        }
        if !any {
            return Err(CliError::Usage(format!("config: no command takes --{}", key.replace('_', "-"))));
        }
    }
    Ok(cmd)
}
