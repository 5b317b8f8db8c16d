//! Config files: `key=value` lines or one flat JSON object. Keys are flag
//! names (`batch_size` or `batch-size`). Entries are spliced into argv right
//! after the subcommand, so flags given on the command line override them.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use serde_json::Value;

fn parse_pairs(text: &str, origin: &Path) -> Result<Vec<(String, String)>, String> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let obj: serde_json::Map<String, Value> =
            serde_json::from_str(trimmed).map_err(|e| format!("{}: {e}", origin.display()))?;
        return obj
            .into_iter()
            .map(|(k, v)| {
                let v = match v {
                    Value::String(s) => s,
                    Value::Number(n) => n.to_string(),
                    Value::Bool(b) => b.to_string(),
                    Value::Array(items) => items
                        .iter()
                        .map(|i| match i {
                            Value::String(s) => s.clone(),
                            other => other.to_string(),
                        })
                        .collect::<Vec<_>>()
                        .join(","),
                    other => return Err(format!("{}: unsupported value for {k}: {other}", origin.display())),
                };
                Ok((k, v))
            })
            .collect();
    }
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key=value", origin.display(), n + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Path given by `--config PATH` or `--config=PATH`, if any.
fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

/// argv with the config file's entries inserted after the subcommand.
pub fn expand_args(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let mut injected = Vec::new();
    for (k, v) in parse_pairs(&text, path)? {
        let flag = format!("--{}", k.replace('_', "-"));
        if flag == "--config" {
            return Err(format!("{}: config files cannot nest", path.display()));
        }
        match v.as_str() {
            "true" => injected.push(OsString::from(flag)),
            "false" => {}
            _ => {
                injected.push(OsString::from(flag));
                injected.push(OsString::from(v));
            }
        }
    }
    let at = 2.min(args.len());
    let mut out = args[..at].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[at..]);
    Ok(out)
}
