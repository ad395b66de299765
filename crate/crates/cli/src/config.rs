//! `key = value` config files merged into the argument list.
//!
//! Keys are long flag names (`lr`, `n-neg`, `n_neg`). Values apply only when
//! the flag is absent from the command line, so flags always win. Unknown
//! keys surface as unknown flags when the arguments are parsed.

use std::path::Path;

#[derive(Debug, PartialEq)]
pub struct ConfigError(pub String);

pub fn parse(text: &str, origin: &Path) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError(format!("{}:{}: expected `key = value`", origin.display(), i + 1)));
        };
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(ConfigError(format!("{}:{}: empty key", origin.display(), i + 1)));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// Removes `--config FILE` (or `--config=FILE`) from `args` and returns the
/// file path, if present.
pub fn take_config_flag(args: &mut Vec<String>) -> Result<Option<String>, ConfigError> {
    let Some(pos) = args.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(None);
    };
    let flag = args.remove(pos);
    if let Some(v) = flag.strip_prefix("--config=") {
        return Ok(Some(v.to_string()));
    }
    if pos < args.len() {
        Ok(Some(args.remove(pos)))
    } else {
        Err(ConfigError("--config needs a file path".into()))
    }
}

/// Inserts config entries as flags right after the subcommand name (the
/// first argument not starting with `-`), skipping flags already given.
pub fn merge(args: &mut Vec<String>, entries: &[(String, String)]) {
    let Some(sub) = args.iter().skip(1).position(|a| !a.starts_with('-')).map(|p| p + 1) else {
        return;
    };
    let mut extra = Vec::new();
    for (k, v) in entries {
        let flag = format!("--{k}");
        let present = args.iter().any(|a| a == &flag || a.starts_with(&format!("{flag}=")));
        if present {
            continue;
        }
        match v.as_str() {
            "true" => extra.push(flag),
            "false" => {}
            _ => {
                extra.push(flag);
                extra.push(v.clone());
            }
        }
    }
    let tail = args.split_off(sub + 1);
    args.extend(extra);
    args.extend(tail);
}
