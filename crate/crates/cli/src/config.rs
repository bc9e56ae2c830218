//! `--config` support: a flat TOML file whose keys are long flag names.
//!
//! Values are injected into argv after the subcommand, but only for flags
//! the user did not pass, so flags beat the file. The file in turn beats
//! environment variables, since clap only consults the environment for
//! flags that are absent from argv.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::Command;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
}

/// Result of [`inject`]: the rewritten argv plus the flags that came from
/// the file.
#[derive(Debug, Clone, Default)]
pub struct Injected {
    pub argv: Vec<String>,
    pub path: Option<PathBuf>,
    pub from_file: BTreeSet<String>,
}

fn config_path(argv: &[String]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--" {
            break;
        }
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

fn render(value: &toml::Value) -> Option<Result<String, String>> {
    Some(Ok(match value {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(_) => return None,
        toml::Value::Array(items) => {
            let parts: Result<Vec<String>, String> = items
                .iter()
                .map(|v| match render(v) {
                    Some(r) => r,
                    None => Err("arrays of booleans are not supported".into()),
                })
                .collect();
            match parts {
                Ok(p) => p.join(","),
                Err(e) => return Some(Err(e)),
            }
        }
        other => return Some(Err(format!("unsupported value `{other}`"))),
    }))
}

/// Rewrites `argv` with values from the config file, if one was given.
pub fn inject(cmd: &Command, argv: Vec<String>) -> Result<Injected, ConfigError> {
    let Some(path) = config_path(&argv) else {
        return Ok(Injected {
            argv,
            ..Injected::default()
        });
    };
    let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io {
        path: path.clone(),
        source,
    })?;
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError::Invalid {
            path: path.clone(),
            reason: e.message().to_string(),
        })?;
    inject_table(cmd, argv, &table, &path)
}

fn inject_table(
    cmd: &Command,
    mut argv: Vec<String>,
    table: &toml::Table,
    path: &Path,
) -> Result<Injected, ConfigError> {
    let invalid = |reason: String| ConfigError::Invalid {
        path: path.to_path_buf(),
        reason,
    };
    let known: BTreeSet<String> = cmd
        .get_subcommands()
        .flat_map(|s| {
            s.get_arguments()
                .filter_map(|a| a.get_long().map(str::to_string))
        })
        .collect();
    for key in table.keys() {
        let flag = key.replace('_', "-");
        if !known.contains(&flag) {
            return Err(invalid(format!("unknown key `{key}`")));
        }
        if table[key].is_table() {
            return Err(invalid(format!("`{key}`: nested tables are not supported")));
        }
    }

    // Position of the subcommand name; flags before it are global.
    let names: BTreeSet<&str> = cmd.get_subcommands().map(|s| s.get_name()).collect();
    let mut sub_pos = None;
    let mut i = 1;
    while i < argv.len() {
        let a = argv[i].as_str();
        if a == "--config" {
            i += 2;
            continue;
        }
        if names.contains(a) {
            sub_pos = Some(i);
            break;
        }
        i += 1;
    }
    let Some(sub_pos) = sub_pos else {
        // No subcommand; let clap report the usage error.
        return Ok(Injected {
            argv,
            path: Some(path.to_path_buf()),
            from_file: BTreeSet::new(),
        });
    };
    let sub = cmd
        .find_subcommand(&argv[sub_pos])
        .expect("matched by name");
    let present: BTreeSet<String> = argv[sub_pos + 1..]
        .iter()
        .take_while(|a| *a != "--")
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect();

    let mut extra = Vec::new();
    let mut from_file = BTreeSet::new();
    for (key, value) in table {
        let flag = key.replace('_', "-");
        let Some(arg) = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(flag.as_str()))
        else {
            continue;
        };
        if present.contains(&flag) {
            continue;
        }
        let takes_value = arg.get_action().takes_values();
        match (value, takes_value) {
            (toml::Value::Boolean(true), false) => extra.push(format!("--{flag}")),
            (toml::Value::Boolean(false), false) => {}
            (toml::Value::Boolean(_), true) => extra.push(format!("--{flag}={value}")),
            (_, false) => return Err(invalid(format!("`{key}` is a switch; use true or false"))),
            (_, true) => match render(value) {
                Some(Ok(v)) => extra.push(format!("--{flag}={v}")),
                Some(Err(e)) => return Err(invalid(format!("`{key}`: {e}"))),
                None => unreachable!("booleans handled above"),
            },
        }
        from_file.insert(arg.get_id().to_string());
    }
    let tail = argv.split_off(sub_pos + 1);
    argv.extend(extra);
    argv.extend(tail);
    Ok(Injected {
        argv,
        path: Some(path.to_path_buf()),
        from_file,
    })
}
