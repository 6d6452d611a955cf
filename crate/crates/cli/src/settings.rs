//! Config files and resolved-config snapshots.
//!
//! A config file holds flat `key = value` lines; `#` starts a comment line.
//! Keys are the long flag names of the subcommand (underscores are accepted
//! in place of hyphens). The file's entries are spliced into the command line
//! directly after the subcommand name, so flags given on the command line
//! come later and win.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use guidelab::Error;
use serde::Serialize;

/// Name of the snapshot written into every output directory.
pub const SNAPSHOT_FILE: &str = "config.txt";

/// Global options that consume the following argument.
const GLOBAL_VALUE_FLAGS: [&str; 2] = ["--config", "--threads"];

/// Keys that never enter a snapshot or a fingerprint.
const UNTRACKED_KEYS: [&str; 2] = ["config", "threads"];

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Position of the subcommand name in `argv`, skipping global options.
fn subcommand_position(argv: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let a = argv[i].to_string_lossy();
        if GLOBAL_VALUE_FLAGS.contains(&a.as_ref()) {
            i += 2;
        } else if a.starts_with('-') {
            i += 1;
        } else {
            return Some(i);
        }
    }
    None
}

/// Name of the subcommand in `argv`, if any.
pub fn subcommand_name(argv: &[OsString]) -> Option<String> {
    subcommand_position(argv).map(|i| argv[i].to_string_lossy().into_owned())
}

/// Value of the global `--config` option, wherever it appears.
pub fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let a = a.to_string_lossy();
        if a == "--" {
            break;
        }
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

/// Parses config text into `(key, value)` pairs.
pub fn parse_config(text: &str, origin: &Path) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            usage(format!("{}:{}: expected `key = value`, got `{line}`", origin.display(), n + 1))
        })?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(usage(format!("{}:{}: empty key", origin.display(), n + 1)));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// Rewrites `argv` with the entries of `config` inserted after the
/// subcommand. `known` lists the long flags the subcommand accepts.
pub fn splice_config(
    argv: &[OsString],
    config: &Path,
    known: &BTreeSet<String>,
) -> Result<Vec<OsString>, Error> {
    let text = std::fs::read_to_string(config).map_err(|e| Error::Io {
        path: config.to_path_buf(),
        source: e,
    })?;
    let pos = subcommand_position(argv).ok_or_else(|| usage("--config needs a subcommand"))?;
    let mut extra = Vec::new();
    for (key, value) in parse_config(&text, config)? {
        if UNTRACKED_KEYS[..1].contains(&key.as_str()) || !known.contains(&key) {
            return Err(usage(format!("{}: unknown key `{key}`", config.display())));
        }
        extra.push(OsString::from(format!("--{key}")));
        extra.push(OsString::from(value));
    }
    let mut out = argv[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

fn render_value(v: &serde_json::Value) -> Option<String> {
    use serde_json::Value;
    match v {
        Value::Null => None,
        Value::Array(items) if items.is_empty() => None,
        Value::String(s) => Some(s.clone()),
        Value::Array(items) => Some(items.iter().filter_map(render_value).collect::<Vec<_>>().join(",")),
        other => Some(other.to_string()),
    }
}

/// `key = value` lines for every set option of `args`, in field order.
pub fn resolved_lines(args: &impl Serialize) -> Result<Vec<(String, String)>, Error> {
    let value = serde_json::to_value(args)?;
    let serde_json::Value::Object(map) = value else {
        return Err(usage("arguments do not serialize to a map"));
    };
    Ok(map
        .iter()
        .filter_map(|(k, v)| Some((k.replace('_', "-"), render_value(v)?)))
        .filter(|(k, _)| !UNTRACKED_KEYS.contains(&k.as_str()))
        .collect())
}

/// Snapshot text: a version comment followed by the resolved options. It is
/// itself a valid config file for `subcommand`.
pub fn snapshot(subcommand: &str, args: &impl Serialize) -> Result<String, Error> {
    let mut text = format!("# guidelab {} {subcommand}\n", env!("CARGO_PKG_VERSION"));
    for (k, v) in resolved_lines(args)? {
        text.push_str(&format!("{k} = {v}\n"));
    }
    Ok(text)
}

/// FNV-1a digest of the resolved options that influence results: everything
/// except the output location.
pub fn fingerprint(subcommand: &str, args: &impl Serialize) -> Result<String, Error> {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |s: &str| {
        for b in s.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    feed(subcommand);
    for (k, v) in resolved_lines(args)? {
        if k != "out" {
            feed(&format!("\n{k}={v}"));
        }
    }
    Ok(format!("{h:016x}"))
}

/// Creates `dir` and writes the snapshot into it.
pub fn prepare_output(dir: &Path, subcommand: &str, args: &impl Serialize) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let path = dir.join(SNAPSHOT_FILE);
    std::fs::write(&path, snapshot(subcommand, args)?).map_err(|e| Error::Io { path, source: e })
}

/// Output directory: `explicit` if given, else `<root>/<subcommand>` where
/// the root comes from `GUIDELAB_OUT` or defaults to `runs`.
pub fn output_dir(explicit: Option<&Path>, subcommand: &str) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(crate::OUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(subcommand),
    }
}
