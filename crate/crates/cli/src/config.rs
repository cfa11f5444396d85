//! Recipe files: flat `key = value` lines, optionally grouped under
//! `[subcommand]` headers. Keys are long option names without the dashes.
//! Lines before the first header apply to every subcommand.

use std::collections::BTreeMap;

use stefan_pinn::{Result, StefanError};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    pub global: BTreeMap<String, String>,
    pub sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = ConfigFile::default();
        let mut current: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| StefanError::Parse(format!("line {}: unterminated section header", n + 1)))?;
                current = Some(name.trim().to_string());
                out.sections.entry(name.trim().to_string()).or_default();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| StefanError::Parse(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim().replace('_', "-"), v.trim().to_string());
            if k.is_empty() {
                return Err(StefanError::Parse(format!("line {}: empty key", n + 1)));
            }
            let map = match &current {
                Some(s) => out.sections.get_mut(s).expect("section inserted above"),
                None => &mut out.global,
            };
            map.insert(k, v);
        }
        Ok(out)
    }

    /// Entries for `subcommand` (its section over the global lines) as
    /// command-line arguments. `key = true` becomes a bare flag and
    /// `key = false` is dropped.
    pub fn args_for(&self, subcommand: &str) -> Vec<String> {
        let mut merged = self.global.clone();
        if let Some(s) = self.sections.get(subcommand) {
            merged.extend(s.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        let mut args = Vec::new();
        for (k, v) in merged {
            match v.as_str() {
                "true" => args.push(format!("--{k}")),
                "false" => {}
                _ => args.push(format!("--{k}={v}")),
            }
        }
        args
    }
}

/// Finds the `--config` value in raw arguments.
pub fn config_path(args: &[String]) -> Option<String> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(v.to_string());
        }
    }
    None
}

/// Splices config-file arguments in right after the subcommand name so that
/// flags given on the command line (which come later) override them.
pub fn splice(args: &[String], subcommands: &[&str], file: &ConfigFile) -> Vec<String> {
    let Some(pos) = args.iter().skip(1).position(|a| subcommands.contains(&a.as_str())).map(|p| p + 1) else {
        return args.to_vec();
    };
    let mut out = args[..=pos].to_vec();
    out.extend(file.args_for(&args[pos]));
    out.extend_from_slice(&args[pos + 1..]);
    out
}
