//! `key=value` config files. Each key is the long name of a flag; values
//! are spliced into the command line ahead of the user's own flags, so
//! flags given on the command line win.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Command};

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: expected key=value, got {raw:?}", origin.display(), n + 1);
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Finds `--config PATH` or `--config=PATH` in raw arguments.
pub fn config_path(args: &[String]) -> Option<String> {
    let mut it = args.iter();
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

/// Expands config entries into flags for `sub` (`_` in keys reads as `-`).
/// A key must name a flag of
/// some subcommand; keys that belong only to other subcommands are skipped,
/// so one file can configure a whole pipeline.
pub fn to_args(entries: &[(String, String)], cmd: &Command, sub: &str) -> Result<Vec<String>> {
    let known = |c: &Command, key: &str| c.get_arguments().find(|a| a.get_long() == Some(key)).cloned();
    let target = cmd.find_subcommand(sub);
    let mut out = Vec::new();
    for (k, v) in entries {
        let k = &k.replace('_', "-");
        if k == "config" {
            bail!("config files cannot include other config files");
        }
        let here = target.and_then(|c| known(c, k)).or_else(|| known(cmd, k));
        match here {
            Some(arg) => match arg.get_action() {
                ArgAction::SetTrue => match v.as_str() {
                    "true" => out.push(format!("--{k}")),
                    "false" => {}
                    _ => bail!("config key {k}: expected true or false, got {v:?}"),
                },
                _ => {
                    out.push(format!("--{k}"));
                    out.push(v.clone());
                }
            },
            None => {
                if !cmd.get_subcommands().any(|c| known(c, k).is_some()) {
                    bail!("unknown config key {k:?}");
                }
            }
        }
    }
    Ok(out)
}

/// Inserts config-derived flags right after the subcommand name.
pub fn splice(args: Vec<String>, cmd: &Command) -> Result<Vec<String>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config file {path}"))?;
    let entries = parse(&text, Path::new(&path))?;
    let Some(pos) = args
        .iter()
        .enumerate()
        .skip(1)
        .position(|(_, a)| cmd.find_subcommand(a).is_some())
        .map(|p| p + 1)
    else {
        return Ok(args);
    };
    let extra = to_args(&entries, cmd, &args[pos])?;
    let mut out = args[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let e = parse("# c\n\nseed = 7 # trailing\nscale=0.1\n", Path::new("x")).unwrap();
        assert_eq!(e, vec![("seed".into(), "7".into()), ("scale".into(), "0.1".into())]);
        assert!(parse("nokey\n", Path::new("x")).is_err());
    }

    #[test]
    fn finds_config_flag() {
        let a: Vec<String> = ["dsa", "gen-data", "--config=f.cfg"].map(String::from).to_vec();
        assert_eq!(config_path(&a).as_deref(), Some("f.cfg"));
        let a: Vec<String> = ["dsa", "--config", "g.cfg", "report"].map(String::from).to_vec();
        assert_eq!(config_path(&a).as_deref(), Some("g.cfg"));
    }
}
