//! Key-value config files that mirror the command-line flags.
//!
//! ```text
//! # applies to every subcommand that has the flag
//! seed = 7
//! out-dir = runs/oracle
//!
//! [curate]
//! k = 10
//! oracle-fidelity = 3
//! resume = true
//! ```
//!
//! Keys are long flag names; `_` and `-` are interchangeable. Boolean flags
//! take `true` or `false`. Lists use the flag's comma syntax. A `[name]`
//! section only applies to that subcommand. Values are turned into flags
//! placed before the user's own, so explicit flags override the file.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use clap::{ArgAction, Command};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub section: Option<String>,
    pub key: String,
    pub value: String,
    pub line: usize,
}

fn unquote(v: &str) -> &str {
    let v = v.trim();
    for q in ['"', '\''] {
        if v.len() >= 2 && v.starts_with(q) && v.ends_with(q) {
            return &v[1..v.len() - 1];
        }
    }
    v
}

pub fn parse(text: &str) -> CliResult<Vec<Entry>> {
    let mut section = None;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| CliError::usage(format!("config line {line_no}: unterminated section header")))?;
            section = Some(name.trim().to_string());
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("config line {line_no}: expected key = value")))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() {
            return Err(CliError::usage(format!("config line {line_no}: empty key")));
        }
        out.push(Entry {
            section: section.clone(),
            key,
            value: unquote(value).to_string(),
            line: line_no,
        });
    }
    Ok(out)
}

/// Index of the subcommand token and the value of `--config`, scanning the
/// raw arguments without validating them.
fn locate(argv: &[OsString], names: &[String]) -> (Option<(usize, String)>, Option<OsString>) {
    let mut sub = None;
    let mut config = None;
    let mut i = 1;
    while i < argv.len() {
        let tok = argv[i].to_string_lossy();
        if tok == "--" {
            break;
        }
        if tok == "--config" {
            config = argv.get(i + 1).cloned();
            i += 2;
            continue;
        }
        if let Some(v) = tok.strip_prefix("--config=") {
            config = Some(v.into());
        } else if sub.is_none() && names.iter().any(|n| *n == tok) {
            sub = Some((i, tok.to_string()));
        }
        i += 1;
    }
    (sub, config)
}

fn flags_for(cmd: &Command, entry: &Entry) -> CliResult<Option<Vec<OsString>>> {
    let Some(arg) = cmd.get_arguments().find(|a| a.get_long() == Some(entry.key.as_str())) else {
        return Ok(None);
    };
    let flag = OsString::from(format!("--{}", entry.key));
    if matches!(arg.get_action(), ArgAction::SetTrue) {
        return match entry.value.to_ascii_lowercase().as_str() {
            "true" | "yes" | "1" => Ok(Some(vec![flag])),
            "false" | "no" | "0" => Ok(Some(Vec::new())),
            other => Err(CliError::usage(format!(
                "config line {}: {} expects true or false, got {other:?}",
                entry.line, entry.key
            ))),
        };
    }
    Ok(Some(vec![flag, OsString::from(&entry.value)]))
}

/// Inserts the config file's values as flags right after the subcommand.
pub fn expand_argv(root: &Command, argv: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let mut root = root.clone();
    root.build();
    let names: Vec<String> = root.get_subcommands().map(|c| c.get_name().to_string()).collect();
    let (sub, config) = locate(&argv, &names);
    let (Some((at, name)), Some(path)) = (sub, config) else {
        return Ok(argv);
    };
    let path = Path::new(&path);
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e).with_kind_usage())?;
    let entries = parse(&text)?;
    let cmd = root.find_subcommand(&name).expect("located by name");

    let mut injected = Vec::new();
    for entry in &entries {
        if entry.key == "config" {
            return Err(CliError::usage(format!("config line {}: config files cannot nest", entry.line)));
        }
        match entry.section.as_deref() {
            Some(s) if s != name => {
                if !names.iter().any(|n| n == s) {
                    return Err(CliError::usage(format!(
                        "config line {}: unknown section [{s}]",
                        entry.line
                    )));
                }
                continue;
            }
            Some(_) => match flags_for(cmd, entry)? {
                Some(f) => injected.extend(f),
                None => {
                    return Err(CliError::usage(format!(
                        "config line {}: {name} has no flag --{}",
                        entry.line, entry.key
                    )))
                }
            },
            None => match flags_for(cmd, entry)? {
                Some(f) => injected.extend(f),
                None => {
                    let known_elsewhere = root
                        .get_subcommands()
                        .any(|c| c.get_arguments().any(|a| a.get_long() == Some(entry.key.as_str())));
                    if !known_elsewhere {
                        return Err(CliError::usage(format!(
                            "config line {}: no subcommand has a flag --{}",
                            entry.line, entry.key
                        )));
                    }
                }
            },
        }
    }
    let mut out = argv[..=at].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[at + 1..]);
    Ok(out)
}

impl CliError {
    fn with_kind_usage(mut self) -> Self {
        self.kind = crate::error::Kind::Usage;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::args::Cli;
    use clap::{CommandFactory, Parser};

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn parses_sections_comments_and_quotes() {
        let e = parse("# c\nseed = 3\n\n[curate]\noracle_fidelity = \"3\"\n").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[0].section, None);
        assert_eq!(e[1].section.as_deref(), Some("curate"));
        assert_eq!(e[1].key, "oracle-fidelity");
        assert_eq!(e[1].value, "3");
        assert!(parse("no equals sign").is_err());
        assert!(parse("[open").is_err());
    }

    #[test]
    fn explicit_flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        fs::write(&cfg, "seed = 5\n[curate]\nk = 4\nresume = true\nproblems = p.jsonl\n[evaluate]\nbins = 3\n").unwrap();
        let argv = os(&["calibra", "--config", cfg.to_str().unwrap(), "curate", "--k", "9"]);
        let expanded = expand_argv(&Cli::command(), argv).unwrap();
        let cli = Cli::try_parse_from(expanded).unwrap();
        assert_eq!(cli.global.seed, 5);
        let crate::args::Command::Curate(c) = cli.command else { panic!() };
        assert_eq!(c.k, 9);
        assert!(c.resume);
        assert_eq!(c.problems, Path::new("p.jsonl"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        fs::write(&cfg, "colour = blue\n").unwrap();
        let argv = os(&["calibra", "extract", "--config", cfg.to_str().unwrap()]);
        assert!(expand_argv(&Cli::command(), argv).is_err());
        fs::write(&cfg, "[extract]\nbins = 3\n").unwrap();
        let argv = os(&["calibra", "extract", "--config", cfg.to_str().unwrap()]);
        assert!(expand_argv(&Cli::command(), argv).is_err());
    }
}
