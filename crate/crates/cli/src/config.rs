//! Merges a config file under the command line.
//!
//! The file is TOML: top-level keys are global flags, each `[subcommand]`
//! table holds that subcommand's flags. Keys are flag names with either
//! `-` or `_`. A key only applies when the flag was not given on the
//! command line, so explicit flags always win.
//!
//! ```toml
//! seed = 7
//! threads = 4
//!
//! [train]
//! head = "lstm"
//! epochs = 50
//! ```

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory, FromArgMatches};

use crate::args::Cli;

fn usage(msg: String) -> clap::Error {
    Cli::command().error(ErrorKind::InvalidValue, msg)
}

fn given_on_command_line(m: &ArgMatches, cmd: &clap::Command, id: &str) -> bool {
    cmd.get_arguments().any(|a| a.get_id() == id) && m.value_source(id) == Some(ValueSource::CommandLine)
}

fn render(key: &str, value: &toml::Value) -> Result<Vec<String>, clap::Error> {
    let flag = format!("--{}", key.replace('_', "-"));
    let scalar = |v: &toml::Value| match v {
        toml::Value::String(s) => Ok(s.clone()),
        toml::Value::Integer(i) => Ok(i.to_string()),
        toml::Value::Float(f) => Ok(f.to_string()),
        other => Err(usage(format!("config key {key}: unsupported value {other}"))),
    };
    match value {
        toml::Value::Boolean(true) => Ok(vec![flag]),
        toml::Value::Boolean(false) => Ok(vec![]),
        toml::Value::Array(items) => {
            let parts = items.iter().map(scalar).collect::<Result<Vec<_>, _>>()?;
            Ok(vec![format!("{flag}={}", parts.join(","))])
        }
        v => Ok(vec![format!("{flag}={}", scalar(v)?)]),
    }
}

/// Parses `argv`, folding in the `--config` file when one is named.
pub fn parse<I, T>(argv: I) -> Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let root = Cli::command();
    // A lenient first pass finds the config path and what the user typed,
    // even when required flags are left to the file.
    let loose = root.clone().ignore_errors(true).try_get_matches_from(&argv).ok();
    let path = loose.as_ref().and_then(|m| m.get_one::<PathBuf>("config").cloned());
    let (Some(matches), Some(path)) = (loose, path) else {
        return Cli::try_parse_strict(argv);
    };
    if matches.subcommand().is_none() {
        return Cli::try_parse_strict(argv);
    }
    let text = std::fs::read_to_string(&path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| usage(format!("config {}: {e}", path.display())))?;

    let (sub_name, sub_matches) = matches.subcommand().expect("checked above");
    let sub_cmd = root.find_subcommand(sub_name).expect("parsed subcommand exists").clone();
    let mut extra: Vec<String> = Vec::new();
    for (key, value) in &table {
        if let toml::Value::Table(section) = value {
            if root.find_subcommand(key).is_none() {
                return Err(usage(format!("config section [{key}] names no subcommand")));
            }
            if key != sub_name {
                continue;
            }
            for (k, v) in section {
                let id = k.replace('-', "_");
                if !given_on_command_line(sub_matches, &sub_cmd, &id) {
                    extra.extend(render(k, v)?);
                }
            }
        } else {
            let id = key.replace('-', "_");
            if id == "config" {
                return Err(usage("config files cannot name another config".into()));
            }
            let cli_given = given_on_command_line(&matches, &root, &id) || given_on_command_line(sub_matches, &sub_cmd, &id);
            if !cli_given {
                extra.extend(render(key, value)?);
            }
        }
    }
    let mut merged = argv;
    merged.extend(extra.into_iter().map(OsString::from));
    Cli::try_parse_strict(merged)
}

impl Cli {
    fn try_parse_strict(argv: Vec<OsString>) -> Result<Cli, clap::Error> {
        let m = Cli::command().try_get_matches_from(argv)?;
        Cli::from_arg_matches(&m)
    }
}
