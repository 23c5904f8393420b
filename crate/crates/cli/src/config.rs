//! Flat `key = value` config files. Blank lines and `#` comments are skipped
//! and keys may be spelled with `-` or `_`. Entries become flags of the
//! chosen subcommand; a flag given on the command line always wins.

use std::ffi::OsString;

use clap::parser::ValueSource;
use clap::{ArgMatches, Command};

pub fn parse(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value, got {raw:?}", i + 1))?;
        let key = k.trim().replace('-', "_");
        if key.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        if out.iter().any(|(seen, _)| *seen == key) {
            return Err(format!("line {}: {key} given twice", i + 1));
        }
        out.push((key, v.trim().trim_matches('"').to_string()));
    }
    Ok(out)
}

/// Rewrites `argv` with the file's entries spliced in right after the
/// subcommand name. `matches` is a first parse of `argv` and tells which
/// flags the user typed.
pub fn merge(
    cmd: &Command,
    argv: &[OsString],
    matches: &ArgMatches,
    entries: &[(String, String)],
) -> Result<Vec<OsString>, String> {
    let Some((name, sub_matches)) = matches.subcommand() else {
        return Ok(argv.to_vec());
    };
    let sub = cmd.find_subcommand(name).expect("parsed subcommand exists");
    let mut extra: Vec<OsString> = Vec::new();
    for (key, value) in entries {
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments().filter(|a| a.is_global_set()))
            .find(|a| a.get_id() == key.as_str() && a.get_long().is_some())
            .ok_or_else(|| format!("config key {key:?} is not an option of {name}"))?;
        if key == "config" {
            return Err("a config file cannot name another config file".into());
        }
        if sub_matches.value_source(key) == Some(ValueSource::CommandLine) {
            continue;
        }
        let flag = format!("--{}", arg.get_long().expect("checked above"));
        if arg.get_action().takes_values() {
            extra.push(flag.into());
            extra.push(value.into());
        } else {
            match value.as_str() {
                "true" => extra.push(flag.into()),
                "false" => {}
                _ => return Err(format!("config key {key:?} is a switch; use true or false")),
            }
        }
    }
    let at = argv
        .iter()
        .skip(1)
        .position(|a| a == name)
        .map_or(argv.len(), |i| i + 2);
    let mut out = argv[..at].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[at..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blanks_and_dashes() {
        let e = parse("# c\n\nseq-len = 64\n vocab=10 \nname = \"x\"\n").unwrap();
        assert_eq!(
            e,
            vec![
                ("seq_len".into(), "64".into()),
                ("vocab".into(), "10".into()),
                ("name".into(), "x".into())
            ]
        );
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(parse("just words").is_err());
        assert!(parse("= 3").is_err());
        assert!(parse("a = 1\na = 2").is_err());
    }
}
