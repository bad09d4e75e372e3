//! Flag parsing and the key/value run-config format.
//!
//! Every run resolves its options in three layers: built-in defaults, then
//! a `--config` file (one `key = value` per line, `#` comments), then
//! command-line flags, which win. The fully resolved map is written beside
//! the outputs so any run can be reproduced with `--config <that file>`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or invalid inputs; exit code 1.
    Usage(String),
    /// Failure while running; exit code 2.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

/// Core errors surfacing mid-run are runtime failures.
impl From<atwb_core::Error> for CliError {
    fn from(e: atwb_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, Copy)]
pub struct FlagSpec {
    pub name: &'static str,
    pub takes_value: bool,
    pub help: &'static str,
}

pub const fn flag(name: &'static str, help: &'static str) -> FlagSpec {
    FlagSpec {
        name,
        takes_value: true,
        help,
    }
}

pub const fn switch(name: &'static str, help: &'static str) -> FlagSpec {
    FlagSpec {
        name,
        takes_value: false,
        help,
    }
}

pub fn usage_text(command: &str, summary: &str, specs: &[FlagSpec]) -> String {
    let mut out = format!("usage: atwb {command} [flags]\n  {summary}\n\nflags:\n");
    for s in specs {
        let arg = if s.takes_value {
            format!("--{} <value>", s.name)
        } else {
            format!("--{}", s.name)
        };
        out.push_str(&format!("  {arg:<24} {}\n", s.help));
    }
    out.push_str("  --config <file>          key = value file merged under the flags\n");
    out.push_str("  --help                   print this message\n");
    out
}

/// Raw `--flag value` pairs from the command line.
pub fn parse_flags(
    command: &str,
    argv: &[String],
    specs: &[FlagSpec],
) -> CliResult<Option<BTreeMap<String, String>>> {
    let mut out = BTreeMap::new();
    let mut i = 0;
    while i < argv.len() {
        let token = &argv[i];
        if token == "--help" || token == "-h" {
            return Ok(None);
        }
        let Some(stripped) = token.strip_prefix("--") else {
            return Err(CliError::Usage(format!(
                "unexpected argument {token:?} (flags start with --; run 'atwb {command} --help')"
            )));
        };
        let (name, inline) = match stripped.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (stripped, None),
        };
        if name == "config" {
            let value = take_value(command, "config", inline, argv, &mut i)?;
            out.insert("config".to_string(), value);
            i += 1;
            continue;
        }
        let Some(spec) = specs.iter().find(|s| s.name == name) else {
            return Err(CliError::Usage(format!(
                "unknown flag --{name} (run 'atwb {command} --help' for the flag list)"
            )));
        };
        if spec.takes_value {
            let value = take_value(command, name, inline, argv, &mut i)?;
            out.insert(name.to_string(), value);
        } else {
            if inline.is_some() {
                return Err(CliError::Usage(format!(
                    "flag --{name} takes no value (run 'atwb {command} --help')"
                )));
            }
            out.insert(name.to_string(), "true".to_string());
        }
        i += 1;
    }
    Ok(Some(out))
}

fn take_value(
    command: &str,
    name: &str,
    inline: Option<String>,
    argv: &[String],
    i: &mut usize,
) -> CliResult<String> {
    if let Some(v) = inline {
        return Ok(v);
    }
    *i += 1;
    argv.get(*i).cloned().ok_or_else(|| {
        CliError::Usage(format!(
            "flag --{name} needs a value (run 'atwb {command} --help')"
        ))
    })
}

/// Parses a `key = value` config file; `#` lines and blanks are skipped.
pub fn read_config_file(path: &str) -> CliResult<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Usage(format!(
            "cannot read config file {path}: {e} (check the path)"
        ))
    })?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Usage(format!(
                "{path}:{}: expected 'key = value', found {line:?}",
                lineno + 1
            )));
        };
        out.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

/// Defaults overlaid with the config file, overlaid with flags.
pub struct Resolved {
    values: BTreeMap<String, String>,
    command: String,
}

impl Resolved {
    pub fn merge(
        command: &str,
        cli: BTreeMap<String, String>,
        specs: &[FlagSpec],
    ) -> CliResult<Resolved> {
        let mut values = BTreeMap::new();
        if let Some(path) = cli.get("config") {
            for (k, v) in read_config_file(path)? {
                if k != "config" && !specs.iter().any(|s| s.name == k) {
                    return Err(CliError::Usage(format!(
                        "{path}: unknown key {k:?} for 'atwb {command}'"
                    )));
                }
                values.insert(k, v);
            }
        }
        for (k, v) in cli {
            if k != "config" {
                values.insert(k, v);
            }
        }
        Ok(Resolved {
            values,
            command: command.to_string(),
        })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    /// Typed lookup; records the effective value (default included) so the
    /// resolved config is self-contained.
    pub fn take<T: FromStr + ToString>(&mut self, key: &str, default: T) -> CliResult<T> {
        match self.values.get(key) {
            Some(raw) => raw.parse().map_err(|_| {
                CliError::Usage(format!(
                    "flag --{key}: cannot parse {raw:?} (run 'atwb {} --help')",
                    self.command
                ))
            }),
            None => {
                self.values.insert(key.to_string(), default.to_string());
                Ok(default)
            }
        }
    }

    pub fn take_string(&mut self, key: &str, default: &str) -> String {
        match self.values.get(key) {
            Some(v) => v.clone(),
            None => {
                self.values.insert(key.to_string(), default.to_string());
                default.to_string()
            }
        }
    }

    pub fn take_required(&mut self, key: &str) -> CliResult<String> {
        self.values.get(key).cloned().ok_or_else(|| {
            CliError::Usage(format!(
                "missing required flag --{key} (run 'atwb {} --help')",
                self.command
            ))
        })
    }

    pub fn take_switch(&mut self, key: &str) -> bool {
        match self.values.get(key) {
            Some(v) => v == "true",
            None => {
                self.values.insert(key.to_string(), "false".to_string());
                false
            }
        }
    }

    /// `key = value` dump of every effective option, plus commented
    /// annotations that reruns ignore.
    pub fn to_config_text(&self, annotations: &BTreeMap<String, String>) -> String {
        let mut out = String::new();
        for (k, v) in &annotations.clone() {
            out.push_str(&format!("# {k} = {v}\n"));
        }
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn write_beside(
        &self,
        path: impl AsRef<Path>,
        annotations: &BTreeMap<String, String>,
    ) -> CliResult<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_config_text(annotations))
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }
}

/// Default output location honoring the ATWB_OUT_ROOT override.
pub fn default_out(name: &str) -> String {
    match std::env::var("ATWB_OUT_ROOT") {
        Ok(root) if !root.is_empty() => format!("{root}/{name}"),
        _ => name.to_string(),
    }
}

pub fn require_exists(path: &str, what: &str) -> CliResult<()> {
    if Path::new(path).exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{what} {path:?} does not exist (check the path or run the producing command first)"
        )))
    }
}
