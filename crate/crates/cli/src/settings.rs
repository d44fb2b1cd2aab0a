//! `key:value` configuration files layered under command-line flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, Result};
use ramk_core::Error;

/// Effective settings of one run. Every resolved value is recorded so it can
/// be written into the provenance header of the outputs.
#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    used: Vec<(String, String)>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut file = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once(':').ok_or_else(|| {
                    Error::Config(format!("{}:{}: expected key:value", path.display(), n + 1))
                })?;
                file.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Self { file, used: Vec::new() })
    }

    fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T>
    where
        T::Err: Display,
    {
        raw.parse::<T>()
            .map_err(|e| anyhow!(Error::Config(format!("bad value `{raw}` for `{key}`: {e}"))))
    }

    /// Flag value, else the config file value, else `default`.
    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = self.opt(key, flag)?.unwrap_or(default);
        self.record(key, &v);
        Ok(v)
    }

    /// Like [`get`](Self::get) without a default; absent values are not recorded.
    pub fn opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => Some(v),
            None => self.file.get(key).map(|raw| Self::parse(key, raw)).transpose()?,
        };
        if let Some(v) = &v {
            self.record(key, v);
        }
        Ok(v)
    }

    /// Required setting.
    pub fn req<T>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.opt(key, flag)?
            .ok_or_else(|| anyhow!(Error::Config(format!("missing required setting `{key}`"))))
    }

    /// Output location. Not recorded: an output's provenance must not
    /// depend on where it was written.
    pub fn output(&mut self, key: &str, flag: Option<String>) -> Result<Option<String>> {
        let v = self.opt(key, flag)?;
        self.used.retain(|(k, _)| k != key);
        Ok(v)
    }

    pub fn output_req(&mut self, key: &str, flag: Option<String>) -> Result<String> {
        self.output(key, flag)?
            .ok_or_else(|| anyhow!(Error::Config(format!("missing required setting `{key}`"))))
    }

    /// Boolean switch: set by the flag or by `key:true` in the file.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool> {
        let v = flag || self.opt::<bool>(key, None)?.unwrap_or(false);
        self.record(key, &v);
        Ok(v)
    }

    /// Config entries whose keys start with `prefix`, prefix stripped.
    pub fn prefixed(&self, prefix: &str) -> Vec<(String, String)> {
        self.file
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|k| (k.to_string(), v.clone())))
            .collect()
    }

    pub fn record(&mut self, key: &str, value: &dyn Display) {
        let value = value.to_string();
        match self.used.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.used.push((key.to_string(), value)),
        }
    }

    /// `key:value` lines: tool version, command, then every resolved setting.
    pub fn provenance(&self, command: &str) -> Vec<String> {
        let mut v = vec![
            format!("tool:ramk {}", env!("CARGO_PKG_VERSION")),
            format!("command:{command}"),
        ];
        v.extend(self.used.iter().map(|(k, val)| format!("{k}:{val}")));
        v
    }
}

pub fn comment_header(lines: &[String]) -> String {
    lines.iter().map(|l| format!("# {l}\n")).collect()
}

pub fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    raw.split(',')
        .map(|s| s.trim().parse::<T>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| anyhow!(Error::Config(format!("bad list `{raw}` for `{key}`: {e}"))))
}
