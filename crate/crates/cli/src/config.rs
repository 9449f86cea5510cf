//! Flat key=value configuration files. Keys mirror the long flag names; a
//! flag given on the command line always wins over the file. Unknown keys are
//! rejected against the invoking subcommand's key list so typos fail loudly.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Debug)]
pub struct FileConfig {
    map: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn empty() -> FileConfig {
        FileConfig {
            map: BTreeMap::new(),
        }
    }

    /// Parses `path` if given; `known_keys` is the subcommand's flag list.
    pub fn load(path: Option<&Path>, known_keys: &[&str]) -> Result<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::empty());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut map = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("{}:{}: expected key=value, got {raw:?}", path.display(), idx + 1);
            };
            let key = k.trim().to_string();
            if !known_keys.contains(&key.as_str()) {
                bail!(
                    "{}:{}: unknown key {key:?}; this command accepts: {}",
                    path.display(),
                    idx + 1,
                    known_keys.join(", ")
                );
            }
            if map.insert(key.clone(), v.trim().to_string()).is_some() {
                bail!("{}:{}: duplicate key {key:?}", path.display(), idx + 1);
            }
        }
        Ok(FileConfig { map })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    fn parsed<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|e| anyhow!("config key {key} = {s:?}: {e}")),
        }
    }
}

/// Flag wins, then the file, then the built-in default.
pub fn pick<T>(flag: Option<T>, file: &FileConfig, key: &str, default: T) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    match flag {
        Some(v) => Ok(v),
        None => Ok(file.parsed(key)?.unwrap_or(default)),
    }
}

/// Flag wins, then the file; no default exists.
pub fn pick_required<T>(flag: Option<T>, file: &FileConfig, key: &str) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    match flag {
        Some(v) => Ok(v),
        None => file
            .parsed(key)?
            .ok_or_else(|| anyhow!("--{key} is required (as a flag or a config file entry)")),
    }
}

/// Optional value with no default: absent everywhere stays absent.
pub fn pick_optional_path(
    flag: Option<PathBuf>,
    file: &FileConfig,
    key: &str,
) -> Result<Option<PathBuf>> {
    match flag {
        Some(v) => Ok(Some(v)),
        None => Ok(file.raw(key).map(PathBuf::from)),
    }
}

/// Presence flags: true if the flag was given or the file says true.
pub fn pick_switch(flag: bool, file: &FileConfig, key: &str) -> Result<bool> {
    if flag {
        return Ok(true);
    }
    Ok(file.parsed::<bool>(key)?.unwrap_or(false))
}

/// Inclusive "lo,hi" ranges used by the fixture generator flags.
pub fn parse_count_range(s: &str) -> Result<(usize, usize), String> {
    parse_pair(s)
}

pub fn parse_value_range(s: &str) -> Result<(f64, f64), String> {
    parse_pair(s)
}

fn parse_pair<T: FromStr>(s: &str) -> Result<(T, T), String>
where
    T::Err: Display,
{
    let (lo, hi) = s
        .split_once(',')
        .ok_or_else(|| format!("{s:?} is not of the form LO,HI"))?;
    let lo = lo.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
    let hi = hi.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
    Ok((lo, hi))
}

pub fn pick_count_range(
    flag: Option<(usize, usize)>,
    file: &FileConfig,
    key: &str,
    default: (usize, usize),
) -> Result<(usize, usize)> {
    range_from(flag, file, key, default, parse_count_range)
}

pub fn pick_value_range(
    flag: Option<(f64, f64)>,
    file: &FileConfig,
    key: &str,
    default: (f64, f64),
) -> Result<(f64, f64)> {
    range_from(flag, file, key, default, parse_value_range)
}

fn range_from<T>(
    flag: Option<T>,
    file: &FileConfig,
    key: &str,
    default: T,
    parse: fn(&str) -> Result<T, String>,
) -> Result<T> {
    match flag {
        Some(v) => Ok(v),
        None => match file.raw(key) {
            None => Ok(default),
            Some(s) => parse(s).map_err(|e| anyhow!("config key {key}: {e}")),
        },
    }
}
