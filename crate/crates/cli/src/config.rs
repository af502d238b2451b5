//! `key = value` parameter files. Keys are the long flag names (`lambda-l`,
//! `outer`, ...); underscores are accepted for dashes. Flags win over the
//! file, the file wins over built-in defaults.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Debug, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

fn normalize(key: &str) -> String {
    key.trim().trim_start_matches("--").replace('_', "-")
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value, got {raw:?}", n + 1))?;
            let key = normalize(k);
            if key.is_empty() {
                bail!("line {}: empty key", n + 1);
            }
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                bail!("line {}: {key} given twice", n + 1);
            }
        }
        Ok(ConfigFile {
            values,
            used: RefCell::new(BTreeSet::new()),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config file {}", path.display()))
    }

    /// The flag value if given, else the file value, else `default`.
    pub fn pick<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.lookup(flag, key)?.unwrap_or(default))
    }

    pub fn lookup<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.used.borrow_mut().insert(key.to_string());
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| anyhow!("config key {key} = {raw:?}: {e}")),
        }
    }

    /// Fails on keys that no parameter asked for.
    pub fn check_unused(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .values
            .keys()
            .filter(|k| !used.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            bail!("unknown config keys: {}", unknown.join(", "))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        let cfg = ConfigFile::parse("# weights\nlambda_l = 0.5\nouter=3 # short run\n").unwrap();
        assert_eq!(cfg.pick(Some(0.9), "lambda-l", 0.3).unwrap(), 0.9);
        assert_eq!(cfg.pick(None, "lambda-l", 0.3).unwrap(), 0.5);
        assert_eq!(cfg.pick(None::<usize>, "outer", 25).unwrap(), 3);
        assert_eq!(cfg.pick(None, "theta", 0.25).unwrap(), 0.25);
        cfg.check_unused().unwrap();
    }

    #[test]
    fn bad_files() {
        assert!(ConfigFile::parse("outer 3").is_err());
        assert!(ConfigFile::parse("outer = 3\nouter = 4").is_err());
        let cfg = ConfigFile::parse("outr = 3").unwrap();
        assert!(cfg.check_unused().is_err());
        let cfg = ConfigFile::parse("outer = many").unwrap();
        assert!(cfg.pick(None::<usize>, "outer", 25).is_err());
    }
}
