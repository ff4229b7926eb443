//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use gmfuse_core::fusion::NetworkConfig;
use gmfuse_core::pillar::GridConfig;

use crate::error::{CliError, Result};

pub const KEYS: [&str; 11] = [
    "rho",
    "x_min",
    "x_max",
    "y_min",
    "y_max",
    "d_state",
    "chunk_len",
    "channels",
    "pe_base",
    "seed",
    "threads",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    /// Grid cells per metre.
    pub rho: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub d_state: usize,
    pub chunk_len: usize,
    pub channels: usize,
    pub pe_base: f64,
    pub seed: u64,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            rho: 4.0,
            x_min: 0.0,
            x_max: 32.0,
            y_min: -16.0,
            y_max: 16.0,
            d_state: 16,
            chunk_len: 64,
            channels: 16,
            pe_base: 10_000.0,
            seed: 0,
            threads: 1,
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| CliError::validation(format!("invalid value `{raw}` for config key `{key}`")))
}

impl RunConfig {
    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// `#` comments are skipped; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| CliError::validation(format!("line {}: expected key = value, got `{line}`", n + 1)))?;
            let key = match key.trim() {
                "thread-count" | "thread_count" => "threads",
                k => k,
            };
            if seen.contains(&key) {
                return Err(CliError::validation(format!("line {}: config key `{key}` given twice", n + 1)));
            }
            cfg.set(key, raw.trim())
                .map_err(|e| CliError::validation(format!("line {}: {e}", n + 1)))?;
            seen.push(key);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "rho" => self.rho = value(key, raw)?,
            "x_min" => self.x_min = value(key, raw)?,
            "x_max" => self.x_max = value(key, raw)?,
            "y_min" => self.y_min = value(key, raw)?,
            "y_max" => self.y_max = value(key, raw)?,
            "d_state" => self.d_state = value(key, raw)?,
            "chunk_len" => self.chunk_len = value(key, raw)?,
            "channels" => self.channels = value(key, raw)?,
            "pe_base" => self.pe_base = value(key, raw)?,
            "seed" => self.seed = value(key, raw)?,
            "threads" => self.threads = value(key, raw)?,
            _ => {
                return Err(CliError::validation(format!(
                    "unknown config key `{key}`; expected one of {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        if self.threads == 0 {
            return Err(CliError::validation("invalid config `threads`: must be at least 1"));
        }
        if self.d_state == 0 {
            return Err(CliError::validation("invalid config `d_state`: must be positive"));
        }
        if self.chunk_len == 0 {
            return Err(CliError::validation("invalid config `chunk_len`: must be positive"));
        }
        if self.channels == 0 || !self.channels.is_multiple_of(4) {
            return Err(CliError::validation(format!(
                "invalid config `channels`: must be a positive multiple of 4, got {}",
                self.channels
            )));
        }
        if !(self.pe_base > 1.0 && self.pe_base.is_finite()) {
            return Err(CliError::validation(format!(
                "invalid config `pe_base`: must be finite and > 1, got {}",
                self.pe_base
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<GridConfig> {
        Ok(GridConfig::new(self.rho, self.x_min, self.x_max, self.y_min, self.y_max)?)
    }

    pub fn network(&self) -> Result<NetworkConfig> {
        let mut net = NetworkConfig::new(self.grid()?, self.channels);
        net.block.d_state = self.d_state;
        net.block.chunk_len = self.chunk_len;
        net.pe_base = self.pe_base;
        net.validate()?;
        Ok(net)
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    fn get(&self, key: &str) -> String {
        match key {
            "rho" => self.rho.to_string(),
            "x_min" => self.x_min.to_string(),
            "x_max" => self.x_max.to_string(),
            "y_min" => self.y_min.to_string(),
            "y_max" => self.y_max.to_string(),
            "d_state" => self.d_state.to_string(),
            "chunk_len" => self.chunk_len.to_string(),
            "channels" => self.channels.to_string(),
            "pe_base" => self.pe_base.to_string(),
            "seed" => self.seed.to_string(),
            "threads" => self.threads.to_string(),
            _ => unreachable!("key list is fixed"),
        }
    }

    /// Rayon pool sized by `threads`.
    pub fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| CliError::validation(format!("cannot start {} threads: {e}", self.threads)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let cfg = RunConfig {
            seed: 42,
            rho: 2.0,
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_alias() {
        let cfg = RunConfig::parse("# run\nseed = 7  # tail\n\nthread-count=3\n").unwrap();
        assert_eq!((cfg.seed, cfg.threads), (7, 3));
    }

    #[test]
    fn errors_name_the_key() {
        let e = RunConfig::parse("colour = red").unwrap_err().to_string();
        assert!(e.contains("`colour`"), "{e}");
        let e = RunConfig::parse("rho = fast").unwrap_err().to_string();
        assert!(e.contains("`rho`"), "{e}");
        let e = RunConfig::parse("rho = 0.3").unwrap_err().to_string();
        assert!(e.contains("x_max") || e.contains("y_max"), "{e}");
        let e = RunConfig::parse("seed = 1\nseed = 2").unwrap_err().to_string();
        assert!(e.contains("twice"), "{e}");
        let e = RunConfig::parse("channels = 6").unwrap_err().to_string();
        assert!(e.contains("`channels`"), "{e}");
    }
}
