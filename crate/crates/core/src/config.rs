//! Flat `key=value` experiment configuration.
//!
//! Precedence is command-line flags over file keys over defaults. The
//! canonical text form is what gets hashed and written as `resolved.cfg`.

use crate::error::{Error, Result};
use crate::metrics::parse_grid;
use crate::trainer::TrainConfig;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    /// `start:stop:step` or a comma list, in dB.
    pub snr_grid: String,
    /// Frames per MI/PAPR estimate.
    pub n_frames: usize,
    /// Symbols per SER estimate.
    pub n_symbols: usize,
    /// PAPR₀ thresholds for CCDF curves, in dB.
    pub thresholds: String,
    /// SLM candidate count.
    pub slm_u: usize,
    /// Clipping ratio of the amplitude-clipping baseline, dB.
    pub clip_cr_db: f64,
    /// Steps for auxiliary demappers on fixed alphabets.
    pub demapper_steps: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            snr_grid: "0:20:2".into(),
            n_frames: 2000,
            n_symbols: 100_000,
            thresholds: "0:16:0.25".into(),
            slm_u: crate::baselines::SLM_DEFAULT_U,
            clip_cr_db: 3.0,
            demapper_steps: 2000,
        }
    }
}

pub const KEYS: &[&str] = &[
    "m",
    "n_data",
    "snr_db",
    "lambda",
    "tau",
    "batch_symbols",
    "steps_phase1",
    "steps_phase2",
    "lr",
    "seed",
    "snr_grid",
    "n_frames",
    "n_symbols",
    "thresholds",
    "slm_u",
    "clip_cr_db",
    "demapper_steps",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "m" => t.m = parse_value(key, value)?,
            "n_data" => t.n_data = parse_value(key, value)?,
            "snr_db" => t.snr_db = parse_value(key, value)?,
            "lambda" => t.lambda = parse_value(key, value)?,
            "tau" => t.tau = parse_value(key, value)?,
            "batch_symbols" => t.batch_symbols = parse_value(key, value)?,
            "steps_phase1" => t.steps_phase1 = parse_value(key, value)?,
            "steps_phase2" => t.steps_phase2 = parse_value(key, value)?,
            "lr" => t.lr = parse_value(key, value)?,
            "seed" => t.seed = parse_value(key, value)?,
            "snr_grid" => {
                parse_grid(value).map_err(|_| Error::config(key, format!("bad grid `{value}`")))?;
                self.snr_grid = value.trim().to_string();
            }
            "n_frames" => self.n_frames = parse_value(key, value)?,
            "n_symbols" => self.n_symbols = parse_value(key, value)?,
            "thresholds" => {
                parse_grid(value).map_err(|_| Error::config(key, format!("bad grid `{value}`")))?;
                self.thresholds = value.trim().to_string();
            }
            "slm_u" => self.slm_u = parse_value(key, value)?,
            "clip_cr_db" => self.clip_cr_db = parse_value(key, value)?,
            "demapper_steps" => self.demapper_steps = parse_value(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Apply a config file, returning the keys it set. Blank lines and `#`
    /// comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<Vec<String>> {
        let mut keys = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, format!("line {} is not key=value", n + 1)))?;
            self.set(k.trim(), v)?;
            keys.push(k.trim().to_string());
        }
        Ok(keys)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.n_frames == 0 {
            return Err(Error::config("n_frames", "must be positive"));
        }
        if self.n_symbols == 0 {
            return Err(Error::config("n_symbols", "must be positive"));
        }
        if self.slm_u == 0 {
            return Err(Error::config("slm_u", "must be positive"));
        }
        if !self.clip_cr_db.is_finite() {
            return Err(Error::config("clip_cr_db", "must be finite"));
        }
        Ok(())
    }

    pub fn snr_points(&self) -> Result<Vec<f64>> {
        parse_grid(&self.snr_grid)
    }

    pub fn threshold_points(&self) -> Result<Vec<f64>> {
        parse_grid(&self.thresholds)
    }

    /// One `key=value` line per key in [`KEYS`] order.
    pub fn canonical_text(&self) -> String {
        let t = &self.train;
        let mut out = String::new();
        let values = [
            t.m.to_string(),
            t.n_data.to_string(),
            t.snr_db.to_string(),
            t.lambda.to_string(),
            t.tau.to_string(),
            t.batch_symbols.to_string(),
            t.steps_phase1.to_string(),
            t.steps_phase2.to_string(),
            t.lr.to_string(),
            t.seed.to_string(),
            self.snr_grid.clone(),
            self.n_frames.to_string(),
            self.n_symbols.to_string(),
            self.thresholds.clone(),
            self.slm_u.to_string(),
            self.clip_cr_db.to_string(),
            self.demapper_steps.to_string(),
        ];
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn resolved_text(&self) -> String {
        format!("# config_hash={}\n{}", self.hash(), self.canonical_text())
    }
}
