//! Flat key=value run configuration.
//!
//! Recognized keys: lambda, lambda_mask, tau, theta, K, T, warmup_steps,
//! image_size, vocab_path, seed, plus the harness sizing keys steps, batch,
//! train_scenes, heldout_scenes, pretrain_steps, lr_boost. Blank lines and
//! lines starting with '#' are ignored; any other key is an error rather
//! than a silent typo.

use crate::error::{PipelineError, PipelineResult};
use std::fmt;
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub lambda: f32,
    pub lambda_mask: f32,
    pub tau: f32,
    pub theta: f32,
    pub k: usize,
    pub t: usize,
    pub warmup_steps: u64,
    pub image_size: usize,
    pub vocab_path: Option<PathBuf>,
    pub seed: u64,
    pub steps: u64,
    pub batch: usize,
    pub train_scenes: usize,
    pub heldout_scenes: usize,
    pub pretrain_steps: u64,
    /// Multiplier on the scheduled rate for the small-scale corpus; the
    /// schedule's nominal peak is sized for far longer runs.
    pub lr_boost: f32,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            lambda: 0.1,
            lambda_mask: 0.1,
            tau: 1.0,
            theta: 0.2,
            k: 256,
            t: 10,
            warmup_steps: 500,
            image_size: 32,
            vocab_path: None,
            seed: 0,
            steps: 600,
            batch: 8,
            train_scenes: 2048,
            heldout_scenes: 64,
            pretrain_steps: 300,
            lr_boost: 25.0,
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> PipelineResult<Config> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(lineno, format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "lambda" => cfg.lambda = num(lineno, key, value)?,
                "lambda_mask" => cfg.lambda_mask = num(lineno, key, value)?,
                "tau" => cfg.tau = num(lineno, key, value)?,
                "theta" => cfg.theta = num(lineno, key, value)?,
                "K" => cfg.k = num(lineno, key, value)?,
                "T" => cfg.t = num(lineno, key, value)?,
                "warmup_steps" => cfg.warmup_steps = num(lineno, key, value)?,
                "image_size" => cfg.image_size = num(lineno, key, value)?,
                "vocab_path" => cfg.vocab_path = Some(PathBuf::from(value)),
                "seed" => cfg.seed = num(lineno, key, value)?,
                "steps" => cfg.steps = num(lineno, key, value)?,
                "batch" => cfg.batch = num(lineno, key, value)?,
                "train_scenes" => cfg.train_scenes = num(lineno, key, value)?,
                "heldout_scenes" => cfg.heldout_scenes = num(lineno, key, value)?,
                "pretrain_steps" => cfg.pretrain_steps = num(lineno, key, value)?,
                "lr_boost" => cfg.lr_boost = num(lineno, key, value)?,
                other => return Err(bad(lineno, format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> PipelineResult<Config> {
        let text = std::fs::read_to_string(path)?;
        Config::parse(&text)
    }

    pub fn validate(&self) -> PipelineResult<()> {
        let fail = |what: String| Err(PipelineError::Config(what));
        if !(self.lambda > 0.0 && self.lambda_mask >= 0.0) {
            return fail(format!("lambda {} and lambda_mask {} must be positive", self.lambda, self.lambda_mask));
        }
        if self.tau <= 0.0 {
            return fail(format!("tau {} must be positive", self.tau));
        }
        if !(0.0..1.0).contains(&self.theta) {
            return fail(format!("theta {} must lie in [0, 1)", self.theta));
        }
        if self.k < 1 || self.k > 65535 {
            return fail(format!("K {} must lie in 1..=65535", self.k));
        }
        if self.t < 1 {
            return fail("T must be at least 1".into());
        }
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return fail(format!("image_size {} must be a positive multiple of 8", self.image_size));
        }
        if self.batch < 1 {
            return fail("batch must be at least 1".into());
        }
        if self.lr_boost <= 0.0 {
            return fail(format!("lr_boost {} must be positive", self.lr_boost));
        }
        if self.train_scenes < 1 || self.train_scenes >= 1_000_000 {
            return fail(format!("train_scenes {} must lie in 1..1000000", self.train_scenes));
        }
        Ok(())
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / 8
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "lambda = {}", self.lambda)?;
        writeln!(f, "lambda_mask = {}", self.lambda_mask)?;
        writeln!(f, "tau = {}", self.tau)?;
        writeln!(f, "theta = {}", self.theta)?;
        writeln!(f, "K = {}", self.k)?;
        writeln!(f, "T = {}", self.t)?;
        writeln!(f, "warmup_steps = {}", self.warmup_steps)?;
        writeln!(f, "image_size = {}", self.image_size)?;
        if let Some(p) = &self.vocab_path {
            writeln!(f, "vocab_path = {}", p.display())?;
        }
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "steps = {}", self.steps)?;
        writeln!(f, "batch = {}", self.batch)?;
        writeln!(f, "train_scenes = {}", self.train_scenes)?;
        writeln!(f, "heldout_scenes = {}", self.heldout_scenes)?;
        writeln!(f, "pretrain_steps = {}", self.pretrain_steps)?;
        writeln!(f, "lr_boost = {}", self.lr_boost)
    }
}

fn bad(lineno: usize, what: String) -> PipelineError {
    PipelineError::Config(format!("line {}: {what}", lineno + 1))
}

fn num<T: std::str::FromStr>(lineno: usize, key: &str, value: &str) -> PipelineResult<T> {
    value.parse().map_err(|_| bad(lineno, format!("cannot parse {key} value {value:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_text() {
        let cfg = Config::parse("").unwrap();
        assert_eq!(cfg, Config::default());
        assert_eq!(cfg.latent_size(), 4);
    }

    #[test]
    fn keys_override_defaults_and_tolerate_whitespace() {
        let cfg = Config::parse("lambda = 10\n# comment\n\n  K=32  \nT = 4\nseed=7\nvocab_path = /tmp/nouns.txt\n").unwrap();
        assert_eq!(cfg.lambda, 10.0);
        assert_eq!(cfg.k, 32);
        assert_eq!(cfg.t, 4);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.vocab_path, Some(PathBuf::from("/tmp/nouns.txt")));
        assert_eq!(cfg.tau, 1.0);
    }

    #[test]
    fn unknown_keys_are_rejected_with_line_numbers() {
        let err = Config::parse("lambda=1\nlambad=2\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("lambad"), "{msg}");
    }

    #[test]
    fn malformed_lines_and_values_are_rejected() {
        assert!(Config::parse("just words\n").is_err());
        assert!(Config::parse("K=abc\n").is_err());
        assert!(Config::parse("lambda=\n").is_err());
    }

    #[test]
    fn validation_catches_out_of_range_settings() {
        assert!(Config::parse("image_size=33\n").is_err());
        assert!(Config::parse("K=0\n").is_err());
        assert!(Config::parse("K=70000\n").is_err());
        assert!(Config::parse("T=0\n").is_err());
        assert!(Config::parse("tau=0\n").is_err());
        assert!(Config::parse("theta=1\n").is_err());
        assert!(Config::parse("lambda=-1\n").is_err());
        assert!(Config::parse("lr_boost=0\n").is_err());
        assert!(Config::parse("train_scenes=0\n").is_err());
    }

    #[test]
    fn display_round_trips_through_parse() {
        let mut cfg = Config::default();
        cfg.lambda = 10.0;
        cfg.seed = 123;
        cfg.vocab_path = Some(PathBuf::from("words.txt"));
        let reparsed = Config::parse(&cfg.to_string()).unwrap();
        assert_eq!(cfg, reparsed);
    }
}
