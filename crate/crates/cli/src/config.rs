//! `key=value` run configuration shared by the subcommands.

use std::fmt;
use std::path::Path;

use anyhow::{bail, Context, Result};
use wecon_core::{Decomposition, ModelConfig, ProblemKind, TrainConfig};

/// Problem, model and training settings. Later sources override earlier
/// ones: defaults, config file, `--set` pairs, dedicated flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub problem: Option<ProblemKind>,
    pub n: Option<usize>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: None,
            n: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow::anyhow!("`{key}` expects a number, got `{value}`"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "problem" => self.problem = Some(value.parse()?),
            "n" => {
                let n = parse_num(key, value)?;
                self.n = Some(n);
                t.n = n;
            }
            "steps" => t.steps = parse_num(key, value)?,
            "batch" => t.batch = parse_num(key, value)?,
            "r" => t.r = parse_num(key, value)?,
            "c" => t.c = parse_num(key, value)?,
            "k" => t.k = parse_num(key, value)?,
            "beta" => t.beta = Some(parse_num(key, value)?),
            "guided_count" | "guided-count" => t.guided_count = Some(parse_num(key, value)?),
            "lr" => t.adam.lr = parse_num(key, value)?,
            "weight_decay" | "weight-decay" => t.adam.weight_decay = parse_num(key, value)?,
            "seed" => t.seed = parse_num(key, value)?,
            "decomposition" => t.decomposition = value.parse()?,
            _ => self.model.set(key, value)?,
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply_pair(line).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_pair(&mut self, pair: &str) -> Result<()> {
        let Some((k, v)) = pair.split_once('=') else {
            bail!("expected key=value, got `{pair}`");
        };
        self.set(k.trim(), v.trim())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
        Ok(cfg)
    }

    pub fn problem(&self) -> Result<ProblemKind> {
        self.problem.context("no problem given (use --problem or problem= in the config)")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(p) = self.problem {
            writeln!(f, "problem={p}")?;
        }
        if let Some(n) = self.n {
            writeln!(f, "n={n}")?;
        }
        write!(f, "{}", self.model)?;
        let t = &self.train;
        writeln!(f, "steps={}", t.steps)?;
        writeln!(f, "batch={}", t.batch)?;
        writeln!(f, "r={}", t.r)?;
        writeln!(f, "c={}", t.c)?;
        writeln!(f, "k={}", t.k)?;
        if let Some(b) = t.beta {
            writeln!(f, "beta={b}")?;
        }
        if let Some(g) = t.guided_count {
            writeln!(f, "guided_count={g}")?;
        }
        writeln!(f, "lr={}", t.adam.lr)?;
        writeln!(f, "weight_decay={}", t.adam.weight_decay)?;
        writeln!(f, "seed={}", t.seed)?;
        let d = match t.decomposition {
            Decomposition::WeightedSum => "ws",
            Decomposition::Tchebycheff(_) => "tch",
        };
        writeln!(f, "decomposition={d}")
    }
}
