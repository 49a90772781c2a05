//! `key = value` training configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::objectives::LocalDenominator;

/// Which global embedding drives routing at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RouterInput {
    Text,
    #[default]
    Image,
}

impl FromStr for RouterInput {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Self::Text),
            "image" => Ok(Self::Image),
            _ => Err(Error::InvalidConfig(format!("router_input must be text|image, got {s}"))),
        }
    }
}

impl std::fmt::Display for RouterInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Text => "text",
            Self::Image => "image",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    /// Directory receiving the checkpoint and logs.
    pub out: PathBuf,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub tau: f64,
    pub lambda: f64,
    pub experts: usize,
    pub align_level: usize,
    pub embed_dim: usize,
    pub router_hidden: usize,
    pub widths: Vec<usize>,
    pub seed: u64,
    pub router_input: RouterInput,
    /// Checkpoint and validation cadence in steps; 0 disables intermediate saves.
    pub eval_every: usize,
    pub grad_accum: usize,
    pub local_loss_denominator: LocalDenominator,
    pub symmetric_global: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            out: PathBuf::from("run"),
            batch_size: 32,
            steps: 1000,
            lr: 0.05,
            momentum: 0.9,
            tau: 0.07,
            lambda: 0.5,
            experts: 4,
            align_level: 3,
            embed_dim: 128,
            router_hidden: 64,
            widths: vec![32, 64, 128, 256],
            seed: 0,
            router_input: RouterInput::Image,
            eval_every: 0,
            grad_accum: 1,
            local_loss_denominator: LocalDenominator::Tokens,
            symmetric_global: false,
        }
    }
}

pub const KEYS: [&str; 19] = [
    "dataset",
    "out",
    "batch_size",
    "steps",
    "lr",
    "momentum",
    "tau",
    "lambda",
    "experts",
    "align_level",
    "embed_dim",
    "router_hidden",
    "widths",
    "seed",
    "router_input",
    "eval_every",
    "grad_accum",
    "local_loss_denominator",
    "symmetric_global",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidConfig(format!("cannot parse {key} = {v:?}")))
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "batch_size" => self.batch_size = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "experts" => self.experts = parse(key, v)?,
            "align_level" => self.align_level = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "router_hidden" => self.router_hidden = parse(key, v)?,
            "widths" => {
                self.widths = v
                    .split(',')
                    .map(|w| parse(key, w.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "seed" => self.seed = parse(key, v)?,
            "router_input" => self.router_input = v.parse()?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "grad_accum" => self.grad_accum = parse(key, v)?,
            "local_loss_denominator" => self.local_loss_denominator = v.parse()?,
            "symmetric_global" => self.symmetric_global = parse(key, v)?,
            _ => return Err(Error::InvalidConfig(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Defaults, then the file's pairs, then `overrides` in order. The
    /// result is validated.
    pub fn from_sources(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = file {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            cfg.apply_text(&text)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_pairs(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// All keys in [`KEYS`] order; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let widths = self.widths.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let vals: [String; 19] = [
            self.dataset.display().to_string(),
            self.out.display().to_string(),
            self.batch_size.to_string(),
            self.steps.to_string(),
            self.lr.to_string(),
            self.momentum.to_string(),
            self.tau.to_string(),
            self.lambda.to_string(),
            self.experts.to_string(),
            self.align_level.to_string(),
            self.embed_dim.to_string(),
            self.router_hidden.to_string(),
            widths,
            self.seed.to_string(),
            self.router_input.to_string(),
            self.eval_every.to_string(),
            self.grad_accum.to_string(),
            self.local_loss_denominator.to_string(),
            self.symmetric_global.to_string(),
        ];
        KEYS.iter().zip(vals).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.experts == 0 || self.embed_dim == 0 || self.router_hidden == 0 || self.grad_accum == 0 {
            return bad("experts, embed_dim, router_hidden and grad_accum must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return bad("lr must be finite and non-negative, momentum in [0, 1)");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if self.widths.is_empty() || self.align_level < 1 || self.align_level > self.widths.len() {
            return bad("align_level must index a pyramid level");
        }
        Ok(())
    }
}
