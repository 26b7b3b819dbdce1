//! Run configuration as a flat `key = value` file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::synth::{Difficulty, PairOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub size: usize,
    pub channels: usize,
    pub mesh_rows: usize,
    pub mesh_cols: usize,
    pub levels: usize,
    pub c_f: usize,
    pub c_c: usize,
    pub c_r: usize,
    pub stride_f: usize,
    pub stride_c: usize,
    pub hidden: usize,
    pub lr: f64,
    pub batch: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lambda_h: f64,
    pub lambda_m: f64,
    pub seed: u64,
    pub steps: u64,
    /// Steps between checkpoints; 0 saves only the final one.
    pub checkpoint_every: u64,
    /// Synthetic training pairs generated when `data` is unset.
    pub pairs: usize,
    pub difficulty: Difficulty,
    /// Corner bound in pixels at 128px, overriding the difficulty bound.
    pub max_offset: Option<f64>,
    pub translation_only: bool,
    pub local_field: bool,
    pub jitter: bool,
    /// Dataset directory; synthetic pairs are generated when unset.
    pub data: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        let m = ModelConfig::default();
        let w = LossWeights::default();
        Self {
            size: m.height,
            channels: m.channels,
            mesh_rows: m.rows,
            mesh_cols: m.cols,
            levels: m.levels,
            c_f: m.c_f,
            c_c: m.c_c,
            c_r: m.c_r,
            stride_f: m.stride_f,
            stride_c: m.stride_c,
            hidden: m.hidden,
            lr: 1e-4,
            batch: 4,
            alpha: w.alpha,
            beta: w.beta,
            lambda_h: w.lambda_h,
            lambda_m: w.lambda_m,
            seed: 0,
            steps: 2000,
            checkpoint_every: 500,
            pairs: 256,
            difficulty: Difficulty::Easy,
            max_offset: None,
            translation_only: false,
            local_field: true,
            jitter: true,
            data: None,
            out: PathBuf::from("run"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

fn optional<T>(v: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<Option<T>> {
    if v.is_empty() || v == "none" {
        Ok(None)
    } else {
        f(v).map(Some)
    }
}

impl Config {
    /// Parses `key = value` lines over the defaults. `#` starts a comment;
    /// unknown and repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
            c.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                e => e,
            })?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        match k {
            "size" => self.size = parse(k, v)?,
            "channels" => self.channels = parse(k, v)?,
            "mesh_rows" => self.mesh_rows = parse(k, v)?,
            "mesh_cols" => self.mesh_cols = parse(k, v)?,
            "levels" => self.levels = parse(k, v)?,
            "c_f" => self.c_f = parse(k, v)?,
            "c_c" => self.c_c = parse(k, v)?,
            "c_r" => self.c_r = parse(k, v)?,
            "stride_f" => self.stride_f = parse(k, v)?,
            "stride_c" => self.stride_c = parse(k, v)?,
            "hidden" => self.hidden = parse(k, v)?,
            "lr" => self.lr = parse(k, v)?,
            "batch" => self.batch = parse(k, v)?,
            "alpha" => self.alpha = parse(k, v)?,
            "beta" => self.beta = parse(k, v)?,
            "lambda_h" => self.lambda_h = parse(k, v)?,
            "lambda_m" => self.lambda_m = parse(k, v)?,
            "seed" => self.seed = parse(k, v)?,
            "steps" => self.steps = parse(k, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(k, v)?,
            "pairs" => self.pairs = parse(k, v)?,
            "difficulty" => self.difficulty = v.parse().map_err(|e: Error| Error::Config(format!("{k}: {e}")))?,
            "max_offset" => self.max_offset = optional(v, |s| parse(k, s))?,
            "translation_only" => self.translation_only = parse_bool(k, v)?,
            "local_field" => self.local_field = parse_bool(k, v)?,
            "jitter" => self.jitter = parse_bool(k, v)?,
            "data" => self.data = optional(v, |s| Ok(PathBuf::from(s)))?,
            "out" => self.out = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {k:?}"))),
        }
        Ok(())
    }

    /// Renders the config in the format [`Config::parse`] reads.
    pub fn to_text(&self) -> String {
        let opt = |o: Option<String>| o.unwrap_or_else(|| "none".into());
        [
            ("size", self.size.to_string()),
            ("channels", self.channels.to_string()),
            ("mesh_rows", self.mesh_rows.to_string()),
            ("mesh_cols", self.mesh_cols.to_string()),
            ("levels", self.levels.to_string()),
            ("c_f", self.c_f.to_string()),
            ("c_c", self.c_c.to_string()),
            ("c_r", self.c_r.to_string()),
            ("stride_f", self.stride_f.to_string()),
            ("stride_c", self.stride_c.to_string()),
            ("hidden", self.hidden.to_string()),
            ("lr", self.lr.to_string()),
            ("batch", self.batch.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("lambda_h", self.lambda_h.to_string()),
            ("lambda_m", self.lambda_m.to_string()),
            ("seed", self.seed.to_string()),
            ("steps", self.steps.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("pairs", self.pairs.to_string()),
            ("difficulty", self.difficulty.to_string()),
            ("max_offset", opt(self.max_offset.map(|v| v.to_string()))),
            ("translation_only", self.translation_only.to_string()),
            ("local_field", self.local_field.to_string()),
            ("jitter", self.jitter.to_string()),
            ("data", opt(self.data.as_ref().map(|p| p.display().to_string()))),
            ("out", self.out.display().to_string()),
        ]
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (k, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda_h", self.lambda_h),
            ("lambda_m", self.lambda_m),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be nonnegative, got {v}")));
            }
        }
        if self.data.is_none() && self.pairs == 0 {
            return Err(Error::Config("pairs must be positive without a data directory".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let m = ModelConfig {
            height: self.size,
            width: self.size,
            channels: self.channels,
            rows: self.mesh_rows,
            cols: self.mesh_cols,
            levels: self.levels,
            c_f: self.c_f,
            c_c: self.c_c,
            c_r: self.c_r,
            stride_f: self.stride_f,
            stride_c: self.stride_c,
            hidden: self.hidden,
        };
        m.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(m)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            lambda_h: self.lambda_h,
            lambda_m: self.lambda_m,
        }
    }

    pub fn pair_options(&self) -> PairOptions {
        PairOptions {
            max_offset: self.max_offset,
            translation_only: self.translation_only,
            local_field: self.local_field,
            jitter: self.jitter,
            ..PairOptions::new(self.size, self.difficulty)
        }
    }
}
