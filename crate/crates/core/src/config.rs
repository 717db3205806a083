//! Run configuration: defaults, `key = value` files and command-line
//! overrides (CLI beats file beats default).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{DehazeError, Result};

/// Architecture and training-data toggles, one per ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggles {
    pub glda: bool,
    pub saca: bool,
    pub msfa: bool,
    /// Train against discriminators at all.
    pub gan: bool,
    pub lf_prior: bool,
    pub hf_prior: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self { glda: true, saca: true, msfa: true, gan: true, lf_prior: true, hf_prior: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub patch_size: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub glda_max_patch: usize,
    pub glda_max_patches: usize,
    pub toggles: Toggles,
    pub seed: u64,
    pub steps: u64,
    pub width_factor: usize,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
    /// Use `-log D(fake)` instead of `log(1 - D(fake))` for the generator.
    pub non_saturating: bool,
    pub eval_every: u64,
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            patch_size: 64,
            batch_size: 4,
            lr_g: 1e-4,
            lr_d: 3e-4,
            beta1: 0.5,
            beta2: 0.9,
            lambda1: 0.5,
            lambda2: 0.5,
            glda_max_patch: 50,
            glda_max_patches: 8,
            toggles: Toggles::default(),
            seed: 0,
            steps: 1000,
            width_factor: 4,
            d_steps: 1,
            non_saturating: false,
            eval_every: 50,
            checkpoint_every: 100,
        }
    }
}

pub const KEYS: &[&str] = &[
    "patch_size",
    "batch_size",
    "lr_g",
    "lr_d",
    "beta1",
    "beta2",
    "lambda1",
    "lambda2",
    "glda_max_patch",
    "glda_max_patches",
    "glda",
    "saca",
    "msfa",
    "gan",
    "lf_prior",
    "hf_prior",
    "seed",
    "steps",
    "width_factor",
    "d_steps",
    "non_saturating",
    "eval_every",
    "checkpoint_every",
];

fn err(key: &str, msg: impl Into<String>) -> DehazeError {
    DehazeError::Config { key: key.to_string(), msg: msg.into() }
}

fn number(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| err(key, "expected number"))
}

fn integer(key: &str, v: &str) -> Result<u64> {
    v.parse::<u64>().map_err(|_| err(key, "expected non-negative integer"))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(err(key, "expected boolean")),
    }
}

impl RunConfig {
    /// Assigns one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let uint = |v| integer(key, v).map(|x| x as usize);
        match key {
            "patch_size" => self.patch_size = uint(value)?,
            "batch_size" => self.batch_size = uint(value)?,
            "lr_g" => self.lr_g = number(key, value)?,
            "lr_d" => self.lr_d = number(key, value)?,
            "beta1" => self.beta1 = number(key, value)?,
            "beta2" => self.beta2 = number(key, value)?,
            "lambda1" => self.lambda1 = number(key, value)?,
            "lambda2" => self.lambda2 = number(key, value)?,
            "glda_max_patch" => self.glda_max_patch = uint(value)?,
            "glda_max_patches" => self.glda_max_patches = uint(value)?,
            "glda" => self.toggles.glda = boolean(key, value)?,
            "saca" => self.toggles.saca = boolean(key, value)?,
            "msfa" => self.toggles.msfa = boolean(key, value)?,
            "gan" => self.toggles.gan = boolean(key, value)?,
            "lf_prior" => self.toggles.lf_prior = boolean(key, value)?,
            "hf_prior" => self.toggles.hf_prior = boolean(key, value)?,
            "seed" => self.seed = integer(key, value)?,
            "steps" => self.steps = integer(key, value)?,
            "width_factor" => self.width_factor = uint(value)?,
            "d_steps" => self.d_steps = uint(value)?,
            "non_saturating" => self.non_saturating = boolean(key, value)?,
            "eval_every" => self.eval_every = integer(key, value)?,
            "checkpoint_every" => self.checkpoint_every = integer(key, value)?,
            _ => return Err(err(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(&format!("line {}", lineno + 1), format!("expected `key = value`, got {line:?}")))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if v <= 0.0 {
                return Err(err(key, "must be positive"));
            }
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(err(key, "must lie in (0, 1)"));
            }
        }
        for (key, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if v < 0.0 {
                return Err(err(key, "must be non-negative"));
            }
        }
        if self.patch_size % 16 != 0 || self.patch_size < 32 {
            return Err(err("patch_size", "must be a multiple of 16 and at least 32"));
        }
        if self.batch_size == 0 {
            return Err(err("batch_size", "must be positive"));
        }
        if ![1, 2, 4, 8].contains(&self.width_factor) {
            return Err(err("width_factor", "must be one of 1, 2, 4, 8"));
        }
        if self.glda_max_patch < crate::glda::MIN_PATCH {
            return Err(err("glda_max_patch", format!("must be at least {}", crate::glda::MIN_PATCH)));
        }
        if self.glda_max_patches == 0 {
            return Err(err("glda_max_patches", "must be positive"));
        }
        if self.d_steps == 0 {
            return Err(err("d_steps", "must be positive"));
        }
        Ok(())
    }

    /// Defaults, then `file` (if any), then `overrides`; validated.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| DehazeError::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical `key = value` rendering; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.toggles;
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("patch_size", self.patch_size.to_string());
        line("batch_size", self.batch_size.to_string());
        line("lr_g", format!("{:?}", self.lr_g));
        line("lr_d", format!("{:?}", self.lr_d));
        line("beta1", format!("{:?}", self.beta1));
        line("beta2", format!("{:?}", self.beta2));
        line("lambda1", format!("{:?}", self.lambda1));
        line("lambda2", format!("{:?}", self.lambda2));
        line("glda_max_patch", self.glda_max_patch.to_string());
        line("glda_max_patches", self.glda_max_patches.to_string());
        line("glda", t.glda.to_string());
        line("saca", t.saca.to_string());
        line("msfa", t.msfa.to_string());
        line("gan", t.gan.to_string());
        line("lf_prior", t.lf_prior.to_string());
        line("hf_prior", t.hf_prior.to_string());
        line("seed", self.seed.to_string());
        line("steps", self.steps.to_string());
        line("width_factor", self.width_factor.to_string());
        line("d_steps", self.d_steps.to_string());
        line("non_saturating", self.non_saturating.to_string());
        line("eval_every", self.eval_every.to_string());
        line("checkpoint_every", self.checkpoint_every.to_string());
        s
    }
}

/// Splits `key=value` command-line assignments.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| err(s, "expected key=value"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
