//! Training configuration, presets and the line-oriented `key = value` format.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::flow::{EncoderKind, FlowConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub flow: FlowConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub grad_clip_value: f64,
    pub grad_clip_norm: f64,
    pub beta_ln: f64,
    pub beta_ae: f64,
    pub beta_in: f64,
    /// Half-width of the uniform noise added to every latent, latent units.
    pub latent_noise: f64,
    /// Half-width of the uniform image noise, 0-255 pixel units.
    pub image_noise: f64,
    pub seed: u64,
    /// Steps between checkpoints written by the CLI; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl TrainConfig {
    /// Single level, K=16, C_inter=128, base N(mu, 1); 28x28 digits padded to 32x32.
    pub fn mnist() -> Self {
        TrainConfig {
            flow: FlowConfig {
                levels: 1,
                steps: 16,
                c_inter: 128,
                blocks: 2,
                channels: 1,
                height: 32,
                width: 32,
                encoder: EncoderKind::Conv3,
                base_learn_std: false,
            },
            learning_rate: 1e-4,
            batch_size: 50,
            total_steps: 100_000,
            grad_clip_value: 1e5,
            grad_clip_norm: 1e4,
            beta_ln: 0.0,
            beta_ae: 0.0,
            beta_in: 0.0,
            latent_noise: 0.0,
            image_noise: 0.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }

    /// L=3, K=8, single-conv context encoders, latent-noise and auto-encoder losses.
    pub fn sprites() -> Self {
        TrainConfig {
            flow: FlowConfig {
                levels: 3,
                steps: 8,
                c_inter: 128,
                blocks: 2,
                channels: 3,
                height: 64,
                width: 64,
                encoder: EncoderKind::Conv3,
                base_learn_std: true,
            },
            batch_size: 20,
            beta_ln: 100.0,
            beta_ae: 1.0,
            latent_noise: 0.5,
            ..Self::mnist()
        }
    }

    /// L=3, K=4, C_inter=256, deep context encoders, image-noise loss on 64x64 patches.
    pub fn div2k() -> Self {
        TrainConfig {
            flow: FlowConfig {
                levels: 3,
                steps: 4,
                c_inter: 256,
                blocks: 2,
                channels: 3,
                height: 64,
                width: 64,
                encoder: EncoderKind::Deep,
                base_learn_std: true,
            },
            batch_size: 15,
            total_steps: 3_200_000,
            beta_in: 100.0,
            image_noise: 10.0,
            ..Self::sprites()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mnist" => Ok(Self::mnist()),
            "sprites" => Ok(Self::sprites()),
            "div2k" => Ok(Self::div2k()),
            _ => Err(Error::Param(format!(
                "unknown preset '{name}' (expected mnist, sprites or div2k)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        let positive = [
            ("learning_rate", self.learning_rate),
            ("grad_clip_value", self.grad_clip_value),
            ("grad_clip_norm", self.grad_clip_norm),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Param(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("beta_ln", self.beta_ln),
            ("beta_ae", self.beta_ae),
            ("beta_in", self.beta_in),
            ("latent_noise", self.latent_noise),
            ("image_noise", self.image_noise),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Param(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Canonical text form; `parse(print(c)) == c`.
    pub fn print(&self) -> String {
        let f = &self.flow;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("levels", f.levels.to_string());
        kv("steps", f.steps.to_string());
        kv("c_inter", f.c_inter.to_string());
        kv("blocks", f.blocks.to_string());
        kv("channels", f.channels.to_string());
        kv("height", f.height.to_string());
        kv("width", f.width.to_string());
        kv("encoder", f.encoder.name().to_string());
        kv("base_learn_std", f.base_learn_std.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("total_steps", self.total_steps.to_string());
        kv("grad_clip_value", self.grad_clip_value.to_string());
        kv("grad_clip_norm", self.grad_clip_norm.to_string());
        kv("beta_ln", self.beta_ln.to_string());
        kv("beta_ae", self.beta_ae.to_string());
        kv("beta_in", self.beta_in.to_string());
        kv("latent_noise", self.latent_noise.to_string());
        kv("image_noise", self.image_noise.to_string());
        kv("seed", self.seed.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        s
    }

    /// Parse `key = value` lines. A `preset` key (if any) must come first and
    /// selects the starting values; otherwise the MNIST preset is the base.
    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::mnist();
        let mut seen_other = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |detail: String| Error::Param(format!("config line {}: {detail}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| bad(format!("expected 'key = value', got '{line}'")))?;
            if key == "preset" {
                if seen_other {
                    return Err(bad("'preset' must precede other keys".into()));
                }
                cfg = Self::preset(value)?;
                continue;
            }
            seen_other = true;
            cfg.set(key, value).map_err(|e| bad(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Param(format!("invalid value '{v}' for {key}")))
        }
        let f = &mut self.flow;
        match key {
            "levels" => f.levels = num(key, value)?,
            "steps" => f.steps = num(key, value)?,
            "c_inter" => f.c_inter = num(key, value)?,
            "blocks" => f.blocks = num(key, value)?,
            "channels" => f.channels = num(key, value)?,
            "height" => f.height = num(key, value)?,
            "width" => f.width = num(key, value)?,
            "encoder" => f.encoder = EncoderKind::parse(value)?,
            "base_learn_std" => f.base_learn_std = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "total_steps" => self.total_steps = num(key, value)?,
            "grad_clip_value" => self.grad_clip_value = num(key, value)?,
            "grad_clip_norm" => self.grad_clip_norm = num(key, value)?,
            "beta_ln" => self.beta_ln = num(key, value)?,
            "beta_ae" => self.beta_ae = num(key, value)?,
            "beta_in" => self.beta_in = num(key, value)?,
            "latent_noise" => self.latent_noise = num(key, value)?,
            "image_noise" => self.image_noise = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            _ => return Err(Error::Param(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }
}
