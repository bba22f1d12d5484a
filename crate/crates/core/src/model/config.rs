//! Flat `key = value` run configuration.
//!
//! ```text
//! # two stages of three blocks
//! arch.stages = 3,3
//! arch.channels = 8,16
//! mode = light
//! ```
//!
//! Blank lines and `#` comments are ignored. Unknown keys, repeated keys and
//! ill-typed values are errors naming the offending line.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::blocks::{ArchSpec, BlockOptions, StageSpec, Variant};
use crate::error::{Error, Result};
use crate::tensor::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MrlaMode {
    Off,
    Base,
    Light,
}

impl MrlaMode {
    pub fn attn(self) -> Option<crate::blocks::AttnMode> {
        match self {
            MrlaMode::Off => None,
            MrlaMode::Base => Some(crate::blocks::AttnMode::Base),
            MrlaMode::Light => Some(crate::blocks::AttnMode::Light),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Blocks per stage.
    pub stages: Vec<usize>,
    /// Channels per stage.
    pub channels: Vec<usize>,
    pub mode: MrlaMode,
    pub d_k: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub survival_prob: f64,
    pub batch: usize,
    /// Square input side length.
    pub image: usize,
    pub in_channels: usize,
    pub classes: usize,
    pub per_class: usize,
    /// ViT patch side length.
    pub patch: usize,
    /// Distance scale between class means, in noise standard deviations.
    pub separation: f64,
    pub value_conv: bool,
    pub fixed_lambda: bool,
    pub dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Cnn,
            stages: vec![3, 3],
            channels: vec![8, 16],
            mode: MrlaMode::Light,
            d_k: 4,
            lr: 0.05,
            epochs: 20,
            seed: 0,
            survival_prob: 1.0,
            batch: 10,
            image: 8,
            in_channels: 3,
            classes: 3,
            per_class: 30,
            patch: 2,
            separation: 3.0,
            value_conv: true,
            fixed_lambda: false,
            dtype: DType::F32,
        }
    }
}

pub const KEYS: &[&str] = &[
    "arch.variant",
    "arch.stages",
    "arch.channels",
    "mode",
    "d_k",
    "lr",
    "epochs",
    "seed",
    "survival_prob",
    "batch",
    "image",
    "in_channels",
    "classes",
    "per_class",
    "patch",
    "separation",
    "value_conv",
    "fixed_lambda",
    "dtype",
];

fn list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|e| format!("{s:?}: {e}")))
        .collect()
}

fn scalar<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key.trim() {
            "arch.variant" => {
                self.variant = match v {
                    "cnn" => Variant::Cnn,
                    "vit" => Variant::Vit,
                    _ => return Err(format!("variant must be cnn or vit, got {v:?}")),
                }
            }
            "arch.stages" => self.stages = list(v)?,
            "arch.channels" => self.channels = list(v)?,
            "mode" => {
                self.mode = match v {
                    "off" => MrlaMode::Off,
                    "base" => MrlaMode::Base,
                    "light" => MrlaMode::Light,
                    _ => return Err(format!("mode must be off, base or light, got {v:?}")),
                }
            }
            "d_k" => self.d_k = scalar(v)?,
            "lr" => self.lr = scalar(v)?,
            "epochs" => self.epochs = scalar(v)?,
            "seed" => self.seed = scalar(v)?,
            "survival_prob" => self.survival_prob = scalar(v)?,
            "batch" => self.batch = scalar(v)?,
            "image" => self.image = scalar(v)?,
            "in_channels" => self.in_channels = scalar(v)?,
            "classes" => self.classes = scalar(v)?,
            "per_class" => self.per_class = scalar(v)?,
            "patch" => self.patch = scalar(v)?,
            "separation" => self.separation = scalar(v)?,
            "value_conv" => self.value_conv = scalar(v)?,
            "fixed_lambda" => self.fixed_lambda = scalar(v)?,
            "dtype" => {
                self.dtype = match v {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(format!("dtype must be f32 or f64, got {v:?}")),
                }
            }
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
                line,
                msg: format!("expected `key = value`, got {content:?}"),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) && KEYS.contains(&key) {
                return Err(Error::Parse {
                    line,
                    msg: format!("duplicate key {key:?}"),
                });
            }
            cfg.set(key, value).map_err(|msg| Error::Parse { line, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides, in order, then validates.
    pub fn with_overrides<S: AsRef<str>>(mut self, overrides: &[S]) -> Result<Self> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k, v)
                .map_err(|msg| Error::Config(format!("override {o:?}: {msg}")))?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() || self.stages.len() != self.channels.len() {
            return fail(format!(
                "arch.stages ({}) and arch.channels ({}) need the same non-zero length",
                self.stages.len(),
                self.channels.len()
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.survival_prob) {
            return fail(format!("survival_prob must lie in [0, 1], got {}", self.survival_prob));
        }
        if self.classes < 2 {
            return fail("at least two classes are needed".into());
        }
        if self.batch == 0 || self.per_class == 0 || self.in_channels == 0 {
            return fail("batch, per_class and in_channels must be positive".into());
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return fail(format!("separation must be finite and non-negative, got {}", self.separation));
        }
        self.arch()?;
        Ok(())
    }

    /// Architecture described by this config. CNN stages halve the spatial
    /// size at every stage after the first; ViT stages share one patch grid.
    pub fn arch(&self) -> Result<ArchSpec> {
        let mut stages = Vec::with_capacity(self.stages.len());
        match self.variant {
            Variant::Cnn => {
                let mut side = self.image;
                for (i, (&b, &c)) in self.stages.iter().zip(&self.channels).enumerate() {
                    if i > 0 {
                        if !side.is_multiple_of(2) {
                            return Err(Error::Config(format!(
                                "image side {} cannot be halved {i} times",
                                self.image
                            )));
                        }
                        side /= 2;
                    }
                    stages.push(StageSpec::cnn(b, c, side, side));
                }
            }
            Variant::Vit => {
                if self.patch == 0 || !self.image.is_multiple_of(self.patch) {
                    return Err(Error::Config(format!(
                        "patch {} does not tile image side {}",
                        self.patch, self.image
                    )));
                }
                let side = self.image / self.patch;
                for (&b, &c) in self.stages.iter().zip(&self.channels) {
                    stages.push(StageSpec::cnn(b, c, side, side));
                }
            }
        }
        ArchSpec::new(self.variant, stages, self.d_k)
    }

    pub fn block_options(&self) -> BlockOptions {
        BlockOptions {
            value_conv: self.value_conv,
            fixed_lambda: self.fixed_lambda,
        }
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let variant = match self.variant {
            Variant::Cnn => "cnn",
            Variant::Vit => "vit",
        };
        let mode = match self.mode {
            MrlaMode::Off => "off",
            MrlaMode::Base => "base",
            MrlaMode::Light => "light",
        };
        let dtype = match self.dtype {
            DType::F32 => "f32",
            DType::F64 => "f64",
        };
        let rows: [(&str, String); 19] = [
            ("arch.variant", variant.into()),
            ("arch.stages", join(&self.stages)),
            ("arch.channels", join(&self.channels)),
            ("mode", mode.into()),
            ("d_k", self.d_k.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("survival_prob", format!("{:?}", self.survival_prob)),
            ("batch", self.batch.to_string()),
            ("image", self.image.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("classes", self.classes.to_string()),
            ("per_class", self.per_class.to_string()),
            ("patch", self.patch.to_string()),
            ("separation", format!("{:?}", self.separation)),
            ("value_conv", self.value_conv.to_string()),
            ("fixed_lambda", self.fixed_lambda.to_string()),
            ("dtype", dtype.into()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
