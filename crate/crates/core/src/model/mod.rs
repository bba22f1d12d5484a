//! Desk-scale CNN and ViT-like classifiers with a layer-attention block
//! after every building block.
//!
//! CNN block: `X = h + P relu(conv3x3(h))`. ViT block: token mixing
//! `x + M x` followed by a GELU feed-forward with its own residual. The
//! attention output `O` of a block is the next block's input; the carry is
//! created empty at each stage entry and dropped at stage exit.

pub mod config;
pub mod data;
pub mod train;

pub use config::{MrlaMode, TrainConfig};
pub use data::{synth_dataset, SynthDataset};
pub use train::{config_dataset, evaluate, evaluate_loss, train, train_epoch, EpochStats, TrainRun};

use std::path::Path;

use crate::blocks::{mrla_block_forward, ArchSpec, Carry, MrlaBlockParams, Variant};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::io::{load_checkpoint, save_checkpoint};
use crate::tensor::{DType, Tensor};

/// Seed offsets separating the independent random streams of one run.
pub(crate) const MODEL_STREAM: u64 = 0x6d6f_6465_6c00;
pub(crate) const DATA_STREAM: u64 = 0x6461_7461_0000;
pub(crate) const TRAIN_STREAM: u64 = 0x7472_6169_6e00;

#[derive(Debug, Clone)]
pub enum Backbone {
    Cnn { conv: Tensor, point: Tensor },
    Vit { mix: Tensor, ff1: Tensor, ff2: Tensor },
}

#[derive(Debug, Clone)]
pub struct ModelBlock {
    pub backbone: Backbone,
    pub mrla: Option<MrlaBlockParams>,
}

#[derive(Debug, Clone)]
pub struct Stage {
    /// CNN: `[3, 3, C_in, C]` convolution. ViT: patch embedding
    /// `[p * p * C_in, C]` at stage 0, channel projection later (absent when
    /// widths match).
    pub entry: Option<Tensor>,
    pub blocks: Vec<ModelBlock>,
}

#[derive(Debug, Clone)]
pub struct MiniModel {
    pub config: TrainConfig,
    pub arch: ArchSpec,
    pub stages: Vec<Stage>,
    /// ViT class token `[1, C0]` and positional embedding `[N + 1, C0]`.
    pub cls: Option<Tensor>,
    pub pos: Option<Tensor>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Per-block record of one forward pass.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub q: Vec<f64>,
    pub scores: Vec<Vec<f64>>,
    pub score_evals: usize,
    pub dropped: bool,
}

fn fan_in(rng: &mut Rng, shape: &[usize], fan: usize, dtype: DType) -> Result<Tensor> {
    let b = 1.0 / (fan as f64).sqrt();
    Ok(rng.uniform_tensor(shape, -b, b, dtype)?.as_param())
}

/// `[H, W, C]` image to `[N, p * p * C]` patch rows, row-major over the grid.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let (h, w, c) = match *x.shape() {
        [h, w, c] if p > 0 && h % p == 0 && w % p == 0 => (h, w, c),
        _ => return Err(Error::shape("patchify", x.shape(), &[p, p, 0])),
    };
    let d = x.data();
    let mut out = Vec::with_capacity(d.len());
    for gy in 0..h / p {
        for gx in 0..w / p {
            for y in gy * p..(gy + 1) * p {
                let start = (y * w + gx * p) * c;
                out.extend_from_slice(&d[start..start + p * c]);
            }
        }
    }
    Tensor::from_vec_dtype(out, &[(h / p) * (w / p), p * p * c], x.dtype())
}

/// Builds and initializes a model from `cfg` (seeded by `cfg.seed`).
pub fn build_model(cfg: &TrainConfig) -> Result<MiniModel> {
    cfg.validate()?;
    let arch = cfg.arch()?;
    let dtype = cfg.dtype;
    let mut rng = Rng::new(cfg.seed ^ MODEL_STREAM);
    let mut stages = Vec::with_capacity(arch.stages.len());
    let mut prev_c = cfg.in_channels;
    let tokens = arch.stages[0].height * arch.stages[0].width + 1;
    for (s, spec) in arch.stages.iter().enumerate() {
        let c = spec.channels;
        let entry = match cfg.variant {
            Variant::Cnn => Some(fan_in(&mut rng, &[3, 3, prev_c, c], 9 * prev_c, dtype)?),
            Variant::Vit if s == 0 => {
                let d = cfg.patch * cfg.patch * cfg.in_channels;
                Some(fan_in(&mut rng, &[d, c], d, dtype)?)
            }
            Variant::Vit if prev_c != c => Some(fan_in(&mut rng, &[prev_c, c], prev_c, dtype)?),
            Variant::Vit => None,
        };
        let mut blocks = Vec::with_capacity(spec.blocks);
        for _ in 0..spec.blocks {
            let backbone = match cfg.variant {
                Variant::Cnn => Backbone::Cnn {
                    conv: fan_in(&mut rng, &[3, 3, c, c], 9 * c, dtype)?,
                    point: fan_in(&mut rng, &[c, c], c, dtype)?,
                },
                Variant::Vit => Backbone::Vit {
                    mix: fan_in(&mut rng, &[tokens, tokens], tokens, dtype)?,
                    ff1: fan_in(&mut rng, &[c, 2 * c], c, dtype)?,
                    ff2: fan_in(&mut rng, &[2 * c, c], 2 * c, dtype)?,
                },
            };
            let mrla = match cfg.mode.attn() {
                None => None,
                Some(mode) => Some(MrlaBlockParams::init(
                    c,
                    arch.d_k,
                    mode,
                    cfg.variant,
                    cfg.block_options(),
                    &mut rng,
                    dtype,
                )?),
            };
            blocks.push(ModelBlock { backbone, mrla });
        }
        stages.push(Stage { entry, blocks });
        prev_c = c;
    }
    let (cls, pos) = match cfg.variant {
        Variant::Cnn => (None, None),
        Variant::Vit => {
            let c0 = arch.stages[0].channels;
            (
                Some(rng.normal_tensor(&[1, c0], 0.02, dtype)?.as_param()),
                Some(rng.normal_tensor(&[tokens, c0], 0.02, dtype)?.as_param()),
            )
        }
    };
    let head_w = fan_in(&mut rng, &[prev_c, cfg.classes], prev_c, dtype)?;
    let head_b = Tensor::zeros(&[cfg.classes], dtype)?.as_param();
    Ok(MiniModel {
        config: cfg.clone(),
        arch,
        stages,
        cls,
        pos,
        head_w,
        head_b,
    })
}

impl MiniModel {
    /// Learnable tensors with stable names, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if let Some(t) = &self.cls {
            out.push(("cls".to_string(), t.clone()));
        }
        if let Some(t) = &self.pos {
            out.push(("pos".to_string(), t.clone()));
        }
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some(e) = &stage.entry {
                out.push((format!("stage{s}.entry"), e.clone()));
            }
            for (b, block) in stage.blocks.iter().enumerate() {
                let p = format!("stage{s}.block{b}");
                match &block.backbone {
                    Backbone::Cnn { conv, point } => {
                        out.push((format!("{p}.conv"), conv.clone()));
                        out.push((format!("{p}.point"), point.clone()));
                    }
                    Backbone::Vit { mix, ff1, ff2 } => {
                        out.push((format!("{p}.mix"), mix.clone()));
                        out.push((format!("{p}.ff1"), ff1.clone()));
                        out.push((format!("{p}.ff2"), ff2.clone()));
                    }
                }
                if let Some(m) = &block.mrla {
                    for (n, t) in m.named_params() {
                        out.push((format!("{p}.mrla.{n}"), t.clone()));
                    }
                }
            }
        }
        out.push(("head.w".to_string(), self.head_w.clone()));
        out.push(("head.b".to_string(), self.head_b.clone()));
        out
    }

    /// Mutable handles in the same order as [`MiniModel::named_params`].
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        if let Some(t) = self.cls.as_mut() {
            out.push(("cls".to_string(), t));
        }
        if let Some(t) = self.pos.as_mut() {
            out.push(("pos".to_string(), t));
        }
        for (s, stage) in self.stages.iter_mut().enumerate() {
            if let Some(e) = stage.entry.as_mut() {
                out.push((format!("stage{s}.entry"), e));
            }
            for (b, block) in stage.blocks.iter_mut().enumerate() {
                let p = format!("stage{s}.block{b}");
                match &mut block.backbone {
                    Backbone::Cnn { conv, point } => {
                        out.push((format!("{p}.conv"), conv));
                        out.push((format!("{p}.point"), point));
                    }
                    Backbone::Vit { mix, ff1, ff2 } => {
                        out.push((format!("{p}.mix"), mix));
                        out.push((format!("{p}.ff1"), ff1));
                        out.push((format!("{p}.ff2"), ff2));
                    }
                }
                if let Some(m) = block.mrla.as_mut() {
                    for (n, t) in m.params_mut() {
                        out.push((format!("{p}.mrla.{n}"), t));
                    }
                }
            }
        }
        out.push(("head.w".to_string(), &mut self.head_w));
        out.push(("head.b".to_string(), &mut self.head_b));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Scalars held by the attention blocks.
    pub fn mrla_param_count(&self) -> usize {
        self.stages
            .iter()
            .flat_map(|s| &s.blocks)
            .filter_map(|b| b.mrla.as_ref())
            .map(MrlaBlockParams::num_params)
            .sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = [self.config.image, self.config.image, self.config.in_channels];
        if x.shape() != want {
            return Err(Error::shape("model input", x.shape(), &want));
        }
        Ok(())
    }

    fn stage_entry(&self, s: usize, h: &Tensor) -> Result<Tensor> {
        let stage = &self.stages[s];
        match self.arch.variant {
            Variant::Cnn => {
                let mut h = h.clone();
                if s > 0 {
                    let f = self.arch.stages[s - 1].height / self.arch.stages[s].height;
                    h = h.avg_pool2d(f)?;
                }
                let w = stage.entry.as_ref().expect("cnn stages always have an entry conv");
                Ok(h.conv3x3_same(w)?.relu())
            }
            Variant::Vit if s == 0 => {
                let embed = stage.entry.as_ref().expect("vit stage 0 has a patch embedding");
                let patches = patchify(h, self.config.patch)?.matmul(embed)?;
                let cls = self.cls.as_ref().expect("vit model has a class token");
                let pos = self.pos.as_ref().expect("vit model has positions");
                Tensor::concat(&[cls.clone(), patches], 0)?.add(pos)
            }
            Variant::Vit => match &stage.entry {
                Some(p) => h.matmul(p),
                None => Ok(h.clone()),
            },
        }
    }

    fn backbone(&self, block: &ModelBlock, h: &Tensor) -> Result<Tensor> {
        match &block.backbone {
            Backbone::Cnn { conv, point } => {
                let [hh, ww, c] = match *h.shape() {
                    [a, b, c] => [a, b, c],
                    _ => return Err(Error::shape("cnn block", h.shape(), &[0, 0, 0])),
                };
                let r = h.conv3x3_same(conv)?.relu().reshape(&[hh * ww, c])?.matmul(point)?;
                h.add(&r.reshape(&[hh, ww, c])?)
            }
            Backbone::Vit { mix, ff1, ff2 } => {
                let x1 = h.add(&mix.matmul(h)?)?;
                x1.add(&x1.matmul(ff1)?.gelu().matmul(ff2)?)
            }
        }
    }

    /// Runs stage `s` on the output of stage `s - 1` (the raw image for
    /// `s = 0`). `carry` is reset on entry and holds the stage's final carry
    /// on return. With `drop` set, each attention block is skipped with
    /// probability `1 - survival_prob`: its attention term is left out of the
    /// residual sum and the carry passes through unchanged.
    pub fn stage_forward(
        &self,
        s: usize,
        input: &Tensor,
        carry: &mut Carry,
        mut drop: Option<&mut Rng>,
        trace: &mut Vec<BlockTrace>,
    ) -> Result<Tensor> {
        if s >= self.stages.len() {
            return Err(Error::Contract(format!(
                "stage {s} out of range ({} stages)",
                self.stages.len()
            )));
        }
        *carry = Carry::Empty;
        let mut h = self.stage_entry(s, input)?;
        let survival = self.config.survival_prob;
        for block in &self.stages[s].blocks {
            let x = self.backbone(block, &h)?;
            let Some(params) = &block.mrla else {
                h = x;
                continue;
            };
            let dropped = match drop.as_deref_mut() {
                Some(rng) if survival < 1.0 => !rng.bernoulli(survival),
                _ => false,
            };
            if dropped {
                trace.push(BlockTrace {
                    q: Vec::new(),
                    scores: Vec::new(),
                    score_evals: 0,
                    dropped: true,
                });
                h = x;
                continue;
            }
            let out = mrla_block_forward(params, &x, carry)?;
            trace.push(BlockTrace {
                q: out.q.to_vec(),
                scores: out.scores,
                score_evals: out.score_evals,
                dropped: false,
            });
            *carry = out.carry;
            h = x.add(&out.o)?;
        }
        Ok(h)
    }

    fn head(&self, h: &Tensor) -> Result<Tensor> {
        let feat = match self.arch.variant {
            Variant::Cnn => h.gap()?,
            Variant::Vit => h.narrow(0, 0, 1)?,
        };
        let c = feat.numel();
        feat.reshape(&[1, c])?
            .matmul(&self.head_w)?
            .reshape(&[self.config.classes])?
            .add(&self.head_b)
    }

    /// Logits `[classes]` plus per-stage block traces.
    pub fn forward_traced(&self, x: &Tensor, mut drop: Option<&mut Rng>) -> Result<(Tensor, Vec<Vec<BlockTrace>>)> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut traces = Vec::with_capacity(self.stages.len());
        for s in 0..self.stages.len() {
            let mut carry = Carry::Empty;
            let mut trace = Vec::new();
            h = self.stage_forward(s, &h, &mut carry, drop.as_deref_mut(), &mut trace)?;
            traces.push(trace);
        }
        Ok((self.head(&h)?, traces))
    }

    /// Inference logits: no stochastic depth.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(x, None)?.0)
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        let logits = crate::tensor::no_grad(|| self.forward(x))?;
        Ok(argmax(logits.data()))
    }

    pub fn checkpoint_entries(&self) -> Result<Vec<(String, Tensor)>> {
        let text = self.config.to_text();
        let bytes: Vec<f64> = text.bytes().map(f64::from).collect();
        let n = bytes.len();
        let mut entries = vec![
            ("meta.config".to_string(), Tensor::from_vec_dtype(bytes, &[n], DType::F64)?),
            ("meta.arch".to_string(), self.arch.to_tensor()?),
        ];
        entries.extend(self.named_params());
        Ok(entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.checkpoint_entries()?)
    }

    /// Rebuilds a model from checkpoint entries written by
    /// [`MiniModel::checkpoint_entries`].
    pub fn from_entries(entries: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name:?}")))
        };
        let bytes = find("meta.config")?
            .data()
            .iter()
            .map(|&b| {
                if (0.0..=255.0).contains(&b) && b.fract() == 0.0 {
                    Ok(b as u8)
                } else {
                    Err(Error::Format("meta.config is not a byte string".into()))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Format("meta.config is not UTF-8".into()))?;
        let cfg = TrainConfig::parse(&text)?;
        let mut model = build_model(&cfg)?;
        if ArchSpec::from_tensor(find("meta.arch")?)? != model.arch {
            return Err(Error::Format("meta.arch disagrees with meta.config".into()));
        }
        let expected = model.named_params().len() + 2;
        if entries.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint has {} entries, model needs {expected}",
                entries.len()
            )));
        }
        for (name, slot) in model.params_mut() {
            let t = find(&name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "{name}: stored shape {:?}, model shape {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.to_dtype(slot.dtype()).as_param();
        }
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_entries(&load_checkpoint(path)?)
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> TrainConfig {
        TrainConfig::parse(text).unwrap()
    }

    #[test]
    fn patchify_layout() {
        let x = Tensor::from_vec((0..16).map(f64::from).collect(), &[4, 4, 1]).unwrap();
        let p = patchify(&x, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn off_mode_adds_no_attention_parameters() {
        let off = build_model(&cfg("mode = off")).unwrap();
        let light = build_model(&cfg("mode = light")).unwrap();
        assert_eq!(off.mrla_param_count(), 0);
        assert_eq!(light.num_params() - off.num_params(), light.mrla_param_count());
    }

    #[test]
    fn forward_shapes_for_every_mode_and_variant() {
        for variant in ["cnn", "vit"] {
            for mode in ["off", "base", "light"] {
                let m = build_model(&cfg(&format!("arch.variant = {variant}\nmode = {mode}\narch.stages = 2,1"))).unwrap();
                let x = Tensor::zeros(&[8, 8, 3], DType::F32).unwrap();
                assert_eq!(m.forward(&x).unwrap().shape(), &[3]);
            }
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let m = build_model(&TrainConfig::default()).unwrap();
        let x = Tensor::zeros(&[8, 8, 2], DType::F32).unwrap();
        assert!(matches!(m.forward(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn checkpoint_round_trip_preserves_logits() {
        let m = build_model(&cfg("arch.variant = vit\ndtype = f64")).unwrap();
        let back = MiniModel::from_entries(&m.checkpoint_entries().unwrap()).unwrap();
        let x = Rng::new(3).normal_tensor(&[8, 8, 3], 1.0, DType::F64).unwrap();
        assert_eq!(m.forward(&x).unwrap().data(), back.forward(&x).unwrap().data());
    }
}
