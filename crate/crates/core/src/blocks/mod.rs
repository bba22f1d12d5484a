//! Deployable recurrent layer-attention blocks for CNN feature maps and
//! ViT token sequences.
//!
//! Per block: global average pooling summarizes the feature map into one
//! value per channel, two separate 1-D convolutions over that summary give the
//! query and the key, and a 3x3 depthwise convolution of the feature map
//! gives the value. Channels are cut into `C / d_k` heads; each head scores a
//! key with `sigmoid(q_h . k_h)` and scales its value channels by that score.
//!
//! * base mode keeps every key and value of the stage and attends to all of them
//! * light mode keeps only the previous output and adds `lambda_o * O_{t-1}`
//!
//! ViT inputs are `(N + 1) x C` with the class token first. The class token
//! bypasses the block; the `N` patch tokens are viewed as a `sqrt(N) x sqrt(N)`
//! grid.

pub mod cost;

pub use cost::{
    arch_cost, arch_param_count, block_cost_count, block_param_count, ArchCost, ArchSpec,
    BlockShape, CostReport, StageSpec,
};

use serde::{Deserialize, Serialize};

use crate::attention::HeadConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnMode {
    Base,
    Light,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Cnn,
    Vit,
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockOptions {
    /// When false the depthwise value convolution is removed and `V = X`.
    pub value_conv: bool,
    /// When true `lambda_o` is the constant all-ones vector, not a parameter.
    pub fixed_lambda: bool,
}

impl Default for BlockOptions {
    fn default() -> Self {
        BlockOptions {
            value_conv: true,
            fixed_lambda: false,
        }
    }
}

/// Odd 1-D kernel length for `channels` channels: the odd integer nearest to
/// `log2(C) / 2 + 1 / 2`, ties going to the smaller one, at least 1.
pub fn eca_kernel_size(channels: usize) -> usize {
    const GAMMA: f64 = 2.0;
    const B: f64 = 1.0;
    let x = ((channels.max(1) as f64).log2() / GAMMA + B / GAMMA).abs();
    let floor = x.floor() as usize;
    let lower = if floor % 2 == 1 { floor } else { floor.saturating_sub(1) };
    if lower == 0 {
        return 1;
    }
    if x - lower as f64 <= (lower + 2) as f64 - x {
        lower
    } else {
        lower + 2
    }
}

/// Learnable state of one block.
#[derive(Debug, Clone)]
pub struct MrlaBlockParams {
    pub channels: usize,
    pub heads: HeadConfig,
    pub mode: AttnMode,
    pub variant: Variant,
    pub options: BlockOptions,
    pub conv_q: Tensor,
    pub conv_k: Tensor,
    /// `[3, 3, C]`; absent when the value convolution is ablated.
    pub w_v: Option<Tensor>,
    /// `[C]`; present iff `mode == Light`.
    pub lambda_o: Option<Tensor>,
}

impl MrlaBlockParams {
    /// Fan-in scaled uniform weights and `lambda_o = 1`.
    pub fn init(
        channels: usize,
        d_k: usize,
        mode: AttnMode,
        variant: Variant,
        options: BlockOptions,
        rng: &mut Rng,
        dtype: DType,
    ) -> Result<Self> {
        let heads = HeadConfig::from_channels(channels, d_k)?;
        let k = eca_kernel_size(channels);
        let bound = 1.0 / (k as f64).sqrt();
        let conv_q = rng.uniform_tensor(&[k], -bound, bound, dtype)?.as_param();
        let conv_k = rng.uniform_tensor(&[k], -bound, bound, dtype)?.as_param();
        let w_v = if options.value_conv {
            Some(rng.uniform_tensor(&[3, 3, channels], -1.0 / 3.0, 1.0 / 3.0, dtype)?.as_param())
        } else {
            None
        };
        let lambda_o = match mode {
            AttnMode::Base => None,
            AttnMode::Light => {
                let ones = Tensor::ones(&[channels], dtype)?;
                Some(if options.fixed_lambda { ones } else { ones.as_param() })
            }
        };
        Ok(MrlaBlockParams {
            channels,
            heads,
            mode,
            variant,
            options,
            conv_q,
            conv_k,
            w_v,
            lambda_o,
        })
    }

    /// Learnable tensors with stable names, in a fixed order.
    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![("conv_q", &self.conv_q), ("conv_k", &self.conv_k)];
        if let Some(w) = &self.w_v {
            out.push(("w_v", w));
        }
        if let Some(l) = self.lambda_o.as_ref().filter(|_| !self.options.fixed_lambda) {
            out.push(("lambda_o", l));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let fixed = self.options.fixed_lambda;
        let mut out = vec![("conv_q", &mut self.conv_q), ("conv_k", &mut self.conv_k)];
        if let Some(w) = self.w_v.as_mut() {
            out.push(("w_v", w));
        }
        if let Some(l) = self.lambda_o.as_mut().filter(|_| !fixed) {
            out.push(("lambda_o", l));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn kernel_size(&self) -> usize {
        self.conv_q.numel()
    }
}

/// Per-stage recurrent state threaded from block to block.
#[derive(Debug, Clone)]
pub enum Carry {
    /// Stage entry: nothing seen yet.
    Empty,
    /// Every key `[C]` and value map `[h, w, C]` of the stage so far.
    Base { keys: Vec<Tensor>, values: Vec<Tensor> },
    /// The previous block's output map.
    Light { o_prev: Tensor },
}

impl Carry {
    pub fn layers(&self) -> usize {
        match self {
            Carry::Empty => 0,
            Carry::Base { keys, .. } => keys.len(),
            Carry::Light { .. } => 1,
        }
    }

    /// Number of stored scalars.
    pub fn state_values(&self) -> usize {
        match self {
            Carry::Empty => 0,
            Carry::Base { keys, values } => {
                keys.iter().chain(values).map(Tensor::numel).sum()
            }
            Carry::Light { o_prev } => o_prev.numel(),
        }
    }
}

/// Result of the attention portion of a block.
#[derive(Debug, Clone)]
pub struct Attended {
    pub o: Tensor,
    pub carry: Carry,
    /// `scores[s][h]`: sigmoid score of head `h` against the `s`-th key of
    /// this forward (base: every stored layer plus the current; light: only
    /// the current layer).
    pub scores: Vec<Vec<f64>>,
    pub score_evals: usize,
}

fn head_weights(q: &Tensor, k: &Tensor, heads: &HeadConfig) -> Result<Tensor> {
    q.mul(k)?.segment_sum(heads.heads)?.sigmoid().repeat_each(heads.d_k)
}

fn head_scores(w: &Tensor, heads: &HeadConfig) -> Vec<f64> {
    w.data().iter().step_by(heads.d_k).copied().collect()
}

/// Sigmoid-scored multi-head attention of query `q` over the carried layers
/// plus the current `(k, v)`. `q` and `k` are `[C]`, `v` is `[h, w, C]`.
pub fn attend(
    mode: AttnMode,
    heads: &HeadConfig,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    carry: &Carry,
    lambda_o: Option<&Tensor>,
) -> Result<Attended> {
    match (mode, carry) {
        (AttnMode::Base, Carry::Empty | Carry::Base { .. }) => {
            let (mut keys, mut values) = match carry {
                Carry::Base { keys, values } => (keys.clone(), values.clone()),
                _ => (Vec::new(), Vec::new()),
            };
            keys.push(k.clone());
            values.push(v.clone());
            let mut scores = Vec::with_capacity(keys.len());
            let mut acc: Option<Tensor> = None;
            for (ks, vs) in keys.iter().zip(&values) {
                if vs.shape() != v.shape() {
                    return Err(Error::shape("attend (base)", vs.shape(), v.shape()));
                }
                let w = head_weights(q, ks, heads)?;
                scores.push(head_scores(&w, heads));
                let term = vs.mul_channels(&w)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => a.add(&term)?,
                });
            }
            let score_evals = keys.len();
            Ok(Attended {
                o: acc.expect("at least the current layer"),
                carry: Carry::Base { keys, values },
                scores,
                score_evals,
            })
        }
        (AttnMode::Light, Carry::Empty | Carry::Light { .. }) => {
            let w = head_weights(q, k, heads)?;
            let scores = vec![head_scores(&w, heads)];
            let current = v.mul_channels(&w)?;
            let o = match carry {
                Carry::Light { o_prev } => {
                    if o_prev.shape() != v.shape() {
                        return Err(Error::shape("attend (light)", o_prev.shape(), v.shape()));
                    }
                    let lambda = lambda_o
                        .ok_or_else(|| Error::Contract("light attention needs lambda_o".into()))?;
                    o_prev.mul_channels(lambda)?.add(&current)?
                }
                _ => current,
            };
            Ok(Attended {
                carry: Carry::Light { o_prev: o.clone() },
                o,
                scores,
                score_evals: 1,
            })
        }
        (mode, carry) => Err(Error::Contract(format!(
            "{mode:?} block received a {} carry",
            match carry {
                Carry::Base { .. } => "base",
                Carry::Light { .. } => "light",
                Carry::Empty => "empty",
            }
        ))),
    }
}

/// Output of one block forward.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    /// Same shape as the block input.
    pub o: Tensor,
    pub carry: Carry,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub scores: Vec<Vec<f64>>,
    pub score_evals: usize,
}

fn grid_side(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

pub fn mrla_block_forward(params: &MrlaBlockParams, x: &Tensor, carry: &Carry) -> Result<BlockOutput> {
    let c = params.channels;
    let (grid, class_token) = match params.variant {
        Variant::Cnn => match *x.shape() {
            [_, _, xc] if xc == c => (x.clone(), None),
            _ => return Err(Error::shape("mrla block (cnn)", x.shape(), &[0, 0, c])),
        },
        Variant::Vit => match *x.shape() {
            [tokens, xc] if xc == c && tokens >= 2 => {
                let n = tokens - 1;
                let side = grid_side(n).ok_or_else(|| {
                    Error::Config(format!("{n} patch tokens do not form a square grid"))
                })?;
                (
                    x.narrow(0, 1, n)?.reshape(&[side, side, c])?,
                    Some(x.narrow(0, 0, 1)?),
                )
            }
            _ => return Err(Error::shape("mrla block (vit)", x.shape(), &[0, c])),
        },
    };

    let summary = grid.gap()?;
    let q = summary.conv1d_same(&params.conv_q)?;
    let k = summary.conv1d_same(&params.conv_k)?;
    let mut v = match &params.w_v {
        Some(w) => grid.dwconv3x3_same(w)?,
        None => grid.clone(),
    };
    if params.variant == Variant::Vit && params.mode == AttnMode::Light {
        v = v.gelu();
    }

    let att = attend(
        params.mode,
        &params.heads,
        &q,
        &k,
        &v,
        carry,
        params.lambda_o.as_ref(),
    )?;
    let o = match class_token {
        None => att.o.clone(),
        Some(cls) => {
            let n = x.shape()[0] - 1;
            Tensor::concat(&[cls, att.o.reshape(&[n, c])?], 0)?
        }
    };
    Ok(BlockOutput {
        o,
        carry: att.carry,
        q,
        k,
        v,
        scores: att.scores,
        score_evals: att.score_evals,
    })
}

/// Direct (non-recurrent) sigmoid-scored layer attention over explicitly
/// stacked keys `[C]` and values `[h, w, C]`, computed per head with matrix
/// products. Reference for the recurrent base path.
pub fn block_direct_reference(
    q: &Tensor,
    keys: &[Tensor],
    values: &[Tensor],
    heads: &HeadConfig,
) -> Result<Tensor> {
    if keys.is_empty() || keys.len() != values.len() {
        return Err(Error::Contract(format!(
            "need matching non-empty key/value stacks, got {} and {}",
            keys.len(),
            values.len()
        )));
    }
    let c = q.numel();
    let (h, w) = match *values[0].shape() {
        [h, w, vc] if vc == c => (h, w),
        _ => return Err(Error::shape("block_direct_reference", values[0].shape(), &[0, 0, c])),
    };
    let d = heads.d_k;
    let key_rows = keys
        .iter()
        .map(|k| k.reshape(&[1, c]))
        .collect::<Result<Vec<_>>>()?;
    let key_mat = Tensor::concat(&key_rows, 0)?;
    let q_row = q.reshape(&[1, c])?;
    let mut outs = Vec::with_capacity(heads.heads);
    for hd in 0..heads.heads {
        let scores = key_mat
            .narrow(1, hd * d, d)?
            .matmul(&q_row.narrow(1, hd * d, d)?.transpose()?)?
            .sigmoid();
        let rows = values
            .iter()
            .map(|v| v.narrow(2, hd * d, d)?.reshape(&[1, h * w * d]))
            .collect::<Result<Vec<_>>>()?;
        let value_mat = Tensor::concat(&rows, 0)?;
        outs.push(scores.transpose()?.matmul(&value_mat)?.reshape(&[h, w, d])?);
    }
    Tensor::concat(&outs, 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eca_kernel_examples() {
        assert_eq!(eca_kernel_size(64), 3);
        assert_eq!(eca_kernel_size(256), 5);
        assert_eq!(eca_kernel_size(2), 1);
        assert_eq!(eca_kernel_size(1), 1);
        assert_eq!(eca_kernel_size(1024), 5);
        assert_eq!(eca_kernel_size(2048), 5);
        for c in 1..5000 {
            assert_eq!(eca_kernel_size(c) % 2, 1);
        }
    }

    fn params(c: usize, d_k: usize, mode: AttnMode, variant: Variant, seed: u64) -> MrlaBlockParams {
        let mut rng = Rng::new(seed);
        MrlaBlockParams::init(c, d_k, mode, variant, BlockOptions::default(), &mut rng, DType::F64)
            .unwrap()
    }

    #[test]
    fn shape_is_preserved() {
        let mut rng = Rng::new(1);
        for mode in [AttnMode::Base, AttnMode::Light] {
            let p = params(8, 4, mode, Variant::Cnn, 2);
            let x = rng.normal_tensor(&[3, 5, 8], 1.0, DType::F64).unwrap();
            let out = mrla_block_forward(&p, &x, &Carry::Empty).unwrap();
            assert_eq!(out.o.shape(), x.shape());
            let out2 = mrla_block_forward(&p, &x, &out.carry).unwrap();
            assert_eq!(out2.o.shape(), x.shape());

            let p = params(8, 4, mode, Variant::Vit, 3);
            let x = rng.normal_tensor(&[10, 8], 1.0, DType::F64).unwrap();
            let out = mrla_block_forward(&p, &x, &Carry::Empty).unwrap();
            assert_eq!(out.o.shape(), x.shape());
            assert_eq!(&out.o.data()[..8], &x.data()[..8]);
        }
    }

    #[test]
    fn vit_rejects_non_square_patch_count() {
        let p = params(4, 2, AttnMode::Light, Variant::Vit, 0);
        let x = Tensor::zeros(&[6, 4], DType::F64).unwrap();
        assert!(matches!(mrla_block_forward(&p, &x, &Carry::Empty), Err(Error::Config(_))));
    }

    #[test]
    fn carry_mode_mismatch_is_rejected() {
        let p = params(4, 2, AttnMode::Base, Variant::Cnn, 0);
        let x = Tensor::ones(&[2, 2, 4], DType::F64).unwrap();
        let light = Carry::Light { o_prev: x.clone() };
        assert!(matches!(mrla_block_forward(&p, &x, &light), Err(Error::Contract(_))));
        let wrong_c = Tensor::ones(&[2, 2, 8], DType::F64).unwrap();
        assert!(matches!(
            mrla_block_forward(&p, &wrong_c, &Carry::Empty),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_query_kernel_gives_half_value() {
        let mut p = params(8, 2, AttnMode::Base, Variant::Cnn, 4);
        p.conv_q = Tensor::zeros(&[p.kernel_size()], DType::F64).unwrap();
        let x = Rng::new(5).normal_tensor(&[3, 3, 8], 1.0, DType::F64).unwrap();
        let out = mrla_block_forward(&p, &x, &Carry::Empty).unwrap();
        let dw = x.dwconv3x3_same(p.w_v.as_ref().unwrap()).unwrap();
        for (a, b) in out.o.data().iter().zip(dw.data()) {
            assert_eq!(*a, 0.5 * b);
        }
        assert!(out.scores[0].iter().all(|&s| s == 0.5));
    }

    #[test]
    fn base_matches_direct_reference() {
        let p = params(8, 2, AttnMode::Base, Variant::Cnn, 6);
        let mut rng = Rng::new(7);
        let mut carry = Carry::Empty;
        let (mut keys, mut values) = (Vec::new(), Vec::new());
        for _ in 0..4 {
            let x = rng.normal_tensor(&[2, 3, 8], 1.0, DType::F64).unwrap();
            let out = mrla_block_forward(&p, &x, &carry).unwrap();
            keys.push(out.k.clone());
            values.push(out.v.clone());
            let reference = block_direct_reference(&out.q, &keys, &values, &p.heads).unwrap();
            let err = out
                .o
                .data()
                .iter()
                .zip(reference.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-12, "{err}");
            carry = out.carry;
        }
    }

    #[test]
    fn params_enumeration() {
        let p = params(16, 4, AttnMode::Light, Variant::Cnn, 0);
        let k = eca_kernel_size(16);
        assert_eq!(p.num_params(), 9 * 16 + 16 + 2 * k);
        let mut rng = Rng::new(0);
        let opts = BlockOptions {
            value_conv: false,
            fixed_lambda: true,
        };
        let q = MrlaBlockParams::init(16, 4, AttnMode::Light, Variant::Cnn, opts, &mut rng, DType::F32)
            .unwrap();
        assert_eq!(q.num_params(), 2 * k);
        assert!(q.lambda_o.is_some());
    }
}
