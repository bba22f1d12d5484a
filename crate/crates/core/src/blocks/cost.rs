//! Analytic parameter, multiply-accumulate and state-size accounting.
//!
//! MACs count one multiply-add as one operation. A report quoting FLOPs in
//! the same convention uses the same number.

use serde::{Deserialize, Serialize};

use super::{eca_kernel_size, AttnMode, BlockOptions, Variant};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// One stage: `blocks` blocks over an `height x width x channels` map. ViT
/// stages use the patch grid, so `height * width` is the patch count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub blocks: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl StageSpec {
    pub fn cnn(blocks: usize, channels: usize, height: usize, width: usize) -> Self {
        StageSpec {
            blocks,
            channels,
            height,
            width,
        }
    }

    pub fn vit(blocks: usize, channels: usize, patches: usize) -> Result<Self> {
        let side = (patches as f64).sqrt().round() as usize;
        if side * side != patches {
            return Err(Error::Config(format!("{patches} patches do not form a square grid")));
        }
        Ok(StageSpec::cnn(blocks, channels, side, side))
    }

    pub fn shape(&self, d_k: usize) -> BlockShape {
        BlockShape {
            channels: self.channels,
            height: self.height,
            width: self.width,
            d_k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub variant: Variant,
    pub stages: Vec<StageSpec>,
    pub d_k: usize,
}

const ARCH_TAG: [f64; 2] = [0.0, 1.0];

impl ArchSpec {
    pub fn new(variant: Variant, stages: Vec<StageSpec>, d_k: usize) -> Result<Self> {
        let arch = ArchSpec {
            variant,
            stages,
            d_k,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("architecture has no stages".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 || s.channels == 0 || s.height == 0 || s.width == 0 {
                return Err(Error::Config(format!("stage {i} has a zero extent: {s:?}")));
            }
            if self.d_k == 0 || s.channels % self.d_k != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: d_k = {} does not divide {} channels",
                    self.d_k, s.channels
                )));
            }
            if self.variant == Variant::Vit && s.height != s.width {
                return Err(Error::Config(format!("stage {i}: vit patch grid must be square")));
            }
        }
        Ok(())
    }

    /// ResNet-50 bottleneck outputs at 224 x 224 input.
    pub fn resnet50() -> Self {
        ArchSpec {
            variant: Variant::Cnn,
            stages: vec![
                StageSpec::cnn(3, 256, 56, 56),
                StageSpec::cnn(4, 512, 28, 28),
                StageSpec::cnn(6, 1024, 14, 14),
                StageSpec::cnn(3, 2048, 7, 7),
            ],
            d_k: 32,
        }
    }

    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    /// Flat f64 encoding `[tag.., variant, d_k, stages, (blocks, C, h, w)*]`
    /// for storage in a checkpoint.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let mut data = ARCH_TAG.to_vec();
        data.push(match self.variant {
            Variant::Cnn => 0.0,
            Variant::Vit => 1.0,
        });
        data.push(self.d_k as f64);
        data.push(self.stages.len() as f64);
        for s in &self.stages {
            data.extend([s.blocks, s.channels, s.height, s.width].map(|v| v as f64));
        }
        let n = data.len();
        Tensor::from_vec_dtype(data, &[n], DType::F64)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let d = t.data();
        let bad = || Error::Format("malformed architecture record".into());
        if d.len() < 5 || d[..2] != ARCH_TAG {
            return Err(bad());
        }
        let as_usize = |x: f64| -> Result<usize> {
            if x >= 0.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(bad())
            }
        };
        let variant = match d[2] {
            0.0 => Variant::Cnn,
            1.0 => Variant::Vit,
            _ => return Err(bad()),
        };
        let d_k = as_usize(d[3])?;
        let n = as_usize(d[4])?;
        if d.len() != 5 + 4 * n {
            return Err(bad());
        }
        let stages = d[5..]
            .chunks(4)
            .map(|c| {
                Ok(StageSpec::cnn(
                    as_usize(c[0])?,
                    as_usize(c[1])?,
                    as_usize(c[2])?,
                    as_usize(c[3])?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        ArchSpec::new(variant, stages, d_k)
    }
}

/// Geometry of one block's feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub d_k: usize,
}

impl BlockShape {
    pub fn value_size(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub macs: u64,
    pub score_evals: u64,
    pub state_values: u64,
}

/// Learnable scalars of one block.
pub fn block_param_count(channels: usize, kernel: usize, mode: AttnMode, options: BlockOptions) -> usize {
    let value = if options.value_conv { 9 * channels } else { 0 };
    let lambda = match mode {
        AttnMode::Light if !options.fixed_lambda => channels,
        _ => 0,
    };
    value + lambda + 2 * kernel
}

/// Cost of the `t`-th block of a stage (`t >= 1`).
///
/// `score_evals` counts key layers scored (one per layer, covering all heads);
/// `state_values` is the carry held after the block: keys plus values for base,
/// the output map plus `lambda_o` for light.
pub fn block_cost_count(shape: &BlockShape, mode: AttnMode, t: usize) -> Result<CostReport> {
    if t == 0 {
        return Err(Error::Contract("layer index within a stage starts at 1".into()));
    }
    let c = shape.channels as u64;
    let hwc = shape.value_size() as u64;
    let k = eca_kernel_size(shape.channels) as u64;
    let t64 = t as u64;
    let fixed = hwc + 2 * k * c + 9 * hwc;
    Ok(match mode {
        AttnMode::Base => CostReport {
            macs: fixed + t64 * (c + hwc),
            score_evals: t64,
            state_values: t64 * (hwc + c),
        },
        AttnMode::Light => CostReport {
            macs: fixed + c + hwc + if t > 1 { hwc } else { 0 },
            score_evals: 1,
            state_values: hwc + c,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchCost {
    pub params: usize,
    /// Per stage: MACs and score evaluations summed over blocks,
    /// `state_values` at the deepest block.
    pub per_stage: Vec<CostReport>,
    pub per_block: Vec<Vec<CostReport>>,
    pub total: CostReport,
}

pub fn arch_param_count(arch: &ArchSpec, mode: AttnMode, options: BlockOptions) -> usize {
    arch.stages
        .iter()
        .map(|s| s.blocks * block_param_count(s.channels, eca_kernel_size(s.channels), mode, options))
        .sum()
}

pub fn arch_cost(arch: &ArchSpec, mode: AttnMode, options: BlockOptions) -> Result<ArchCost> {
    arch.validate()?;
    let mut per_stage = Vec::new();
    let mut per_block = Vec::new();
    let mut total = CostReport::default();
    for s in &arch.stages {
        let shape = s.shape(arch.d_k);
        let blocks = (1..=s.blocks)
            .map(|t| block_cost_count(&shape, mode, t))
            .collect::<Result<Vec<_>>>()?;
        let stage = CostReport {
            macs: blocks.iter().map(|b| b.macs).sum(),
            score_evals: blocks.iter().map(|b| b.score_evals).sum(),
            state_values: blocks.iter().map(|b| b.state_values).max().unwrap_or(0),
        };
        total.macs += stage.macs;
        total.score_evals += stage.score_evals;
        total.state_values = total.state_values.max(stage.state_values);
        per_stage.push(stage);
        per_block.push(blocks);
    }
    Ok(ArchCost {
        params: arch_param_count(arch, mode, options),
        per_stage,
        per_block,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_formula_examples() {
        let opts = BlockOptions::default();
        assert_eq!(block_param_count(64, 3, AttnMode::Light, opts), 646);
        assert_eq!(block_param_count(1, 1, AttnMode::Base, opts), 11);
    }

    #[test]
    fn resnet50_light_total() {
        let n = arch_param_count(&ArchSpec::resnet50(), AttnMode::Light, BlockOptions::default());
        assert_eq!(n, 151_200);
        assert!((140_000..=180_000).contains(&n));
    }

    #[test]
    fn cumulative_score_evals() {
        let shape = BlockShape {
            channels: 8,
            height: 2,
            width: 2,
            d_k: 4,
        };
        let cum = |mode, t_max: usize| -> u64 {
            (1..=t_max)
                .map(|t| block_cost_count(&shape, mode, t).unwrap().score_evals)
                .sum()
        };
        assert_eq!(cum(AttnMode::Base, 4), 10);
        assert_eq!(cum(AttnMode::Light, 4), 4);
        assert_eq!(cum(AttnMode::Base, 8), 36);
        assert_eq!(cum(AttnMode::Light, 8), 8);
        assert!(block_cost_count(&shape, AttnMode::Base, 0).is_err());
    }

    #[test]
    fn state_values_grow_with_depth_only_for_base() {
        // D = 100 values per layer, keys excluded by taking C = 1.
        let shape = BlockShape {
            channels: 1,
            height: 10,
            width: 10,
            d_k: 1,
        };
        let base = block_cost_count(&shape, AttnMode::Base, 10).unwrap();
        let light = block_cost_count(&shape, AttnMode::Light, 10).unwrap();
        assert_eq!(base.state_values, 10 * (100 + 1));
        assert_eq!(light.state_values, 100 + 1);
    }

    #[test]
    fn resnet50_light_macs_within_factor_two_of_70m() {
        let cost = arch_cost(&ArchSpec::resnet50(), AttnMode::Light, BlockOptions::default()).unwrap();
        let macs = cost.total.macs as f64;
        assert!(macs > 0.035e9 && macs < 0.14e9, "{macs}");
        assert_eq!(cost.total.score_evals, 16);
    }

    #[test]
    fn arch_tensor_round_trip() {
        let a = ArchSpec::resnet50();
        assert_eq!(ArchSpec::from_tensor(&a.to_tensor().unwrap()).unwrap(), a);
        let bad = Tensor::from_vec(vec![0.0, 1.0, 3.0, 4.0, 0.0], &[5]).unwrap();
        assert!(ArchSpec::from_tensor(&bad).is_err());
    }
}
