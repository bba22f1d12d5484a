use std::fmt;

use serde::{Deserialize, Serialize};

use super::{max_abs_diff, SuiteReport};
use crate::attention::{
    kernel_rla_direct, kernel_rla_step, kernel_rla_weights, mh_base_step, mh_direct,
    mh_light_step, rla_light_step, rla_light_unrolled, FeatureMap, HeadConfig, LayerTriple,
    LightState,
};
use crate::blocks::{
    block_direct_reference, mrla_block_forward, AttnMode, BlockOptions, Carry, MrlaBlockParams,
    Variant,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};

/// Depth `t`, key width `d_k`, value width `d` and head count of one case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub t: usize,
    pub d_k: usize,
    pub d: usize,
    pub heads: usize,
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T={},Dk={},D={},H={}", self.t, self.d_k, self.d, self.heads)
    }
}

impl Dims {
    pub fn new(t: usize, d_k: usize, d: usize, heads: usize) -> Self {
        Dims { t, d_k, d, heads }
    }

    /// Default grid: depth 6, `H` in {1, 2, 4}, widths up to 16.
    pub fn default_grid() -> Vec<Dims> {
        let mut grid = Vec::new();
        for heads in [1, 2, 4] {
            for (d_k, d) in [(4, 4), (4, 8), (8, 16), (16, 16)] {
                grid.push(Dims::new(6, d_k, d, heads));
            }
        }
        grid
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Recurrent base against direct layer attention, multi-head.
    BaseDirect,
    /// Unrolled light form against chained light steps.
    UnrollRecur,
    /// Light equals base when each head's query is a multiple of the
    /// previous one and `lambda` is that multiple.
    ProportionalLight,
    /// Light equals base with one key channel per head and
    /// `lambda_h = q_h^t / q_h^(t-1)`.
    HeadPerChannelLight,
    KernelIdentity,
    KernelElu,
    /// Elu-plus-one normalized weights sum to one.
    KernelWeights,
    /// Block-level base recurrence against stacked sigmoid-scored attention.
    BlockBaseDirect,
}

pub const FAMILIES: [Family; 8] = [
    Family::BaseDirect,
    Family::UnrollRecur,
    Family::ProportionalLight,
    Family::HeadPerChannelLight,
    Family::KernelIdentity,
    Family::KernelElu,
    Family::KernelWeights,
    Family::BlockBaseDirect,
];

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::BaseDirect => "base_direct",
            Family::UnrollRecur => "unroll_recur",
            Family::ProportionalLight => "proportional_light_base",
            Family::HeadPerChannelLight => "head_per_channel_light_base",
            Family::KernelIdentity => "kernel_identity",
            Family::KernelElu => "kernel_elu_plus_one",
            Family::KernelWeights => "kernel_weights_sum",
            Family::BlockBaseDirect => "block_base_direct",
        }
    }

    pub fn from_name(name: &str) -> Option<Family> {
        FAMILIES.into_iter().find(|f| f.name() == name)
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Family::KernelWeights => 1e-12,
            _ => 1e-6,
        }
    }

    /// Whether `dims` describes a valid case of this family.
    pub fn applies(self, dims: &Dims) -> bool {
        let base = dims.t >= 1 && dims.d_k >= 1 && dims.d >= 1;
        let split = dims.heads >= 1 && dims.d_k.is_multiple_of(dims.heads) && dims.d.is_multiple_of(dims.heads);
        base && match self {
            Family::BaseDirect | Family::ProportionalLight => split,
            Family::HeadPerChannelLight => dims.d.is_multiple_of(dims.d_k),
            Family::BlockBaseDirect => dims.heads >= 1 && dims.d.is_multiple_of(dims.heads),
            _ => true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EquivalenceOptions {
    /// Seeds `0..seeds` are run for every grid point.
    pub seeds: u64,
    pub grid: Vec<Dims>,
    pub families: Vec<Family>,
    /// Added to one entry of the second step's `lambda` in the two light
    /// families (the entry scaling the largest previous output), to show
    /// that the suite detects errors.
    pub lambda_fault: Option<f64>,
}

impl Default for EquivalenceOptions {
    fn default() -> Self {
        EquivalenceOptions {
            seeds: 50,
            grid: Dims::default_grid(),
            families: FAMILIES.to_vec(),
            lambda_fault: None,
        }
    }
}

fn case_rng(family: Family, seed: u64, dims: &Dims) -> Rng {
    let f = FAMILIES.iter().position(|&x| x == family).unwrap_or(0) as u64;
    let packed = (f << 56)
        ^ ((dims.t as u64) << 42)
        ^ ((dims.d_k as u64) << 28)
        ^ ((dims.d as u64) << 14)
        ^ dims.heads as u64;
    Rng::new(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ packed)
}

fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn row(v: Vec<f64>) -> Result<Tensor> {
    let n = v.len();
    Tensor::from_vec(v, &[1, n])
}

/// Nonzero factor with magnitude in `[lo, hi]` and random sign.
fn signed(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    let m = rng.uniform(lo, hi);
    if rng.bernoulli(0.5) {
        m
    } else {
        -m
    }
}

fn random_triples(rng: &mut Rng, dims: &Dims) -> Result<Vec<LayerTriple>> {
    (0..dims.t)
        .map(|_| {
            LayerTriple::from_slices(
                &normals(rng, dims.d_k),
                &normals(rng, dims.d_k),
                &normals(rng, dims.d),
            )
        })
        .collect()
}

fn expand(per_head: &[f64], width: usize) -> Vec<f64> {
    per_head.iter().flat_map(|&c| std::iter::repeat_n(c, width)).collect()
}

/// Chains light steps with `lambdas[t]` and base steps over the same
/// triples, returning the worst layer-wise difference.
/// A `fault` is added at the second step to the `lambda` entry that
/// multiplies the largest-magnitude entry of the previous output.
fn light_vs_base(
    triples: &[LayerTriple],
    lambdas: &[Tensor],
    cfg: &HeadConfig,
    fault: Option<f64>,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut kv = None;
    let mut light: Option<Tensor> = None;
    for (t, tri) in triples.iter().enumerate() {
        let (o_base, next) = mh_base_step(kv.as_ref(), tri, cfg)?;
        kv = Some(next);
        let state = match light {
            None => None,
            Some(o) => {
                let mut lambda = lambdas[t].clone();
                if let (Some(f), 1) = (fault, t) {
                    let at = o
                        .data()
                        .iter()
                        .enumerate()
                        .fold((0, 0.0), |b, (i, v)| if v.abs() > b.1 { (i, v.abs()) } else { b })
                        .0;
                    let mut v = lambda.to_vec();
                    v[at] += f;
                    lambda = row(v)?;
                }
                Some(LightState::new(o, lambda)?)
            }
        };
        let o_light = mh_light_step(state.as_ref(), tri, cfg)?;
        worst = worst.max(max_abs_diff(o_base.data(), o_light.data()));
        light = Some(o_light);
    }
    Ok(worst)
}

/// Worst max-abs error of one case over every intermediate layer (for
/// [`Family::KernelWeights`], the worst `|sum w - 1|`).
pub fn equivalence_case(family: Family, seed: u64, dims: &Dims, lambda_fault: Option<f64>) -> Result<f64> {
    if !family.applies(dims) {
        return Err(Error::Config(format!("{} does not apply to {dims}", family.name())));
    }
    let mut rng = case_rng(family, seed, dims);
    match family {
        Family::BaseDirect => {
            let cfg = HeadConfig::new(dims.heads, dims.d_k / dims.heads)?;
            let triples = random_triples(&mut rng, dims)?;
            let mut worst: f64 = 0.0;
            let mut kv = None;
            for t in 0..dims.t {
                let (o, next) = mh_base_step(kv.as_ref(), &triples[t], &cfg)?;
                kv = Some(next);
                let direct = mh_direct(&triples[..=t], &cfg)?;
                worst = worst.max(max_abs_diff(o.data(), direct.data()));
            }
            Ok(worst)
        }
        Family::UnrollRecur => {
            let triples = random_triples(&mut rng, dims)?;
            let lambdas = (0..dims.t)
                .map(|_| row((0..dims.d).map(|_| rng.uniform(-1.5, 1.5)).collect()))
                .collect::<Result<Vec<_>>>()?;
            let mut worst: f64 = 0.0;
            let mut prev: Option<Tensor> = None;
            for t in 0..dims.t {
                let state = match prev {
                    None => None,
                    Some(o) => Some(LightState::new(o, lambdas[t].clone())?),
                };
                let o = rla_light_step(state.as_ref(), &triples[t])?;
                let unrolled = rla_light_unrolled(&triples[..=t], &lambdas[..=t])?;
                worst = worst.max(max_abs_diff(o.data(), unrolled.data()));
                prev = Some(o);
            }
            Ok(worst)
        }
        Family::ProportionalLight => {
            let cfg = HeadConfig::new(dims.heads, dims.d_k / dims.heads)?;
            let mut q = normals(&mut rng, dims.d_k);
            let mut triples = Vec::with_capacity(dims.t);
            let mut lambdas = Vec::with_capacity(dims.t);
            for t in 0..dims.t {
                let c: Vec<f64> = (0..dims.heads).map(|_| signed(&mut rng, 0.6, 1.4)).collect();
                if t > 0 {
                    for (i, qi) in q.iter_mut().enumerate() {
                        *qi *= c[i / cfg.d_k];
                    }
                }
                lambdas.push(row(expand(&c, dims.d / dims.heads))?);
                let k = normals(&mut rng, dims.d_k);
                let v = normals(&mut rng, dims.d);
                triples.push(LayerTriple::from_slices(&q, &k, &v)?);
            }
            light_vs_base(&triples, &lambdas, &cfg, lambda_fault)
        }
        Family::HeadPerChannelLight => {
            let cfg = HeadConfig::new(dims.d_k, 1)?;
            let mut triples = Vec::with_capacity(dims.t);
            let mut lambdas = Vec::with_capacity(dims.t);
            let mut prev_q: Option<Vec<f64>> = None;
            for _ in 0..dims.t {
                let q: Vec<f64> = (0..dims.d_k).map(|_| signed(&mut rng, 0.5, 1.5)).collect();
                let ratio: Vec<f64> = match &prev_q {
                    None => vec![1.0; dims.d_k],
                    Some(p) => q.iter().zip(p).map(|(a, b)| a / b).collect(),
                };
                lambdas.push(row(expand(&ratio, dims.d / dims.d_k))?);
                let k = normals(&mut rng, dims.d_k);
                let v = normals(&mut rng, dims.d);
                triples.push(LayerTriple::from_slices(&q, &k, &v)?);
                prev_q = Some(q);
            }
            light_vs_base(&triples, &lambdas, &cfg, lambda_fault)
        }
        Family::KernelIdentity | Family::KernelElu => {
            let phi = if family == Family::KernelIdentity {
                FeatureMap::Identity
            } else {
                FeatureMap::EluPlusOne
            };
            let triples = if phi == FeatureMap::Identity {
                // Positive queries and keys keep every denominator away from 0.
                (0..dims.t)
                    .map(|_| {
                        let q: Vec<f64> = (0..dims.d_k).map(|_| rng.uniform(0.1, 1.0)).collect();
                        let k: Vec<f64> = (0..dims.d_k).map(|_| rng.uniform(0.1, 1.0)).collect();
                        LayerTriple::from_slices(&q, &k, &normals(&mut rng, dims.d))
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                random_triples(&mut rng, dims)?
            };
            let mut worst: f64 = 0.0;
            let mut state = None;
            for t in 0..dims.t {
                let (o, next) = kernel_rla_step(state.as_ref(), &triples[t], phi)?;
                state = Some(next);
                let direct = kernel_rla_direct(&triples[..=t], phi)?;
                worst = worst.max(max_abs_diff(o.data(), direct.data()));
            }
            Ok(worst)
        }
        Family::KernelWeights => {
            let triples = random_triples(&mut rng, dims)?;
            let mut worst: f64 = 0.0;
            for t in 0..dims.t {
                let w = kernel_rla_weights(&triples[..=t], FeatureMap::EluPlusOne)?;
                worst = worst.max((w.iter().sum::<f64>() - 1.0).abs());
            }
            Ok(worst)
        }
        Family::BlockBaseDirect => {
            let c = dims.d;
            let params = MrlaBlockParams::init(
                c,
                c / dims.heads,
                AttnMode::Base,
                Variant::Cnn,
                BlockOptions::default(),
                &mut rng,
                DType::F64,
            )?;
            let mut carry = Carry::Empty;
            let (mut keys, mut values) = (Vec::new(), Vec::new());
            let mut worst: f64 = 0.0;
            for _ in 0..dims.t {
                let x = rng.normal_tensor(&[3, 3, c], 1.0, DType::F64)?;
                let out = mrla_block_forward(&params, &x, &carry)?;
                keys.push(out.k.clone());
                values.push(out.v.clone());
                let direct = block_direct_reference(&out.q, &keys, &values, &params.heads)?;
                worst = worst.max(max_abs_diff(out.o.data(), direct.data()));
                carry = out.carry;
            }
            Ok(worst)
        }
    }
}

pub fn equivalence_suite(opts: &EquivalenceOptions) -> SuiteReport {
    let mut report = SuiteReport::new("equivalence");
    for &family in &opts.families {
        for dims in opts.grid.iter().filter(|d| family.applies(d)) {
            let label = dims.to_string();
            for seed in 0..opts.seeds {
                let fault = match family {
                    Family::ProportionalLight | Family::HeadPerChannelLight => opts.lambda_fault,
                    _ => None,
                };
                let result = equivalence_case(family, seed, dims, fault).map_err(|e| e.to_string());
                report.record(family.name(), seed, &label, result, family.tolerance());
            }
        }
    }
    report
}
