use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::SuiteReport;
use crate::attention::{kernel_rla_step, FeatureMap, HeadConfig, KernelState, LayerTriple};
use crate::blocks::{
    arch_cost, arch_param_count, attend, block_cost_count, ArchSpec, AttnMode, BlockOptions,
    BlockShape, Carry,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{no_grad, DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMode {
    Base,
    Light,
    Kernel,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRow {
    pub t: usize,
    /// Score evaluations counted while running a depth-`t` stage.
    pub score_evals: u64,
    /// Carry size after the last layer.
    pub state_values: u64,
    /// Seconds for the attention portion of one depth-`t` stage (minimum
    /// over trials); absent when timing is off.
    pub wall_time: Option<f64>,
}

struct Layer {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    triple: LayerTriple,
}

fn layers(shape: &BlockShape, depth: usize, seed: u64) -> Result<Vec<Layer>> {
    let mut rng = Rng::new(seed);
    let c = shape.channels;
    (0..depth)
        .map(|_| {
            let q = rng.normal_tensor(&[c], 0.3, DType::F64)?;
            let k = rng.normal_tensor(&[c], 0.3, DType::F64)?;
            let v = rng.normal_tensor(&[shape.height, shape.width, c], 1.0, DType::F64)?;
            let triple = LayerTriple::new(
                q.reshape(&[1, c])?,
                k.reshape(&[1, c])?,
                v.reshape(&[1, v.numel()])?,
            )?;
            Ok(Layer { q, k, v, triple })
        })
        .collect()
}

/// Runs the attention portion of a depth-`t` stage, returning
/// `(score_evals, state_values)`.
fn run_stage(mode: ProbeMode, shape: &BlockShape, layers: &[Layer]) -> Result<(u64, u64)> {
    let heads = HeadConfig::from_channels(shape.channels, shape.d_k)?;
    let lambda = Tensor::ones(&[shape.channels], DType::F64)?;
    let mut evals = 0u64;
    match mode {
        ProbeMode::Base | ProbeMode::Light => {
            let attn = if mode == ProbeMode::Base {
                AttnMode::Base
            } else {
                AttnMode::Light
            };
            let mut carry = Carry::Empty;
            for l in layers {
                let a = attend(attn, &heads, &l.q, &l.k, &l.v, &carry, Some(&lambda))?;
                evals += a.score_evals as u64;
                carry = a.carry;
            }
            let extra = if mode == ProbeMode::Light { shape.channels } else { 0 };
            Ok((evals, (carry.state_values() + extra) as u64))
        }
        ProbeMode::Kernel => {
            let mut state: Option<KernelState> = None;
            for l in layers {
                let (_, next) = kernel_rla_step(state.as_ref(), &l.triple, FeatureMap::EluPlusOne)?;
                evals += 1;
                state = Some(next);
            }
            let size = state.map_or(0, |s| s.u.numel() + s.z.numel());
            Ok((evals, size as u64))
        }
    }
}

/// Timing parameters: each depth is timed `trials` times and the minimum of
/// the per-stage mean over `reps` back-to-back runs is kept.
#[derive(Debug, Clone, Copy)]
pub struct Timing {
    pub trials: usize,
    pub reps: usize,
}

/// Counts (and optionally times) the attention portion of stages of each
/// depth in `depths`, over value maps of geometry `shape`.
pub fn complexity_probe(
    mode: ProbeMode,
    depths: &[usize],
    shape: &BlockShape,
    timing: Option<Timing>,
) -> Result<Vec<ProbeRow>> {
    if depths.is_empty() || depths.contains(&0) || depths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "depths must be positive and strictly ascending, got {depths:?}"
        )));
    }
    let max = *depths.last().expect("non-empty");
    let all = layers(shape, max, 0x636f_7374)?;
    no_grad(|| {
        depths
            .iter()
            .map(|&t| {
                let (score_evals, state_values) = run_stage(mode, shape, &all[..t])?;
                let wall_time = match timing {
                    None => None,
                    Some(tm) => {
                        let mut best = f64::INFINITY;
                        for _ in 0..tm.trials.max(1) {
                            let start = Instant::now();
                            for _ in 0..tm.reps.max(1) {
                                std::hint::black_box(run_stage(mode, shape, &all[..t])?);
                            }
                            best = best.min(start.elapsed().as_secs_f64() / tm.reps.max(1) as f64);
                        }
                        Some(best)
                    }
                };
                Ok(ProbeRow {
                    t,
                    score_evals,
                    state_values,
                    wall_time,
                })
            })
            .collect()
    })
}

/// `(t_prev, t, score ratio, time ratio)` between consecutive rows.
pub fn growth_ratios(rows: &[ProbeRow]) -> Vec<(usize, usize, f64, Option<f64>)> {
    rows.windows(2)
        .map(|w| {
            let time = match (w[0].wall_time, w[1].wall_time) {
                (Some(a), Some(b)) if a > 0.0 => Some(b / a),
                _ => None,
            };
            (w[0].t, w[1].t, w[1].score_evals as f64 / w[0].score_evals as f64, time)
        })
        .collect()
}

fn cumulative_analytic(shape: &BlockShape, mode: AttnMode, depth: usize) -> Result<u64> {
    (1..=depth).map(|t| Ok(block_cost_count(shape, mode, t)?.score_evals)).sum()
}

/// Exact-count checks; involves no timing.
pub fn complexity_suite() -> SuiteReport {
    let mut report = SuiteReport::new("complexity");
    let shape = BlockShape {
        channels: 8,
        height: 4,
        width: 4,
        d_k: 4,
    };
    let depths: Vec<usize> = (1..=16).collect();
    let exact = |got: u64, want: u64| -> std::result::Result<f64, String> {
        if got == want {
            Ok(0.0)
        } else {
            Err(format!("got {got}, expected {want}"))
        }
    };
    for (mode, family, expect) in [
        (ProbeMode::Base, "base_score_evals_triangular", (|t: u64| t * (t + 1) / 2) as fn(u64) -> u64),
        (ProbeMode::Light, "light_score_evals_linear", |t| t),
        (ProbeMode::Kernel, "kernel_score_evals_linear", |t| t),
    ] {
        match complexity_probe(mode, &depths, &shape, None) {
            Ok(rows) => {
                for r in rows {
                    let label = format!("T={}", r.t);
                    report.record(family, 0, &label, exact(r.score_evals, expect(r.t as u64)), 0.5);
                }
            }
            Err(e) => report.record(family, 0, "T=1..16", Err(e.to_string()), 0.5),
        }
    }

    for (mode, probe) in [(AttnMode::Base, ProbeMode::Base), (AttnMode::Light, ProbeMode::Light)] {
        let family = "analytic_matches_measured";
        for t in [1usize, 4, 8, 13] {
            let label = format!("{mode:?},T={t}");
            let result = (|| -> Result<std::result::Result<f64, String>> {
                let rows = complexity_probe(probe, &[t], &shape, None)?;
                let analytic = cumulative_analytic(&shape, mode, t)?;
                let state = block_cost_count(&shape, mode, t)?.state_values;
                Ok(exact(rows[0].score_evals, analytic).and(exact(rows[0].state_values, state)))
            })();
            report.record(family, 0, &label, result.unwrap_or_else(|e| Err(e.to_string())), 0.5);
        }
    }

    // T = 10, D = 100 values per layer (C = 1).
    let thin = BlockShape {
        channels: 1,
        height: 10,
        width: 10,
        d_k: 1,
    };
    let ratio = (|| -> Result<f64> {
        let b = complexity_probe(ProbeMode::Base, &[10], &thin, None)?[0].state_values;
        let l = complexity_probe(ProbeMode::Light, &[10], &thin, None)?[0].state_values;
        Ok(b as f64 / l as f64)
    })();
    report.record(
        "base_light_state_ratio",
        0,
        "T=10,D=100",
        ratio.map(|r| (r - 10.0).abs()).map_err(|e| e.to_string()),
        1e-12,
    );

    for (mode, want) in [(ProbeMode::Base, 3.6), (ProbeMode::Light, 2.0), (ProbeMode::Kernel, 2.0)] {
        let result = complexity_probe(mode, &[4, 8], &shape, None)
            .map(|rows| (growth_ratios(&rows)[0].2 - want).abs())
            .map_err(|e| e.to_string());
        report.record("doubling_score_ratio", 0, &format!("{mode:?},T=4->8"), result, 1e-12);
    }

    let arch = ArchSpec::resnet50();
    let params = arch_param_count(&arch, AttnMode::Light, BlockOptions::default()) as f64;
    let outside = |x: f64, lo: f64, hi: f64| if x < lo { lo - x } else if x > hi { x - hi } else { 0.0 };
    report.record(
        "resnet50_light_params",
        0,
        &format!("total={params}"),
        Ok(outside(params, 140_000.0, 180_000.0)),
        0.5,
    );
    let macs = arch_cost(&arch, AttnMode::Light, BlockOptions::default()).map(|c| c.total.macs as f64);
    let label = format!("macs={}", macs.as_ref().map_or(0.0, |m| *m));
    let result = macs
        .map(|m| outside(m, 0.07e9 / 2.0, 0.07e9 * 2.0))
        .map_err(|e| e.to_string());
    report.record("resnet50_light_macs", 0, &label, result, 0.5);
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let r = complexity_suite();
        assert!(r.pass, "{:#?}", r.failures);
    }

    #[test]
    fn depths_must_ascend() {
        let shape = BlockShape {
            channels: 4,
            height: 2,
            width: 2,
            d_k: 2,
        };
        assert!(complexity_probe(ProbeMode::Base, &[], &shape, None).is_err());
        assert!(complexity_probe(ProbeMode::Base, &[8, 4], &shape, None).is_err());
        let rows = complexity_probe(ProbeMode::Base, &[4, 8], &shape, None).unwrap();
        assert_eq!(rows[0].score_evals, 10);
        assert_eq!(rows[1].score_evals, 36);
    }
}
