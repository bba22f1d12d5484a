use std::fmt::Write as _;

use serde::Serialize;

use crate::blocks::AttnMode;
use crate::error::{Error, Result};
use crate::model::{MiniModel, SynthDataset};
use crate::tensor::{no_grad, Tensor};

/// `|cos(a, b)|` clamped to `[0, 1]`; `None` when either vector has zero norm.
pub fn abs_cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb)).abs().min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CosineStats {
    pub values: Vec<f64>,
    /// Pairs skipped because a query had zero norm.
    pub skipped: usize,
    /// `(lo, hi, count)`; the last bin is closed on the right.
    pub bins: Vec<(f64, f64, usize)>,
}

impl CosineStats {
    pub fn from_values(values: Vec<f64>, skipped: usize, bins: usize) -> Self {
        let n = bins.max(1);
        let mut counts = vec![0usize; n];
        for &v in &values {
            counts[((v * n as f64) as usize).min(n - 1)] += 1;
        }
        let bins = counts
            .into_iter()
            .enumerate()
            .map(|(i, c)| (i as f64 / n as f64, (i + 1) as f64 / n as f64, c))
            .collect();
        CosineStats { values, skipped, bins }
    }
}

fn require_attention(model: &MiniModel) -> Result<()> {
    if model.config.mode.attn().is_none() {
        return Err(Error::Config("model has no attention blocks (mode = off)".into()));
    }
    Ok(())
}

/// Per-head `|cos(Q^t_h, Q^(t-1)_h)|` between consecutive blocks of each
/// stage, over every sample of `data`. A stage's first block has no
/// predecessor and contributes nothing.
pub fn query_cosine_stats(model: &MiniModel, data: &SynthDataset, bins: usize) -> Result<CosineStats> {
    require_attention(model)?;
    let d_k = model.arch.d_k;
    let mut values = Vec::new();
    let mut skipped = 0;
    for (x, _) in &data.samples {
        let (_, traces) = no_grad(|| model.forward_traced(x, None))?;
        for stage in &traces {
            for pair in stage.windows(2) {
                for (cur, prev) in pair[1].q.chunks(d_k).zip(pair[0].q.chunks(d_k)) {
                    match abs_cosine(cur, prev) {
                        Some(c) => values.push(c),
                        None => skipped += 1,
                    }
                }
            }
        }
    }
    Ok(CosineStats::from_values(values, skipped, bins))
}

pub fn cosine_csv(stats: &CosineStats) -> String {
    let mut s = String::from("bin_lo,bin_hi,count\n");
    for (lo, hi, c) in &stats.bins {
        let _ = writeln!(s, "{lo},{hi},{c}");
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreMatrix {
    pub stage: usize,
    pub mode: AttnMode,
    /// `cells[h][t][s]`, present iff `s <= t`.
    pub cells: Vec<Vec<Vec<Option<f64>>>>,
}

impl ScoreMatrix {
    pub fn populated(&self) -> usize {
        self.cells.iter().flatten().flatten().filter(|c| c.is_some()).count()
    }
}

fn head_mean(v: &[f64], h: usize, width: usize) -> f64 {
    v[h * width..(h + 1) * width].iter().sum::<f64>() / width as f64
}

/// Layer-attention scores of stage `stage` for input `x`, one lower
/// triangular matrix per head.
///
/// Base mode: entry `(t, s)` is the sigmoid score of block `t` against block
/// `s`. Light mode only scores the current block, so the diagonal holds that
/// score and entry `(t, s < t)` holds the head-mean of the carry product
/// `lambda_(s+1) * ... * lambda_t` applied to block `s`'s term.
pub fn attn_score_matrix(model: &MiniModel, stage: usize, x: &Tensor) -> Result<ScoreMatrix> {
    require_attention(model)?;
    let stages = model.stages.len();
    if stage >= stages {
        return Err(Error::Config(format!("stage {stage} out of range ({stages} stages)")));
    }
    let mode = model.config.mode.attn().expect("checked above");
    let (_, traces) = no_grad(|| model.forward_traced(x, None))?;
    let trace = &traces[stage];
    let depth = trace.len();
    let heads = model.arch.stages[stage].channels / model.arch.d_k;
    let mut cells = vec![vec![vec![None; depth]; depth]; heads];
    match mode {
        AttnMode::Base => {
            for (t, b) in trace.iter().enumerate() {
                for (s, per_head) in b.scores.iter().enumerate() {
                    for (h, &v) in per_head.iter().enumerate() {
                        cells[h][t][s] = Some(v);
                    }
                }
            }
        }
        AttnMode::Light => {
            let lambdas: Vec<Vec<f64>> = model.stages[stage]
                .blocks
                .iter()
                .map(|b| {
                    b.mrla
                        .as_ref()
                        .and_then(|m| m.lambda_o.as_ref())
                        .map(Tensor::to_vec)
                        .unwrap_or_default()
                })
                .collect();
            let width = model.arch.d_k;
            for t in 0..depth {
                for h in 0..heads {
                    cells[h][t][t] = Some(trace[t].scores[0][h]);
                    let mut beta = vec![1.0; width];
                    for s in (0..t).rev() {
                        let lam = &lambdas[s + 1];
                        for (i, b) in beta.iter_mut().enumerate() {
                            *b *= lam[h * width + i];
                        }
                        cells[h][t][s] = Some(head_mean(&beta, 0, width));
                    }
                }
            }
        }
    }
    Ok(ScoreMatrix { stage, mode, cells })
}

/// `head,t,s,score` rows (1-based layers) for every populated cell.
pub fn attn_score_csv(m: &ScoreMatrix) -> String {
    let mut out = String::from("head,t,s,score\n");
    for (h, rows) in m.cells.iter().enumerate() {
        for (t, row) in rows.iter().enumerate() {
            for (s, cell) in row.iter().enumerate() {
                if let Some(v) = cell {
                    let _ = writeln!(out, "{h},{},{},{v:?}", t + 1, s + 1);
                }
            }
        }
    }
    out
}
