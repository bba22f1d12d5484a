//! Multi-head wrappers. Queries and keys are split along `D_k`, values, previous
//! outputs and carry vectors along `D`, each into `H` contiguous slices; every
//! head runs the scalar-score form on its slice and the head outputs are
//! concatenated in head order.

use serde::{Deserialize, Serialize};

use super::{mla_direct, rla_base_step, rla_light_step, LayerTriple, LightState, RecurrentKV};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `heads` heads of `d_k` key/query channels each (`D_k = heads * d_k`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub heads: usize,
    pub d_k: usize,
}

impl HeadConfig {
    pub fn new(heads: usize, d_k: usize) -> Result<Self> {
        if heads == 0 || d_k == 0 {
            return Err(Error::Config(format!(
                "head count and per-head width must be positive (heads={heads}, d_k={d_k})"
            )));
        }
        Ok(HeadConfig { heads, d_k })
    }

    /// Heads obtained by cutting `channels` into groups of `d_k`.
    pub fn from_channels(channels: usize, d_k: usize) -> Result<Self> {
        if d_k == 0 || !channels.is_multiple_of(d_k) {
            return Err(Error::Config(format!(
                "d_k = {d_k} does not divide {channels} channels"
            )));
        }
        Self::new(channels / d_k, d_k)
    }

    pub fn key_width(&self) -> usize {
        self.heads * self.d_k
    }

    /// Checks that this configuration splits a `(D_k, D)` problem evenly.
    pub fn check(&self, key_width: usize, value_width: usize) -> Result<()> {
        if key_width != self.key_width() {
            return Err(Error::Config(format!(
                "{} heads x d_k {} != key width {key_width}",
                self.heads, self.d_k
            )));
        }
        if !value_width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide value width {value_width}",
                self.heads
            )));
        }
        Ok(())
    }
}

/// Splits the columns of a `[rows, n]` tensor into `heads` contiguous slices.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Vec<Tensor>> {
    let n = match *x.shape() {
        [_, n] => n,
        _ => {
            return Err(Error::Contract(format!(
                "split_heads expects a rank-2 tensor, got {:?}",
                x.shape()
            )))
        }
    };
    if heads == 0 || n % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide width {n}")));
    }
    let w = n / heads;
    (0..heads).map(|h| x.narrow(1, h * w, w)).collect()
}

pub fn merge_heads(parts: &[Tensor]) -> Result<Tensor> {
    Tensor::concat(parts, 1)
}

fn split_triple(triple: &LayerTriple, cfg: &HeadConfig) -> Result<Vec<LayerTriple>> {
    cfg.check(triple.d_k(), triple.d())?;
    let qs = split_heads(&triple.q, cfg.heads)?;
    let ks = split_heads(&triple.k, cfg.heads)?;
    let vs = split_heads(&triple.v, cfg.heads)?;
    qs.into_iter()
        .zip(ks)
        .zip(vs)
        .map(|((q, k), v)| LayerTriple::new(q, k, v))
        .collect()
}

pub fn mh_direct(triples: &[LayerTriple], cfg: &HeadConfig) -> Result<Tensor> {
    let per_layer = triples
        .iter()
        .map(|t| split_triple(t, cfg))
        .collect::<Result<Vec<_>>>()?;
    let outs = (0..cfg.heads)
        .map(|h| {
            let head: Vec<LayerTriple> = per_layer.iter().map(|l| l[h].clone()).collect();
            mla_direct(&head)
        })
        .collect::<Result<Vec<_>>>()?;
    merge_heads(&outs)
}

pub fn mh_base_step(
    state: Option<&RecurrentKV>,
    triple: &LayerTriple,
    cfg: &HeadConfig,
) -> Result<(Tensor, RecurrentKV)> {
    let parts = split_triple(triple, cfg)?;
    let head_states = match state {
        None => None,
        Some(kv) => {
            cfg.check(kv.d_k(), kv.d())?;
            let ks = split_heads(&kv.keys, cfg.heads)?;
            let vs = split_heads(&kv.values, cfg.heads)?;
            Some(
                ks.into_iter()
                    .zip(vs)
                    .map(|(keys, values)| RecurrentKV { keys, values })
                    .collect::<Vec<_>>(),
            )
        }
    };
    let mut outs = Vec::with_capacity(cfg.heads);
    let mut keys = Vec::with_capacity(cfg.heads);
    let mut values = Vec::with_capacity(cfg.heads);
    for (h, part) in parts.iter().enumerate() {
        let (o, kv) = rla_base_step(head_states.as_ref().map(|s| &s[h]), part)?;
        outs.push(o);
        keys.push(kv.keys);
        values.push(kv.values);
    }
    Ok((
        merge_heads(&outs)?,
        RecurrentKV {
            keys: merge_heads(&keys)?,
            values: merge_heads(&values)?,
        },
    ))
}

pub fn mh_light_step(state: Option<&LightState>, triple: &LayerTriple, cfg: &HeadConfig) -> Result<Tensor> {
    let parts = split_triple(triple, cfg)?;
    let head_states = match state {
        None => None,
        Some(st) => {
            let os = split_heads(&st.o_prev, cfg.heads)?;
            let ls = split_heads(&st.lambda_o, cfg.heads)?;
            Some(
                os.into_iter()
                    .zip(ls)
                    .map(|(o, l)| LightState::new(o, l))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
    };
    let outs = parts
        .iter()
        .enumerate()
        .map(|(h, part)| rla_light_step(head_states.as_ref().map(|s| &s[h]), part))
        .collect::<Result<Vec<_>>>()?;
    merge_heads(&outs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(HeadConfig::new(0, 4).is_err());
        assert!(HeadConfig::from_channels(12, 5).is_err());
        let cfg = HeadConfig::from_channels(12, 4).unwrap();
        assert_eq!(cfg.heads, 3);
        assert!(cfg.check(12, 9).is_ok());
        assert!(matches!(cfg.check(12, 10), Err(Error::Config(_))));
    }

    #[test]
    fn split_merge_round_trip() {
        let x = Tensor::row(&(0..8).map(f64::from).collect::<Vec<_>>()).unwrap();
        let parts = split_heads(&x, 2).unwrap();
        assert_eq!(parts[1].data(), &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(merge_heads(&parts).unwrap().data(), x.data());
        assert!(split_heads(&x, 3).is_err());
    }

    #[test]
    fn single_head_is_unsplit() {
        let layers = [
            LayerTriple::from_slices(&[0.5, -1.0], &[1.0, 2.0], &[3.0, 0.0, 1.0]).unwrap(),
            LayerTriple::from_slices(&[1.5, 0.2], &[-1.0, 0.5], &[1.0, 2.0, -1.0]).unwrap(),
        ];
        let cfg = HeadConfig::new(1, 2).unwrap();
        let a = mh_direct(&layers, &cfg).unwrap();
        let b = mla_direct(&layers).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn block_diagonal_heads_are_independent() {
        // H = 2, D = D_k = 2: head h only sees column h.
        let l1 = LayerTriple::from_slices(&[2.0, -1.0], &[1.0, 3.0], &[3.0, 0.5]).unwrap();
        let l2 = LayerTriple::from_slices(&[1.0, 0.5], &[1.0, -2.0], &[2.0, 4.0]).unwrap();
        let cfg = HeadConfig::new(2, 1).unwrap();
        let (_, s) = mh_base_step(None, &l1, &cfg).unwrap();
        let (o, _) = mh_base_step(Some(&s), &l2, &cfg).unwrap();
        // head 0: q=1 against k=[1,1], v=[3,2] -> 5; head 1: q=0.5, k=[3,-2], v=[0.5,4] -> 0.75 - 4
        let h0 = mla_direct(&[
            LayerTriple::from_slices(&[2.0], &[1.0], &[3.0]).unwrap(),
            LayerTriple::from_slices(&[1.0], &[1.0], &[2.0]).unwrap(),
        ])
        .unwrap();
        let h1 = mla_direct(&[
            LayerTriple::from_slices(&[-1.0], &[3.0], &[0.5]).unwrap(),
            LayerTriple::from_slices(&[0.5], &[-2.0], &[4.0]).unwrap(),
        ])
        .unwrap();
        assert_eq!(o.data(), &[h0.data()[0], h1.data()[0]]);
        assert_eq!(o.data(), &[5.0, -3.25]);
    }
}
