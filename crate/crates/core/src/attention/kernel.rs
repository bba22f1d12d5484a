//! Kernel-normalized layer attention with running sums.
//!
//! With a feature map `phi`, the normalized output of layer `t` is
//! `phi(q_t) U_t / phi(q_t) Z_t` where `U_t = sum_s phi(k_s)^T v_s` and
//! `Z_t = sum_s phi(k_s)^T`. Both sums update in O(1) per layer.

use serde::{Deserialize, Serialize};

use super::LayerTriple;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominators with smaller magnitude are rejected.
pub const MIN_DENOMINATOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMap {
    /// Test-only: scores may be negative or zero.
    Identity,
    /// `elu(x) + 1`, strictly positive.
    EluPlusOne,
}

impl FeatureMap {
    pub fn apply(self, x: &Tensor) -> Tensor {
        match self {
            FeatureMap::Identity => x.clone(),
            FeatureMap::EluPlusOne => x.elu_plus_one(),
        }
    }
}

/// Running sums `U: [D_k, D]` and `Z: [D_k, 1]`.
#[derive(Debug, Clone)]
pub struct KernelState {
    pub u: Tensor,
    pub z: Tensor,
}

fn normalize(num: &Tensor, den: &Tensor) -> Result<Tensor> {
    let d = den.item()?;
    if d.abs() < MIN_DENOMINATOR {
        return Err(Error::DegenerateNormalization(d.abs()));
    }
    num.mul_scalar(&den.recip())
}

pub fn kernel_rla_step(
    state: Option<&KernelState>,
    triple: &LayerTriple,
    phi: FeatureMap,
) -> Result<(Tensor, KernelState)> {
    let fk_col = phi.apply(&triple.k).transpose()?;
    let kv = fk_col.matmul(&triple.v)?;
    let next = match state {
        None => KernelState { u: kv, z: fk_col },
        Some(s) => {
            if s.u.shape() != kv.shape() {
                return Err(Error::shape("kernel_rla_step", s.u.shape(), kv.shape()));
            }
            KernelState {
                u: s.u.add(&kv)?,
                z: s.z.add(&fk_col)?,
            }
        }
    };
    let fq = phi.apply(&triple.q);
    let o = normalize(&fq.matmul(&next.u)?, &fq.matmul(&next.z)?)?;
    Ok((o, next))
}

fn scores(triples: &[LayerTriple], phi: FeatureMap) -> Result<(Vec<Tensor>, &LayerTriple)> {
    let last = triples
        .last()
        .ok_or_else(|| Error::Contract("kernel attention needs at least one layer".into()))?;
    let fq = phi.apply(&last.q);
    let s = triples
        .iter()
        .map(|t| {
            if t.d_k() != last.d_k() || t.d() != last.d() {
                return Err(Error::shape("kernel_rla_direct", last.v.shape(), t.v.shape()));
            }
            fq.dot(&phi.apply(&t.k))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((s, last))
}

/// Normalized attention of the last layer over all layers, summing
/// per-layer scores explicitly.
pub fn kernel_rla_direct(triples: &[LayerTriple], phi: FeatureMap) -> Result<Tensor> {
    let (s, _) = scores(triples, phi)?;
    let terms = triples
        .iter()
        .zip(&s)
        .map(|(t, s)| t.v.mul_scalar(s))
        .collect::<Result<Vec<_>>>()?;
    normalize(&Tensor::add_n(&terms)?, &Tensor::add_n(&s)?)
}

/// Normalized attention weights of the last layer over all layers.
pub fn kernel_rla_weights(triples: &[LayerTriple], phi: FeatureMap) -> Result<Vec<f64>> {
    let (s, _) = scores(triples, phi)?;
    let raw: Vec<f64> = s.iter().map(|t| t.data()[0]).collect();
    let total: f64 = raw.iter().sum();
    if total.abs() < MIN_DENOMINATOR {
        return Err(Error::DegenerateNormalization(total.abs()));
    }
    Ok(raw.into_iter().map(|r| r / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri(q: f64, k: f64, v: f64) -> LayerTriple {
        LayerTriple::from_slices(&[q], &[k], &[v]).unwrap()
    }

    #[test]
    fn first_step_returns_value_row() {
        let t = LayerTriple::from_slices(&[0.3, -0.4], &[1.2, 0.1], &[5.0, -2.0, 0.5]).unwrap();
        for phi in [FeatureMap::Identity, FeatureMap::EluPlusOne] {
            let (o, _) = kernel_rla_step(None, &t, phi).unwrap();
            for (a, b) in o.data().iter().zip(t.v.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_recurrence() {
        let (_, s) = kernel_rla_step(None, &tri(1.0, 2.0, 3.0), FeatureMap::Identity).unwrap();
        let (o, s) = kernel_rla_step(Some(&s), &tri(1.0, 1.0, 5.0), FeatureMap::Identity).unwrap();
        assert_eq!(s.u.data(), &[11.0]);
        assert_eq!(s.z.data(), &[3.0]);
        assert!((o.data()[0] - 11.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_denominator_is_rejected() {
        let err = kernel_rla_step(None, &tri(0.0, 1.0, 1.0), FeatureMap::Identity).unwrap_err();
        assert!(matches!(err, Error::DegenerateNormalization(_)));
    }

    #[test]
    fn identical_keys_give_plain_mean() {
        let layers = [tri(0.7, 0.2, 1.0), tri(-0.3, 0.2, 4.0), tri(1.9, 0.2, -2.0)];
        let o = kernel_rla_direct(&layers, FeatureMap::EluPlusOne).unwrap();
        assert!((o.data()[0] - 1.0).abs() < 1e-12);
        let w = kernel_rla_weights(&layers, FeatureMap::EluPlusOne).unwrap();
        for wi in w {
            assert!((wi - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_query_weights_still_normalized() {
        let layers = [tri(0.5, -1.0, 1.0), tri(2.0, 0.3, 4.0), tri(0.0, 1.7, -2.0)];
        let w = kernel_rla_weights(&layers, FeatureMap::EluPlusOne).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&x| x > 0.0 && x < 1.0));
    }
}
