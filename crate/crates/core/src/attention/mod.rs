//! Layer attention in linear-score form.
//!
//! Each layer `t` contributes a [`LayerTriple`]: a query and a key row of
//! width `D_k` and a value row of width `D`. The score of layer `t` against
//! layer `s` is the plain product `q_t . k_s`; no softmax or scaling is
//! applied here, which is what makes the recurrent rewrites exact. Sigmoid
//! scoring is applied by the deployable blocks in [`crate::blocks`].
//!
//! Forms provided:
//!
//! * [`mla_direct`]: `O_t = sum_s (q_t . k_s) v_s`
//! * [`rla_base_step`]: history term `q_t K_{t-1}^T V_{t-1}` plus the current term
//! * [`rla_light_step`]: `lambda_t * O_{t-1} + (q_t . k_t) v_t`
//! * [`rla_light_unrolled`]: the same as a weighted sum over layers
//! * multi-head wrappers in [`heads`], kernel-normalized forms in [`kernel`]
//!
//! All functions are pure: states are values that are passed in and returned.

pub mod heads;
pub mod kernel;

pub use heads::{merge_heads, mh_base_step, mh_direct, mh_light_step, split_heads, HeadConfig};
pub use kernel::{kernel_rla_direct, kernel_rla_step, kernel_rla_weights, FeatureMap, KernelState};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn row_width(t: &Tensor, what: &str) -> Result<usize> {
    match *t.shape() {
        [1, n] => Ok(n),
        _ => Err(Error::Contract(format!(
            "{what} must be a 1 x n row, got {:?}",
            t.shape()
        ))),
    }
}

/// Query, key row and value row produced by one layer.
#[derive(Debug, Clone)]
pub struct LayerTriple {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

impl LayerTriple {
    pub fn new(q: Tensor, k: Tensor, v: Tensor) -> Result<Self> {
        let dq = row_width(&q, "query")?;
        let dk = row_width(&k, "key")?;
        row_width(&v, "value")?;
        if dq != dk {
            return Err(Error::shape("layer triple", q.shape(), k.shape()));
        }
        Ok(LayerTriple { q, k, v })
    }

    pub fn from_slices(q: &[f64], k: &[f64], v: &[f64]) -> Result<Self> {
        Self::new(Tensor::row(q)?, Tensor::row(k)?, Tensor::row(v)?)
    }

    pub fn d_k(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn d(&self) -> usize {
        self.v.shape()[1]
    }

    /// Scalar score `q . k` of this layer against itself, as a `[1, 1]` tensor.
    pub fn self_score(&self) -> Result<Tensor> {
        self.q.matmul(&self.k.transpose()?)
    }

    /// `(q . k) v`, the current-layer term shared by every recurrent form.
    pub fn self_term(&self) -> Result<Tensor> {
        self.v.mul_scalar(&self.self_score()?)
    }
}

/// Stacked keys `[t, D_k]` and values `[t, D]` of the layers seen so far.
#[derive(Debug, Clone)]
pub struct RecurrentKV {
    pub keys: Tensor,
    pub values: Tensor,
}

impl RecurrentKV {
    /// Number of layers stored.
    pub fn layers(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn d_k(&self) -> usize {
        self.keys.shape()[1]
    }

    pub fn d(&self) -> usize {
        self.values.shape()[1]
    }

    fn append(&self, triple: &LayerTriple) -> Result<RecurrentKV> {
        Ok(RecurrentKV {
            keys: Tensor::concat(&[self.keys.clone(), triple.k.clone()], 0)?,
            values: Tensor::concat(&[self.values.clone(), triple.v.clone()], 0)?,
        })
    }
}

/// Previous output and the carry weights applied to it.
#[derive(Debug, Clone)]
pub struct LightState {
    pub o_prev: Tensor,
    pub lambda_o: Tensor,
}

impl LightState {
    pub fn new(o_prev: Tensor, lambda_o: Tensor) -> Result<Self> {
        let d = row_width(&o_prev, "previous output")?;
        if row_width(&lambda_o, "lambda_o")? != d {
            return Err(Error::shape("light state", o_prev.shape(), lambda_o.shape()));
        }
        Ok(LightState { o_prev, lambda_o })
    }
}

/// Softmax-normalized scaled dot-product self-attention over the rows of `x`.
pub fn self_attention_ref(x: &Tensor, w_q: &Tensor, w_k: &Tensor, w_v: &Tensor) -> Result<Tensor> {
    let q = x.matmul(w_q)?;
    let k = x.matmul(w_k)?;
    let v = x.matmul(w_v)?;
    let d_k = q.shape()[1] as f64;
    let logits = q.matmul(&k.transpose()?)?.scale(1.0 / d_k.sqrt());
    logits.softmax_rows().matmul(&v)
}

/// Direct layer attention for the last layer of `triples`: every earlier
/// layer is scored against the last layer's query and the values are summed
/// with those scores.
pub fn mla_direct(triples: &[LayerTriple]) -> Result<Tensor> {
    let last = triples
        .last()
        .ok_or_else(|| Error::Contract("layer attention needs at least one layer".into()))?;
    let mut terms = Vec::with_capacity(triples.len());
    for s in triples {
        if s.d_k() != last.d_k() || s.d() != last.d() {
            return Err(Error::shape("mla_direct", last.v.shape(), s.v.shape()));
        }
        let score = last.q.dot(&s.k)?;
        terms.push(s.v.mul_scalar(&score)?);
    }
    Tensor::add_n(&terms)
}

/// One recurrent step: reuses the stacked history of keys and values and
/// appends the current layer's key and value.
pub fn rla_base_step(state: Option<&RecurrentKV>, triple: &LayerTriple) -> Result<(Tensor, RecurrentKV)> {
    let own = triple.self_term()?;
    match state {
        None => Ok((
            own,
            RecurrentKV {
                keys: triple.k.clone(),
                values: triple.v.clone(),
            },
        )),
        Some(kv) => {
            if kv.d_k() != triple.d_k() {
                return Err(Error::shape("rla_base_step keys", kv.keys.shape(), triple.k.shape()));
            }
            if kv.d() != triple.d() {
                return Err(Error::shape(
                    "rla_base_step values",
                    kv.values.shape(),
                    triple.v.shape(),
                ));
            }
            let history = triple.q.matmul(&kv.keys.transpose()?)?.matmul(&kv.values)?;
            Ok((history.add(&own)?, kv.append(triple)?))
        }
    }
}

/// One light step. An absent state means the first layer, which attends only
/// to itself.
pub fn rla_light_step(state: Option<&LightState>, triple: &LayerTriple) -> Result<Tensor> {
    let own = triple.self_term()?;
    match state {
        None => Ok(own),
        Some(st) => {
            if st.o_prev.shape() != own.shape() {
                return Err(Error::shape("rla_light_step", st.o_prev.shape(), own.shape()));
            }
            st.lambda_o.mul(&st.o_prev)?.add(&own)
        }
    }
}

/// Light form written as a weighted sum over all layers:
/// `O_t = sum_l beta_l * term_{t-l}` with `beta_0 = 1` and `beta_l` the
/// elementwise product of the `l` most recent carry vectors.
///
/// `lambdas[i]` is the carry vector of step `i`; `lambdas[0]` is never used.
pub fn rla_light_unrolled(triples: &[LayerTriple], lambdas: &[Tensor]) -> Result<Tensor> {
    if triples.is_empty() {
        return Err(Error::Contract("light attention needs at least one layer".into()));
    }
    if triples.len() != lambdas.len() {
        return Err(Error::Contract(format!(
            "{} layers but {} carry vectors",
            triples.len(),
            lambdas.len()
        )));
    }
    let t = triples.len();
    let mut beta: Option<Tensor> = None;
    let mut terms = Vec::with_capacity(t);
    for i in (0..t).rev() {
        let term = triples[i].self_term()?;
        terms.push(match &beta {
            None => term,
            Some(b) => b.mul(&term)?,
        });
        if i > 0 {
            beta = Some(match beta {
                None => lambdas[i].clone(),
                Some(b) => b.mul(&lambdas[i])?,
            });
        }
    }
    Tensor::add_n(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    fn tri(q: f64, k: f64, v: f64) -> LayerTriple {
        LayerTriple::from_slices(&[q], &[k], &[v]).unwrap()
    }

    #[test]
    fn direct_examples() {
        assert_eq!(mla_direct(&[tri(2.0, 1.0, 3.0)]).unwrap().data(), &[6.0]);
        let layers = [tri(2.0, 1.0, 3.0), tri(1.0, 1.0, 2.0)];
        assert_eq!(mla_direct(&layers).unwrap().data(), &[5.0]);
        let zero_q = [tri(2.0, 1.0, 3.0), tri(0.0, 1.0, 2.0)];
        assert_eq!(mla_direct(&zero_q).unwrap().data(), &[0.0]);
        assert!(mla_direct(&[]).is_err());
    }

    #[test]
    fn base_step_examples() {
        let (o1, s1) = rla_base_step(None, &tri(2.0, 1.0, 3.0)).unwrap();
        assert_eq!(o1.data(), &[6.0]);
        assert_eq!(s1.layers(), 1);
        let (o2, s2) = rla_base_step(Some(&s1), &tri(1.0, 1.0, 2.0)).unwrap();
        assert_eq!(o2.data(), &[5.0]);
        assert_eq!(s2.layers(), 2);
        let (o3, _) = rla_base_step(Some(&s2), &tri(0.0, 4.0, 7.0)).unwrap();
        assert_eq!(o3.data(), &[0.0]);
    }

    #[test]
    fn base_step_rejects_width_mismatch() {
        let (_, s1) = rla_base_step(None, &tri(2.0, 1.0, 3.0)).unwrap();
        let wide = LayerTriple::from_slices(&[1.0, 1.0], &[1.0, 1.0], &[1.0]).unwrap();
        assert!(matches!(rla_base_step(Some(&s1), &wide), Err(Error::Shape { .. })));
    }

    #[test]
    fn light_step_examples() {
        let o1 = rla_light_step(None, &tri(2.0, 1.0, 3.0)).unwrap();
        assert_eq!(o1.data(), &[6.0]);
        let st = LightState::new(o1.clone(), Tensor::row(&[1.0]).unwrap()).unwrap();
        assert_eq!(rla_light_step(Some(&st), &tri(0.0, 5.0, 9.0)).unwrap().data(), &[6.0]);
        let zero = LightState::new(Tensor::row(&[0.0]).unwrap(), Tensor::row(&[0.7]).unwrap()).unwrap();
        assert_eq!(rla_light_step(Some(&zero), &tri(2.0, 1.5, 4.0)).unwrap().data(), &[12.0]);
    }

    #[test]
    fn unrolled_examples() {
        let ones = Tensor::row(&[1.0]).unwrap();
        assert_eq!(
            rla_light_unrolled(&[tri(2.0, 1.0, 3.0)], std::slice::from_ref(&ones)).unwrap().data(),
            &[6.0]
        );
        let layers = [tri(2.0, 1.0, 3.0), tri(1.0, 1.0, 2.0), tri(-1.0, 2.0, 0.5)];
        let all_ones = vec![ones.clone(); 3];
        assert_eq!(rla_light_unrolled(&layers, &all_ones).unwrap().data(), &[6.0 + 2.0 - 1.0]);
        assert!(rla_light_unrolled(&layers, &all_ones[..2]).is_err());
    }

    #[test]
    fn unrolled_matches_three_chained_steps() {
        let layers = [tri(0.3, -1.2, 2.0), tri(1.1, 0.4, -0.7), tri(-0.6, 0.9, 1.3)];
        let lambdas: Vec<Tensor> = [0.0, 0.8, -1.7]
            .iter()
            .map(|&l| Tensor::row(&[l]).unwrap())
            .collect();
        let mut o = rla_light_step(None, &layers[0]).unwrap();
        for i in 1..3 {
            let st = LightState::new(o, lambdas[i].clone()).unwrap();
            o = rla_light_step(Some(&st), &layers[i]).unwrap();
        }
        let u = rla_light_unrolled(&layers, &lambdas).unwrap();
        assert!((u.data()[0] - o.data()[0]).abs() < 1e-12);
    }

    #[test]
    fn self_attention_single_token_returns_value() {
        let x = Tensor::from_vec(vec![0.5, -1.0], &[1, 2]).unwrap();
        let wq = Tensor::from_vec(vec![1.0, 2.0], &[2, 1]).unwrap();
        let wk = Tensor::from_vec(vec![3.0, -1.0], &[2, 1]).unwrap();
        let wv = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let o = self_attention_ref(&x, &wq, &wk, &wv).unwrap();
        assert_eq!(o.data(), x.data());
    }

    #[test]
    fn self_attention_equal_keys_average_values() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).unwrap();
        let wq = Tensor::from_vec(vec![0.3, -0.2], &[2, 1]).unwrap();
        let wk = Tensor::zeros(&[2, 1], DType::F64).unwrap();
        let wv = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let o = self_attention_ref(&x, &wq, &wk, &wv).unwrap();
        for row in o.data().chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-12 && (row[1] - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn self_attention_two_token_closed_form() {
        // D = D_k = 1, x = [1, 2], w_q = 1, w_k = 0.5, w_v = 3.
        let x = Tensor::from_vec(vec![1.0, 2.0], &[2, 1]).unwrap();
        let one = |v: f64| Tensor::from_vec(vec![v], &[1, 1]).unwrap();
        let o = self_attention_ref(&x, &one(1.0), &one(0.5), &one(3.0)).unwrap();
        // Row 1 logits: q=1 against k = [0.5, 1.0] -> softmax weights e^.5/(e^.5+e^1)
        let w = |a: f64, b: f64| a.exp() / (a.exp() + b.exp());
        let row1 = w(0.5, 1.0) * 3.0 + w(1.0, 0.5) * 6.0;
        // Row 2 logits: q=2 against k -> [1.0, 2.0]
        let row2 = w(1.0, 2.0) * 3.0 + w(2.0, 1.0) * 6.0;
        assert!((o.data()[0] - row1).abs() < 1e-12);
        assert!((o.data()[1] - row2).abs() < 1e-12);
    }
}
