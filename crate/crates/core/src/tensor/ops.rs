use super::Tensor;
use crate::error::{Error, Result};

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

impl Tensor {
    pub(crate) fn map_unary<F, D>(&self, f: F, df: D) -> Tensor
    where
        F: Fn(f64) -> f64,
        D: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let data = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            self.dtype(),
            vec![self.clone()],
            move |g| vec![g.iter().zip(x.data()).map(|(g, &x)| g * df(x)).collect()],
        )
    }

    fn zip_same<F, DA, DB>(&self, other: &Tensor, op: &'static str, f: F, da: DA, db: DB) -> Result<Tensor>
    where
        F: Fn(f64, f64) -> f64,
        DA: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        DB: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            self.dtype().promote(other.dtype()),
            vec![self.clone(), other.clone()],
            move |g| {
                let ga = g
                    .iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(g, (&x, &y))| g * da(x, y))
                    .collect();
                let gb = g
                    .iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(g, (&x, &y))| g * db(x, y))
                    .collect();
                vec![ga, gb]
            },
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same(other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same(other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map_unary(|x| c * x, move |_| c)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Tensor {
        self.map_unary(f64::exp, f64::exp)
    }

    pub fn recip(&self) -> Tensor {
        self.map_unary(|x| 1.0 / x, |x| -1.0 / (x * x))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], vec![1], self.dtype(), vec![self.clone()], move |g| {
            vec![vec![g[0]; n]]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum::<f64>() / n as f64;
        Tensor::from_op(vec![s], vec![1], self.dtype(), vec![self.clone()], move |g| {
            vec![vec![g[0] / n as f64; n]]
        })
    }

    /// Sum of a non-empty list of same-shape tensors.
    pub fn add_n(terms: &[Tensor]) -> Result<Tensor> {
        let (first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Contract("add_n needs at least one term".into()))?;
        rest.iter().try_fold(first.clone(), |acc, t| acc.add(t))
    }

    /// Row-major `[m, k] x [k, n] -> [m, n]` product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        let (a, b) = (self.data(), other.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *o += aip * bv;
                }
            }
        }
        let (lhs, rhs) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            self.dtype().promote(other.dtype()),
            vec![self.clone(), other.clone()],
            move |g| {
                let (a, b) = (lhs.data(), rhs.data());
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            ga[i * k + p] += gij * b[p * n + j];
                            gb[p * n + j] += a[i * k + p] * gij;
                        }
                    }
                }
                vec![ga, gb]
            },
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::Contract(format!(
                "transpose needs a rank-2 tensor, got {:?}",
                self.shape()
            )));
        }
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        Ok(Tensor::from_op(out, vec![n, m], self.dtype(), vec![self.clone()], move |g| {
            let mut gx = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    gx[i * n + j] = g[j * m + i];
                }
            }
            vec![gx]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = super::check_shape(shape)?;
        if n != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            self.dtype(),
            vec![self.clone()],
            |g| vec![g.to_vec()],
        ))
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || len == 0 || start + len > self.shape()[axis] {
            return Err(Error::Contract(format!(
                "narrow(axis={axis}, start={start}, len={len}) out of range for {:?}",
                self.shape()
            )));
        }
        let dim = self.shape()[axis];
        let (outer, inner) = outer_inner(self.shape(), axis);
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let total = self.numel();
        Ok(Tensor::from_op(out, shape, self.dtype(), vec![self.clone()], move |g| {
            let mut gx = vec![0.0; total];
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                gx[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![gx]
        }))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat needs at least one tensor".into()))?;
        if axis >= first.rank() {
            return Err(Error::Contract(format!(
                "concat axis {axis} out of range for {:?}",
                first.shape()
            )));
        }
        let mut dtype = first.dtype();
        for p in &parts[1..] {
            let ok = p.rank() == first.rank()
                && p
                    .shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
            dtype = dtype.promote(p.dtype());
        }
        let (outer, inner) = outer_inner(first.shape(), axis);
        let dims: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total_dim: usize = dims.iter().sum();
        let mut out = Vec::with_capacity(outer * total_dim * inner);
        for o in 0..outer {
            for (p, &d) in parts.iter().zip(&dims) {
                out.extend_from_slice(&p.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total_dim;
        Ok(Tensor::from_op(out, shape, dtype, parts.to_vec(), move |g| {
            let mut grads: Vec<Vec<f64>> = dims
                .iter()
                .map(|&d| Vec::with_capacity(outer * d * inner))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &d) in grads.iter_mut().zip(&dims) {
                    gp.extend_from_slice(&g[off..off + d * inner]);
                    off += d * inner;
                }
            }
            grads
        }))
    }

    fn check_channels(&self, s: &Tensor, op: &'static str) -> Result<usize> {
        let c = *self.shape().last().expect("rank >= 1");
        if s.numel() != c {
            return Err(Error::shape(op, self.shape(), s.shape()));
        }
        Ok(c)
    }

    /// Multiplies every element by the per-channel factor `s[c]`, where the
    /// channel is the last axis of `self` and `s` holds exactly one value per
    /// channel.
    pub fn mul_channels(&self, s: &Tensor) -> Result<Tensor> {
        let c = self.check_channels(s, "mul_channels")?;
        let (x, sv) = (self.data(), s.data());
        let out = x.iter().enumerate().map(|(i, &v)| v * sv[i % c]).collect();
        let (xt, st) = (self.clone(), s.clone());
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            self.dtype().promote(s.dtype()),
            vec![self.clone(), s.clone()],
            move |g| {
                let (x, sv) = (xt.data(), st.data());
                let gx = g.iter().enumerate().map(|(i, &g)| g * sv[i % c]).collect();
                let mut gs = vec![0.0; c];
                for (i, (&g, &x)) in g.iter().zip(x).enumerate() {
                    gs[i % c] += g * x;
                }
                vec![gx, gs]
            },
        ))
    }

    /// Adds the per-channel offset `b[c]` along the last axis.
    pub fn add_channels(&self, b: &Tensor) -> Result<Tensor> {
        let c = self.check_channels(b, "add_channels")?;
        let bv = b.data();
        let out = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % c])
            .collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            self.dtype().promote(b.dtype()),
            vec![self.clone(), b.clone()],
            move |g| {
                let mut gb = vec![0.0; c];
                for (i, &g) in g.iter().enumerate() {
                    gb[i % c] += g;
                }
                vec![g.to_vec(), gb]
            },
        ))
    }

    /// Multiplies by a single-element tensor.
    pub fn mul_scalar(&self, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(Error::shape("mul_scalar", self.shape(), s.shape()));
        }
        let sv = s.data()[0];
        let out = self.data().iter().map(|&v| v * sv).collect();
        let (xt, st) = (self.clone(), s.clone());
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            self.dtype().promote(s.dtype()),
            vec![self.clone(), s.clone()],
            move |g| {
                let sv = st.data()[0];
                let gx = g.iter().map(|&g| g * sv).collect();
                let gs = g.iter().zip(xt.data()).map(|(g, x)| g * x).sum();
                vec![gx, vec![gs]]
            },
        ))
    }

    /// Sums contiguous groups along the last axis: `[..., n] -> [..., groups]`.
    pub fn segment_sum(&self, groups: usize) -> Result<Tensor> {
        let n = *self.shape().last().expect("rank >= 1");
        if groups == 0 || !n.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "cannot split last axis of {:?} into {groups} equal groups",
                self.shape()
            )));
        }
        let width = n / groups;
        let out: Vec<f64> = self
            .data()
            .chunks(width)
            .map(|c| c.iter().sum())
            .collect();
        let mut shape = self.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = groups;
        Ok(Tensor::from_op(out, shape, self.dtype(), vec![self.clone()], move |g| {
            vec![g.iter().flat_map(|&v| std::iter::repeat_n(v, width)).collect()]
        }))
    }

    /// Repeats each last-axis element `times` times: `[..., g] -> [..., g * times]`.
    pub fn repeat_each(&self, times: usize) -> Result<Tensor> {
        if times == 0 {
            return Err(Error::Config("repeat_each needs times >= 1".into()));
        }
        let out = self
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, times))
            .collect();
        let mut shape = self.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") *= times;
        Ok(Tensor::from_op(out, shape, self.dtype(), vec![self.clone()], move |g| {
            vec![g.chunks(times).map(|c| c.iter().sum()).collect()]
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&self) -> Tensor {
        let n = *self.shape().last().expect("rank >= 1");
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data().chunks(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            out.extend(e.into_iter().map(|v| v / z));
        }
        let y = out.clone();
        Tensor::from_op(out, self.shape().to_vec(), self.dtype(), vec![self.clone()], move |g| {
            let mut gx = Vec::with_capacity(y.len());
            for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                gx.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
            }
            vec![gx]
        })
    }

    /// Softmax cross-entropy of a flat logit vector against a class index.
    pub fn cross_entropy(&self, label: usize) -> Result<Tensor> {
        let x = self.data();
        if label >= x.len() {
            return Err(Error::Contract(format!(
                "label {label} out of range for {} logits",
                x.len()
            )));
        }
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = x.iter().map(|&v| (v - m).exp()).sum();
        let loss = m + z.ln() - x[label];
        let probs: Vec<f64> = x.iter().map(|&v| (v - m).exp() / z).collect();
        Ok(Tensor::from_op(vec![loss], vec![1], self.dtype(), vec![self.clone()], move |g| {
            let mut gx: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
            gx[label] -= g[0];
            vec![gx]
        }))
    }

    /// Sum of elementwise products, as a single-element tensor.
    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        Ok(self.mul(other)?.sum())
    }
}
