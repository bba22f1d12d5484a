//! Neural primitives used by the attention blocks and the toy backbones.
//! Convolutions are cross-correlations with zero "same" padding and no bias.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::Tensor;
use crate::error::{Error, Result};

fn hwc(t: &Tensor, op: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::Contract(format!(
            "{op} expects an H x W x C tensor, got {:?}",
            t.shape()
        ))),
    }
}

#[inline]
fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    pub fn sigmoid(&self) -> Tensor {
        self.map_unary(sigmoid, |x| {
            let s = sigmoid(x);
            s * (1.0 - s)
        })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Tensor {
        self.map_unary(
            |x| x * std_normal_cdf(x),
            |x| std_normal_cdf(x) + x * std_normal_pdf(x),
        )
    }

    pub fn relu(&self) -> Tensor {
        self.map_unary(|x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// `elu(x) + 1`, a strictly positive feature map.
    pub fn elu_plus_one(&self) -> Tensor {
        self.map_unary(
            |x| if x > 0.0 { x + 1.0 } else { x.exp() },
            |x| if x > 0.0 { 1.0 } else { x.exp() },
        )
    }

    /// 1-D convolution over a flat channel vector with an odd-length kernel,
    /// padded by `(k - 1) / 2` zeros on both ends. Output keeps the input shape.
    pub fn conv1d_same(&self, kernel: &Tensor) -> Result<Tensor> {
        let c = self.numel();
        let k = kernel.numel();
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!("conv1d kernel length must be odd, got {k}")));
        }
        if k > 2 * c - 1 {
            return Err(Error::Config(format!(
                "conv1d kernel length {k} exceeds 2C-1 = {} for C = {c}",
                2 * c - 1
            )));
        }
        let pad = (k - 1) / 2;
        let (x, w) = (self.data(), kernel.data());
        let tap = move |i: usize, j: usize| (i + j).checked_sub(pad).filter(|&s| s < c);
        let mut out = vec![0.0; c];
        for (i, o) in out.iter_mut().enumerate() {
            for (j, &wj) in w.iter().enumerate() {
                if let Some(s) = tap(i, j) {
                    *o += wj * x[s];
                }
            }
        }
        let (xt, kt) = (self.clone(), kernel.clone());
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            self.dtype().promote(kernel.dtype()),
            vec![self.clone(), kernel.clone()],
            move |g| {
                let (x, w) = (xt.data(), kt.data());
                let mut gx = vec![0.0; c];
                let mut gw = vec![0.0; k];
                for (i, &gi) in g.iter().enumerate() {
                    for j in 0..k {
                        if let Some(s) = tap(i, j) {
                            gx[s] += gi * w[j];
                            gw[j] += gi * x[s];
                        }
                    }
                }
                vec![gx, gw]
            },
        ))
    }

    /// 3x3 depthwise convolution, zero padding 1, one filter per channel.
    pub fn dwconv3x3_same(&self, weight: &Tensor) -> Result<Tensor> {
        let (h, w, c) = hwc(self, "dwconv3x3_same")?;
        if weight.shape() != [3, 3, c] {
            return Err(Error::shape("dwconv3x3_same", self.shape(), weight.shape()));
        }
        let (x, k) = (self.data(), weight.data());
        let mut out = vec![0.0; h * w * c];
        for_each_tap(h, w, |oy, ox, iy, ix, t| {
            let o = (oy * w + ox) * c;
            let i = (iy * w + ix) * c;
            for ch in 0..c {
                out[o + ch] += k[t * c + ch] * x[i + ch];
            }
        });
        let (xt, kt) = (self.clone(), weight.clone());
        Ok(Tensor::from_op(
            out,
            vec![h, w, c],
            self.dtype().promote(weight.dtype()),
            vec![self.clone(), weight.clone()],
            move |g| {
                let (x, k) = (xt.data(), kt.data());
                let mut gx = vec![0.0; h * w * c];
                let mut gk = vec![0.0; 9 * c];
                for_each_tap(h, w, |oy, ox, iy, ix, t| {
                    let o = (oy * w + ox) * c;
                    let i = (iy * w + ix) * c;
                    for ch in 0..c {
                        gx[i + ch] += k[t * c + ch] * g[o + ch];
                        gk[t * c + ch] += x[i + ch] * g[o + ch];
                    }
                });
                vec![gx, gk]
            },
        ))
    }

    /// Dense 3x3 convolution `[H, W, Cin] * [3, 3, Cin, Cout] -> [H, W, Cout]`.
    pub fn conv3x3_same(&self, weight: &Tensor) -> Result<Tensor> {
        let (h, w, ci) = hwc(self, "conv3x3_same")?;
        let co = match *weight.shape() {
            [3, 3, wi, co] if wi == ci => co,
            _ => return Err(Error::shape("conv3x3_same", self.shape(), weight.shape())),
        };
        let (x, k) = (self.data(), weight.data());
        let mut out = vec![0.0; h * w * co];
        for_each_tap(h, w, |oy, ox, iy, ix, t| {
            let o = (oy * w + ox) * co;
            let i = (iy * w + ix) * ci;
            for a in 0..ci {
                let xv = x[i + a];
                let krow = &k[(t * ci + a) * co..(t * ci + a + 1) * co];
                for (ov, &kv) in out[o..o + co].iter_mut().zip(krow) {
                    *ov += xv * kv;
                }
            }
        });
        let (xt, kt) = (self.clone(), weight.clone());
        Ok(Tensor::from_op(
            out,
            vec![h, w, co],
            self.dtype().promote(weight.dtype()),
            vec![self.clone(), weight.clone()],
            move |g| {
                let (x, k) = (xt.data(), kt.data());
                let mut gx = vec![0.0; h * w * ci];
                let mut gk = vec![0.0; 9 * ci * co];
                for_each_tap(h, w, |oy, ox, iy, ix, t| {
                    let o = (oy * w + ox) * co;
                    let i = (iy * w + ix) * ci;
                    let go = &g[o..o + co];
                    for a in 0..ci {
                        let base = (t * ci + a) * co;
                        let krow = &k[base..base + co];
                        gx[i + a] += krow.iter().zip(go).map(|(k, g)| k * g).sum::<f64>();
                        let xv = x[i + a];
                        for (gkv, &gv) in gk[base..base + co].iter_mut().zip(go) {
                            *gkv += xv * gv;
                        }
                    }
                });
                vec![gx, gk]
            },
        ))
    }

    /// Global average pooling `[H, W, C] -> [C]`.
    pub fn gap(&self) -> Result<Tensor> {
        let (h, w, c) = hwc(self, "gap")?;
        let n = (h * w) as f64;
        let mut out = vec![0.0; c];
        for px in self.data().chunks(c) {
            out.iter_mut().zip(px).for_each(|(o, &v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= n);
        Ok(Tensor::from_op(out, vec![c], self.dtype(), vec![self.clone()], move |g| {
            let mut gx = Vec::with_capacity(h * w * c);
            for _ in 0..h * w {
                gx.extend(g.iter().map(|v| v / n));
            }
            vec![gx]
        }))
    }

    /// Non-overlapping `f x f` average pooling over the spatial axes.
    pub fn avg_pool2d(&self, f: usize) -> Result<Tensor> {
        let (h, w, c) = hwc(self, "avg_pool2d")?;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Config(format!(
                "pool factor {f} does not divide spatial extent {h}x{w}"
            )));
        }
        let (oh, ow) = (h / f, w / f);
        let norm = (f * f) as f64;
        let x = self.data();
        let mut out = vec![0.0; oh * ow * c];
        for y in 0..h {
            for xx in 0..w {
                let o = ((y / f) * ow + xx / f) * c;
                let i = (y * w + xx) * c;
                for ch in 0..c {
                    out[o + ch] += x[i + ch] / norm;
                }
            }
        }
        Ok(Tensor::from_op(out, vec![oh, ow, c], self.dtype(), vec![self.clone()], move |g| {
            let mut gx = vec![0.0; h * w * c];
            for y in 0..h {
                for xx in 0..w {
                    let o = ((y / f) * ow + xx / f) * c;
                    let i = (y * w + xx) * c;
                    for ch in 0..c {
                        gx[i + ch] = g[o + ch] / norm;
                    }
                }
            }
            vec![gx]
        }))
    }
}

/// Visits every in-bounds (output pixel, input pixel, tap index) triple of a
/// 3x3 same-padded stencil. Tap index is `dy * 3 + dx`.
fn for_each_tap(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    for oy in 0..h {
        for dy in 0..3 {
            let Some(iy) = (oy + dy).checked_sub(1).filter(|&v| v < h) else {
                continue;
            };
            for ox in 0..w {
                for dx in 0..3 {
                    let Some(ix) = (ox + dx).checked_sub(1).filter(|&v| v < w) else {
                        continue;
                    };
                    f(oy, ox, iy, ix, dy * 3 + dx);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn conv1d_examples() {
        let x = t(&[1.0, 2.0, 3.0], &[3]);
        assert_eq!(x.conv1d_same(&t(&[0.0, 1.0, 0.0], &[3])).unwrap().data(), &[1.0, 2.0, 3.0]);
        assert_eq!(x.conv1d_same(&t(&[1.0, 1.0, 1.0], &[3])).unwrap().data(), &[3.0, 6.0, 5.0]);
        let z = Tensor::zeros(&[3], DType::F64).unwrap();
        assert_eq!(z.conv1d_same(&t(&[1.0, 2.0, 3.0], &[3])).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn conv1d_rejects_even_and_oversized_kernels() {
        let x = t(&[1.0, 2.0, 3.0], &[3]);
        assert!(matches!(x.conv1d_same(&t(&[1.0, 1.0], &[2])), Err(Error::Config(_))));
        assert!(x.conv1d_same(&t(&[1.0; 5], &[5])).is_ok());
        assert!(matches!(x.conv1d_same(&t(&[1.0; 7], &[7])), Err(Error::Config(_))));
    }

    #[test]
    fn conv1d_wide_kernel_reaches_both_ends() {
        // k = 2C - 1: every output sees every input.
        let x = t(&[1.0, 10.0], &[2]);
        let y = x.conv1d_same(&t(&[1.0, 1.0, 1.0], &[3])).unwrap();
        assert_eq!(y.data(), &[11.0, 11.0]);
    }

    #[test]
    fn dwconv_examples() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2, 1]);
        let ones = Tensor::ones(&[3, 3, 1], DType::F64).unwrap();
        assert_eq!(x.dwconv3x3_same(&ones).unwrap().data(), &[10.0; 4]);
        let mut delta = vec![0.0; 9];
        delta[4] = 1.0;
        let d = t(&delta, &[3, 3, 1]);
        assert_eq!(x.dwconv3x3_same(&d).unwrap().data(), x.data());
        let bad = Tensor::ones(&[3, 3, 2], DType::F64).unwrap();
        assert!(matches!(x.dwconv3x3_same(&bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn dense_conv_with_diagonal_delta_is_identity() {
        let x = t(&(0..18).map(|v| v as f64 * 0.37 - 2.0).collect::<Vec<_>>(), &[3, 3, 2]);
        let mut k = vec![0.0; 9 * 2 * 2];
        k[(4 * 2) * 2] = 1.0;
        k[(4 * 2 + 1) * 2 + 1] = 1.0;
        let y = x.conv3x3_same(&t(&k, &[3, 3, 2, 2])).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn gap_examples() {
        assert_eq!(t(&[1.0, 2.0, 3.0, 4.0], &[2, 2, 1]).gap().unwrap().data(), &[2.5]);
        let c = Tensor::full(&[3, 2, 2], 1.5, DType::F64).unwrap();
        assert_eq!(c.gap().unwrap().data(), &[1.5, 1.5]);
        assert!(t(&[1.0], &[1]).gap().is_err());
    }

    #[test]
    fn activation_values() {
        let s = t(&[0.0, 3f64.ln()], &[2]).sigmoid();
        assert_eq!(s.data()[0], 0.5);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
        let g = t(&[0.0, 1.0], &[2]).gelu();
        assert_eq!(g.data()[0], 0.0);
        // 1 * Phi(1)
        assert!((g.data()[1] - 0.841_344_746_068_542_9).abs() < 1e-12);
        let e = t(&[-1.0, 0.5], &[2]).elu_plus_one();
        assert!((e.data()[0] - (-1f64).exp()).abs() < 1e-15);
        assert_eq!(e.data()[1], 1.5);
    }

    #[test]
    fn avg_pool_halves() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2, 1]);
        assert_eq!(x.avg_pool2d(2).unwrap().data(), &[2.5]);
        assert!(x.avg_pool2d(3).is_err());
    }
}
