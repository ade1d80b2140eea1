//! Stride-1 "same" 3D convolution with cubic odd kernels.
//!
//! Each input channel is zero-padded by `k / 2` on every side. On the padded
//! grid a kernel offset is a constant shift of the flat index, so the
//! convolution becomes `k^3` strided matrix products over one contiguous
//! index range. Border positions inside that range produce values that are
//! discarded when the interior is extracted.

use super::gemm::{gemm, View};
use super::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Layout {
    dims: [usize; 3],
    pad: usize,
    vp: usize,
    s0: usize,
    s1: usize,
    q_start: usize,
    q_len: usize,
}

impl Layout {
    fn new(dims: [usize; 3], k: usize) -> Self {
        let pad = k / 2;
        let padded = dims.map(|d| d + 2 * pad);
        let s1 = padded[2];
        let s0 = padded[1] * padded[2];
        let q_start = pad * s0 + pad * s1 + pad;
        let q_end = (dims[0] - 1 + pad) * s0 + (dims[1] - 1 + pad) * s1 + (dims[2] - 1 + pad) + 1;
        Self { dims, pad, vp: padded.iter().product(), s0, s1, q_start, q_len: q_end - q_start }
    }

    fn delta(&self, a: usize, b: usize, c: usize) -> isize {
        let p = self.pad as isize;
        (a as isize - p) * self.s0 as isize + (b as isize - p) * self.s1 as isize + (c as isize - p)
    }

    fn interior(&self, i0: usize, i1: usize, i2: usize) -> usize {
        (i0 + self.pad) * self.s0 + (i1 + self.pad) * self.s1 + i2 + self.pad
    }

    /// Copies `channels` dense volumes into zero-padded volumes.
    fn pad_into(&self, src: &[f64], channels: usize, dst: &mut [f64]) {
        let [d0, d1, d2] = self.dims;
        let vol = d0 * d1 * d2;
        for c in 0..channels {
            for i0 in 0..d0 {
                for i1 in 0..d1 {
                    let s = c * vol + (i0 * d1 + i1) * d2;
                    let d = c * self.vp + self.interior(i0, i1, 0);
                    dst[d..d + d2].copy_from_slice(&src[s..s + d2]);
                }
            }
        }
    }

    /// Inverse of [`Self::pad_into`] for `q`-range buffers (`offset = q_start`).
    fn extract(&self, src: &[f64], stride: usize, offset: usize, channels: usize, dst: &mut [f64]) {
        let [d0, d1, d2] = self.dims;
        let vol = d0 * d1 * d2;
        for c in 0..channels {
            for i0 in 0..d0 {
                for i1 in 0..d1 {
                    let s = c * stride + self.interior(i0, i1, 0) - offset;
                    let d = c * vol + (i0 * d1 + i1) * d2;
                    dst[d..d + d2].copy_from_slice(&src[s..s + d2]);
                }
            }
        }
    }
}

fn conv_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let [b, ci, d0, d1, d2] = x.shape().try_into().expect("conv3d input must be 5-D");
    let [co, wci, k, k1, k2] = w.shape().try_into().expect("conv3d weight must be 5-D");
    assert_eq!(wci, ci, "conv3d channel mismatch");
    assert!(k == k1 && k == k2 && k % 2 == 1, "conv3d kernel must be cubic and odd");
    let lay = Layout::new([d0, d1, d2], k);
    let k3 = k * k * k;
    let vol = d0 * d1 * d2;
    let mut out = vec![0.0; b * co * vol];
    let mut xpad = vec![0.0; ci * lay.vp];
    let mut acc = vec![0.0; co * lay.q_len];
    for n in 0..b {
        lay.pad_into(&x.data()[n * ci * vol..(n + 1) * ci * vol], ci, &mut xpad);
        acc.iter_mut().for_each(|v| *v = 0.0);
        for a0 in 0..k {
            for a1 in 0..k {
                for a2 in 0..k {
                    let o = (a0 * k + a1) * k + a2;
                    let shift = (lay.q_start as isize + lay.delta(a0, a1, a2)) as usize;
                    let wv = View { offset: o, rows: co, cols: ci, rs: ci * k3, cs: k3 };
                    let xv = View { offset: shift, rows: ci, cols: lay.q_len, rs: lay.vp, cs: 1 };
                    gemm(1.0, w.data(), wv, &xpad, xv, 1.0, &mut acc, View::row_major(0, co, lay.q_len));
                }
            }
        }
        let dst = &mut out[n * co * vol..(n + 1) * co * vol];
        lay.extract(&acc, lay.q_len, lay.q_start, co, dst);
        if let Some(bias) = bias {
            for c in 0..co {
                let bv = bias.data()[c];
                dst[c * vol..(c + 1) * vol].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::from_vec(&[b, co, d0, d1, d2], out)
}

/// Returns (grad_x, grad_w, grad_bias).
fn conv_backward(x: &Tensor, w: &Tensor, g: &Tensor, want_x: bool) -> (Option<Tensor>, Tensor, Tensor) {
    let [b, ci, d0, d1, d2] = x.shape().try_into().unwrap();
    let [co, _, k, _, _] = w.shape().try_into().unwrap();
    let lay = Layout::new([d0, d1, d2], k);
    let k3 = k * k * k;
    let vol = d0 * d1 * d2;
    let mut gx = want_x.then(|| vec![0.0; b * ci * vol]);
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; co];

    let mut xpad = vec![0.0; ci * lay.vp];
    let mut gpad = vec![0.0; co * lay.vp];
    let mut gxpad = vec![0.0; ci * lay.vp];
    for n in 0..b {
        let gs = &g.data()[n * co * vol..(n + 1) * co * vol];
        for c in 0..co {
            gb[c] += gs[c * vol..(c + 1) * vol].iter().sum::<f64>();
        }
        lay.pad_into(&x.data()[n * ci * vol..(n + 1) * ci * vol], ci, &mut xpad);
        lay.pad_into(gs, co, &mut gpad);
        if gx.is_some() {
            gxpad.iter_mut().for_each(|v| *v = 0.0);
        }
        let gv = View { offset: lay.q_start, rows: co, cols: lay.q_len, rs: lay.vp, cs: 1 };
        for a0 in 0..k {
            for a1 in 0..k {
                for a2 in 0..k {
                    let o = (a0 * k + a1) * k + a2;
                    let shift = (lay.q_start as isize + lay.delta(a0, a1, a2)) as usize;
                    let wv = View { offset: o, rows: co, cols: ci, rs: ci * k3, cs: k3 };
                    let xv = View { offset: shift, rows: ci, cols: lay.q_len, rs: lay.vp, cs: 1 };
                    gemm(1.0, &gpad, gv, &xpad, xv.t(), 1.0, &mut gw, wv);
                    if gx.is_some() {
                        gemm(1.0, w.data(), wv.t(), &gpad, gv, 1.0, &mut gxpad, xv);
                    }
                }
            }
        }
        if let Some(gx) = gx.as_mut() {
            lay.extract(&gxpad, lay.vp, 0, ci, &mut gx[n * ci * vol..(n + 1) * ci * vol]);
        }
    }
    (gx.map(|d| Tensor::from_vec(x.shape(), d)), Tensor::from_vec(w.shape(), gw), Tensor::from_vec(&[co], gb))
}

/// `out[b, o, p] = sum_i w[o, i] x[b, i, p] + bias[o]` over any trailing dims.
fn mix_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let (b, ci) = (x.shape()[0], x.shape()[1]);
    let s: usize = x.shape()[2..].iter().product();
    let co = w.shape()[0];
    assert_eq!(w.shape()[1..].iter().product::<usize>(), ci, "channel mix weight mismatch");
    let mut out = vec![0.0; b * co * s];
    for n in 0..b {
        if let Some(bias) = bias {
            for c in 0..co {
                out[(n * co + c) * s..(n * co + c + 1) * s].fill(bias.data()[c]);
            }
        }
        gemm(
            1.0,
            w.data(),
            View::row_major(0, co, ci),
            x.data(),
            View::row_major(n * ci * s, ci, s),
            1.0,
            &mut out,
            View::row_major(n * co * s, co, s),
        );
    }
    let mut shape = x.shape().to_vec();
    shape[1] = co;
    Tensor::from_vec(&shape, out)
}

impl Graph {
    /// Same-padded stride-1 convolution; weight `[co, ci, k, k, k]`, bias `[co]`.
    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let (xv, wv) = (self.rc(x), self.rc(w));
        let bv = bias.map(|b| self.rc(b));
        let k = wv.shape()[2];
        let out = if k == 1 {
            mix_forward(&xv, &wv, bv.as_deref())
        } else {
            conv_forward(&xv, &wv, bv.as_deref())
        };
        let want_x = self.requires_grad(x);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        self.op(out, &inputs, move |g| {
            let (gx, gw, gb) = if k == 1 { mix_backward(&xv, &wv, g, want_x) } else { conv_backward(&xv, &wv, g, want_x) };
            let mut v = vec![gx, Some(gw)];
            if has_bias {
                v.push(Some(gb));
            }
            v
        })
    }

    /// 1x1x1 convolution (channel mixing); weight `[co, ci]` or `[co, ci, 1, 1, 1]`.
    pub fn channel_mix(&mut self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let (xv, wv) = (self.rc(x), self.rc(w));
        let bv = bias.map(|b| self.rc(b));
        let out = mix_forward(&xv, &wv, bv.as_deref());
        let want_x = self.requires_grad(x);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        self.op(out, &inputs, move |g| {
            let (gx, gw, gb) = mix_backward(&xv, &wv, g, want_x);
            let mut v = vec![gx, Some(gw)];
            if has_bias {
                v.push(Some(gb));
            }
            v
        })
    }
}

fn mix_backward(x: &Tensor, w: &Tensor, g: &Tensor, want_x: bool) -> (Option<Tensor>, Tensor, Tensor) {
    let (b, ci) = (x.shape()[0], x.shape()[1]);
    let s: usize = x.shape()[2..].iter().product();
    let co = w.shape()[0];
    let mut gw = vec![0.0; co * ci];
    let mut gb = vec![0.0; co];
    let mut gx = want_x.then(|| vec![0.0; x.len()]);
    for n in 0..b {
        let gv = View::row_major(n * co * s, co, s);
        for c in 0..co {
            gb[c] += g.data()[(n * co + c) * s..(n * co + c + 1) * s].iter().sum::<f64>();
        }
        gemm(1.0, g.data(), gv, x.data(), View::row_major(n * ci * s, ci, s).t(), 1.0, &mut gw, View::row_major(0, co, ci));
        if let Some(gx) = gx.as_mut() {
            gemm(1.0, w.data(), View::row_major(0, co, ci).t(), g.data(), gv, 0.0, gx, View::row_major(n * ci * s, ci, s));
        }
    }
    (gx.map(|d| Tensor::from_vec(x.shape(), d)), Tensor::from_vec(w.shape(), gw), Tensor::from_vec(&[co], gb))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution used as an oracle.
    fn naive(x: &Tensor, w: &Tensor, bias: &[f64]) -> Tensor {
        let [b, ci, d0, d1, d2]: [usize; 5] = x.shape().try_into().unwrap();
        let [co, _, k, _, _]: [usize; 5] = w.shape().try_into().unwrap();
        let p = (k / 2) as isize;
        let mut out = Tensor::zeros(&[b, co, d0, d1, d2]);
        for n in 0..b {
            for o in 0..co {
                for i0 in 0..d0 {
                    for i1 in 0..d1 {
                        for i2 in 0..d2 {
                            let mut acc = bias[o];
                            for c in 0..ci {
                                for a0 in 0..k {
                                    for a1 in 0..k {
                                        for a2 in 0..k {
                                            let j0 = i0 as isize + a0 as isize - p;
                                            let j1 = i1 as isize + a1 as isize - p;
                                            let j2 = i2 as isize + a2 as isize - p;
                                            if j0 < 0 || j1 < 0 || j2 < 0 || j0 >= d0 as isize || j1 >= d1 as isize || j2 >= d2 as isize {
                                                continue;
                                            }
                                            let xi = (((n * ci + c) * d0 + j0 as usize) * d1 + j1 as usize) * d2 + j2 as usize;
                                            let wi = (((o * ci + c) * k + a0) * k + a1) * k + a2;
                                            acc += x.data()[xi] * w.data()[wi];
                                        }
                                    }
                                }
                            }
                            out.data_mut()[(((n * co + o) * d0 + i0) * d1 + i1) * d2 + i2] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed;
        let n = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
                })
                .collect(),
        )
    }

    #[test]
    fn matches_naive_convolution() {
        for &(k, dims) in &[(3usize, [4usize, 5, 3]), (5, [3, 2, 6]), (1, [2, 3, 4]), (3, [1, 1, 1])] {
            let x = pseudo(&[2, 3, dims[0], dims[1], dims[2]], 1);
            let w = pseudo(&[4, 3, k, k, k], 2);
            let bias = [0.1, -0.2, 0.3, 0.0];
            let fast = if k == 1 {
                mix_forward(&x, &w, Some(&Tensor::from_vec(&[4], bias.to_vec())))
            } else {
                conv_forward(&x, &w, Some(&Tensor::from_vec(&[4], bias.to_vec())))
            };
            let slow = naive(&x, &w, &bias);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "k={k} dims={dims:?}");
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), g> is bilinear, so <g, d/dx> and <g, d/dw> must reproduce it.
        let x = pseudo(&[1, 2, 3, 4, 5], 3);
        let w = pseudo(&[3, 2, 3, 3, 3], 4);
        let g = pseudo(&[1, 3, 3, 4, 5], 5);
        let y = conv_forward(&x, &w, None);
        let inner: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let (gx, gw, _) = conv_backward(&x, &w, &g, true);
        let via_x: f64 = gx.unwrap().data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let via_w: f64 = gw.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        assert!((inner - via_x).abs() < 1e-10);
        assert!((inner - via_w).abs() < 1e-10);
    }
}
