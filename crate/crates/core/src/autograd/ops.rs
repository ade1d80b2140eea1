use std::rc::Rc;

use super::gemm::{gemm, View};
use super::{Graph, Var, NO_SOURCE};
use crate::tensor::Tensor;

/// Per-channel batch mean and unbiased variance from a training-mode
/// batch-norm call, for updating running statistics.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
            av.zip_map(bv, |x, y| x + y)
        };
        self.op(out, &[a, b], |g| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let out = av.zip_map(&bv, |x, y| x * y);
        self.op(out, &[a, b], move |g| vec![Some(g.zip_map(&bv, |g, y| g * y)), Some(g.zip_map(&av, |g, x| g * x))])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.op(out, &[a], move |g| vec![Some(g.map(|g| g * s))])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let out = Tensor::scalar(self.value(a).sum());
        self.op(out, &[a], move |g| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = av.map(|x| x * x);
        self.op(out, &[a], move |g| vec![Some(g.zip_map(&av, |g, x| 2.0 * g * x))])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = av.map(|x| x.max(0.0));
        self.op(out, &[a], move |g| vec![Some(g.zip_map(&av, |g, x| if x > 0.0 { g } else { 0.0 }))])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let y = Rc::new(out.clone());
        self.op(out, &[a], move |g| vec![Some(g.zip_map(&y, |g, s| g * s * (1.0 - s)))])
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = av.map(gelu);
        self.op(out, &[a], move |g| vec![Some(g.zip_map(&av, |g, x| g * gelu_grad(x)))])
    }

    /// Channel-wise PReLU on `[batch, channels, ...]`; `slope` is `[channels]`.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Var {
        let (xv, sv) = (self.rc(x), self.rc(slope));
        let (b, c) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(sv.len(), c, "prelu slope count");
        let s: usize = xv.shape()[2..].iter().product();
        let mut out = Tensor::zeros(xv.shape());
        for n in 0..b {
            for ch in 0..c {
                let a = sv.data()[ch];
                let base = (n * c + ch) * s;
                for i in base..base + s {
                    let v = xv.data()[i];
                    out.data_mut()[i] = if v > 0.0 { v } else { a * v };
                }
            }
        }
        self.op(out, &[x, slope], move |g| {
            let mut gx = Tensor::zeros(xv.shape());
            let mut gs = vec![0.0; c];
            for n in 0..b {
                for ch in 0..c {
                    let a = sv.data()[ch];
                    let base = (n * c + ch) * s;
                    for i in base..base + s {
                        let v = xv.data()[i];
                        let gi = g.data()[i];
                        if v > 0.0 {
                            gx.data_mut()[i] = gi;
                        } else {
                            gx.data_mut()[i] = a * gi;
                            gs[ch] += gi * v;
                        }
                    }
                }
            }
            vec![Some(gx), Some(Tensor::from_vec(&[c], gs))]
        })
    }

    /// Multiplies by a fixed mask (already scaled by `1 / keep_probability`).
    pub fn apply_mask(&mut self, x: Var, mask: Rc<Vec<f64>>) -> Var {
        let out = {
            let xv = self.value(x);
            assert_eq!(xv.len(), mask.len(), "mask length");
            let mut out = xv.clone();
            out.data_mut().iter_mut().zip(mask.iter()).for_each(|(v, m)| *v *= m);
            out
        };
        self.op(out, &[x], move |g| {
            let mut gx = g.clone();
            gx.data_mut().iter_mut().zip(mask.iter()).for_each(|(v, m)| *v *= m);
            vec![Some(gx)]
        })
    }

    /// Concatenates `[b, ca, ...]` and `[b, cb, ...]` along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa[0], sb[0], "concat batch mismatch");
        assert_eq!(sa[2..], sb[2..], "concat spatial mismatch");
        let n = sa[0];
        let (ca, cb) = (sa[1], sb[1]);
        let s: usize = sa[2..].iter().product();
        let mut out_shape = sa.clone();
        out_shape[1] = ca + cb;
        let mut out = Vec::with_capacity(n * (ca + cb) * s);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..n {
                out.extend_from_slice(&av[i * ca * s..(i + 1) * ca * s]);
                out.extend_from_slice(&bv[i * cb * s..(i + 1) * cb * s]);
            }
        }
        self.op(Tensor::from_vec(&out_shape, out), &[a, b], move |g| {
            let mut ga = Vec::with_capacity(n * ca * s);
            let mut gb = Vec::with_capacity(n * cb * s);
            for i in 0..n {
                let base = i * (ca + cb) * s;
                ga.extend_from_slice(&g.data()[base..base + ca * s]);
                gb.extend_from_slice(&g.data()[base + ca * s..base + (ca + cb) * s]);
            }
            vec![Some(Tensor::from_vec(&sa, ga)), Some(Tensor::from_vec(&sb, gb))]
        })
    }

    /// `out[i] = x[index[i]]`, or 0 where `index[i] == NO_SOURCE`.
    /// Gradients scatter-add back to the sources.
    pub fn gather(&mut self, x: Var, index: Rc<[u32]>, out_shape: &[usize]) -> Var {
        assert_eq!(index.len(), out_shape.iter().product::<usize>(), "gather index length");
        let in_shape = self.shape(x).to_vec();
        let out = {
            let xv = self.value(x).data();
            index.iter().map(|&i| if i == NO_SOURCE { 0.0 } else { xv[i as usize] }).collect()
        };
        self.op(Tensor::from_vec(out_shape, out), &[x], move |g| {
            let mut gx = Tensor::zeros(&in_shape);
            let d = gx.data_mut();
            for (&i, &gv) in index.iter().zip(g.data()) {
                if i != NO_SOURCE {
                    d[i as usize] += gv;
                }
            }
            vec![Some(gx)]
        })
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let in_shape = self.shape(x).to_vec();
        let out = self.value(x).clone().reshape(shape);
        self.op(out, &[x], move |g| vec![Some(g.clone().reshape(&in_shape))])
    }

    /// `x [m, k] * w^T + bias` with `w [n, k]`, `bias [n]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let (xv, wv) = (self.rc(x), self.rc(w));
        let k = *xv.shape().last().unwrap();
        let m = xv.len() / k;
        let n = wv.shape()[0];
        assert_eq!(wv.shape()[1], k, "linear weight mismatch");
        let mut out = vec![0.0; m * n];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bv);
            }
        }
        gemm(1.0, xv.data(), View::row_major(0, m, k), wv.data(), View::row_major(0, n, k).t(), 1.0, &mut out, View::row_major(0, m, n));
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let want_x = self.requires_grad(x);
        let has_bias = bias.is_some();
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.op(Tensor::from_vec(&shape, out), &inputs, move |g| {
            let gv = View::row_major(0, m, n);
            let gx = want_x.then(|| {
                let mut gx = vec![0.0; m * k];
                gemm(1.0, g.data(), gv, wv.data(), View::row_major(0, n, k), 0.0, &mut gx, View::row_major(0, m, k));
                Tensor::from_vec(xv.shape(), gx)
            });
            let mut gw = vec![0.0; n * k];
            gemm(1.0, g.data(), gv.t(), xv.data(), View::row_major(0, m, k), 0.0, &mut gw, View::row_major(0, n, k));
            let mut v = vec![gx, Some(Tensor::from_vec(wv.shape(), gw))];
            if has_bias {
                let mut gb = vec![0.0; n];
                for row in g.data().chunks_exact(n) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                v.push(Some(Tensor::from_vec(&[n], gb)));
            }
            v
        })
    }

    /// Batch normalisation over `[batch, channels, ...]`.
    ///
    /// With `running = None` the batch statistics normalise the input and are
    /// returned; otherwise the given `(mean, var)` are used as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> (Var, Option<BatchStats>) {
        let xv = self.rc(x);
        let gv = self.rc(gamma);
        let (b, c) = (xv.shape()[0], xv.shape()[1]);
        let s: usize = xv.shape()[2..].iter().product();
        let count = (b * s) as f64;
        let channel = move |n: usize, ch: usize| (n * c + ch) * s..(n * c + ch + 1) * s;

        let (mean, var, stats) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), None),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mu = (0..b).map(|n| xv.data()[channel(n, ch)].iter().sum::<f64>()).sum::<f64>() / count;
                    let ss = (0..b)
                        .map(|n| xv.data()[channel(n, ch)].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>())
                        .sum::<f64>();
                    mean[ch] = mu;
                    var[ch] = ss / count;
                }
                let unbiased = var.iter().map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v }).collect();
                (mean.clone(), var, Some(BatchStats { mean, var_unbiased: unbiased }))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(xv.shape());
        let mut out = Tensor::zeros(xv.shape());
        {
            let bv = self.value(beta).data();
            for n in 0..b {
                for ch in 0..c {
                    for i in channel(n, ch) {
                        let h = (xv.data()[i] - mean[ch]) * inv_std[ch];
                        xhat.data_mut()[i] = h;
                        out.data_mut()[i] = gv.data()[ch] * h + bv[ch];
                    }
                }
            }
        }
        let batch_mode = running.is_none();
        let var_out = self.op(out, &[x, gamma, beta], move |g| {
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for n in 0..b {
                for ch in 0..c {
                    for i in channel(n, ch) {
                        ggamma[ch] += g.data()[i] * xhat.data()[i];
                        gbeta[ch] += g.data()[i];
                    }
                }
            }
            let mut gx = Tensor::zeros(xhat.shape());
            for ch in 0..c {
                let scale = gv.data()[ch] * inv_std[ch];
                if batch_mode {
                    let mg = gbeta[ch] / count;
                    let mgx = ggamma[ch] / count;
                    for n in 0..b {
                        for i in channel(n, ch) {
                            gx.data_mut()[i] = scale * (g.data()[i] - mg - xhat.data()[i] * mgx);
                        }
                    }
                } else {
                    for n in 0..b {
                        for i in channel(n, ch) {
                            gx.data_mut()[i] = scale * g.data()[i];
                        }
                    }
                }
            }
            vec![Some(gx), Some(Tensor::from_vec(&[c], ggamma)), Some(Tensor::from_vec(&[c], gbeta))]
        });
        (var_out, stats)
    }

    /// Layer normalisation over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.rc(x);
        let gv = self.rc(gamma);
        let c = *xv.shape().last().unwrap();
        assert_eq!(gv.len(), c, "layer norm width");
        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        {
            let bv = self.value(beta).data();
            for r in 0..rows {
                let row = &xv.data()[r * c..(r + 1) * c];
                let mu = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..c {
                    let h = (row[j] - mu) * is;
                    xhat[r * c + j] = h;
                    out[r * c + j] = gv.data()[j] * h + bv[j];
                }
            }
        }
        let shape = xv.shape().to_vec();
        self.op(Tensor::from_vec(&shape, out), &[x, gamma, beta], move |g| {
            let mut gx = vec![0.0; xhat.len()];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for r in 0..rows {
                let gr = &g.data()[r * c..(r + 1) * c];
                let hr = &xhat[r * c..(r + 1) * c];
                let mut mean_dh = 0.0;
                let mut mean_dh_h = 0.0;
                for j in 0..c {
                    ggamma[j] += gr[j] * hr[j];
                    gbeta[j] += gr[j];
                    let dh = gr[j] * gv.data()[j];
                    mean_dh += dh;
                    mean_dh_h += dh * hr[j];
                }
                mean_dh /= c as f64;
                mean_dh_h /= c as f64;
                for j in 0..c {
                    let dh = gr[j] * gv.data()[j];
                    gx[r * c + j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                }
            }
            vec![
                Some(Tensor::from_vec(&shape, gx)),
                Some(Tensor::from_vec(&[c], ggamma)),
                Some(Tensor::from_vec(&[c], gbeta)),
            ]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` around `x`, element by element.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed.wrapping_add(0x9E3779B97F4A7C15);
        let n = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n)
                .map(|_| {
                    s ^= s << 13;
                    s ^= s >> 7;
                    s ^= s << 17;
                    (s % 2000) as f64 / 1000.0 - 1.0
                })
                .collect(),
        )
    }

    /// Weighted sum with fixed pseudo-random weights, to avoid degenerate
    /// gradients (e.g. sum of a normalised output).
    fn project(g: &mut Graph, y: Var, seed: u64) -> Var {
        let w = pseudo(g.shape(y), seed);
        let w = g.constant(w);
        let p = g.mul(y, w);
        g.sum(p)
    }

    fn check(input: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let f = |t: &Tensor| {
            let mut g = Graph::inference();
            let x = g.constant(t.clone());
            let y = build(&mut g, x);
            let l = project(&mut g, y, 99);
            g.value(l).item()
        };
        let mut g = Graph::new();
        let x = g.leaf(input.clone());
        let y = build(&mut g, x);
        let l = project(&mut g, y, 99);
        let grads = g.backward(l);
        let analytic = grads.get(x).unwrap();
        let numeric = numeric_grad(&input, &f);
        let err = analytic.max_abs_diff(&numeric);
        assert!(err < 1e-6, "max abs gradient error {err}");
    }

    #[test]
    fn elementwise_gradients() {
        check(pseudo(&[2, 3, 2], 1), |g, x| g.gelu(x));
        check(pseudo(&[2, 3, 2], 2), |g, x| g.sigmoid(x));
        check(pseudo(&[2, 3, 2], 3), |g, x| g.square(x));
        check(pseudo(&[2, 3, 2], 4), |g, x| {
            let s = g.constant(Tensor::from_vec(&[3], vec![0.25, -0.5, 2.0]));
            g.prelu(x, s)
        });
    }

    #[test]
    fn structural_gradients() {
        check(pseudo(&[2, 2, 3], 5), |g, x| {
            let y = g.scale(x, 3.0);
            g.concat_channels(x, y)
        });
        let index: Rc<[u32]> = vec![5, NO_SOURCE, 0, 5, 2].into();
        check(pseudo(&[6], 6), move |g, x| g.gather(x, index.clone(), &[5]));
    }

    #[test]
    fn linear_and_norm_gradients() {
        let w = pseudo(&[4, 3], 7);
        let b = pseudo(&[4], 8);
        check(pseudo(&[5, 3], 9), move |g, x| {
            let w = g.constant(w.clone());
            let b = g.constant(b.clone());
            g.linear(x, w, Some(b))
        });
        check(pseudo(&[4, 6], 10), |g, x| {
            let gamma = g.constant(pseudo(&[6], 11));
            let beta = g.constant(pseudo(&[6], 12));
            g.layer_norm(x, gamma, beta, 1e-5)
        });
        check(pseudo(&[2, 3, 2, 2, 1], 13), |g, x| {
            let gamma = g.constant(pseudo(&[3], 14));
            let beta = g.constant(pseudo(&[3], 15));
            g.batch_norm(x, gamma, beta, None, 1e-5).0
        });
        check(pseudo(&[2, 3, 2, 2, 1], 16), |g, x| {
            let gamma = g.constant(pseudo(&[3], 17));
            let beta = g.constant(pseudo(&[3], 18));
            g.batch_norm(x, gamma, beta, Some((&[0.1, 0.2, 0.3], &[1.0, 2.0, 0.5])), 1e-5).0
        });
    }

    #[test]
    fn conv_gradients() {
        let w = pseudo(&[2, 3, 3, 3, 3], 19);
        check(pseudo(&[1, 3, 3, 2, 4], 20), move |g, x| {
            let w = g.constant(w.clone());
            g.conv3d(x, w, None)
        });
        let wm = pseudo(&[4, 3], 21);
        check(pseudo(&[2, 3, 2, 2, 2], 22), move |g, x| {
            let w = g.constant(wm.clone());
            g.channel_mix(x, w, None)
        });
    }

    #[test]
    fn inference_graph_keeps_no_closures() {
        let mut g = Graph::inference();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.square(x);
        assert!(!g.requires_grad(y));
        assert_eq!(g.value(y).item(), 4.0);
    }
}
