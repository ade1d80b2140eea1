//! Fused multi-head scaled dot-product attention within token windows.

use std::rc::Rc;

use super::{Graph, Var};
use crate::tensor::Tensor;

/// Which key tokens each query may attend to, per window position.
///
/// `allowed[(w * n + i) * n + j]` is true when query `i` of window `w` may
/// attend to key `j`. Window `w` of a batched input is `bw % windows`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub windows: usize,
    pub tokens: usize,
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    fn allows(&self, window: usize, i: usize, j: usize) -> bool {
        self.allowed[(window * self.tokens + i) * self.tokens + j]
    }
}

struct Dims {
    bw: usize,
    n: usize,
    c: usize,
    heads: usize,
    dh: usize,
}

fn dims(qkv: &Tensor, heads: usize) -> Dims {
    let [bw, n, c3]: [usize; 3] = qkv.shape().try_into().expect("qkv must be [windows, tokens, 3*channels]");
    assert_eq!(c3 % 3, 0, "qkv width must be a multiple of 3");
    let c = c3 / 3;
    assert_eq!(c % heads, 0, "embedding width {c} not divisible by {heads} heads");
    Dims { bw, n, c, heads, dh: c / heads }
}

/// Softmax-normalised attention weights `[windows, heads, n, n]`.
/// Disallowed pairs get a logit of negative infinity and hence weight 0.
pub fn attention_probabilities(qkv: &Tensor, bias: &Tensor, mask: Option<&AttentionMask>, heads: usize) -> Vec<f64> {
    let d = dims(qkv, heads);
    assert_eq!(bias.shape(), [heads, d.n, d.n], "relative bias shape");
    if let Some(m) = mask {
        assert_eq!(m.tokens, d.n, "mask token count");
        assert_eq!(d.bw % m.windows, 0, "mask window count");
    }
    let scale = 1.0 / (d.dh as f64).sqrt();
    let q = qkv.data();
    let stride = 3 * d.c;
    let mut probs = vec![0.0; d.bw * d.heads * d.n * d.n];
    let mut row = vec![0.0; d.n];
    for w in 0..d.bw {
        for h in 0..d.heads {
            for i in 0..d.n {
                let qi = (w * d.n + i) * stride + h * d.dh;
                let mut max = f64::NEG_INFINITY;
                for j in 0..d.n {
                    if mask.is_some_and(|m| !m.allows(w % m.windows, i, j)) {
                        row[j] = f64::NEG_INFINITY;
                        continue;
                    }
                    let kj = (w * d.n + j) * stride + d.c + h * d.dh;
                    let dot: f64 = (0..d.dh).map(|t| q[qi + t] * q[kj + t]).sum();
                    let logit = dot * scale + bias.data()[(h * d.n + i) * d.n + j];
                    row[j] = logit;
                    max = max.max(logit);
                }
                let base = ((w * d.heads + h) * d.n + i) * d.n;
                let mut total = 0.0;
                for j in 0..d.n {
                    let e = (row[j] - max).exp();
                    probs[base + j] = e;
                    total += e;
                }
                probs[base..base + d.n].iter_mut().for_each(|p| *p /= total);
            }
        }
    }
    probs
}

impl Graph {
    /// Windowed attention. `qkv` is `[windows, tokens, 3 * channels]` laid out
    /// as `[q | k | v]` with heads contiguous inside each block; `bias` is
    /// `[heads, tokens, tokens]`. Output is `[windows, tokens, channels]`.
    pub fn window_attention(&mut self, qkv: Var, bias: Var, mask: Option<Rc<AttentionMask>>, heads: usize) -> Var {
        let qv = self.rc(qkv);
        let d = dims(&qv, heads);
        let probs = {
            let bv = self.value(bias);
            Rc::new(attention_probabilities(&qv, bv, mask.as_deref(), heads))
        };
        let stride = 3 * d.c;
        let mut out = vec![0.0; d.bw * d.n * d.c];
        {
            let q = qv.data();
            for w in 0..d.bw {
                for h in 0..d.heads {
                    for i in 0..d.n {
                        let p = &probs[((w * d.heads + h) * d.n + i) * d.n..][..d.n];
                        let o = &mut out[(w * d.n + i) * d.c + h * d.dh..][..d.dh];
                        for (j, &pj) in p.iter().enumerate() {
                            if pj == 0.0 {
                                continue;
                            }
                            let vj = &q[(w * d.n + j) * stride + 2 * d.c + h * d.dh..][..d.dh];
                            o.iter_mut().zip(vj).for_each(|(a, b)| *a += pj * b);
                        }
                    }
                }
            }
        }
        let (bw, n, c, nh, dh) = (d.bw, d.n, d.c, d.heads, d.dh);
        let scale = 1.0 / (dh as f64).sqrt();
        self.op(Tensor::from_vec(&[bw, n, c], out), &[qkv, bias], move |g| {
            let q = qv.data();
            let go = g.data();
            let mut gqkv = vec![0.0; q.len()];
            let mut gbias = vec![0.0; nh * n * n];
            let mut ds = vec![0.0; n];
            for w in 0..bw {
                for h in 0..nh {
                    for i in 0..n {
                        let p = &probs[((w * nh + h) * n + i) * n..][..n];
                        let goi = &go[(w * n + i) * c + h * dh..][..dh];
                        // dP[i, j] = dO[i] . v[j]; dV[j] += P[i, j] dO[i]
                        let mut dot_pdp = 0.0;
                        for j in 0..n {
                            if p[j] == 0.0 {
                                ds[j] = 0.0;
                                continue;
                            }
                            let vo = (w * n + j) * stride + 2 * c + h * dh;
                            let dp: f64 = (0..dh).map(|t| goi[t] * q[vo + t]).sum();
                            for t in 0..dh {
                                gqkv[vo + t] += p[j] * goi[t];
                            }
                            ds[j] = dp;
                            dot_pdp += p[j] * dp;
                        }
                        let qo = (w * n + i) * stride + h * dh;
                        for j in 0..n {
                            if p[j] == 0.0 {
                                continue;
                            }
                            let s = p[j] * (ds[j] - dot_pdp);
                            gbias[(h * n + i) * n + j] += s;
                            let ko = (w * n + j) * stride + c + h * dh;
                            for t in 0..dh {
                                gqkv[qo + t] += scale * s * q[ko + t];
                                gqkv[ko + t] += scale * s * q[qo + t];
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::from_vec(qv.shape(), gqkv)), Some(Tensor::from_vec(&[nh, n, n], gbias))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed | 1;
        let n = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n)
                .map(|_| {
                    s = s.wrapping_mul(0x2545F4914F6CDD1D).wrapping_add(7);
                    ((s >> 12) % 4096) as f64 / 2048.0 - 1.0
                })
                .collect(),
        )
    }

    fn loss(g: &mut Graph, y: Var) -> Var {
        let w = pseudo(g.shape(y), 77);
        let w = g.constant(w);
        let p = g.mul(y, w);
        g.sum(p)
    }

    #[test]
    fn gradients_match_central_differences() {
        let (bw, n, c, heads) = (2, 5, 4, 2);
        let qkv = pseudo(&[bw, n, 3 * c], 1);
        let bias = pseudo(&[heads, n, n], 2);
        let mut allowed = vec![true; n * n];
        allowed[1] = false; // query 0 may not see key 1
        allowed[3 * n + 4] = false;
        let mask = Rc::new(AttentionMask { windows: 1, tokens: n, allowed });

        let eval = |qkv: &Tensor, bias: &Tensor| {
            let mut g = Graph::inference();
            let a = g.constant(qkv.clone());
            let b = g.constant(bias.clone());
            let y = g.window_attention(a, b, Some(mask.clone()), heads);
            let l = loss(&mut g, y);
            g.value(l).item()
        };
        let mut g = Graph::new();
        let a = g.leaf(qkv.clone());
        let b = g.leaf(bias.clone());
        let y = g.window_attention(a, b, Some(mask.clone()), heads);
        let l = loss(&mut g, y);
        let grads = g.backward(l);
        let h = 1e-6;
        for (which, base) in [(0, &qkv), (1, &bias)] {
            let analytic = grads.get(if which == 0 { a } else { b }).unwrap();
            for i in 0..base.len() {
                let mut p = base.clone();
                p.data_mut()[i] += h;
                let mut m = base.clone();
                m.data_mut()[i] -= h;
                let num = if which == 0 {
                    (eval(&p, &bias) - eval(&m, &bias)) / (2.0 * h)
                } else {
                    (eval(&qkv, &p) - eval(&qkv, &m)) / (2.0 * h)
                };
                assert!((num - analytic.data()[i]).abs() < 1e-7, "input {which} element {i}");
            }
        }
    }

    #[test]
    fn masked_pairs_get_zero_weight_and_rows_sum_to_one() {
        let n = 4;
        let qkv = pseudo(&[1, n, 6], 3);
        let bias = Tensor::zeros(&[1, n, n]);
        let mut allowed = vec![true; n * n];
        allowed[2] = false;
        let mask = AttentionMask { windows: 1, tokens: n, allowed };
        let p = attention_probabilities(&qkv, &bias, Some(&mask), 1);
        assert_eq!(p[2], 0.0);
        for i in 0..n {
            let s: f64 = p[i * n..(i + 1) * n].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
