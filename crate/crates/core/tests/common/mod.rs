#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use strokeseg::model::{Builder, ModelParams};
use strokeseg::tensor::Tensor;
use strokeseg::volume::{Geometry, Mask};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
}

/// Overwrites every trainable tensor with uniform values in `[-scale, scale]`.
pub fn randomize(params: &mut ModelParams, scale: f64, r: &mut ChaCha8Rng) {
    for (_, p) in params.iter_mut() {
        if p.trainable {
            for v in p.tensor.data_mut() {
                *v = r.random_range(-scale..scale);
            }
        }
    }
}

/// Parameters of one transformer block named `block`.
pub fn swin_block_params(c: usize, heads: usize, window: usize, seed: u64) -> ModelParams {
    let mut r = rng(seed);
    let mut b = Builder::new(Some(&mut r));
    b.swin_block("block", c, heads, window, 2);
    b.finish()
}

pub fn random_mask(shape: [usize; 3], spacing: [f64; 3], density: f64, r: &mut ChaCha8Rng) -> Mask {
    let g = Geometry::new(shape, spacing, [0.0; 3]).unwrap();
    let bits = (0..g.len()).map(|_| (r.random::<f64>() < density) as u8).collect();
    Mask::from_bits(g, bits).unwrap()
}

/// Foreground voxels with a face neighbour outside the mask or the grid,
/// found by direct neighbour inspection.
pub fn brute_boundary(m: &Mask) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = m.shape();
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !m.get(x, y, z) {
                    continue;
                }
                let c = [x as i64, y as i64, z as i64];
                let dims = [nx as i64, ny as i64, nz as i64];
                let exposed = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]].iter().any(|d| {
                    let n: Vec<i64> = (0..3).map(|a| c[a] + d[a]).collect();
                    (0..3).any(|a| n[a] < 0 || n[a] >= dims[a]) || !m.get(n[0] as usize, n[1] as usize, n[2] as usize)
                });
                if exposed {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// All-pairs directed distances in both directions, or `None` if a boundary is empty.
pub fn brute_distances(p: &Mask, g: &Mask) -> Option<Vec<f64>> {
    let (bp, bg) = (brute_boundary(p), brute_boundary(g));
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    let s = p.geom.spacing;
    let dist = |a: &[usize; 3], b: &[usize; 3]| {
        (0..3).map(|k| ((a[k] as f64 - b[k] as f64) * s[k]).powi(2)).sum::<f64>().sqrt()
    };
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| -> Vec<f64> {
        from.iter().map(|a| to.iter().map(|b| dist(a, b)).fold(f64::INFINITY, f64::min)).collect()
    };
    let mut d = directed(&bp, &bg);
    d.extend(directed(&bg, &bp));
    Some(d)
}

/// Order-statistic percentile with linear interpolation at rank `q (n - 1)`.
pub fn brute_percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if frac == 0.0 {
        v[lo]
    } else {
        v[lo] * (1.0 - frac) + v[lo + 1] * frac
    }
}

pub fn brute_dice(p: &Mask, g: &Mask) -> f64 {
    let a = p.data.iter().filter(|&&v| v != 0).count();
    let b = g.data.iter().filter(|&&v| v != 0).count();
    let both = p.data.iter().zip(&g.data).filter(|(&x, &y)| x != 0 && y != 0).count();
    if a + b == 0 {
        1.0
    } else {
        2.0 * both as f64 / (a + b) as f64
    }
}

/// Dense multi-head self-attention over all tokens of a `[1, c, d0, d1, d2]`
/// map that fits in one window, computed directly from the block parameters.
pub fn dense_attention(params: &ModelParams, prefix: &str, x: &Tensor, heads: usize, window: usize) -> Tensor {
    let s = x.shape();
    let (c, grid) = (s[1], [s[2], s[3], s[4]]);
    let n: usize = grid.iter().product();
    let tok = |i: usize, ch: usize| x.data()[ch * n + i];
    let lin = |name: &str, input: &dyn Fn(usize) -> f64, row: usize, width: usize| {
        let w = params.tensor(&format!("{prefix}.{name}.weight")).data();
        let b = params.tensor(&format!("{prefix}.{name}.bias")).data();
        b[row] + (0..width).map(|k| w[row * width + k] * input(k)).sum::<f64>()
    };
    let qkv: Vec<Vec<f64>> = (0..n).map(|i| (0..3 * c).map(|r| lin("qkv", &|k| tok(i, k), r, c)).collect()).collect();
    let table = params.tensor(&format!("{prefix}.rel_bias")).data();
    let span = 2 * window - 1;
    let coord = |t: usize| [t / (grid[1] * grid[2]), (t / grid[2]) % grid[1], t % grid[2]];
    let dh = c / heads;
    let mut attn = vec![vec![0.0; c]; n];
    for h in 0..heads {
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    let (ci, cj) = (coord(i), coord(j));
                    let off: Vec<usize> = (0..3).map(|a| ci[a] + window - 1 - cj[a]).collect();
                    let row = (off[0] * span + off[1]) * span + off[2];
                    let dot: f64 = (0..dh).map(|t| qkv[i][h * dh + t] * qkv[j][c + h * dh + t]).sum();
                    dot / (dh as f64).sqrt() + table[row * heads + h]
                })
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..dh {
                attn[i][h * dh + t] = (0..n).map(|j| e[j] / z * qkv[j][2 * c + h * dh + t]).sum();
            }
        }
    }
    let mut out = vec![0.0; c * n];
    for i in 0..n {
        for r in 0..c {
            out[r * n + i] = lin("proj", &|k| attn[i][k], r, c);
        }
    }
    Tensor::from_vec(s, out)
}
