//! Exact squared Euclidean distance transform on anisotropic grids
//! (separable lower envelope of parabolas).

/// For every voxel, the squared distance in mm² to the nearest seed voxel,
/// or `f64::INFINITY` when there are no seeds.
pub fn squared_distance_to(seeds: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut d: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let strides = [1, shape[0], shape[0] * shape[1]];
    let mut line = Vec::new();
    let mut out = Vec::new();
    let mut scratch = Envelope::default();
    for axis in 0..3 {
        let n = shape[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..shape[o2] {
            for a in 0..shape[o1] {
                let base = a * strides[o1] + b * strides[o2];
                line.clear();
                line.extend((0..n).map(|i| d[base + i * strides[axis]]));
                out.resize(n, 0.0);
                scratch.transform(&line, spacing[axis], &mut out);
                for i in 0..n {
                    d[base + i * strides[axis]] = out[i];
                }
            }
        }
    }
    d
}

#[derive(Default)]
struct Envelope {
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    /// `out[p] = min_q f[q] + (s (p - q))²`.
    fn transform(&mut self, f: &[f64], s: f64, out: &mut [f64]) {
        self.sites.clear();
        self.bounds.clear();
        let pos = |i: usize| i as f64 * s;
        let meet = |q: usize, v: usize| {
            ((f[q] + pos(q) * pos(q)) - (f[v] + pos(v) * pos(v))) / (2.0 * (pos(q) - pos(v)))
        };
        for q in (0..f.len()).filter(|&q| f[q].is_finite()) {
            while let Some(&v) = self.sites.last() {
                let x = meet(q, v);
                if x <= *self.bounds.last().unwrap() {
                    self.sites.pop();
                    self.bounds.pop();
                } else {
                    self.sites.push(q);
                    self.bounds.push(x);
                    break;
                }
            }
            if self.sites.is_empty() {
                self.sites.push(q);
                self.bounds.push(f64::NEG_INFINITY);
            }
        }
        if self.sites.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (p, o) in out.iter_mut().enumerate() {
            while k + 1 < self.sites.len() && self.bounds[k + 1] < pos(p) {
                k += 1;
            }
            let q = self.sites[k];
            let dx = s * (p as f64 - q as f64);
            *o = f[q] + dx * dx;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(seeds: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
        let coords = |i: usize| [i % shape[0], (i / shape[0]) % shape[1], i / (shape[0] * shape[1])];
        (0..seeds.len())
            .map(|i| {
                let c = coords(i);
                (0..seeds.len())
                    .filter(|&j| seeds[j])
                    .map(|j| {
                        let e = coords(j);
                        (0..3).map(|a| ((c[a] as f64 - e[a] as f64) * spacing[a]).powi(2)).sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn matches_brute_force_on_anisotropic_grid() {
        let shape = [5, 4, 6];
        let spacing = [0.7, 2.0, 1.3];
        let n = shape.iter().product();
        let seeds: Vec<bool> = (0..n).map(|i| (i * 37 + 11) % 17 == 0).collect();
        let a = squared_distance_to(&seeds, shape, spacing);
        let b = brute(&seeds, shape, spacing);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn no_seeds_is_infinite() {
        let d = squared_distance_to(&[false; 8], [2; 3], [1.0; 3]);
        assert!(d.iter().all(|x| x.is_infinite()));
    }
}
