//! Connected-component labelling of binary masks (26-connectivity).

use std::collections::VecDeque;

use crate::volume::Mask;

/// A labelled connected region.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub voxels: usize,
    /// Mean voxel index (x, y, z).
    pub centroid: [f64; 3],
}

/// Labels every foreground voxel with a component id starting at 1; background is 0.
pub fn label_components(m: &Mask) -> (Vec<u32>, Vec<Component>) {
    let [nx, ny, nz] = m.shape();
    let mut labels = vec![0u32; m.data.len()];
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..m.data.len() {
        if m.data[start] == 0 || labels[start] != 0 {
            continue;
        }
        let id = comps.len() as u32 + 1;
        labels[start] = id;
        queue.push_back(start);
        let mut sum = [0.0; 3];
        let mut count = 0;
        while let Some(i) = queue.pop_front() {
            let c = m.geom.coords(i);
            count += 1;
            for a in 0..3 {
                sum[a] += c[a] as f64;
            }
            for dz in -1isize..=1 {
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (x, y, z) = (c[0] as isize + dx, c[1] as isize + dy, c[2] as isize + dz);
                        if x < 0 || y < 0 || z < 0 || x >= nx as isize || y >= ny as isize || z >= nz as isize {
                            continue;
                        }
                        let j = m.geom.index(x as usize, y as usize, z as usize);
                        if m.data[j] != 0 && labels[j] == 0 {
                            labels[j] = id;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        comps.push(Component { voxels: count, centroid: sum.map(|s| s / count as f64) });
    }
    (labels, comps)
}

pub fn count_components(m: &Mask) -> usize {
    label_components(m).1.len()
}
