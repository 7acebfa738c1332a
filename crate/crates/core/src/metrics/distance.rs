//! Boundary extraction and exact anisotropic Euclidean distance transforms.

use ndarray::{Array3, Axis};

/// Foreground voxels with at least one background face neighbour; voxels on
/// the volume border count as touching background.
pub fn boundary(mask: &Array3<bool>) -> Array3<bool> {
    let (x, y, z) = mask.dim();
    Array3::from_shape_fn((x, y, z), |(i, j, k)| {
        if !mask[[i, j, k]] {
            return false;
        }
        let edge = i == 0 || j == 0 || k == 0 || i + 1 == x || j + 1 == y || k + 1 == z;
        edge || !mask[[i - 1, j, k]]
            || !mask[[i + 1, j, k]]
            || !mask[[i, j - 1, k]]
            || !mask[[i, j + 1, k]]
            || !mask[[i, j, k - 1]]
            || !mask[[i, j, k + 1]]
    })
}

/// Squared physical distance from every voxel centre to the nearest `sites`
/// voxel centre (infinite when there are no sites).
pub fn squared_distance_transform(sites: &Array3<bool>, spacing: [f64; 3]) -> Array3<f64> {
    let mut d = sites.mapv(|s| if s { 0.0 } else { f64::INFINITY });
    for (axis, &s) in spacing.iter().enumerate() {
        let n = d.len_of(Axis(axis));
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        let mut env = Envelope::with_capacity(n);
        for mut lane in d.lanes_mut(Axis(axis)) {
            for (dst, &v) in line.iter_mut().zip(lane.iter()) {
                *dst = v;
            }
            env.transform(&line, s, &mut out);
            for (dst, &v) in lane.iter_mut().zip(&out) {
                *dst = v;
            }
        }
    }
    d
}

/// Lower envelope of parabolas for the 1D transform (Felzenszwalb & Huttenlocher).
struct Envelope {
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Envelope {
            sites: Vec::with_capacity(n),
            bounds: Vec::with_capacity(n + 1),
        }
    }

    /// `out[i] = min_j f[j] + (s·(i − j))²`.
    fn transform(&mut self, f: &[f64], s: f64, out: &mut [f64]) {
        self.sites.clear();
        self.bounds.clear();
        let pos = |i: usize| s * i as f64;
        for q in (0..f.len()).filter(|&q| f[q].is_finite()) {
            let fq = f[q] + pos(q) * pos(q);
            loop {
                let Some(&p) = self.sites.last() else {
                    self.sites.push(q);
                    self.bounds.push(f64::NEG_INFINITY);
                    break;
                };
                let fp = f[p] + pos(p) * pos(p);
                let cross = (fq - fp) / (2.0 * (pos(q) - pos(p)));
                if cross <= *self.bounds.last().unwrap() {
                    self.sites.pop();
                    self.bounds.pop();
                } else {
                    self.sites.push(q);
                    self.bounds.push(cross);
                    break;
                }
            }
        }
        if self.sites.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (i, o) in out.iter_mut().enumerate() {
            while k + 1 < self.sites.len() && self.bounds[k + 1] < pos(i) {
                k += 1;
            }
            let v = self.sites[k];
            let d = s * (i as f64 - v as f64);
            *o = d * d + f[v];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let dims = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..9));
            let sites = Array3::from_shape_fn(dims, |_| rng.gen_bool(0.1));
            let spacing = [rng.gen_range(0.3..2.0), rng.gen_range(0.3..2.0), rng.gen_range(0.3..6.0)];
            let got = squared_distance_transform(&sites, spacing);
            let pts: Vec<_> = sites.indexed_iter().filter(|(_, &s)| s).map(|(p, _)| p).collect();
            for (p, &g) in got.indexed_iter() {
                let want = pts
                    .iter()
                    .map(|q| {
                        let dx = (p.0 as f64 - q.0 as f64) * spacing[0];
                        let dy = (p.1 as f64 - q.1 as f64) * spacing[1];
                        let dz = (p.2 as f64 - q.2 as f64) * spacing[2];
                        dx * dx + dy * dy + dz * dz
                    })
                    .fold(f64::INFINITY, f64::min);
                if want.is_infinite() {
                    assert!(g.is_infinite());
                } else {
                    assert!((g - want).abs() <= 1e-9 * (1.0 + want), "{p:?}: {g} vs {want}");
                }
            }
        }
    }

    #[test]
    fn solid_block_boundary_is_its_shell() {
        let mask = Array3::from_elem((4, 4, 4), true);
        let b = boundary(&mask);
        assert_eq!(b.iter().filter(|&&v| v).count(), 64 - 8);
        assert!(!b[[1, 1, 1]] && !b[[2, 2, 2]] && b[[0, 2, 2]]);
    }
}
