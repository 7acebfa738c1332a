//! Connected-component filtering of binary masks.

use std::collections::VecDeque;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    /// Face neighbours.
    #[serde(rename = "6")]
    Six,
    /// Face, edge and corner neighbours.
    #[serde(rename = "26")]
    TwentySix,
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dx in -1..=1isize {
            for dy in -1..=1isize {
                for dz in -1..=1isize {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Component id per voxel (0 = background) and component sizes, numbered in
/// raster order of each component's first voxel.
pub fn label_components(mask: &Array3<bool>, conn: Connectivity) -> (Array3<u32>, Vec<usize>) {
    let (x, y, z) = mask.dim();
    let offsets = conn.offsets();
    let mut ids = Array3::<u32>::zeros((x, y, z));
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for ((i, j, k), &m) in mask.indexed_iter() {
        if !m || ids[[i, j, k]] != 0 {
            continue;
        }
        sizes.push(0);
        let id = sizes.len() as u32;
        ids[[i, j, k]] = id;
        queue.push_back([i, j, k]);
        while let Some(v) = queue.pop_front() {
            sizes[id as usize - 1] += 1;
            for o in &offsets {
                let n = [
                    v[0] as isize + o[0],
                    v[1] as isize + o[1],
                    v[2] as isize + o[2],
                ];
                if n[0] < 0 || n[1] < 0 || n[2] < 0 {
                    continue;
                }
                let n = [n[0] as usize, n[1] as usize, n[2] as usize];
                if n[0] >= x || n[1] >= y || n[2] >= z {
                    continue;
                }
                if mask[n] && ids[n] == 0 {
                    ids[n] = id;
                    queue.push_back(n);
                }
            }
        }
    }
    (ids, sizes)
}

/// Keeps only the largest component; ties keep the one containing the
/// lexicographically smallest voxel.
pub fn largest_component(mask: &Array3<bool>, conn: Connectivity) -> Array3<bool> {
    let (ids, sizes) = label_components(mask, conn);
    let mut best = 0;
    for (i, &s) in sizes.iter().enumerate() {
        if s > sizes[best] {
            best = i;
        }
    }
    if sizes.is_empty() {
        return Array3::from_elem(mask.dim(), false);
    }
    let keep = best as u32 + 1;
    ids.mapv(|v| v == keep)
}
