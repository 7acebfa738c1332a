//! Physical geometry of voxel grids.
//!
//! Orientation codes follow the "points toward" convention in a RAS+ world
//! frame (the NIfTI scanner frame): the letter for a voxel axis names the
//! anatomical direction in which that axis index increases. `RAI` therefore
//! means axis 0 runs toward the patient's right, axis 1 toward anterior and
//! axis 2 toward inferior.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Signed permutation mapping voxel axes onto world (RAS+) axes.
///
/// `axes[k] = (w, s)` means voxel axis `k` points along world axis `w` with sign `s`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Orientation {
    axes: [(usize, i8); 3],
}

const LETTERS: [[char; 2]; 3] = [['R', 'L'], ['A', 'P'], ['S', 'I']];

fn letter_axis(c: char) -> Option<(usize, i8)> {
    match c.to_ascii_uppercase() {
        'R' => Some((0, 1)),
        'L' => Some((0, -1)),
        'A' => Some((1, 1)),
        'P' => Some((1, -1)),
        'S' => Some((2, 1)),
        'I' => Some((2, -1)),
        _ => None,
    }
}

impl Orientation {
    pub const RAI: Orientation = Orientation {
        axes: [(0, 1), (1, 1), (2, -1)],
    };
    pub const RAS: Orientation = Orientation {
        axes: [(0, 1), (1, 1), (2, 1)],
    };

    pub fn parse(code: &str) -> Result<Self> {
        let chars: Vec<char> = code.chars().collect();
        if chars.len() != 3 {
            let (letter, position) = chars
                .get(3)
                .map(|&c| (c, 3))
                .unwrap_or((chars.last().copied().unwrap_or(' '), chars.len()));
            return Err(Error::Orientation {
                code: code.to_string(),
                letter,
                position,
                reason: "code must have exactly three letters",
            });
        }
        let mut axes = [(0usize, 0i8); 3];
        let mut seen = [false; 3];
        for (k, &c) in chars.iter().enumerate() {
            let (w, s) = letter_axis(c).ok_or(Error::Orientation {
                code: code.to_string(),
                letter: c,
                position: k,
                reason: "letter is not one of R, L, A, P, S, I",
            })?;
            if seen[w] {
                return Err(Error::Orientation {
                    code: code.to_string(),
                    letter: c,
                    position: k,
                    reason: "anatomical axis used twice",
                });
            }
            seen[w] = true;
            axes[k] = (w, s);
        }
        Ok(Orientation { axes })
    }

    /// Builds an orientation from per-axis (world axis, sign) pairs.
    pub fn from_axes(axes: [(usize, i8); 3]) -> Result<Self> {
        let mut seen = [false; 3];
        for &(w, s) in &axes {
            if w > 2 || seen[w] || !(s == 1 || s == -1) {
                return Err(Error::Geometry(format!(
                    "{axes:?} is not a signed permutation"
                )));
            }
            seen[w] = true;
        }
        Ok(Orientation { axes })
    }

    pub fn axes(&self) -> [(usize, i8); 3] {
        self.axes
    }

    pub fn code(&self) -> String {
        self.axes
            .iter()
            .map(|&(w, s)| LETTERS[w][if s > 0 { 0 } else { 1 }])
            .collect()
    }

    /// Direction matrix with columns equal to the unit world vectors of each voxel axis.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        for (k, &(w, s)) in self.axes.iter().enumerate() {
            m[w][k] = f64::from(s);
        }
        m
    }

    /// Snaps an arbitrary 3×3 direction matrix (columns = axis directions) to
    /// the nearest signed permutation. Returns the orientation and whether the
    /// input was oblique.
    pub fn snap(matrix: [[f64; 3]; 3]) -> Result<(Self, bool)> {
        // Greedy assignment by largest absolute cosine; ties resolved by axis order.
        let mut cols = [[0.0f64; 3]; 3];
        for k in 0..3 {
            let norm = (0..3).map(|w| matrix[w][k].powi(2)).sum::<f64>().sqrt();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(Error::Geometry(format!("degenerate direction column {k}")));
            }
            for w in 0..3 {
                cols[k][w] = matrix[w][k] / norm;
            }
        }
        let mut axes = [(usize::MAX, 0i8); 3];
        let mut used_voxel = [false; 3];
        let mut used_world = [false; 3];
        for _ in 0..3 {
            let mut best = (0usize, 0usize, -1.0f64);
            for k in (0..3).filter(|&k| !used_voxel[k]) {
                for w in (0..3).filter(|&w| !used_world[w]) {
                    if cols[k][w].abs() > best.2 {
                        best = (k, w, cols[k][w].abs());
                    }
                }
            }
            let (k, w, _) = best;
            used_voxel[k] = true;
            used_world[w] = true;
            axes[k] = (w, if cols[k][w] < 0.0 { -1 } else { 1 });
        }
        let oblique = (0..3).any(|k| (cols[k][axes[k].0].abs() - 1.0).abs() > 1e-6);
        Ok((Orientation { axes }, oblique))
    }
}

impl FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Orientation::parse(s)
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

impl fmt::Debug for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Orientation({})", self.code())
    }
}

impl Serialize for Orientation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.code())
    }
}

impl<'de> Deserialize<'de> for Orientation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let code = String::deserialize(d)?;
        Orientation::parse(&code).map_err(serde::de::Error::custom)
    }
}

/// Spacing, origin and orientation of a voxel grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// mm per voxel along each voxel axis.
    pub spacing: [f64; 3],
    /// World (RAS+) mm coordinates of voxel (0, 0, 0).
    pub origin: [f64; 3],
    pub orientation: Orientation,
}

impl Geometry {
    pub fn new(spacing: [f64; 3], origin: [f64; 3], orientation: Orientation) -> Result<Self> {
        let g = Geometry {
            spacing,
            origin,
            orientation,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_spacing(spacing: [f64; 3]) -> Result<Self> {
        Geometry::new(spacing, [0.0; 3], Orientation::RAI)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, &s) in self.spacing.iter().enumerate() {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Geometry(format!("spacing[{k}] = {s} must be positive")));
            }
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Geometry(format!("non-finite origin {:?}", self.origin)));
        }
        Ok(())
    }

    /// World position of a (possibly fractional) voxel index.
    pub fn world(&self, index: [f64; 3]) -> [f64; 3] {
        let mut p = self.origin;
        for (k, &(w, s)) in self.orientation.axes.iter().enumerate() {
            p[w] += f64::from(s) * self.spacing[k] * index[k];
        }
        p
    }

    /// Continuous voxel index of a world position.
    pub fn index(&self, world: [f64; 3]) -> [f64; 3] {
        let mut idx = [0.0; 3];
        for (k, &(w, s)) in self.orientation.axes.iter().enumerate() {
            idx[k] = f64::from(s) * (world[w] - self.origin[w]) / self.spacing[k];
        }
        idx
    }

    /// 4×4 voxel-to-world affine.
    pub fn affine(&self) -> [[f64; 4]; 4] {
        let m = self.orientation.matrix();
        let mut a = [[0.0; 4]; 4];
        for r in 0..3 {
            for c in 0..3 {
                a[r][c] = m[r][c] * self.spacing[c];
            }
            a[r][3] = self.origin[r];
        }
        a[3][3] = 1.0;
        a
    }

    /// Same orientation, with spacing and origin equal to a relative 1e-5.
    pub fn approx_eq(&self, other: &Geometry) -> bool {
        let close = |x: [f64; 3], y: [f64; 3]| (0..3).all(|k| (x[k] - y[k]).abs() <= 1e-5 * (1.0 + x[k].abs()));
        self.orientation == other.orientation
            && close(self.spacing, other.spacing)
            && close(self.origin, other.origin)
    }

    pub fn describe(&self) -> String {
        format!(
            "{{orientation {}, spacing {:?}, origin {:?}}}",
            self.orientation, self.spacing, self.origin
        )
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}
