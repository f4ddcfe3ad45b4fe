//! Geometric transforms on NCHW tensors.
//!
//! Angles are counter-clockwise and rotations are about the pixel-grid
//! center `((H−1)/2, (W−1)/2)`. Quarter turns are pure index permutations;
//! continuous rotation/scaling interpolates bilinearly and is only used to
//! build transformed datasets.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Shape, Tensor4, TensorError};

/// An element of C4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuarterTurn {
    R0,
    R90,
    R180,
    R270,
}

impl QuarterTurn {
    pub const ALL: [QuarterTurn; 4] = [Self::R0, Self::R90, Self::R180, Self::R270];

    pub fn from_steps(steps: usize) -> Self {
        Self::ALL[steps % 4]
    }

    pub fn from_degrees(deg: u32) -> Option<Self> {
        match deg {
            0 => Some(Self::R0),
            90 => Some(Self::R90),
            180 => Some(Self::R180),
            270 => Some(Self::R270),
            _ => None,
        }
    }

    /// Number of 90° counter-clockwise steps.
    pub fn steps(self) -> usize {
        self as usize
    }

    pub fn degrees(self) -> u32 {
        90 * self.steps() as u32
    }

    pub fn compose(self, other: QuarterTurn) -> QuarterTurn {
        Self::from_steps(self.steps() + other.steps())
    }

    pub fn inverse(self) -> QuarterTurn {
        Self::from_steps(4 - self.steps())
    }
}

impl fmt::Display for QuarterTurn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.degrees())
    }
}

fn check_square(shape: Shape, op: &'static str) -> Result<()> {
    if shape[2] != shape[3] {
        return Err(TensorError::InvalidShape {
            op,
            detail: format!("spatial dims must be square, got {}x{}", shape[2], shape[3]),
        });
    }
    Ok(())
}

/// Source coordinate read by output pixel `(h, w)` of a side-`s` map.
#[inline]
fn rot_source(turn: QuarterTurn, s: usize, h: usize, w: usize) -> (usize, usize) {
    match turn {
        QuarterTurn::R0 => (h, w),
        QuarterTurn::R90 => (w, s - 1 - h),
        QuarterTurn::R180 => (s - 1 - h, s - 1 - w),
        QuarterTurn::R270 => (s - 1 - w, h),
    }
}

pub(crate) fn rot90_data(x: &[f64], shape: Shape, turn: QuarterTurn) -> Vec<f64> {
    if turn == QuarterTurn::R0 {
        return x.to_vec();
    }
    let [n, c, s, _] = shape;
    let area = s * s;
    let mut out = vec![0.0; x.len()];
    for plane in 0..n * c {
        let src = &x[plane * area..(plane + 1) * area];
        let dst = &mut out[plane * area..(plane + 1) * area];
        for h in 0..s {
            for w in 0..s {
                let (sh, sw) = rot_source(turn, s, h, w);
                dst[h * s + w] = src[sh * s + sw];
            }
        }
    }
    out
}

/// Rotates every plane of a square-map tensor counter-clockwise by `turn`.
/// For 90°: `out[n,c,h,w] = in[n,c,w,H−1−h]`.
pub fn rot90(x: &Tensor4, turn: QuarterTurn) -> Result<Tensor4> {
    check_square(x.shape(), "rot90")?;
    Tensor4::from_vec(x.shape(), rot90_data(x.data(), x.shape(), turn))
}

/// Undoes the alignment change introduced by `turn`: `rot90(z, turn⁻¹)`.
pub fn reverse(z: &Tensor4, turn: QuarterTurn) -> Result<Tensor4> {
    check_square(z.shape(), "reverse")?;
    rot90(z, turn.inverse())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousTransform {
    angle_deg: f64,
    scale: f64,
    fill: f64,
}

impl ContinuousTransform {
    pub fn new(angle_deg: f64, scale: f64, fill: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(TensorError::InvalidShape {
                op: "warp",
                detail: format!("scale must be positive and finite, got {scale}"),
            });
        }
        if !angle_deg.is_finite() {
            return Err(TensorError::InvalidShape {
                op: "warp",
                detail: format!("angle must be finite, got {angle_deg}"),
            });
        }
        Ok(Self {
            angle_deg: angle_deg.rem_euclid(360.0),
            scale,
            fill,
        })
    }

    pub fn rotation(angle_deg: f64) -> Result<Self> {
        Self::new(angle_deg, 1.0, 0.0)
    }

    pub fn angle_deg(&self) -> f64 {
        self.angle_deg
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn fill(&self) -> f64 {
        self.fill
    }
}

/// `(sin, cos)` of an angle in degrees, exact at multiples of 90°.
fn sin_cos_deg(deg: f64) -> (f64, f64) {
    if deg.fract() == 0.0 && (deg as i64).rem_euclid(90) == 0 {
        match (deg as i64).rem_euclid(360) {
            0 => (0.0, 1.0),
            90 => (1.0, 0.0),
            180 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        deg.to_radians().sin_cos()
    }
}

/// Rotates counter-clockwise by the transform's angle, then magnifies by its
/// scale, about the image center. Each output pixel is inverse-mapped into
/// the input and sampled bilinearly; taps outside the input read `fill`.
pub fn warp(x: &Tensor4, t: &ContinuousTransform) -> Result<Tensor4> {
    check_square(x.shape(), "warp")?;
    let [n, c, s, _] = x.shape();
    let area = s * s;
    let center = (s as f64 - 1.0) / 2.0;
    let (sin, cos) = sin_cos_deg(t.angle_deg);
    let inv_scale = 1.0 / t.scale;

    // Source (row, col) per output pixel is shared by every plane.
    let coords: Vec<(f64, f64)> = (0..s)
        .flat_map(|i| (0..s).map(move |j| (i, j)))
        .map(|(i, j)| {
            let v = i as f64 - center;
            let u = j as f64 - center;
            let col = center + (cos * u - sin * v) * inv_scale;
            let row = center + (sin * u + cos * v) * inv_scale;
            (row, col)
        })
        .collect();

    let mut out = vec![0.0; x.len()];
    for plane in 0..n * c {
        let src = &x.data()[plane * area..(plane + 1) * area];
        let dst = &mut out[plane * area..(plane + 1) * area];
        for (d, &(row, col)) in dst.iter_mut().zip(&coords) {
            *d = bilinear(src, s, row, col, t.fill);
        }
    }
    Tensor4::from_vec(x.shape(), out)
}

fn bilinear(src: &[f64], s: usize, row: f64, col: f64, fill: f64) -> f64 {
    let r0 = row.floor();
    let c0 = col.floor();
    let fr = row - r0;
    let fc = col - c0;
    let (r0, c0) = (r0 as i64, c0 as i64);
    let tap = |r: i64, c: i64| -> f64 {
        if r < 0 || c < 0 || r >= s as i64 || c >= s as i64 {
            fill
        } else {
            src[r as usize * s + c as usize]
        }
    };
    let mut acc = 0.0;
    for (dr, wr) in [(0, 1.0 - fr), (1, fr)] {
        for (dc, wc) in [(0, 1.0 - fc), (1, fc)] {
            let weight = wr * wc;
            // zero-weight taps are skipped so grid-exact samples copy bits
            if weight != 0.0 {
                acc += weight * tap(r0 + dr, c0 + dc);
            }
        }
    }
    acc
}
