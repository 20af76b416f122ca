//! Separable boxcar smoothing of a 4D series with clamped edges.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::volume::Volume4D;

/// Half-widths of the boxcar along `(t, z, y, x)`; the window spans
/// `2r + 1` samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SmoothingRadii {
    pub t: usize,
    pub z: usize,
    pub y: usize,
    pub x: usize,
}

impl SmoothingRadii {
    pub fn is_identity(&self) -> bool {
        self.t == 0 && self.z == 0 && self.y == 0 && self.x == 0
    }
}

/// Boxcar mean along one axis of a C-ordered array viewed as
/// `(outer, len, inner)`.
fn boxcar_axis(data: &mut [f64], outer: usize, len: usize, inner: usize, radius: usize) {
    if radius == 0 || len == 0 {
        return;
    }
    let width = (2 * radius + 1) as f64;
    let mut line = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let at = |p: usize| (o * len + p) * inner + i;
            for (p, l) in line.iter_mut().enumerate() {
                *l = data[at(p)];
            }
            for p in 0..len {
                let mut acc = 0.0;
                for off in 0..=2 * radius {
                    let q = (p + off).saturating_sub(radius).min(len - 1);
                    acc += line[q];
                }
                data[at(p)] = acc / width;
            }
        }
    }
}

pub fn smooth(vol: &Volume4D, radii: SmoothingRadii) -> Result<Volume4D> {
    if radii.is_identity() {
        return Ok(vol.clone());
    }
    let d = vol.dims();
    let t = vol.n_time();
    let mut data: Vec<f64> = vol.data().to_vec();
    boxcar_axis(&mut data, 1, t, d.len(), radii.t);
    boxcar_axis(&mut data, t, d.z, d.y * d.x, radii.z);
    boxcar_axis(&mut data, t * d.z, d.y, d.x, radii.y);
    boxcar_axis(&mut data, t * d.z * d.y, d.x, 1, radii.x);
    Volume4D::new(vol.axis(), d, vol.spacing(), data, vol.brain_mask().clone())
}
