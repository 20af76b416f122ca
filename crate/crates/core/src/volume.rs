//! Spatial containers: the 4D perfusion series, per-voxel scalar maps and
//! binary masks. Voxels are stored in C order over `(z, y, x)`; the series
//! payload is time-major, `data[t * n_voxels + voxel]`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::curves::{TimeAxis, TimeSeries};
use crate::error::{check_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dims3 {
    pub z: usize,
    pub y: usize,
    pub x: usize,
}

impl Dims3 {
    pub fn new(z: usize, y: usize, x: usize) -> Result<Self> {
        if z == 0 || y == 0 || x == 0 {
            return Err(Error::Range {
                what: "spatial dims",
                detail: format!("({z}, {y}, {x}) must all be positive"),
            });
        }
        Ok(Self { z, y, x })
    }

    pub fn len(&self) -> usize {
        self.z * self.y * self.x
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.y + y) * self.x + x
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.x;
        let y = (i / self.x) % self.y;
        let z = i / (self.x * self.y);
        (z, y, x)
    }
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Size { what, expected, actual })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask3D {
    dims: Dims3,
    mask: Vec<bool>,
}

impl BinaryMask3D {
    pub fn new(dims: Dims3, mask: Vec<bool>) -> Result<Self> {
        check_len("mask", dims.len(), mask.len())?;
        Ok(Self { dims, mask })
    }

    pub fn full(dims: Dims3) -> Self {
        Self {
            dims,
            mask: vec![true; dims.len()],
        }
    }

    pub fn empty(dims: Dims3) -> Self {
        Self {
            dims,
            mask: vec![false; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, i: usize) -> bool {
        self.mask[i]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn any(&self) -> bool {
        self.mask.iter().any(|&m| m)
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        self.check_dims(other.dims)?;
        Ok(Self {
            dims: self.dims,
            mask: self.mask.iter().zip(&other.mask).map(|(a, b)| *a && *b).collect(),
        })
    }

    pub fn and_not(&self, other: &Self) -> Result<Self> {
        self.check_dims(other.dims)?;
        Ok(Self {
            dims: self.dims,
            mask: self.mask.iter().zip(&other.mask).map(|(a, b)| *a && !*b).collect(),
        })
    }

    /// `self ⊆ other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.dims == other.dims && self.mask.iter().zip(&other.mask).all(|(a, b)| !*a || *b)
    }

    pub(crate) fn check_dims(&self, dims: Dims3) -> Result<()> {
        if self.dims == dims {
            Ok(())
        } else {
            Err(Error::Size {
                what: "mask dims",
                expected: dims.len(),
                actual: self.dims.len(),
            })
        }
    }
}

/// Per-voxel scalar field. Values are exactly zero outside `valid_mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap3D {
    values: Vec<f64>,
    valid: BinaryMask3D,
}

impl ScalarMap3D {
    /// Zeroes every value outside `valid`.
    pub fn new(mut values: Vec<f64>, valid: BinaryMask3D) -> Result<Self> {
        check_len("scalar map", valid.dims().len(), values.len())?;
        for (v, &m) in values.iter_mut().zip(valid.as_slice()) {
            if !m {
                *v = 0.0;
            }
        }
        check_finite(&values, "scalar map")?;
        Ok(Self { values, valid })
    }

    pub fn dims(&self) -> Dims3 {
        self.valid.dims()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid_mask(&self) -> &BinaryMask3D {
        &self.valid
    }

    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> Result<Self> {
        Self::new(self.values.iter().map(|&v| f(v)).collect(), self.valid.clone())
    }
}

/// 4D perfusion series over `(T, Z, Y, X)` with voxel spacing in mm for
/// `(z, y, x)` and a brain mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D {
    axis: TimeAxis,
    dims: Dims3,
    spacing: [f64; 3],
    data: Vec<f64>,
    brain_mask: BinaryMask3D,
}

impl Volume4D {
    pub fn new(axis: TimeAxis, dims: Dims3, spacing: [f64; 3], data: Vec<f64>, brain_mask: BinaryMask3D) -> Result<Self> {
        check_len("volume payload", axis.n_points() * dims.len(), data.len())?;
        brain_mask.check_dims(dims)?;
        if !brain_mask.any() {
            return Err(Error::Degenerate("brain mask has no voxels".into()));
        }
        if !spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::Domain(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        check_finite(&data, "volume payload")?;
        Ok(Self {
            axis,
            dims,
            spacing,
            data,
            brain_mask,
        })
    }

    /// Builds a series from one curve per voxel (voxel-major input).
    pub fn from_curves(axis: TimeAxis, dims: Dims3, spacing: [f64; 3], curves: &[Vec<f64>], brain_mask: BinaryMask3D) -> Result<Self> {
        check_len("voxel curves", dims.len(), curves.len())?;
        let n = axis.n_points();
        let nv = dims.len();
        let mut data = vec![0.0; n * nv];
        for (v, c) in curves.iter().enumerate() {
            check_len("voxel curve", n, c.len())?;
            for (t, &value) in c.iter().enumerate() {
                data[t * nv + v] = value;
            }
        }
        Self::new(axis, dims, spacing, data, brain_mask)
    }

    pub fn axis(&self) -> TimeAxis {
        self.axis
    }

    pub fn n_time(&self) -> usize {
        self.axis.n_points()
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn brain_mask(&self) -> &BinaryMask3D {
        &self.brain_mask
    }

    pub fn with_brain_mask(&self, brain_mask: BinaryMask3D) -> Result<Self> {
        Self::new(self.axis, self.dims, self.spacing, self.data.clone(), brain_mask)
    }

    pub fn voxel_curve(&self, voxel: usize) -> Vec<f64> {
        let nv = self.dims.len();
        (0..self.n_time()).map(|t| self.data[t * nv + voxel]).collect()
    }

    pub fn voxel_series(&self, voxel: usize) -> TimeSeries {
        // Payload is finite by construction.
        TimeSeries::on_axis(self.axis, self.voxel_curve(voxel)).expect("finite payload")
    }

    /// Applies `f` to every voxel curve, keeping geometry and mask.
    pub fn map_curves<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&TimeSeries) -> Result<TimeSeries>,
    {
        let curves = (0..self.dims.len())
            .map(|v| f(&self.voxel_series(v)).map(TimeSeries::into_values))
            .collect::<Result<Vec<_>>>()?;
        Self::from_curves(self.axis, self.dims, self.spacing, &curves, self.brain_mask.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_index_roundtrip() {
        let d = Dims3::new(2, 3, 4).unwrap();
        for i in 0..d.len() {
            let (z, y, x) = d.coords(i);
            assert_eq!(d.index(z, y, x), i);
        }
        assert!(Dims3::new(0, 1, 1).is_err());
    }

    #[test]
    fn volume_requires_nonempty_brain() {
        let d = Dims3::new(1, 1, 2).unwrap();
        let axis = TimeAxis::new(3).unwrap();
        let err = Volume4D::new(axis, d, [1.0; 3], vec![0.0; 6], BinaryMask3D::empty(d));
        assert!(matches!(err, Err(Error::Degenerate(_))));
        assert!(Volume4D::new(axis, d, [1.0; 3], vec![0.0; 5], BinaryMask3D::full(d)).is_err());
    }

    #[test]
    fn curves_are_time_major() {
        let d = Dims3::new(1, 1, 2).unwrap();
        let axis = TimeAxis::new(3).unwrap();
        let v = Volume4D::from_curves(axis, d, [1.0; 3], &[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]], BinaryMask3D::full(d)).unwrap();
        assert_eq!(v.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(v.voxel_curve(1), vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn scalar_map_zeroes_outside_mask() {
        let d = Dims3::new(1, 1, 3).unwrap();
        let m = BinaryMask3D::new(d, vec![true, false, true]).unwrap();
        let s = ScalarMap3D::new(vec![1.0, 2.0, 3.0], m).unwrap();
        assert_eq!(s.values(), &[1.0, 0.0, 3.0]);
    }
}
