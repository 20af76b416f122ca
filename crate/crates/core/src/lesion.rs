//! rCBF → lesion probability, hard thresholding and the soft-Dice loss.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::volume::{BinaryMask3D, Dims3, ScalarMap3D};

pub const DEFAULT_CUTOFF: f64 = 0.38;
pub const DEFAULT_TEMPERATURE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct LesionProbabilityMap {
    probs: Vec<f64>,
    valid: BinaryMask3D,
}

impl LesionProbabilityMap {
    pub fn new(probs: Vec<f64>, valid: BinaryMask3D) -> Result<Self> {
        if probs.len() != valid.dims().len() {
            return Err(Error::Size {
                what: "probability map",
                expected: valid.dims().len(),
                actual: probs.len(),
            });
        }
        for (p, &m) in probs.iter().zip(valid.as_slice()) {
            if !(0.0..=1.0).contains(p) || (!m && *p != 0.0) {
                return Err(Error::Domain(format!("probability {p} invalid (inside mask: {m})")));
            }
        }
        Ok(Self { probs, valid })
    }

    /// Treats a binary mask as a (degenerate) probability map.
    pub fn from_mask(mask: &BinaryMask3D, valid: &BinaryMask3D) -> Result<Self> {
        let m = mask.and(valid)?;
        let probs = m.as_slice().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Self::new(probs, valid.clone())
    }

    pub fn dims(&self) -> Dims3 {
        self.valid.dims()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn valid_mask(&self) -> &BinaryMask3D {
        &self.valid
    }
}

fn check_positive(what: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} must be positive, got {v}")))
    }
}

/// `1 / (1 + exp((rcbf − cutoff) / temperature))` inside the valid mask.
pub fn lesion_probability(rcbf: &ScalarMap3D, cutoff: f64, temperature: f64) -> Result<LesionProbabilityMap> {
    check_positive("cutoff", cutoff)?;
    check_positive("temperature", temperature)?;
    let probs = rcbf
        .values()
        .iter()
        .zip(rcbf.valid_mask().as_slice())
        .map(|(&r, &m)| if m { math::sigmoid((cutoff - r) / temperature) } else { 0.0 })
        .collect();
    LesionProbabilityMap::new(probs, rcbf.valid_mask().clone())
}

/// Voxels with `rcbf < cutoff` inside the valid mask.
pub fn binarize(rcbf: &ScalarMap3D, cutoff: f64) -> Result<BinaryMask3D> {
    check_positive("cutoff", cutoff)?;
    let mask = rcbf
        .values()
        .iter()
        .zip(rcbf.valid_mask().as_slice())
        .map(|(&r, &m)| m && r < cutoff)
        .collect();
    BinaryMask3D::new(rcbf.dims(), mask)
}

/// Sums entering the soft-Dice loss, restricted to the valid mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct DiceSums {
    pub intersection: f64,
    pub truth: f64,
    pub pred: f64,
}

impl DiceSums {
    pub fn loss(&self) -> f64 {
        let denom = self.truth + self.pred;
        if denom == 0.0 {
            0.0
        } else {
            1.0 - 2.0 * self.intersection / denom
        }
    }

    /// `∂L/∂y_pred` for a voxel with the given truth label.
    pub fn dloss_dpred(&self, truth: bool) -> f64 {
        let denom = self.truth + self.pred;
        if denom == 0.0 {
            return 0.0;
        }
        let y = if truth { 1.0 } else { 0.0 };
        -2.0 * (y * denom - self.intersection) / (denom * denom)
    }
}

pub(crate) fn dice_sums(y_pred: &LesionProbabilityMap, y_true: &BinaryMask3D) -> Result<DiceSums> {
    y_true.check_dims(y_pred.dims())?;
    let mut s = DiceSums {
        intersection: 0.0,
        truth: 0.0,
        pred: 0.0,
    };
    for ((&p, &t), &m) in y_pred.probs().iter().zip(y_true.as_slice()).zip(y_pred.valid_mask().as_slice()) {
        if !m {
            continue;
        }
        if t {
            s.intersection += p;
            s.truth += 1.0;
        }
        s.pred += p;
    }
    Ok(s)
}

/// `1 − 2Σ(y_true·y_pred) / (Σy_true + Σy_pred)` over valid voxels; 0 when
/// both sums vanish.
pub fn soft_dice_loss(y_pred: &LesionProbabilityMap, y_true: &BinaryMask3D) -> Result<f64> {
    Ok(dice_sums(y_pred, y_true)?.loss())
}
