//! Synthetic perfusion phantoms with known AIF, residue functions, CBF and
//! lesion mask, generated through the same Volterra forward model that the
//! deconvolution inverts.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::curves::{delay_curve, gamma_variate, scale_curve, GammaVariateParams, TimeAxis, TimeSeries};
use crate::deconv::build_volterra;
use crate::error::{Error, Result};
use crate::math;
use crate::volume::{BinaryMask3D, Dims3, ScalarMap3D, Volume4D};

/// rCBF below which tissue counts as core lesion.
pub const LESION_RCBF_CUTOFF: f64 = 0.38;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PhantomSpec {
    pub n_time: usize,
    pub dims: Dims3,
    /// Voxel spacing in mm for `(z, y, x)`.
    pub spacing: [f64; 3],
    pub aif: GammaVariateParams,
    pub healthy_cbf: f64,
    /// Lesion CBF as a fraction of healthy CBF, in `(0, 0.38)`.
    pub lesion_cbf_fraction: f64,
    pub mtt_healthy: f64,
    pub mtt_lesion: f64,
    /// Semi-axes `(z, y, x)` of the centered lesion ellipsoid, in voxels.
    pub lesion_radii: [f64; 3],
    /// Noise standard deviation as a fraction of the peak noiseless tissue
    /// concentration.
    pub noise_sigma: f64,
    pub tissue_delay_max: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            n_time: 40,
            dims: Dims3 { z: 2, y: 32, x: 32 },
            spacing: [1.0, 1.0, 1.0],
            aif: GammaVariateParams {
                t0: 5.0,
                alpha: 3.0,
                beta: 1.5,
                amplitude: 10.0,
            },
            healthy_cbf: 1.0,
            lesion_cbf_fraction: 0.25,
            mtt_healthy: 4.0,
            mtt_lesion: 8.0,
            lesion_radii: [1.0, 8.0, 8.0],
            noise_sigma: 0.01,
            tissue_delay_max: 0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn noiseless(self) -> Self {
        Self { noise_sigma: 0.0, ..self }
    }

    fn lesion_mask(&self) -> BinaryMask3D {
        let d = self.dims;
        let center = [(d.z as f64 - 1.0) / 2.0, (d.y as f64 - 1.0) / 2.0, (d.x as f64 - 1.0) / 2.0];
        let mask = (0..d.len())
            .map(|i| {
                let (z, y, x) = d.coords(i);
                let q: f64 = [z, y, x]
                    .iter()
                    .zip(center.iter().zip(&self.lesion_radii))
                    .map(|(&p, (&c, &r))| {
                        let u = (p as f64 - c) / r;
                        u * u
                    })
                    .sum();
                q <= 1.0
            })
            .collect();
        BinaryMask3D::new(d, mask).expect("mask length matches dims")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Spec(m.into()));
        if self.dims.is_empty() {
            return bad("dims must be positive");
        }
        TimeAxis::new(self.n_time)?;
        if self.n_time < 3 {
            return bad("at least 3 time points are required");
        }
        self.aif.validate()?;
        if !(self.healthy_cbf > 0.0 && self.healthy_cbf.is_finite()) {
            return bad("healthy_cbf must be positive");
        }
        if !(self.lesion_cbf_fraction > 0.0 && self.lesion_cbf_fraction < LESION_RCBF_CUTOFF) {
            return Err(Error::Spec(format!(
                "lesion_cbf_fraction {} must lie in (0, {LESION_RCBF_CUTOFF})",
                self.lesion_cbf_fraction
            )));
        }
        if !(self.mtt_healthy > 0.0 && self.mtt_lesion > 0.0) {
            return bad("mean transit times must be positive");
        }
        if !self.spacing.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return bad("spacing must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be non-negative");
        }
        if self.tissue_delay_max >= self.n_time {
            return bad("tissue_delay_max must be smaller than the number of time points");
        }
        let half = [self.dims.z as f64 / 2.0, self.dims.y as f64 / 2.0, self.dims.x as f64 / 2.0];
        for (r, h) in self.lesion_radii.iter().zip(half) {
            if !(*r > 0.0 && *r <= h) {
                return Err(Error::Spec(format!(
                    "lesion radii {:?} do not fit inside dims {:?}",
                    self.lesion_radii, self.dims
                )));
            }
        }
        let lesion = self.lesion_mask();
        if !lesion.any() {
            return bad("lesion ellipsoid contains no voxel centers");
        }
        if lesion.count() == self.dims.len() {
            return bad("lesion ellipsoid leaves no healthy tissue");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub volume: Volume4D,
    pub true_aif: TimeSeries,
    pub true_cbf_map: ScalarMap3D,
    pub gt_mask: BinaryMask3D,
    pub healthy_mask: BinaryMask3D,
    /// Per-voxel ground-truth residue functions (voxel-major).
    pub true_residues: Vec<Vec<f64>>,
}

pub fn generate(spec: &PhantomSpec) -> Result<PhantomCase> {
    spec.validate()?;
    let axis = TimeAxis::new(spec.n_time)?;
    let d = spec.dims;
    let n = spec.n_time;
    let true_aif = gamma_variate(spec.aif, axis)?;
    let a = build_volterra(&true_aif)?;
    let lesion = spec.lesion_mask();
    let brain = BinaryMask3D::full(d);
    let healthy = brain.and_not(&lesion)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cbf: Vec<f64> = (0..d.len())
        .map(|v| {
            if lesion.get(v) {
                spec.healthy_cbf * spec.lesion_cbf_fraction
            } else {
                spec.healthy_cbf
            }
        })
        .collect();

    let mut residues = Vec::with_capacity(d.len());
    for (v, &flow) in cbf.iter().enumerate() {
        let mtt = if lesion.get(v) { spec.mtt_lesion } else { spec.mtt_healthy };
        let k = TimeSeries::on_axis(axis, (0..n).map(|t| flow * math::exp(-axis.time(t) / mtt)).collect())?;
        let delay = if spec.tissue_delay_max > 0 {
            rng.random_range(0..=spec.tissue_delay_max)
        } else {
            0
        };
        residues.push(delay_curve(&k, delay)?.into_values());
    }

    let mut curves: Vec<Vec<f64>> = residues
        .iter()
        .map(|k| (0..n).map(|i| (0..=i).map(|j| a[(i, j)] * k[j]).sum()).collect())
        .collect();
    if spec.noise_sigma > 0.0 {
        let peak = curves.iter().flatten().copied().fold(0.0, f64::max);
        let sigma = spec.noise_sigma * peak;
        for c in curves.iter_mut() {
            for x in c.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *x += sigma * z;
            }
        }
    }

    let volume = Volume4D::from_curves(axis, d, spec.spacing, &curves, brain.clone())?;
    let true_cbf_map = ScalarMap3D::new(cbf, brain)?;
    let mean_healthy = {
        let mut s = 0.0;
        for (v, &m) in true_cbf_map.values().iter().zip(healthy.as_slice()) {
            if m {
                s += v;
            }
        }
        s / healthy.count() as f64
    };
    let gt = true_cbf_map
        .values()
        .iter()
        .map(|v| v / mean_healthy < LESION_RCBF_CUTOFF)
        .collect();
    let gt_mask = BinaryMask3D::new(d, gt)?;
    Ok(PhantomCase {
        volume,
        true_aif,
        true_cbf_map,
        gt_mask,
        healthy_mask: healthy,
        true_residues: residues,
    })
}

/// The true AIF scaled by `scale` and then delayed by `delay` samples.
pub fn corrupt_aif(case: &PhantomCase, delay: usize, scale: f64) -> Result<TimeSeries> {
    delay_curve(&scale_curve(&case.true_aif, scale)?, delay)
}
