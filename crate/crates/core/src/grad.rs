//! Exact gradient of the soft-Dice loss with respect to the AIF samples.
//!
//! The forward chain is `AIF → Volterra matrix → SVD / Tikhonov solve → CBF
//! (peak of k) → rCBF → sigmoid → soft Dice`. The Tikhonov solution
//! `Σ f_i (u_iᵀc / σ_i) v_i` with `λ = λ_rel σ_1` equals
//! `(AᵀA + λ²I)⁻¹ Aᵀ c`, so the backward pass uses the adjoint of that
//! normal-equation form. With `w = (AᵀA + λ²I)⁻¹ ∂L/∂k` and residual
//! `r = c − A k`, the matrix gradient is `r wᵀ − (A w) kᵀ` plus the path
//! through `λ`, which enters via `∂σ_1/∂A = u_1 v_1ᵀ`.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::curves::TimeSeries;
use crate::deconv::{self, cbf_map_from_residues, residues, system_for, volterra_adjoint, FilterMode, VolterraSystem};
use crate::error::{Error, Result};
use crate::lesion::{dice_sums, lesion_probability, DiceSums, LesionProbabilityMap};
use crate::math;
use crate::pipeline::PipelineConfig;
use crate::smoothing::smooth;
use crate::volume::{BinaryMask3D, ScalarMap3D, Volume4D};

/// Relative gap below which two singular values count as repeated.
pub const REPEATED_SIGMA_REL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GradientWarnings {
    /// Some retained singular values are within [`REPEATED_SIGMA_REL`].
    pub repeated_singular_values: bool,
    /// Number of voxels whose residue peak is attained at more than one index.
    pub tied_argmax_voxels: usize,
}

impl GradientWarnings {
    pub fn any(&self) -> bool {
        self.repeated_singular_values || self.tied_argmax_voxels > 0
    }
}

/// `∂L/∂c_art(t_j)` for every AIF sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
    pub warnings: GradientWarnings,
}

impl GradientVector {
    pub fn norm(&self) -> f64 {
        math::norm2(&self.values)
    }
}

/// Intermediates of one forward evaluation.
#[derive(Debug, Clone)]
pub struct PipelineTape {
    aif: Vec<f64>,
    sys: VolterraSystem,
    curves: Vec<Vec<f64>>,
    residues: Vec<Vec<f64>>,
    argmax: Vec<usize>,
    cbf: ScalarMap3D,
    healthy: BinaryMask3D,
    healthy_mean: f64,
    rcbf: ScalarMap3D,
    probs: LesionProbabilityMap,
    y_true: BinaryMask3D,
    sums: DiceSums,
    config: PipelineConfig,
    loss: f64,
}

impl PipelineTape {
    pub fn loss(&self) -> f64 {
        self.loss
    }

    pub fn cbf(&self) -> &ScalarMap3D {
        &self.cbf
    }

    pub fn rcbf(&self) -> &ScalarMap3D {
        &self.rcbf
    }

    pub fn probabilities(&self) -> &LesionProbabilityMap {
        &self.probs
    }

    pub fn system(&self) -> &VolterraSystem {
        &self.sys
    }

    pub fn healthy_mean(&self) -> f64 {
        self.healthy_mean
    }

    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }

    /// Gradient of `Σ_v weights[v] · CBF_v` with respect to the AIF.
    pub fn backward_from_cbf(&self, weights: &[f64]) -> Result<GradientVector> {
        if weights.len() != self.residues.len() {
            return Err(Error::Size {
                what: "CBF weights",
                expected: self.residues.len(),
                actual: weights.len(),
            });
        }
        let grad_a = match self.sys.mode() {
            FilterMode::RelativeToLargest => self.matrix_gradient_tikhonov(weights),
            FilterMode::PerIndex => self.matrix_gradient_scaled_inverse(weights)?,
        };
        let values = volterra_adjoint(&grad_a);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("AIF gradient"));
        }
        Ok(GradientVector {
            values,
            warnings: self.warnings(),
        })
    }

    fn warnings(&self) -> GradientWarnings {
        let tied = self
            .residues
            .iter()
            .zip(&self.argmax)
            .filter(|(k, _)| !k.is_empty())
            .filter(|(k, &a)| {
                let peak = k[a];
                let tol = 1e-12 * peak.abs();
                k.iter().enumerate().any(|(i, &x)| i != a && (peak - x).abs() <= tol)
            })
            .count();
        GradientWarnings {
            repeated_singular_values: self.sys.near_repeated_singular_values(REPEATED_SIGMA_REL),
            tied_argmax_voxels: tied,
        }
    }

    /// Per argmax index `a`, the weighted sums `Σ g_v c_v` and `Σ g_v k_v`
    /// over voxels whose residue peaks at `a`, accumulated in voxel order.
    /// The adjoint vector only depends on `a`, so these sums are all the
    /// matrix gradient needs.
    fn grouped_sums(&self, weights: &[f64]) -> Vec<Option<(Vec<f64>, Vec<f64>)>> {
        let n = self.sys.n();
        let mut groups: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; n];
        for (voxel, k) in self.residues.iter().enumerate() {
            let g = weights[voxel];
            if k.is_empty() || g == 0.0 {
                continue;
            }
            let (cs, ks) = groups[self.argmax[voxel]].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for ((s, x), (t, y)) in cs.iter_mut().zip(&self.curves[voxel]).zip(ks.iter_mut().zip(k)) {
                *s += g * x;
                *t += g * y;
            }
        }
        groups
    }

    fn matrix_gradient_tikhonov(&self, weights: &[f64]) -> DMatrix<f64> {
        let n = self.sys.n();
        let a = self.sys.matrix();
        let v = self.sys.full_v();
        let sigma = self.sys.full_sigma();
        let lambda = self.sys.lambda();
        let shifted: Vec<f64> = sigma.iter().map(|s| 1.0 / (s * s + lambda * lambda)).collect();

        let mut rw = DMatrix::<f64>::zeros(n, n);
        let mut wk = DMatrix::<f64>::zeros(n, n);
        let mut wdotk = 0.0;
        for (j_idx, group) in self.grouped_sums(weights).iter().enumerate() {
            let Some((cs, ks)) = group else { continue };
            // column j_idx of (AᵀA + λ²I)⁻¹
            let col: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|m| v[(i, m)] * shifted[m] * v[(j_idx, m)]).sum())
                .collect();
            let r: Vec<f64> = (0..n)
                .map(|i| cs[i] - (0..=i).map(|j| a[(i, j)] * ks[j]).sum::<f64>())
                .collect();
            for j in 0..n {
                for i in 0..n {
                    rw[(i, j)] += r[i] * col[j];
                    wk[(j, i)] += col[j] * ks[i];
                }
                wdotk += col[j] * ks[j];
            }
        }
        let mut grad = rw - a * wk;
        if let FilterMode::RelativeToLargest = self.sys.mode() {
            let d_sigma1 = -2.0 * lambda * wdotk * self.sys.lambda_rel();
            let u = self.sys.full_u();
            for i in 0..n {
                for j in 0..n {
                    grad[(i, j)] += d_sigma1 * u[(i, 0)] * v[(j, 0)];
                }
            }
        }
        grad
    }

    /// Per-index filters reduce the solve to `k = A⁻¹c / (1 + λ_rel²)`.
    fn matrix_gradient_scaled_inverse(&self, weights: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.sys.n();
        if self.sys.rank() < n {
            return Err(Error::Unsupported("per-index filter gradient requires a full-rank system"));
        }
        let u = self.sys.full_u();
        let v = self.sys.full_v();
        let sigma = self.sys.full_sigma();
        let mut grad = DMatrix::<f64>::zeros(n, n);
        for (a_idx, group) in self.grouped_sums(weights).iter().enumerate() {
            let Some((_, ks)) = group else { continue };
            // dk = −A⁻¹ dA k, so ∂L/∂A = −w kᵀ with w = A⁻ᵀ e_a = U Σ⁻¹ Vᵀ e_a
            let w: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|m| u[(i, m)] * v[(a_idx, m)] / sigma[m]).sum::<f64>())
                .collect();
            for i in 0..n {
                for j in 0..n {
                    grad[(i, j)] -= w[i] * ks[j];
                }
            }
        }
        Ok(grad)
    }
}

/// Non-lesion brain voxels, the default normalization reference.
pub fn default_healthy_mask(vol: &Volume4D, y_true: &BinaryMask3D) -> Result<BinaryMask3D> {
    vol.brain_mask().and_not(y_true)
}

/// Forward pass retaining everything [`backward`] needs. Healthy tissue is
/// the brain mask minus `y_true`.
pub fn forward_with_tape(vol: &Volume4D, aif: &TimeSeries, config: &PipelineConfig, y_true: &BinaryMask3D) -> Result<(f64, PipelineTape)> {
    let healthy = default_healthy_mask(vol, y_true)?;
    forward_with_healthy(vol, aif, config, y_true, &healthy)
}

pub fn forward_with_healthy(
    vol: &Volume4D,
    aif: &TimeSeries,
    config: &PipelineConfig,
    y_true: &BinaryMask3D,
    healthy: &BinaryMask3D,
) -> Result<(f64, PipelineTape)> {
    config.validate()?;
    y_true.check_dims(vol.dims())?;
    let smoothed;
    let vol = match config.smoothing {
        Some(r) if !r.is_identity() => {
            smoothed = smooth(vol, r)?;
            &smoothed
        }
        _ => vol,
    };
    let sys = system_for(vol, aif, config.lambda_rel, config.filter_mode)?;
    let ks = residues(&sys, vol);
    let cbf = cbf_map_from_residues(vol, &ks)?;
    let healthy_mean = deconv::masked_mean(&cbf, healthy)?;
    let rcbf = deconv::normalize_rcbf(&cbf, healthy)?;
    let probs = lesion_probability(&rcbf, config.cutoff, config.temperature)?;
    let sums = dice_sums(&probs, y_true)?;
    let loss = sums.loss();
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let argmax = ks.iter().map(|k| if k.is_empty() { 0 } else { deconv::argmax(k) }).collect();
    let curves = (0..vol.dims().len())
        .map(|v| if vol.brain_mask().get(v) { vol.voxel_curve(v) } else { Vec::new() })
        .collect();
    let tape = PipelineTape {
        aif: aif.values().to_vec(),
        sys,
        curves,
        residues: ks,
        argmax,
        cbf,
        healthy: healthy.clone(),
        healthy_mean,
        rcbf,
        probs,
        y_true: y_true.clone(),
        sums,
        config: *config,
        loss,
    };
    Ok((loss, tape))
}

/// `∂L/∂c_art` from a forward tape.
pub fn backward(tape: &PipelineTape) -> Result<GradientVector> {
    let valid = tape.probs.valid_mask().as_slice();
    let probs = tape.probs.probs();
    let temp = tape.config.temperature;
    let nvox = probs.len();

    // through the soft Dice and the sigmoid
    let mut g_rcbf = vec![0.0; nvox];
    for v in 0..nvox {
        if valid[v] {
            let p = probs[v];
            g_rcbf[v] = tape.sums.dloss_dpred(tape.y_true.get(v)) * (-p * (1.0 - p) / temp);
        }
    }

    // through rCBF = CBF / mean_healthy(CBF)
    let mu = tape.healthy_mean;
    let cbf = tape.cbf.values();
    let mut through_mean = 0.0;
    for v in 0..nvox {
        through_mean += g_rcbf[v] * cbf[v];
    }
    let n_healthy = tape.healthy.count() as f64;
    let mean_term = through_mean / (mu * mu) / n_healthy;
    let g_cbf: Vec<f64> = (0..nvox)
        .map(|v| {
            let mut g = g_rcbf[v] / mu;
            if tape.healthy.get(v) {
                g -= mean_term;
            }
            g
        })
        .collect();
    tape.backward_from_cbf(&g_cbf)
}

/// Loss only, same arithmetic as [`forward_with_tape`].
pub fn loss_at(vol: &Volume4D, aif: &TimeSeries, config: &PipelineConfig, y_true: &BinaryMask3D, healthy: &BinaryMask3D) -> Result<f64> {
    forward_with_healthy(vol, aif, config, y_true, healthy).map(|(l, _)| l)
}

/// Central differences `(f(x + h e_j) − f(x − h e_j)) / 2h` of any scalar
/// function.
pub fn central_difference<F>(x: &[f64], h: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Domain(alloc::format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        probe[j] = x[j] + h;
        let hi = f(&probe)?;
        probe[j] = x[j] - h;
        let lo = f(&probe)?;
        probe[j] = x[j];
        out.push((hi - lo) / (2.0 * h));
    }
    Ok(out)
}

/// Finite-difference oracle for [`backward`].
pub fn finite_difference_gradient(
    vol: &Volume4D,
    aif: &TimeSeries,
    config: &PipelineConfig,
    y_true: &BinaryMask3D,
    h: f64,
) -> Result<GradientVector> {
    let healthy = default_healthy_mask(vol, y_true)?;
    let axis = aif.axis();
    let values = central_difference(aif.values(), h, |x| {
        let probe = TimeSeries::on_axis(axis, x.to_vec())?;
        loss_at(vol, &probe, config, y_true, &healthy)
    })?;
    Ok(GradientVector {
        values,
        warnings: GradientWarnings::default(),
    })
}

/// `max_j |a_j − b_j| / (|b_j| + 1e-12)`, `b` being the reference.
pub fn max_relative_error(a: &[f64], reference: &[f64]) -> f64 {
    a.iter()
        .zip(reference)
        .map(|(x, y)| (x - y).abs() / (y.abs() + 1e-12))
        .fold(0.0, f64::max)
}

impl PipelineTape {
    pub fn aif(&self) -> &[f64] {
        &self.aif
    }
}
