//! Momentum SGD on the AIF, either over its raw samples or over gamma-variate
//! parameters, against a ground-truth lesion mask.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::curves::{delay_curve, gamma_variate, gamma_variate_jacobian, scale_curve, GammaVariateParams, TimeSeries};
use crate::error::{Error, Result};
use crate::grad::{backward, default_healthy_mask, forward_with_healthy, forward_with_tape};
use crate::lesion::binarize;
use crate::math;
use crate::metrics;
use crate::pipeline::PipelineConfig;
use crate::smoothing::smooth;
use crate::volume::{BinaryMask3D, Volume4D};

/// Iterations spanned by the convergence test.
pub const CONVERGENCE_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Parameterization {
    #[default]
    FreeVector,
    GammaVariate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Augmentation {
    pub max_delay: usize,
    pub scale_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_iters: usize,
    pub tolerance: f64,
    pub parameterization: Parameterization,
    pub augment: Option<Augmentation>,
    pub seed: u64,
    /// Store the AIF in the trace every this many iterations; 0 disables.
    pub snapshot_every: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            max_iters: 500,
            tolerance: 1e-6,
            parameterization: Parameterization::FreeVector,
            augment: None,
            seed: 0,
            snapshot_every: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be positive".into());
        }
        if !(self.tolerance > 0.0) {
            return bad(format!("tolerance must be positive, got {}", self.tolerance));
        }
        if let Some(a) = self.augment {
            let (lo, hi) = a.scale_range;
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("scale_range ({lo}, {hi}) needs 0 < lo <= hi"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum InitStrategy {
    PeakVoxel,
    Flat,
    GammaDefault,
}

/// Starting point of an optimization run.
#[derive(Debug, Clone, PartialEq)]
pub enum AifStart {
    Samples(TimeSeries),
    Gamma(GammaVariateParams),
}

fn masked_curves(vol: &Volume4D) -> impl Iterator<Item = (usize, Vec<f64>)> + '_ {
    (0..vol.dims().len())
        .filter(|&v| vol.brain_mask().get(v))
        .map(|v| (v, vol.voxel_curve(v)))
}

fn first_argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

pub fn init_gamma_default(vol: &Volume4D) -> Result<GammaVariateParams> {
    let n = vol.n_time();
    let mut mean = vec![0.0; n];
    let mut peak = f64::NEG_INFINITY;
    let mut count = 0usize;
    for (_, c) in masked_curves(vol) {
        for (m, x) in mean.iter_mut().zip(&c) {
            *m += x;
            peak = peak.max(*x);
        }
        count += 1;
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let (alpha, beta) = (3.0, 1.5);
    let t0 = (vol.axis().time(first_argmax(&mean)) - alpha * beta).max(0.0);
    if !(peak > 0.0) {
        return Err(Error::Degenerate("no positive sample inside the brain mask".into()));
    }
    GammaVariateParams::new(t0, alpha, beta, peak)
}

pub fn init_aif(vol: &Volume4D, strategy: InitStrategy) -> Result<TimeSeries> {
    match strategy {
        InitStrategy::Flat => TimeSeries::constant(vol.axis(), 1.0),
        InitStrategy::PeakVoxel => {
            let mut best: Option<(f64, usize)> = None;
            for (v, c) in masked_curves(vol) {
                let p = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if best.is_none_or(|(b, _)| p > b) {
                    best = Some((p, v));
                }
            }
            let (_, v) = best.expect("brain mask is nonempty");
            Ok(vol.voxel_series(v))
        }
        InitStrategy::GammaDefault => gamma_variate(init_gamma_default(vol)?, vol.axis()),
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IterationRecord {
    pub iter: usize,
    pub loss: f64,
    pub gradient_norm: f64,
    #[cfg_attr(feature = "serde", serde(skip_serializing_if = "Option::is_none", default))]
    pub aif: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum StopReason {
    Converged,
    MaxIters,
    /// Non-finite or degenerate state; the trace stops before the failure.
    Aborted(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationTrace {
    pub records: Vec<IterationRecord>,
    pub final_aif: TimeSeries,
    /// Final gamma parameters when that parameterization was used.
    pub final_params: Option<GammaVariateParams>,
    pub converged: bool,
    pub stop: StopReason,
}

/// Velocity-form momentum SGD: `v ← m·v − lr·g`, then `θ ← θ + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumSgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl MomentumSgd {
    pub fn new(learning_rate: f64, momentum: f64, dim: usize) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: vec![0.0; dim],
        }
    }

    /// Updates the velocity from `grad` and returns it.
    pub fn velocity(&mut self, grad: &[f64]) -> &[f64] {
        for (v, g) in self.velocity.iter_mut().zip(grad) {
            *v = self.momentum * *v - self.learning_rate * g;
        }
        &self.velocity
    }
}

const T0_MIN: f64 = 0.0;
const ALPHA_RANGE: (f64, f64) = (0.5, 20.0);
const BETA_MIN: f64 = 0.1;
const AMPLITUDE_MIN: f64 = 1e-6;

fn project_gamma(p: [f64; 4], n: usize) -> [f64; 4] {
    let t0_max = (n - 2) as f64;
    [
        p[0].clamp(T0_MIN, t0_max),
        p[1].clamp(ALPHA_RANGE.0, ALPHA_RANGE.1),
        p[2].clamp(BETA_MIN, n as f64),
        p[3].max(AMPLITUDE_MIN),
    ]
}

enum State {
    /// Samples divided by the initial L2 norm.
    Free { theta: Vec<f64>, unit: f64 },
    Gamma { p: [f64; 4] },
}

impl State {
    fn aif(&self, vol: &Volume4D) -> Result<TimeSeries> {
        match self {
            State::Free { theta, unit } => TimeSeries::on_axis(vol.axis(), theta.iter().map(|t| t * unit).collect()),
            State::Gamma { p } => gamma_variate(GammaVariateParams::from_array(*p)?, vol.axis()),
        }
    }

    fn dim(&self) -> usize {
        match self {
            State::Free { theta, .. } => theta.len(),
            State::Gamma { .. } => 4,
        }
    }

    /// Parameter-space gradient from `∂L/∂c`.
    fn pull_back(&self, g_c: &[f64], vol: &Volume4D) -> Result<Vec<f64>> {
        match self {
            State::Free { unit, .. } => Ok(g_c.iter().map(|g| g * unit).collect()),
            State::Gamma { p } => {
                let (_, jac) = gamma_variate_jacobian(GammaVariateParams::from_array(*p)?, vol.axis())?;
                let mut g = vec![0.0; 4];
                for (row, gc) in jac.iter().zip(g_c) {
                    for (gi, j) in g.iter_mut().zip(row) {
                        *gi += j * gc;
                    }
                }
                Ok(g)
            }
        }
    }

    fn step(&mut self, velocity: &[f64], n: usize) {
        match self {
            State::Free { theta, .. } => {
                for (t, v) in theta.iter_mut().zip(velocity) {
                    *t = (*t + v).max(0.0);
                }
            }
            State::Gamma { p } => {
                let mut q = *p;
                for (t, v) in q.iter_mut().zip(velocity) {
                    *t += v;
                }
                *p = project_gamma(q, n);
            }
        }
    }
}

fn augmented(vol: &Volume4D, rng: &mut ChaCha8Rng, a: &Augmentation) -> Result<Volume4D> {
    let delay = rng.random_range(0..=a.max_delay);
    let (lo, hi) = a.scale_range;
    let scale = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    vol.map_curves(|c| delay_curve(&scale_curve(c, scale)?, delay))
}

fn prepare(vol: &Volume4D, pipeline: &PipelineConfig) -> Result<Volume4D> {
    match pipeline.smoothing {
        Some(r) if !r.is_identity() => smooth(vol, r),
        _ => Ok(vol.clone()),
    }
}

pub fn optimize_aif(
    vol: &Volume4D,
    y_true: &BinaryMask3D,
    start: &AifStart,
    config: &OptimizerConfig,
    pipeline: &PipelineConfig,
) -> Result<OptimizationTrace> {
    config.validate()?;
    pipeline.validate()?;
    let n = vol.n_time();
    let mut state = match (config.parameterization, start) {
        (Parameterization::FreeVector, s) => {
            let c = match s {
                AifStart::Samples(c) => c.clone(),
                AifStart::Gamma(p) => gamma_variate(*p, vol.axis())?,
            };
            if c.len() != n {
                return Err(Error::Size {
                    what: "initial AIF",
                    expected: n,
                    actual: c.len(),
                });
            }
            let unit = math::norm2(c.values());
            if unit == 0.0 {
                return Err(Error::Degenerate("initial AIF is identically zero".into()));
            }
            State::Free {
                theta: c.values().iter().map(|x| (x / unit).max(0.0)).collect(),
                unit,
            }
        }
        (Parameterization::GammaVariate, AifStart::Gamma(p)) => {
            p.validate()?;
            State::Gamma {
                p: project_gamma(p.to_array(), n),
            }
        }
        (Parameterization::GammaVariate, AifStart::Samples(_)) => {
            return Err(Error::Spec("gamma_variate parameterization needs gamma start parameters".into()));
        }
    };

    // Smoothing is applied once up front unless augmentation changes the data
    // every iteration.
    let inner = PipelineConfig {
        smoothing: None,
        ..*pipeline
    };
    let base = if config.augment.is_some() { vol.clone() } else { prepare(vol, pipeline)? };
    let healthy = default_healthy_mask(vol, y_true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sgd = MomentumSgd::new(config.learning_rate, config.momentum, state.dim());
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut stop = StopReason::MaxIters;

    for iter in 0..config.max_iters {
        let data = match &config.augment {
            Some(a) => prepare(&augmented(&base, &mut rng, a)?, pipeline)?,
            None => base.clone(),
        };
        let outcome = state.aif(vol).and_then(|aif| {
            let (loss, tape) = forward_with_healthy(&data, &aif, &inner, y_true, &healthy)?;
            let g = backward(&tape)?;
            let gp = state.pull_back(&g.values, vol)?;
            if gp.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("gradient"));
            }
            Ok((aif, loss, gp))
        });
        let (aif, loss, grad) = match outcome {
            Ok(x) => x,
            Err(e) if e.is_numerical() => {
                stop = StopReason::Aborted(format!("iteration {iter}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let snapshot = config.snapshot_every > 0 && iter % config.snapshot_every == 0;
        records.push(IterationRecord {
            iter,
            loss,
            gradient_norm: math::norm2(&grad),
            aif: snapshot.then(|| aif.into_values()),
        });
        if iter >= CONVERGENCE_WINDOW && (loss - records[iter - CONVERGENCE_WINDOW].loss).abs() < config.tolerance {
            stop = StopReason::Converged;
            break;
        }
        state.step(sgd.velocity(&grad), n);
    }

    let final_aif = state.aif(vol)?;
    let final_params = match &state {
        State::Gamma { p } => Some(GammaVariateParams::from_array(*p)?),
        State::Free { .. } => None,
    };
    Ok(OptimizationTrace {
        records,
        final_aif,
        final_params,
        converged: stop == StopReason::Converged,
        stop,
    })
}

/// Hard Dice of the thresholded rCBF map obtained with `aif` against `y_true`.
pub fn dice_at(aif: &TimeSeries, vol: &Volume4D, y_true: &BinaryMask3D, pipeline: &PipelineConfig) -> Result<f64> {
    let (_, tape) = forward_with_tape(vol, aif, pipeline, y_true)?;
    let pred = binarize(tape.rcbf(), pipeline.cutoff)?;
    metrics::dice(&pred, &y_true.and(vol.brain_mask())?)
}
