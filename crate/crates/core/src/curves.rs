//! Sampled concentration curves, the gamma-variate AIF model and the two
//! augmentation transforms (integer bolus delay, amplitude scaling).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_finite, Error, Result};
use crate::math;

/// Uniform sampling grid `t_j = j * dt`, `j = 0..n_points`. The sampling
/// interval is fixed at one second.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TimeAxis {
    n_points: usize,
}

impl TimeAxis {
    pub const DT: f64 = 1.0;

    pub fn new(n_points: usize) -> Result<Self> {
        if n_points < 2 {
            return Err(Error::Range {
                what: "time axis length",
                detail: format!("{n_points} < 2"),
            });
        }
        Ok(Self { n_points })
    }

    /// Rejects any sampling interval other than one second.
    pub fn with_dt(n_points: usize, dt: f64) -> Result<Self> {
        if dt != Self::DT {
            return Err(Error::Domain(format!("sampling interval must be 1 s, got {dt}")));
        }
        Self::new(n_points)
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn dt(&self) -> f64 {
        Self::DT
    }

    pub fn time(&self, j: usize) -> f64 {
        j as f64 * Self::DT
    }
}

/// A concentration curve sampled on a [`TimeAxis`]. All samples are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    axis: TimeAxis,
    values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let axis = TimeAxis::new(values.len())?;
        Self::on_axis(axis, values)
    }

    pub fn on_axis(axis: TimeAxis, values: Vec<f64>) -> Result<Self> {
        if values.len() != axis.n_points() {
            return Err(Error::Size {
                what: "time series",
                expected: axis.n_points(),
                actual: values.len(),
            });
        }
        check_finite(&values, "time series")?;
        Ok(Self { axis, values })
    }

    pub fn constant(axis: TimeAxis, value: f64) -> Result<Self> {
        Self::on_axis(axis, vec![value; axis.n_points()])
    }

    pub fn axis(&self) -> TimeAxis {
        self.axis
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn peak(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Parameters of `amplitude * (t - t0)^alpha * exp(-(t - t0) / beta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GammaVariateParams {
    pub t0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub amplitude: f64,
}

impl GammaVariateParams {
    pub fn new(t0: f64, alpha: f64, beta: f64, amplitude: f64) -> Result<Self> {
        let p = Self {
            t0,
            alpha,
            beta,
            amplitude,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.t0.is_finite()
            && self.t0 >= 0.0
            && self.alpha.is_finite()
            && self.alpha > 0.0
            && self.beta.is_finite()
            && self.beta > 0.0
            && self.amplitude.is_finite()
            && self.amplitude > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid gamma-variate parameters {self:?}")))
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.t0, self.alpha, self.beta, self.amplitude]
    }

    pub fn from_array(p: [f64; 4]) -> Result<Self> {
        Self::new(p[0], p[1], p[2], p[3])
    }
}

/// Samples the gamma-variate bolus on `axis`. Zero up to and including `t0`.
pub fn gamma_variate(params: GammaVariateParams, axis: TimeAxis) -> Result<TimeSeries> {
    params.validate()?;
    let values = (0..axis.n_points())
        .map(|j| gamma_sample(&params, axis.time(j)))
        .collect();
    TimeSeries::on_axis(axis, values)
}

fn gamma_sample(p: &GammaVariateParams, t: f64) -> f64 {
    let s = t - p.t0;
    if s > 0.0 {
        p.amplitude * math::powf(s, p.alpha) * math::exp(-s / p.beta)
    } else {
        0.0
    }
}

/// Gamma-variate samples together with the Jacobian `d values[j] / d param`,
/// one row per sample in `(t0, alpha, beta, amplitude)` order.
pub fn gamma_variate_jacobian(params: GammaVariateParams, axis: TimeAxis) -> Result<(TimeSeries, Vec<[f64; 4]>)> {
    let curve = gamma_variate(params, axis)?;
    let jac = (0..axis.n_points())
        .map(|j| {
            let s = axis.time(j) - params.t0;
            let c = curve.values()[j];
            if s <= 0.0 {
                return [0.0; 4];
            }
            let d_t0 = if params.alpha == 1.0 {
                params.amplitude * math::exp(-s / params.beta) * (-1.0 + s / params.beta)
            } else {
                params.amplitude
                    * math::exp(-s / params.beta)
                    * (-params.alpha * math::powf(s, params.alpha - 1.0) + math::powf(s, params.alpha) / params.beta)
            };
            [
                d_t0,
                c * math::ln(s),
                c * s / (params.beta * params.beta),
                c / params.amplitude,
            ]
        })
        .collect();
    Ok((curve, jac))
}

/// Shifts the curve `delay` samples later, filling the head with zeros.
pub fn delay_curve(c: &TimeSeries, delay: usize) -> Result<TimeSeries> {
    let n = c.len();
    if delay >= n {
        return Err(Error::Range {
            what: "delay",
            detail: format!("{delay} must be < {n} samples"),
        });
    }
    let mut out = vec![0.0; n];
    out[delay..].copy_from_slice(&c.values()[..n - delay]);
    TimeSeries::on_axis(c.axis(), out)
}

pub fn scale_curve(c: &TimeSeries, alpha: f64) -> Result<TimeSeries> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Domain(format!("scale factor must be positive, got {alpha}")));
    }
    TimeSeries::on_axis(c.axis(), c.values().iter().map(|v| alpha * v).collect())
}
