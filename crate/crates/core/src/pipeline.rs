//! Parameters shared by the forward pipeline, its gradient and the CLI.

use alloc::format;

use crate::deconv::{FilterMode, DEFAULT_LAMBDA_REL};
use crate::error::{Error, Result};
use crate::lesion::{DEFAULT_CUTOFF, DEFAULT_TEMPERATURE};
use crate::smoothing::SmoothingRadii;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PipelineConfig {
    pub lambda_rel: f64,
    pub cutoff: f64,
    pub temperature: f64,
    pub filter_mode: FilterMode,
    /// Boxcar pre-smoothing of the series; `None` disables it.
    pub smoothing: Option<SmoothingRadii>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            lambda_rel: DEFAULT_LAMBDA_REL,
            cutoff: DEFAULT_CUTOFF,
            temperature: DEFAULT_TEMPERATURE,
            filter_mode: FilterMode::RelativeToLargest,
            smoothing: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_rel > 0.0 && self.lambda_rel < 1.0) {
            return Err(Error::Range {
                what: "lambda_rel",
                detail: format!("{} not in (0, 1)", self.lambda_rel),
            });
        }
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) {
            return Err(Error::Domain(format!("cutoff must be positive, got {}", self.cutoff)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Domain(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}
