//! Depth maps, the log-depth codec, training losses and evaluation metrics.

mod loss;
mod metrics;
pub mod pfm;

pub use loss::{gradient_matching_loss, scale_invariant_loss, scale_invariant_value};
pub use metrics::{compute_metrics, MetricReport, CUTOFFS_M};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAX_DEPTH_M: f64 = 80.0;
pub const MIN_VALID_DEPTH_M: f64 = 0.1;

/// Ground truth is valid when finite and inside `(0.1 m, 80 m]`.
pub fn is_valid_depth(d: f64) -> bool {
    d.is_finite() && d > MIN_VALID_DEPTH_M && d <= MAX_DEPTH_M
}

/// Maps normalized values `v ∈ [0, 1]` to metric depth `D = D_max·exp(α(v − 1))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthCodec {
    pub max_depth: f64,
    pub alpha: f64,
}

impl Default for DepthCodec {
    /// `D_max = 80 m`, `α = ln 40` so that `v = 0` decodes to 2 m.
    fn default() -> Self {
        DepthCodec {
            max_depth: MAX_DEPTH_M,
            alpha: 40f64.ln(),
        }
    }
}

impl DepthCodec {
    pub fn new(max_depth: f64, alpha: f64) -> Result<Self> {
        if !(max_depth > 0.0 && alpha > 0.0) {
            return Err(Error::invalid(format!(
                "codec needs positive max depth and alpha, got {max_depth}, {alpha}"
            )));
        }
        Ok(DepthCodec { max_depth, alpha })
    }

    pub fn decode(&self, v: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("normalized depth {v} outside [0, 1]")));
        }
        Ok(self.max_depth * (self.alpha * (v - 1.0)).exp())
    }

    /// Inverse of [`decode`](Self::decode); not clamped.
    pub fn encode(&self, depth: f64) -> f64 {
        1.0 + (depth / self.max_depth).ln() / self.alpha
    }

    /// `ln D` for a normalized value.
    pub fn log_depth(&self, v: f64) -> f64 {
        self.max_depth.ln() + self.alpha * (v - 1.0)
    }

    pub fn decode_map<T: Scalar>(&self, normalized: &Tensor<T>) -> Result<Tensor<f64>> {
        let data = normalized
            .data()
            .iter()
            .map(|v| self.decode(v.as_f64()))
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(normalized.shape(), data)
    }
}

/// A metric depth map in meters with its validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub mask: Vec<bool>,
}

impl DepthMap {
    /// Builds a map whose mask follows [`is_valid_depth`].
    pub fn from_values(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(format!(
                "{width}x{height} depth map needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        let mask = values.iter().map(|&v| is_valid_depth(v.into())).collect();
        Ok(DepthMap {
            width,
            height,
            values,
            mask,
        })
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn values_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }

    /// `ln D` on valid pixels, 0 elsewhere.
    pub fn log_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width], |i| {
            if self.mask[i] {
                T::lit(f64::from(self.values[i]).ln())
            } else {
                T::zero()
            }
        })
    }

    pub fn mask_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width], |i| if self.mask[i] { T::one() } else { T::zero() })
    }
}
