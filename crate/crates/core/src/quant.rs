//! Uniform ENOB quantization with percentile calibration.

use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};

/// Where in an analog layer a quantizer sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantPoint {
    Weights,
    Activations,
    Outputs,
}

/// `2^bits` evenly spaced levels spanning `[q_min, q_max]`, both endpoints included.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub q_min: f32,
    pub q_max: f32,
    pub point: QuantPoint,
}

impl QuantSpec {
    pub fn new(bits: u32, q_min: f32, q_max: f32, point: QuantPoint) -> Result<Self> {
        if !(1..=24).contains(&bits) {
            return Err(Error::Parameter(format!("quantizer bits must be in 1..=24, got {bits}")));
        }
        if !(q_max > q_min) || !q_min.is_finite() || !q_max.is_finite() {
            return Err(Error::Parameter(format!("quantizer range [{q_min}, {q_max}] is empty")));
        }
        Ok(Self {
            bits,
            q_min,
            q_max,
            point,
        })
    }

    pub fn levels(&self) -> u32 {
        1 << self.bits
    }

    pub fn step(&self) -> f32 {
        (self.q_max - self.q_min) / (self.levels() - 1) as f32
    }

    /// Value of level `k`; the top level is exactly `q_max`.
    pub fn level(&self, k: u32) -> f32 {
        if k + 1 >= self.levels() {
            self.q_max
        } else {
            let span = self.q_max as f64 - self.q_min as f64;
            (self.q_min as f64 + k as f64 * span / (self.levels() - 1) as f64) as f32
        }
    }

    /// Clamp to the range, then snap to the nearest level (ties to even index).
    pub fn quantize_value(&self, x: f32) -> f32 {
        let c = x.clamp(self.q_min, self.q_max);
        let top = (self.levels() - 1) as f64;
        let t = (c as f64 - self.q_min as f64) * top / (self.q_max as f64 - self.q_min as f64);
        let k = t.round_ties_even().clamp(0.0, top) as u32;
        self.level(k)
    }

    pub fn quantize(&self, x: &Tensor) -> Tensor {
        x.map(|v| self.quantize_value(v))
    }
}

/// Linear-interpolated percentile of sorted data.
fn percentile(sorted: &[f32], pct: f64) -> f32 {
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    (sorted[lo] as f64 * (1.0 - frac) + sorted[hi] as f64 * frac) as f32
}

/// Returns the `(lo_pct, hi_pct)` percentiles of `samples` as `(q_min, q_max)`.
pub fn calibrate(samples: &[f32], lo_pct: f64, hi_pct: f64) -> Result<(f32, f32)> {
    if samples.len() < 1000 {
        return Err(Error::Calibration(format!(
            "need at least 1000 samples, got {}",
            samples.len()
        )));
    }
    if !(0.0..hi_pct).contains(&lo_pct) || hi_pct > 100.0 {
        return Err(Error::Calibration(format!("bad percentile pair ({lo_pct}, {hi_pct})")));
    }
    let mut sorted: Vec<f32> = samples.iter().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(f32::total_cmp);
    let (q_min, q_max) = (percentile(&sorted, lo_pct), percentile(&sorted, hi_pct));
    if !(q_max > q_min) {
        return Err(Error::Calibration(format!(
            "degenerate sample stream: percentiles collapse to {q_min}"
        )));
    }
    Ok((q_min, q_max))
}

/// Clipped straight-through gradient: pass inside `[q_min, q_max]`, zero outside.
pub fn ste_backward(upstream: &Tensor, x: &Tensor, spec: &QuantSpec) -> Tensor {
    let data = upstream
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v >= spec.q_min && v <= spec.q_max { g } else { 0.0 })
        .collect();
    Tensor::new(upstream.shape().to_vec(), data).expect("upstream and input shapes agree")
}
