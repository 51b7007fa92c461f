use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{param_err, Result};

/// What a parameter tensor is for; drives noise, clipping and decay policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Crossbar weight: noisy, clippable, decayed.
    Weight,
    /// Digital-domain bias.
    Bias,
    BnScale,
    BnShift,
}

/// A clean weight tensor with its gradient accumulator and optional clip range.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Tensor,
    pub clip_range: Option<(f32, f32)>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, kind: ParamKind, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self {
            name: name.into(),
            kind,
            value,
            grad,
            clip_range: None,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    /// Clamps `value` into `clip_range`, if one is set.
    pub fn apply_clip(&mut self) {
        if let Some((lo, hi)) = self.clip_range {
            for v in self.value.data_mut() {
                *v = v.clamp(lo, hi);
            }
        }
    }

    pub fn decays(&self) -> bool {
        self.kind == ParamKind::Weight
    }
}

/// `value ← value − lr·(grad + weight_decay·value)`, then clip.
///
/// Decay applies to crossbar weights only.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Parameter>, lr: f32, weight_decay: f32) {
    for p in params {
        let wd = if p.decays() { weight_decay } else { 0.0 };
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *v -= lr * (g + wd * *v);
        }
        p.apply_clip();
    }
}

/// Half-cosine decay from `lr0` at step 0 to zero at step `total`.
pub fn cosine_lr(step: usize, total: usize, lr0: f32) -> Result<f32> {
    if step > total {
        return param_err(format!("cosine_lr step {step} beyond total {total}"));
    }
    if total == 0 {
        return Ok(lr0);
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    Ok((lr0 as f64 * (1.0 + phase.cos()) / 2.0) as f32)
}
