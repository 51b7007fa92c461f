//! Additive Gaussian weight-noise models for analog crossbar layers.
//!
//! A layer's noise standard deviation is `σ = η·(W_max − W_min)`. On top of
//! that ideal model two non-idealities are supported: temporal fluctuation
//! (η redrawn per inference batch from `N(η₀, (temporal_frac·η₀)²)`) and
//! spatial fluctuation (a per-weight scale `λ ~ N(1, spatial_frac²)` drawn once
//! per network instantiation).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{param_err, Error, Result};
use crate::rng::{split_stream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub eta: f32,
    #[serde(default)]
    pub temporal_frac: f32,
    #[serde(default)]
    pub spatial_frac: f32,
    #[serde(default)]
    pub master_seed: u64,
}

impl NoiseSpec {
    /// I.i.d. noise at level `eta` with no fluctuations.
    pub fn ideal(eta: f32, master_seed: u64) -> Self {
        Self {
            eta,
            temporal_frac: 0.0,
            spatial_frac: 0.0,
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eta", self.eta),
            ("temporal_frac", self.temporal_frac),
            ("spatial_frac", self.spatial_frac),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return param_err(format!("noise {name} must be a finite value >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// `σ_N = η·(w_max − w_min)`.
pub fn derive_sigma(eta: f32, w_min: f32, w_max: f32) -> Result<f32> {
    if w_max < w_min {
        return param_err(format!("noise reference range [{w_min}, {w_max}] is inverted"));
    }
    Ok(eta * (w_max - w_min))
}

/// Per-weight scale factors `λ ~ N(1, spatial_frac²)`.
pub fn instantiate_spatial(shape: &[usize], spatial_frac: f32, rng: &mut Stream) -> Tensor {
    let n: usize = shape.iter().product();
    let data = if spatial_frac == 0.0 {
        vec![1.0; n]
    } else {
        (0..n)
            .map(|_| 1.0 + spatial_frac * rng.sample::<f32, _>(StandardNormal))
            .collect()
    };
    Tensor::from_parts(shape.to_vec(), data)
}

/// One η draw for an inference batch; negative draws clamp to zero.
pub fn sample_temporal_eta(eta0: f32, temporal_frac: f32, rng: &mut Stream) -> f32 {
    if temporal_frac == 0.0 || eta0 == 0.0 {
        return eta0;
    }
    let draw = eta0 + temporal_frac * eta0 * rng.sample::<f32, _>(StandardNormal);
    draw.max(0.0)
}

/// Noise bookkeeping for one analog layer of one network instantiation.
#[derive(Clone, Debug)]
pub struct LayerNoiseContext {
    pub layer_id: usize,
    pub ref_range: (f32, f32),
    /// σ at the nominal η of the owning [`NoiseSpec`].
    pub sigma_n: f32,
    /// Frozen per-weight scale factors, shaped like the weight.
    pub spatial_scale: Tensor,
}

impl LayerNoiseContext {
    pub fn sigma_at(&self, eta: f32) -> f32 {
        eta * (self.ref_range.1 - self.ref_range.0)
    }
}

/// `σ(eta_batch)·λ ⊙ ε` with fresh standard-normal `ε`.
pub fn sample_perturbation(ctx: &LayerNoiseContext, eta_batch: f32, rng: &mut Stream) -> Tensor {
    let sigma = ctx.sigma_at(eta_batch);
    if sigma == 0.0 {
        return Tensor::zeros(ctx.spatial_scale.shape().to_vec());
    }
    ctx.spatial_scale
        .map(|lambda| sigma * lambda * rng.sample::<f32, _>(StandardNormal))
}

/// Noise reference of one analog layer as reported by a network.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseReference {
    pub layer_id: usize,
    pub range: (f32, f32),
    pub shape: Vec<usize>,
}

/// Weight perturbations, one per analog layer in layer-id order.
#[derive(Clone, Debug)]
pub struct Perturbation {
    pub deltas: Vec<Tensor>,
}

impl Perturbation {
    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            deltas: self.deltas.iter().map(|d| d.map(|v| v * factor)).collect(),
        }
    }
}

/// Noise contexts for every analog layer of one network instantiation.
#[derive(Clone, Debug)]
pub struct NoiseContextSet {
    pub spec: NoiseSpec,
    pub layers: Vec<LayerNoiseContext>,
}

impl NoiseContextSet {
    /// Builds contexts and draws the spatial scale factors of instance `instance`.
    pub fn instantiate(spec: NoiseSpec, refs: &[NoiseReference], instance: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = split_stream(spec.master_seed, "spatial", instance);
        let mut layers = Vec::with_capacity(refs.len());
        for (expect, r) in refs.iter().enumerate() {
            if r.layer_id != expect {
                return Err(Error::Config(format!(
                    "noise references out of order: expected layer {expect}, got {}",
                    r.layer_id
                )));
            }
            let sigma_n = derive_sigma(spec.eta, r.range.0, r.range.1)?;
            layers.push(LayerNoiseContext {
                layer_id: r.layer_id,
                ref_range: r.range,
                sigma_n,
                spatial_scale: instantiate_spatial(&r.shape, spec.spatial_frac, &mut rng),
            });
        }
        Ok(Self { spec, layers })
    }

    pub fn is_silent(&self) -> bool {
        self.spec.eta == 0.0
    }

    /// Fresh perturbation for every layer at noise level `eta_batch`.
    pub fn sample(&self, eta_batch: f32, rng: &mut Stream) -> Perturbation {
        Perturbation {
            deltas: self
                .layers
                .iter()
                .map(|ctx| sample_perturbation(ctx, eta_batch, rng))
                .collect(),
        }
    }
}
