use serde::{Deserialize, Serialize};

use super::zoo::ModelConfig;
use crate::engine::{BatchNormMode, BatchStats, ParamKind, Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::noise::{NoiseReference, Perturbation};
use crate::quant::QuantSpec;

pub(crate) const BN_EPS: f32 = 1e-5;
pub(crate) const BN_MOMENTUM: f32 = 0.9;

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub name: String,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// One crossbar-mapped layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalogInfo {
    pub name: String,
    /// Index of the weight in [`Network::params`].
    pub weight: usize,
    pub layer_type: &'static str,
}

/// Quantizers of one analog layer: input activations, weights, pre-bias outputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub activations: QuantSpec,
    pub weights: QuantSpec,
    pub outputs: QuantSpec,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BnLayer {
    pub gamma: usize,
    pub beta: usize,
    pub state: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct ResBlock {
    pub conv1: usize,
    pub bn1: BnLayer,
    pub conv2: usize,
    pub bn2: BnLayer,
    pub stride: usize,
    pub shortcut: Option<(usize, BnLayer)>,
}

#[derive(Clone, Debug)]
pub(crate) enum Layer {
    Conv { id: usize, stride: usize, pad: usize, bias: Option<usize> },
    Linear { id: usize, bias: usize },
    Relu,
    MaxPool(usize),
    Flatten,
    BatchNorm(BnLayer),
    Residual(Box<ResBlock>),
    GlobalAvgPool,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Batch norm uses batch statistics and reports them.
    pub train: bool,
    /// Weight perturbation added after weight quantization.
    pub perturbation: Option<&'a Perturbation>,
    /// Apply the network's quantizers, if it has any.
    pub quantized: bool,
}

impl<'a> ForwardOptions<'a> {
    pub fn clean() -> Self {
        Self::default()
    }

    pub fn eval(perturbation: Option<&'a Perturbation>, quantized: bool) -> Self {
        Self {
            train: false,
            perturbation,
            quantized,
        }
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Batch statistics observed by each batch norm, keyed by state index.
    pub bn_stats: Vec<(usize, BatchStats)>,
    /// `(analog id, input, pre-bias output)` before any quantization, in execution order.
    pub analog_io: Vec<(usize, Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub params: Vec<Parameter>,
    pub bn: Vec<BnState>,
    pub quant: Option<Vec<LayerQuant>>,
    analog: Vec<AnalogInfo>,
    layers: Vec<Layer>,
}

struct Pass<'a, 'b> {
    net: &'a Network,
    tape: &'b mut Tape,
    params: Vec<Var>,
    opts: &'b ForwardOptions<'b>,
    stats: Vec<(usize, BatchStats)>,
    io: Vec<(usize, Var, Var)>,
}

impl Pass<'_, '_> {
    fn quant(&self, id: usize) -> Option<&LayerQuant> {
        if !self.opts.quantized {
            return None;
        }
        self.net.quant.as_ref().map(|q| &q[id])
    }

    /// Effective weight `quantize(W₀) + ΔW`, plus the (possibly quantized) input.
    fn analog_inputs(&mut self, id: usize, x: Var) -> Result<(Var, Var)> {
        let mut w = self.params[self.net.analog[id].weight];
        let mut x = x;
        if let Some(q) = self.quant(id).copied() {
            x = self.tape.quantize_ste(x, &q.activations);
            w = self.tape.quantize_ste(w, &q.weights);
        }
        if let Some(p) = self.opts.perturbation {
            let delta = p.deltas.get(id).ok_or_else(|| {
                Error::Config(format!("no noise context for analog layer {id} ({})", self.net.analog[id].name))
            })?;
            w = self.tape.add_const(w, delta)?;
        }
        Ok((x, w))
    }

    fn finish_analog(&mut self, id: usize, y: Var, bias: Option<usize>) -> Result<Var> {
        let mut y = y;
        if let Some(q) = self.quant(id).copied() {
            y = self.tape.quantize_ste(y, &q.outputs);
        }
        if let Some(b) = bias {
            y = self.tape.add_bias(y, self.params[b])?;
        }
        Ok(y)
    }

    fn conv(&mut self, id: usize, x: Var, stride: usize, pad: usize, bias: Option<usize>) -> Result<Var> {
        let (xq, w) = self.analog_inputs(id, x)?;
        let y = self.tape.conv2d(xq, w, stride, pad)?;
        self.io.push((id, x, y));
        self.finish_analog(id, y, bias)
    }

    fn linear(&mut self, id: usize, x: Var, bias: usize) -> Result<Var> {
        let (xq, w) = self.analog_inputs(id, x)?;
        let y = self.tape.linear(xq, w)?;
        self.io.push((id, x, y));
        self.finish_analog(id, y, Some(bias))
    }

    fn batch_norm(&mut self, bn: BnLayer, x: Var) -> Result<Var> {
        let state = &self.net.bn[bn.state];
        let mode = if self.opts.train {
            BatchNormMode::Train { eps: BN_EPS }
        } else {
            BatchNormMode::Eval {
                mean: &state.mean,
                var: &state.var,
                eps: BN_EPS,
            }
        };
        let (y, stats) = self.tape.batch_norm(x, self.params[bn.gamma], self.params[bn.beta], mode)?;
        if let Some(s) = stats {
            self.stats.push((bn.state, s));
        }
        Ok(y)
    }

    fn layer(&mut self, layer: &Layer, x: Var) -> Result<Var> {
        Ok(match layer {
            Layer::Conv { id, stride, pad, bias } => self.conv(*id, x, *stride, *pad, *bias)?,
            Layer::Linear { id, bias } => self.linear(*id, x, *bias)?,
            Layer::Relu => self.tape.relu(x),
            Layer::MaxPool(k) => self.tape.max_pool2d(x, *k)?,
            Layer::Flatten => self.tape.flatten(x)?,
            Layer::GlobalAvgPool => self.tape.global_avg_pool(x)?,
            Layer::BatchNorm(bn) => self.batch_norm(*bn, x)?,
            Layer::Residual(block) => {
                let h = self.conv(block.conv1, x, block.stride, 1, None)?;
                let h = self.batch_norm(block.bn1, h)?;
                let h = self.tape.relu(h);
                let h = self.conv(block.conv2, h, 1, 1, None)?;
                let h = self.batch_norm(block.bn2, h)?;
                let skip = match block.shortcut {
                    Some((sc, bn)) => {
                        let s = self.conv(sc, x, block.stride, 0, None)?;
                        self.batch_norm(bn, s)?
                    }
                    None => x,
                };
                let sum = self.tape.add(h, skip)?;
                self.tape.relu(sum)
            }
        })
    }
}

impl Network {
    pub(crate) fn from_parts(
        config: ModelConfig,
        params: Vec<Parameter>,
        bn: Vec<BnState>,
        analog: Vec<AnalogInfo>,
        layers: Vec<Layer>,
    ) -> Self {
        Self {
            config,
            params,
            bn,
            quant: None,
            analog,
            layers,
        }
    }

    pub fn analog_layers(&self) -> &[AnalogInfo] {
        &self.analog
    }

    pub fn weight(&self, analog_id: usize) -> &Parameter {
        &self.params[self.analog[analog_id].weight]
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Records the forward pass of `x` on `tape`. Parameters enter the tape as
    /// leaves tagged with their index in [`Network::params`].
    pub fn forward(&self, tape: &mut Tape, x: Var, opts: &ForwardOptions<'_>) -> Result<ForwardOutput> {
        if let Some(p) = opts.perturbation {
            if p.deltas.len() != self.analog.len() {
                return Err(Error::Config(format!(
                    "perturbation covers {} analog layers, network has {}",
                    p.deltas.len(),
                    self.analog.len()
                )));
            }
            for (id, (d, a)) in p.deltas.iter().zip(&self.analog).enumerate() {
                if d.shape() != self.params[a.weight].value.shape() {
                    return Err(Error::Config(format!("perturbation shape mismatch on analog layer {id}")));
                }
            }
        }
        if opts.quantized && self.quant.is_none() {
            return Err(Error::Config("quantized forward requested on an unquantized network".into()));
        }
        let params = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(i, p.value.clone()))
            .collect();
        let mut pass = Pass {
            net: self,
            tape,
            params,
            opts,
            stats: Vec::new(),
            io: Vec::new(),
        };
        let mut h = x;
        for layer in &self.layers {
            h = pass.layer(layer, h)?;
        }
        Ok(ForwardOutput {
            logits: h,
            bn_stats: pass.stats,
            analog_io: pass.io,
        })
    }

    /// Batched inference without gradient recording.
    pub fn predict(&self, x: &Tensor, opts: &ForwardOptions<'_>, batch: usize) -> Result<Tensor> {
        let n = x.dim0();
        let mut out = Vec::with_capacity(n * self.config.classes);
        let mut start = 0;
        while start < n {
            let end = (start + batch.max(1)).min(n);
            let mut tape = Tape::inference();
            let xv = tape.constant(x.slice_rows(start, end));
            let f = self.forward(&mut tape, xv, opts)?;
            out.extend_from_slice(tape.value(f.logits).data());
            start = end;
        }
        Tensor::new(vec![n, self.config.classes], out)
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn commit_bn_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (idx, s) in stats {
            let st = &mut self.bn[*idx];
            for (m, &b) in st.mean.iter_mut().zip(&s.mean) {
                *m = BN_MOMENTUM * *m + (1.0 - BN_MOMENTUM) * b;
            }
            for (v, &b) in st.var.iter_mut().zip(&s.var) {
                *v = BN_MOMENTUM * *v + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }

    /// Noise reference of every analog layer: the weight quantization range
    /// when quantized, otherwise the frozen clip range.
    pub fn noise_references(&self) -> Result<Vec<NoiseReference>> {
        self.analog
            .iter()
            .enumerate()
            .map(|(id, a)| {
                let p = &self.params[a.weight];
                let range = match (&self.quant, p.clip_range) {
                    (Some(q), _) => (q[id].weights.q_min, q[id].weights.q_max),
                    (None, Some(r)) => r,
                    (None, None) => {
                        return Err(Error::Config(format!(
                            "analog layer {} has no frozen clip range to reference noise to",
                            a.name
                        )))
                    }
                };
                Ok(NoiseReference {
                    layer_id: id,
                    range,
                    shape: p.value.shape().to_vec(),
                })
            })
            .collect()
    }

    /// References of width `σ_W,l`, so that a noise level `η` reads as `σ_N/σ_W`.
    pub fn weight_std_references(&self) -> Vec<NoiseReference> {
        let stds = super::stats::layer_weight_std(self);
        self.analog
            .iter()
            .enumerate()
            .map(|(id, a)| NoiseReference {
                layer_id: id,
                range: (0.0, stds[id]),
                shape: self.params[a.weight].value.shape().to_vec(),
            })
            .collect()
    }

    /// Indices of parameters of a given kind.
    pub fn params_of_kind(&self, kind: ParamKind) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.params[i].kind == kind).collect()
    }
}
