use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::network::{BnLayer, Layer, Network, ResBlock};
use crate::engine::{ParamKind, Parameter, Tensor};
use crate::error::{Error, Result};
use crate::rng::{split_stream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Lenet,
    ResnetCompact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Wider,
    Deeper,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub variant: Variant,
    /// LeNet: `[conv1, conv2, fc]`. Residual: per-stage widths.
    pub widths: Vec<usize>,
    /// Extra 3×3 convolutions in front of a LeNet (the "deeper" variant).
    #[serde(default)]
    pub prefix_widths: Vec<usize>,
    /// Basic blocks per residual stage.
    #[serde(default)]
    pub blocks_per_stage: usize,
    pub in_channels: usize,
    pub in_size: usize,
    pub classes: usize,
}

impl ModelConfig {
    pub fn lenet(variant: Variant) -> Self {
        let (widths, prefix_widths) = match variant {
            Variant::Wider => (vec![128, 256, 2048], vec![]),
            Variant::Deeper => (vec![32, 64, 1024], vec![16, 16]),
            Variant::Baseline | Variant::Custom => (vec![32, 64, 1024], vec![]),
        };
        Self {
            family: Family::Lenet,
            variant,
            widths,
            prefix_widths,
            blocks_per_stage: 0,
            in_channels: 1,
            in_size: 28,
            classes: 10,
        }
    }

    /// Three-stage residual net; 3 blocks per stage is ResNet-20, 5 is ResNet-32.
    pub fn resnet_compact(blocks_per_stage: usize) -> Self {
        Self {
            family: Family::ResnetCompact,
            variant: Variant::Baseline,
            widths: vec![16, 32, 64],
            prefix_widths: vec![],
            blocks_per_stage,
            in_channels: 3,
            in_size: 32,
            classes: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes == 0 || self.in_channels == 0 {
            return bad("model needs positive in_channels and classes".into());
        }
        if self.widths.iter().chain(&self.prefix_widths).any(|&w| w == 0) {
            return bad("model widths must be positive".into());
        }
        match self.family {
            Family::Lenet => {
                if self.widths.len() != 3 {
                    return bad(format!("lenet needs 3 widths, got {}", self.widths.len()));
                }
                if self.in_size < 16 || (self.in_size - 4) % 2 != 0 || ((self.in_size - 4) / 2 - 4) % 2 != 0 {
                    return bad(format!("lenet cannot take {0}x{0} inputs", self.in_size));
                }
            }
            Family::ResnetCompact => {
                if self.widths.is_empty() || self.blocks_per_stage == 0 {
                    return bad("residual net needs stage widths and blocks_per_stage > 0".into());
                }
            }
        }
        Ok(())
    }
}

struct Builder {
    params: Vec<Parameter>,
    bn: Vec<super::network::BnState>,
    analog: Vec<super::network::AnalogInfo>,
    rng: Stream,
}

impl Builder {
    fn he(&mut self, name: String, shape: Vec<usize>, fan_in: usize, layer_type: &'static str) -> usize {
        let std = (2.0 / fan_in as f32).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| std * self.rng.sample::<f32, _>(StandardNormal))
            .collect();
        self.params.push(Parameter::new(
            format!("{name}.weight"),
            ParamKind::Weight,
            Tensor::from_parts(shape, data),
        ));
        let weight = self.params.len() - 1;
        self.analog.push(super::network::AnalogInfo {
            name,
            weight,
            layer_type,
        });
        self.analog.len() - 1
    }

    fn bias(&mut self, name: &str, n: usize) -> usize {
        self.params.push(Parameter::new(
            format!("{name}.bias"),
            ParamKind::Bias,
            Tensor::zeros(vec![n]),
        ));
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> (usize, Option<usize>) {
        let id = self.he(name.to_string(), vec![cout, cin, k, k], cin * k * k, "conv");
        let b = bias.then(|| self.bias(name, cout));
        (id, b)
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize) -> (usize, usize) {
        let id = self.he(name.to_string(), vec![fout, fin], fin, "linear");
        (id, self.bias(name, fout))
    }

    fn batch_norm(&mut self, name: &str, c: usize) -> BnLayer {
        self.params.push(Parameter::new(format!("{name}.gamma"), ParamKind::BnScale, Tensor::ones(vec![c])));
        let gamma = self.params.len() - 1;
        self.params.push(Parameter::new(format!("{name}.beta"), ParamKind::BnShift, Tensor::zeros(vec![c])));
        let beta = self.params.len() - 1;
        self.bn.push(super::network::BnState {
            name: name.to_string(),
            mean: vec![0.0; c],
            var: vec![1.0; c],
        });
        BnLayer {
            gamma,
            beta,
            state: self.bn.len() - 1,
        }
    }
}

/// Builds a freshly He-initialized network.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Network> {
    config.validate()?;
    let mut b = Builder {
        params: Vec::new(),
        bn: Vec::new(),
        analog: Vec::new(),
        rng: split_stream(seed, "init", 0),
    };
    let mut layers = Vec::new();
    match config.family {
        Family::Lenet => {
            let mut cin = config.in_channels;
            for (i, &w) in config.prefix_widths.iter().enumerate() {
                let (id, bias) = b.conv(&format!("pre{}", i + 1), cin, w, 3, true);
                layers.push(Layer::Conv { id, stride: 1, pad: 1, bias });
                layers.push(Layer::Relu);
                cin = w;
            }
            let [w1, w2, w3] = [config.widths[0], config.widths[1], config.widths[2]];
            let (id, bias) = b.conv("conv1", cin, w1, 5, true);
            layers.extend([Layer::Conv { id, stride: 1, pad: 0, bias }, Layer::Relu, Layer::MaxPool(2)]);
            let (id, bias) = b.conv("conv2", w1, w2, 5, true);
            layers.extend([Layer::Conv { id, stride: 1, pad: 0, bias }, Layer::Relu, Layer::MaxPool(2)]);
            let side = ((config.in_size - 4) / 2 - 4) / 2;
            layers.push(Layer::Flatten);
            let (id, bias) = b.linear("fc1", w2 * side * side, w3);
            layers.extend([Layer::Linear { id, bias }, Layer::Relu]);
            let (id, bias) = b.linear("fc2", w3, config.classes);
            layers.push(Layer::Linear { id, bias });
        }
        Family::ResnetCompact => {
            let w0 = config.widths[0];
            let (id, _) = b.conv("stem.conv", config.in_channels, w0, 3, false);
            layers.push(Layer::Conv { id, stride: 1, pad: 1, bias: None });
            layers.push(Layer::BatchNorm(b.batch_norm("stem.bn", w0)));
            layers.push(Layer::Relu);
            let mut cin = w0;
            for (s, &w) in config.widths.iter().enumerate() {
                for blk in 0..config.blocks_per_stage {
                    let stride = if s > 0 && blk == 0 { 2 } else { 1 };
                    let p = format!("stage{}.block{}", s + 1, blk);
                    let (c1, _) = b.conv(&format!("{p}.conv1"), cin, w, 3, false);
                    let bn1 = b.batch_norm(&format!("{p}.bn1"), w);
                    let (c2, _) = b.conv(&format!("{p}.conv2"), w, w, 3, false);
                    let bn2 = b.batch_norm(&format!("{p}.bn2"), w);
                    let shortcut = (stride != 1 || cin != w).then(|| {
                        let (sc, _) = b.conv(&format!("{p}.shortcut"), cin, w, 1, false);
                        (sc, b.batch_norm(&format!("{p}.shortcut_bn"), w))
                    });
                    layers.push(Layer::Residual(Box::new(ResBlock {
                        conv1: c1,
                        bn1,
                        conv2: c2,
                        bn2,
                        stride,
                        shortcut,
                    })));
                    cin = w;
                }
            }
            layers.push(Layer::GlobalAvgPool);
            let (id, bias) = b.linear("fc", cin, config.classes);
            layers.push(Layer::Linear { id, bias });
        }
    }
    Ok(Network::from_parts(config.clone(), b.params, b.bn, b.analog, layers))
}
