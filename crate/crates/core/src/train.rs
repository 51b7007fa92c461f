//! Training pipelines: clean pretraining, clip-and-finetune, and noisy
//! student retraining with a distillation + noise-injection loss.
//!
//! Noise enters the forward pass as a constant added to the weights, so the
//! backward pass hands `∂L/∂(W₀+ΔW)` straight to `W₀` (straight-through).

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::{cosine_lr, sgd_step, Tape, Tensor, Var};
use crate::error::{param_err, Error, Result};
use crate::models::{clip_weights, ForwardOptions, ForwardOutput, LayerQuant, Network};
use crate::noise::{NoiseContextSet, NoiseSpec};
use crate::quant::{calibrate, QuantPoint, QuantSpec};
use crate::rng::{split_stream, Stream};

/// Batch size used for inference-only passes.
pub const EVAL_BATCH: usize = 500;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub lr0: f32,
    #[serde(default)]
    pub schedule: Schedule,
    /// Weight of the soft-target term; 0 is plain noise injection.
    #[serde(default)]
    pub alpha: f32,
    #[serde(default = "default_temperature")]
    pub temperature: f32,
    /// Training noise. Temporal fluctuation is ignored during training.
    #[serde(default = "NoiseSpec::default")]
    pub noise: NoiseSpec,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f32,
    #[serde(default)]
    pub seed: u64,
    /// Examples drawn per epoch from the shuffled training set; 0 uses all.
    #[serde(default)]
    pub train_subset: usize,
    /// Run the network's quantizers during training.
    #[serde(default)]
    pub quantized: bool,
}

fn default_batch() -> usize {
    128
}
fn default_temperature() -> f32 {
    6.0
}
fn default_weight_decay() -> f32 {
    1e-4
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec::ideal(0.0, 0)
    }
}

impl TrainConfig {
    /// Clean training at learning rate 0.1.
    pub fn clean(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: default_batch(),
            lr0: 0.1,
            schedule: Schedule::Cosine,
            alpha: 0.0,
            temperature: default_temperature(),
            noise: NoiseSpec::default(),
            weight_decay: default_weight_decay(),
            seed,
            train_subset: 0,
            quantized: false,
        }
    }

    /// Noisy retraining at learning rate 0.01; `alpha = 1` distills at `T = 6`.
    pub fn retrain(epochs: usize, eta: f32, alpha: f32, seed: u64) -> Self {
        Self {
            lr0: 0.01,
            alpha,
            noise: NoiseSpec::ideal(eta, seed),
            ..Self::clean(epochs, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return param_err("batch_size must be positive");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return param_err(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return param_err(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return param_err(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return param_err(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        self.noise.validate()
    }
}

/// Loss components of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub hard: f64,
    /// `α·T²·H(softmax(zˢ/T), softmax(zᵀ/T))`.
    pub soft: f64,
    pub reg: f64,
    pub total: f64,
}

pub fn one_hot(labels: &[u8], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= classes {
            return param_err(format!("label {l} out of range for {classes} classes"));
        }
        data[i * classes + l as usize] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Rows of `softmax(z / T)` as a plain tensor.
pub fn soft_targets(logits: &Tensor, t: f32) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let z = tape.constant(logits.clone());
    let p = tape.softmax_t(z, t)?;
    Ok(tape.value(p).clone())
}

/// `H(softmax(zˢ), y) + α·T²·H(softmax(zˢ/T), softmax(zᵀ/T))`.
///
/// Teacher logits enter as constants. The L2 term is reported separately by
/// [`regularization`]; its gradient is applied inside [`sgd_step`].
pub fn distill_loss(
    tape: &mut Tape,
    student: Var,
    teacher: Option<&Tensor>,
    labels: &[u8],
    alpha: f32,
    t: f32,
) -> Result<(Var, LossTerms)> {
    if !(t > 0.0) {
        return param_err(format!("temperature must be > 0, got {t}"));
    }
    let classes = *tape.value(student).shape().last().unwrap_or(&0);
    let hard = tape.softmax_cross_entropy(student, 1.0, &one_hot(labels, classes)?)?;
    let mut terms = LossTerms {
        hard: tape.value(hard).data()[0] as f64,
        ..LossTerms::default()
    };
    if alpha == 0.0 {
        terms.total = terms.hard;
        return Ok((hard, terms));
    }
    let Some(zt) = teacher else {
        return param_err("alpha > 0 needs teacher logits");
    };
    if zt.shape() != tape.value(student).shape() {
        return Err(Error::Dimension(format!(
            "teacher logits {:?} vs student logits {:?}",
            zt.shape(),
            tape.value(student).shape()
        )));
    }
    let q = soft_targets(zt, t)?;
    let soft = tape.softmax_cross_entropy(student, t, &q)?;
    let soft = tape.scale(soft, alpha * t * t);
    terms.soft = tape.value(soft).data()[0] as f64;
    terms.total = terms.hard + terms.soft;
    let total = tape.add(hard, soft)?;
    Ok((total, terms))
}

/// `½·wd·Σ W²` over crossbar weights.
pub fn regularization(net: &Network, weight_decay: f32) -> f64 {
    let sq: f64 = net
        .params
        .iter()
        .filter(|p| p.decays())
        .flat_map(|p| p.value.data())
        .map(|&v| v as f64 * v as f64)
        .sum();
    0.5 * weight_decay as f64 * sq
}

/// Forward pass with one fresh `ΔW` per analog layer. A silent (η = 0) noise
/// set adds nothing, so the result is bit-identical to a clean pass.
pub fn noisy_forward(
    net: &Network,
    tape: &mut Tape,
    x: Var,
    noise: Option<&NoiseContextSet>,
    rng: &mut Stream,
    train: bool,
    quantized: bool,
) -> Result<ForwardOutput> {
    let perturbation = match noise {
        Some(ctx) if !ctx.is_silent() => {
            if ctx.layers.len() != net.analog_layers().len() {
                return Err(Error::Config(format!(
                    "noise contexts cover {} analog layers, network has {}",
                    ctx.layers.len(),
                    net.analog_layers().len()
                )));
            }
            Some(ctx.sample(ctx.spec.eta, rng))
        }
        _ => None,
    };
    let opts = ForwardOptions {
        train,
        perturbation: perturbation.as_ref(),
        quantized,
    };
    net.forward(tape, x, &opts)
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub terms: LossTerms,
    pub lr: f32,
}

/// Everything a step needs besides the student and the batch.
pub struct StepContext<'a> {
    pub cfg: &'a TrainConfig,
    pub teacher: Option<&'a Network>,
    pub noise: Option<&'a NoiseContextSet>,
}

/// One noisy forward, backward through `W₀+ΔW` onto `W₀`, SGD update and re-clip.
pub fn train_step(
    student: &mut Network,
    x: &Tensor,
    labels: &[u8],
    ctx: &StepContext<'_>,
    rng: &mut Stream,
    lr: f32,
) -> Result<StepReport> {
    let cfg = ctx.cfg;
    let zt = if cfg.alpha > 0.0 {
        let teacher = ctx
            .teacher
            .ok_or_else(|| Error::Parameter("alpha > 0 needs a teacher".into()))?;
        Some(teacher.predict(x, &ForwardOptions::clean(), EVAL_BATCH)?)
    } else {
        None
    };
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = noisy_forward(student, &mut tape, xv, ctx.noise, rng, true, cfg.quantized)?;
    if !tape.value(out.logits).all_finite() {
        return Err(Error::Training(format!("non-finite logits at lr {lr}")));
    }
    let (loss, mut terms) = distill_loss(&mut tape, out.logits, zt.as_ref(), labels, cfg.alpha, cfg.temperature)?;
    if !terms.total.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss (hard {}, soft {}) at lr {lr}",
            terms.hard, terms.soft
        )));
    }
    terms.reg = regularization(student, cfg.weight_decay);
    terms.total += terms.reg;
    let grads = tape.backward(loss)?;
    student.zero_grads();
    for (idx, g) in grads.params() {
        student.params[idx].grad.data_mut().copy_from_slice(g);
    }
    sgd_step(student.params.iter_mut(), lr, cfg.weight_decay);
    student.commit_bn_stats(&out.bn_stats);
    Ok(StepReport { terms, lr })
}

/// Top-1 accuracy of `net` on `data`.
pub fn accuracy(net: &Network, data: &Dataset, opts: &ForwardOptions<'_>) -> Result<f64> {
    let logits = net.predict(&data.images, opts, EVAL_BATCH)?;
    let hits = logits
        .argmax_rows()
        .iter()
        .zip(&data.labels)
        .filter(|(p, &l)| **p == l as usize)
        .count();
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// Per-epoch training summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    pub lr_last: f32,
    pub loss: LossTerms,
    pub clean_acc: Option<f64>,
    /// Accuracy under one fixed noise instance at the training η.
    pub noisy_acc: Option<f64>,
    pub seconds: f64,
}

/// Held-out data evaluated after every epoch.
pub struct Monitor<'a> {
    pub data: &'a Dataset,
    pub noisy: bool,
}

fn training_noise(net: &Network, cfg: &TrainConfig) -> Result<Option<NoiseContextSet>> {
    if cfg.noise.eta == 0.0 {
        return Ok(None);
    }
    let spec = NoiseSpec {
        temporal_frac: 0.0,
        ..cfg.noise
    };
    Ok(Some(NoiseContextSet::instantiate(spec, &net.noise_references()?, 0)?))
}

/// Runs epochs `start_epoch..cfg.epochs` of cosine-scheduled SGD.
///
/// Shuffling, noise and schedule position depend only on the seed and epoch
/// index, so resuming at an epoch boundary replays the uninterrupted run.
pub fn fit(
    student: &mut Network,
    teacher: Option<&Network>,
    train: &Dataset,
    cfg: &TrainConfig,
    start_epoch: usize,
    monitor: Option<&Monitor<'_>>,
    on_epoch: &mut dyn FnMut(&EpochReport, &Network) -> Result<()>,
) -> Result<Vec<EpochReport>> {
    cfg.validate()?;
    if train.is_empty() {
        return param_err("empty training set");
    }
    let noise = training_noise(student, cfg)?;
    let used = if cfg.train_subset == 0 {
        train.len()
    } else {
        cfg.train_subset.min(train.len())
    };
    let steps = used.div_ceil(cfg.batch_size);
    let total = steps * cfg.epochs;
    let ctx = StepContext {
        cfg,
        teacher,
        noise: noise.as_ref(),
    };
    let mut reports = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let clock = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut split_stream(cfg.seed, "shuffle", epoch as u64));
        order.truncate(used);
        let mut rng = split_stream(cfg.noise.master_seed, "train-noise", epoch as u64);
        let mut sum = LossTerms::default();
        let mut lr = cfg.lr0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            lr = cosine_lr(epoch * steps + b, total, cfg.lr0)?;
            let x = train.images.gather_rows(idx);
            let labels: Vec<u8> = idx.iter().map(|&i| train.labels[i]).collect();
            let r = train_step(student, &x, &labels, &ctx, &mut rng, lr).map_err(|e| match e {
                Error::Training(m) => Error::Training(format!("epoch {epoch}, step {b}: {m}")),
                other => other,
            })?;
            sum.hard += r.terms.hard;
            sum.soft += r.terms.soft;
            sum.reg += r.terms.reg;
            sum.total += r.terms.total;
        }
        let k = steps as f64;
        let mut report = EpochReport {
            epoch,
            steps,
            lr_last: lr,
            loss: LossTerms {
                hard: sum.hard / k,
                soft: sum.soft / k,
                reg: sum.reg / k,
                total: sum.total / k,
            },
            clean_acc: None,
            noisy_acc: None,
            seconds: 0.0,
        };
        if let Some(m) = monitor {
            report.clean_acc = Some(accuracy(student, m.data, &ForwardOptions::eval(None, cfg.quantized))?);
            if m.noisy {
                if let Some(n) = &noise {
                    let p = n.sample(n.spec.eta, &mut split_stream(n.spec.master_seed, "monitor", epoch as u64));
                    report.noisy_acc = Some(accuracy(student, m.data, &ForwardOptions::eval(Some(&p), cfg.quantized))?);
                }
            }
        }
        report.seconds = clock.elapsed().as_secs_f64();
        on_epoch(&report, student)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Teacher pipeline settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    pub finetune: TrainConfig,
    #[serde(default = "default_clip_k")]
    pub clip_k: f32,
    /// Test accuracy below this records a warning.
    #[serde(default)]
    pub accuracy_floor: f64,
}

fn default_clip_k() -> f32 {
    2.0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub pretrain: Vec<EpochReport>,
    pub clipped_acc: f64,
    pub finetune: Vec<EpochReport>,
    pub test_acc: f64,
    pub warning: Option<String>,
}

/// Clips weights to `±k·σ_W,l` (frozen from then on) and finetunes cleanly.
pub fn clip_and_finetune(
    net: &mut Network,
    cfg: &PretrainConfig,
    train: &Dataset,
    test: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochReport, &Network) -> Result<()>,
) -> Result<(f64, Vec<EpochReport>)> {
    clip_weights(net, cfg.clip_k);
    let clipped_acc = accuracy(net, test, &ForwardOptions::clean())?;
    let reports = fit(net, None, train, &cfg.finetune, 0, None, on_epoch)?;
    Ok((clipped_acc, reports))
}

/// Clean training, clipping, then finetuning of a freshly built network.
pub fn pretrain_teacher(
    mut net: Network,
    cfg: &PretrainConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<(Network, TeacherReport)> {
    let mut report = TeacherReport {
        pretrain: fit(&mut net, None, train, &cfg.train, 0, None, &mut |_, _| Ok(()))?,
        ..TeacherReport::default()
    };
    let (clipped, ft) = clip_and_finetune(&mut net, cfg, train, test, &mut |_, _| Ok(()))?;
    report.clipped_acc = clipped;
    report.finetune = ft;
    report.test_acc = accuracy(&net, test, &ForwardOptions::clean())?;
    if report.test_acc < cfg.accuracy_floor {
        report.warning = Some(format!(
            "teacher accuracy {:.4} below floor {:.4}",
            report.test_acc, cfg.accuracy_floor
        ));
    }
    Ok((net, report))
}

/// Warm-starts a student from `init` and retrains it under noise.
///
/// `teacher` supplies soft targets when `cfg.alpha > 0`; it is only read.
pub fn retrain_student(
    init: &Network,
    teacher: &Network,
    cfg: &TrainConfig,
    train: &Dataset,
    monitor: Option<&Monitor<'_>>,
    on_epoch: &mut dyn FnMut(&EpochReport, &Network) -> Result<()>,
) -> Result<(Network, Vec<EpochReport>)> {
    let mut student = init.clone();
    let reports = fit(&mut student, Some(teacher), train, cfg, 0, monitor, on_epoch)?;
    Ok((student, reports))
}

/// Largest number of samples kept per quantization point during calibration.
const CALIBRATION_CAP: usize = 1 << 22;

fn strided(values: &[f32], out: &mut Vec<f32>, cap: usize) {
    let stride = values.len().div_ceil(cap.max(1)).max(1);
    out.extend(values.iter().step_by(stride));
}

/// Calibrates the quantizers of every analog layer. Activation and output
/// ranges are the 0.1/99.9 percentiles seen over `batches` clean
/// full-precision training batches; the weight range is the layer's frozen
/// clip range (its min/max when unclipped).
pub fn calibrate_quantizers(
    net: &Network,
    train: &Dataset,
    bits: u32,
    batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<LayerQuant>> {
    let n_layers = net.analog_layers().len();
    let mut acts = vec![Vec::new(); n_layers];
    let mut outs = vec![Vec::new(); n_layers];
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut split_stream(seed, "calibration", 0));
    let per_batch_cap = CALIBRATION_CAP / batches.max(1);
    for idx in order.chunks(batch_size.max(1)).take(batches) {
        let mut tape = Tape::inference();
        let x = tape.constant(train.images.gather_rows(idx));
        let f = net.forward(&mut tape, x, &ForwardOptions::clean())?;
        for (id, xin, y) in f.analog_io {
            strided(tape.value(xin).data(), &mut acts[id], per_batch_cap);
            strided(tape.value(y).data(), &mut outs[id], per_batch_cap);
        }
    }
    (0..n_layers)
        .map(|id| {
            let name = &net.analog_layers()[id].name;
            let ctx = |e: Error| Error::Calibration(format!("layer {name}: {e}"));
            let (a0, a1) = calibrate(&acts[id], 0.1, 99.9).map_err(ctx)?;
            let w = net.weight(id);
            let (w0, w1) = w.clip_range.unwrap_or_else(|| {
                let d = w.value.data();
                (d.iter().copied().fold(f32::INFINITY, f32::min), d.iter().copied().fold(f32::NEG_INFINITY, f32::max))
            });
            let (o0, o1) = calibrate(&outs[id], 0.1, 99.9).map_err(ctx)?;
            Ok(LayerQuant {
                activations: QuantSpec::new(bits, a0, a1, QuantPoint::Activations)?,
                weights: QuantSpec::new(bits, w0, w1, QuantPoint::Weights)?,
                outputs: QuantSpec::new(bits, o0, o1, QuantPoint::Outputs)?,
            })
        })
        .collect()
}
