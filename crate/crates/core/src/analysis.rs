//! Noise diagnostics: bias–variance loss decomposition, binned mutual
//! information, and accuracy under repeated noisy inference.
//!
//! Every estimator sum is accumulated in `f64`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::{Tape, Tensor};
use crate::error::{param_err, Result};
use crate::models::{ForwardOptions, Network};
use crate::noise::{sample_temporal_eta, NoiseContextSet, NoiseReference, NoiseSpec, Perturbation};
use crate::rng::split_stream;
use crate::train::{soft_targets, EVAL_BATCH};

/// Estimated loss terms at one noise level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BVReport {
    pub eta: f64,
    pub l_var: f64,
    pub l_bias: f64,
    pub l_pretrained: f64,
    pub n_instances: usize,
    /// `l_pretrained` of the clean network, used to normalize plots.
    pub normalization: f64,
}

/// Streaming per-(input, coordinate) moments over network instances.
#[derive(Clone, Debug)]
pub struct BvAccumulator {
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    instances: usize,
}

impl BvAccumulator {
    /// `len` is inputs × output coordinates.
    pub fn new(len: usize) -> Self {
        Self {
            sum: vec![0.0; len],
            sumsq: vec![0.0; len],
            instances: 0,
        }
    }

    /// Outputs of one instance for every input, row-major.
    pub fn add_instance(&mut self, outputs: &[f32]) -> Result<()> {
        if outputs.len() != self.sum.len() {
            return param_err(format!("instance has {} outputs, expected {}", outputs.len(), self.sum.len()));
        }
        for ((s, q), &v) in self.sum.iter_mut().zip(&mut self.sumsq).zip(outputs) {
            let v = v as f64;
            *s += v;
            *q += v * v;
        }
        self.instances += 1;
        Ok(())
    }

    /// Per-entry mean over instances: `f̄`.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.instances.max(1) as f64;
        self.sum.iter().map(|s| s / n).collect()
    }

    /// `l_var = mean_{x,k} (1/n) Σ_i (f_i − f̄)²`, `l_bias = mean_{x,k} (f̄ − y)²`,
    /// `l_pretrained = mean_{x,k} (f(W₀) − y)²`.
    pub fn finish(&self, targets: &[f32], clean: &[f32], eta: f64) -> Result<BVReport> {
        if self.instances < 2 {
            return param_err(format!("bias-variance needs n >= 2 instances, got {}", self.instances));
        }
        if targets.len() != self.sum.len() || clean.len() != self.sum.len() {
            return param_err("targets and clean outputs must match the accumulated shape");
        }
        let n = self.instances as f64;
        let m = self.sum.len() as f64;
        let (mut var, mut bias, mut pre) = (0.0, 0.0, 0.0);
        for i in 0..self.sum.len() {
            let mean = self.sum[i] / n;
            var += (self.sumsq[i] / n - mean * mean).max(0.0);
            bias += (mean - targets[i] as f64).powi(2);
            pre += (clean[i] as f64 - targets[i] as f64).powi(2);
        }
        Ok(BVReport {
            eta,
            l_var: var / m,
            l_bias: bias / m,
            l_pretrained: pre / m,
            n_instances: self.instances,
            normalization: pre / m,
        })
    }
}

/// Row-wise softmax outputs of `net` on `data` with an optional fixed perturbation.
pub fn softmax_outputs(net: &Network, data: &Dataset, p: Option<&Perturbation>, quantized: bool) -> Result<Tensor> {
    let logits = net.predict(&data.images, &ForwardOptions::eval(p, quantized), EVAL_BATCH)?;
    soft_targets(&logits, 1.0)
}

fn instance_perturbation(spec: &NoiseSpec, refs: &[NoiseReference], tag: &str, index: u64) -> Result<Option<Perturbation>> {
    if spec.eta == 0.0 {
        return Ok(None);
    }
    let ctx = NoiseContextSet::instantiate(*spec, refs, index)?;
    Ok(Some(ctx.sample(spec.eta, &mut split_stream(spec.master_seed, tag, index))))
}

/// Bias–variance decomposition over `n` network instances, each with one
/// fixed `ΔW` applied to the whole dataset. Squared losses use the softmax
/// output averaged over its coordinates.
pub fn estimate_bias_variance(
    net: &Network,
    spec: &NoiseSpec,
    refs: &[NoiseReference],
    data: &Dataset,
    n: usize,
) -> Result<BVReport> {
    if n < 2 {
        return param_err(format!("bias-variance needs n >= 2 instances, got {n}"));
    }
    spec.validate()?;
    let k = net.config.classes;
    let targets = crate::train::one_hot(&data.labels, k)?;
    let clean = softmax_outputs(net, data, None, false)?;
    let mut acc = BvAccumulator::new(data.len() * k);
    for i in 0..n {
        match instance_perturbation(spec, refs, "bv", i as u64)? {
            // every noiseless instance is the clean network
            None => acc.add_instance(clean.data())?,
            Some(p) => acc.add_instance(softmax_outputs(net, data, Some(&p), false)?.data())?,
        }
    }
    acc.finish(targets.data(), clean.data(), spec.eta as f64)
}

/// Linear interpolation of the first noise level where `l_var` exceeds `l_bias`.
pub fn variance_crossover(reports: &[BVReport]) -> Option<f64> {
    let gap = |r: &BVReport| r.l_var - r.l_bias;
    reports.windows(2).find_map(|w| {
        let (a, b) = (gap(&w[0]), gap(&w[1]));
        if a <= 0.0 && b > 0.0 {
            Some(w[0].eta + (w[1].eta - w[0].eta) * (-a) / (b - a))
        } else {
            None
        }
    })
}

/// Joint bin symbol of one probability vector, `bins` equal-width bins per
/// coordinate over `[0, 1]`.
pub fn bin_symbol(p: &[f32], bins: usize) -> Vec<u8> {
    p.iter()
        .map(|&v| ((v.clamp(0.0, 1.0) * bins as f32) as usize).min(bins - 1) as u8)
        .collect()
}

/// Plug-in entropy (nats) of the joint bin symbols of `outputs` rows of length `k`.
pub fn estimate_entropy(outputs: &[f32], k: usize, bins: usize) -> Result<f64> {
    if outputs.is_empty() || k == 0 {
        return param_err("entropy of an empty sample");
    }
    if bins == 0 || bins > 256 {
        return param_err(format!("bins must be in 1..=256, got {bins}"));
    }
    let mut counts: HashMap<Vec<u8>, u64> = HashMap::new();
    for row in outputs.chunks(k) {
        *counts.entry(bin_symbol(row, bins)).or_default() += 1;
    }
    Ok(entropy_of_counts(counts.values().copied()))
}

fn entropy_of_counts(counts: impl Iterator<Item = u64> + Clone) -> f64 {
    let total: u64 = counts.clone().sum();
    let t = total as f64;
    -counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / t;
            p * p.ln()
        })
        .sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MIReport {
    pub eta: f64,
    pub h_y: f64,
    pub h_y_given_x: f64,
    pub mi: f64,
    /// `mi` divided by the noiseless estimate, when one was supplied.
    pub normalized: Option<f64>,
    pub bins: usize,
    pub subset: usize,
    pub repeats: usize,
}

/// MI from outputs grouped per input: `per_input[x]` holds `repeats` rows of
/// length `k`. `H(Y)` pools every row; `H(Y|X)` averages the per-input entropies.
pub fn mi_from_outputs(per_input: &[Vec<f32>], k: usize, bins: usize, eta: f64) -> Result<MIReport> {
    if per_input.is_empty() {
        return param_err("mutual information of an empty subset");
    }
    let pooled: Vec<f32> = per_input.iter().flatten().copied().collect();
    let h_y = estimate_entropy(&pooled, k, bins)?;
    let mut h_cond = 0.0;
    for rows in per_input {
        h_cond += estimate_entropy(rows, k, bins)?;
    }
    let h_y_given_x = h_cond / per_input.len() as f64;
    Ok(MIReport {
        eta,
        h_y,
        h_y_given_x,
        mi: h_y - h_y_given_x,
        normalized: None,
        bins,
        subset: per_input.len(),
        repeats: per_input[0].len() / k,
    })
}

/// Binned MI between inputs of `subset` and softmax outputs. Each repeat is
/// a fresh network instance evaluated on the whole subset.
pub fn estimate_mi(
    net: &Network,
    spec: &NoiseSpec,
    refs: &[NoiseReference],
    subset: &Dataset,
    repeats: usize,
    bins: usize,
) -> Result<MIReport> {
    if spec.eta > 0.0 && repeats < 2 {
        return param_err(format!("noisy MI needs repeats >= 2, got {repeats}"));
    }
    if repeats == 0 {
        return param_err("MI needs at least one repeat");
    }
    spec.validate()?;
    let k = net.config.classes;
    let mut per_input = vec![Vec::with_capacity(repeats * k); subset.len()];
    let clean = softmax_outputs(net, subset, None, false)?;
    for r in 0..repeats {
        let out = match instance_perturbation(spec, refs, "mi", r as u64)? {
            None => clean.clone(),
            Some(p) => softmax_outputs(net, subset, Some(&p), false)?,
        };
        for (x, rows) in per_input.iter_mut().enumerate() {
            rows.extend_from_slice(out.row(x));
        }
    }
    mi_from_outputs(&per_input, k, bins, spec.eta as f64)
}

/// Divides every estimate by the one at η = 0 (which becomes exactly 1).
pub fn normalize_mi(reports: &mut [MIReport]) -> Result<()> {
    let Some(base) = reports.iter().find(|r| r.eta == 0.0).map(|r| r.mi) else {
        return param_err("MI normalization needs an eta = 0 estimate");
    };
    if base <= 0.0 {
        return param_err("noiseless MI is zero; cannot normalize");
    }
    for r in reports.iter_mut() {
        r.normalized = Some(if r.eta == 0.0 { 1.0 } else { r.mi / base });
    }
    Ok(())
}

/// Accuracy statistics over repeated noisy inference runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub mean: f64,
    /// Sample standard deviation across runs.
    pub std: f64,
    pub runs: usize,
    pub eta_train: f64,
    pub eta_inf: f64,
    pub temporal_frac: f64,
    pub spatial_frac: f64,
    pub accuracies: Vec<f64>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Accuracy of one network instance. `ΔW` is drawn once for the run; under
/// temporal fluctuation it is rescaled by `η_b/η₀` for every inference batch.
fn noisy_run(
    net: &Network,
    spec: &NoiseSpec,
    refs: &[NoiseReference],
    data: &Dataset,
    run: u64,
    quantized: bool,
) -> Result<f64> {
    let ctx = NoiseContextSet::instantiate(*spec, refs, run)?;
    let base = ctx.sample(spec.eta, &mut split_stream(spec.master_seed, "eval-noise", run));
    let mut temporal = split_stream(spec.master_seed, "temporal", run);
    let mut hits = 0usize;
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_BATCH).min(data.len());
        let p = if spec.temporal_frac > 0.0 {
            let eta_b = sample_temporal_eta(spec.eta, spec.temporal_frac, &mut temporal);
            base.scaled(eta_b / spec.eta)
        } else {
            base.clone()
        };
        let mut tape = Tape::inference();
        let x = tape.constant(data.images.slice_rows(start, end));
        let f = net.forward(&mut tape, x, &ForwardOptions::eval(Some(&p), quantized))?;
        hits += tape
            .value(f.logits)
            .argmax_rows()
            .iter()
            .zip(&data.labels[start..end])
            .filter(|(p, &l)| **p == l as usize)
            .count();
        start = end;
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Mean and spread of top-1 accuracy over `runs` independent network instances.
pub fn eval_accuracy_under_noise(
    net: &Network,
    spec: &NoiseSpec,
    refs: &[NoiseReference],
    data: &Dataset,
    runs: usize,
    quantized: bool,
    eta_train: f64,
) -> Result<AccuracyReport> {
    spec.validate()?;
    if runs == 0 {
        return param_err("eval needs at least one run");
    }
    let accuracies = if spec.eta == 0.0 {
        let clean = crate::train::accuracy(net, data, &ForwardOptions::eval(None, quantized))?;
        vec![clean; runs]
    } else {
        (0..runs as u64)
            .map(|r| noisy_run(net, spec, refs, data, r, quantized))
            .collect::<Result<Vec<_>>>()?
    };
    let (mean, std) = if spec.eta == 0.0 { (accuracies[0], 0.0) } else { mean_std(&accuracies) };
    Ok(AccuracyReport {
        mean,
        std,
        runs,
        eta_train,
        eta_inf: spec.eta as f64,
        temporal_frac: spec.temporal_frac as f64,
        spatial_frac: spec.spatial_frac as f64,
        accuracies,
    })
}

/// One trained model entered into a mismatch grid.
pub struct GridModel<'a> {
    pub label: String,
    pub net: &'a Network,
    pub eta_train: f64,
    pub quantized: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub label: String,
    pub report: AccuracyReport,
}

/// Accuracy of every model at every inference noise level.
pub fn noise_mismatch_grid(
    models: &[GridModel<'_>],
    eta_inf: &[f64],
    base: &NoiseSpec,
    data: &Dataset,
    runs: usize,
) -> Result<Vec<GridCell>> {
    let mut cells = Vec::new();
    for m in models {
        let refs = m.net.noise_references()?;
        for &eta in eta_inf {
            let spec = NoiseSpec { eta: eta as f32, ..*base };
            cells.push(GridCell {
                label: m.label.clone(),
                report: eval_accuracy_under_noise(m.net, &spec, &refs, data, runs, m.quantized, m.eta_train)?,
            });
        }
    }
    Ok(cells)
}
