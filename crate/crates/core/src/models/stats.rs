use super::network::Network;

/// Population standard deviation, accumulated one-pass (Welford) in `f64`.
pub fn population_std(xs: &[f32]) -> f32 {
    let mut mean = 0.0f64;
    let mut m2 = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let x = x as f64;
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    if xs.is_empty() {
        0.0
    } else {
        (m2 / xs.len() as f64).sqrt() as f32
    }
}

/// σ_W,l of every analog layer's weight tensor.
pub fn layer_weight_std(net: &Network) -> Vec<f32> {
    (0..net.analog_layers().len())
        .map(|id| population_std(net.weight(id).value.data()))
        .collect()
}

/// Clamps each analog weight to `[−k·σ_W,l, k·σ_W,l]` and freezes that range.
///
/// Layers that already carry a frozen range keep it, so repeated calls are
/// idempotent. Returns the per-layer ranges.
pub fn clip_weights(net: &mut Network, k: f32) -> Vec<(f32, f32)> {
    let stds = layer_weight_std(net);
    let weights: Vec<usize> = net.analog_layers().iter().map(|a| a.weight).collect();
    weights
        .into_iter()
        .zip(stds)
        .map(|(w, std)| {
            let p = &mut net.params[w];
            let range = *p.clip_range.get_or_insert((-k * std, k * std));
            p.apply_clip();
            range
        })
        .collect()
}
