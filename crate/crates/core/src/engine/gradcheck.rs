//! Central finite-difference check of reverse-mode gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f32,
    pub checked: usize,
}

/// Relative error with the denominator floored at `1e-6`.
pub fn relative_error(a: f32, b: f32) -> f32 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares the tape gradient of `f` at `inputs` against central differences.
///
/// `f` builds a scalar from one leaf per input tensor. `coords` limits the
/// check to the listed `(input, flat index)` pairs; `None` checks everything.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor],
    eps: f32,
    coords: Option<&[(usize, usize)]>,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0] as f64)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, x)| tape.param(i, x.clone()))
        .collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| grads.wrt(v).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
        .collect();

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, x)| (0..x.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut worst = 0.0f32;
    let mut work = inputs.to_vec();
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + eps;
        let plus = eval(&work)?;
        work[i].data_mut()[j] = orig - eps;
        let minus = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = ((plus - minus) / (2.0 * eps as f64)) as f32;
        worst = worst.max(relative_error(analytic[i].data()[j], numeric));
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked: coords.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::BatchNormMode;
    use crate::rng::split_stream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn randn(shape: Vec<usize>, index: u64) -> Tensor {
        let mut rng = split_stream(17, "gradcheck", index);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).unwrap()
    }

    /// `Σ r ⊙ y` with a fixed random `r`, so every output coordinate matters.
    fn project(tape: &mut Tape, y: Var, index: u64) -> Result<Var> {
        let r = tape.constant(randn(tape.value(y).shape().to_vec(), 1000 + index));
        let p = tape.mul(y, r)?;
        Ok(tape.sum(p))
    }

    fn check<F>(f: F, inputs: &[Tensor], eps: f32) -> f32
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let gc = grad_check(f, inputs, eps, None).unwrap();
        assert!(gc.checked > 0);
        gc.max_rel_error
    }

    #[test]
    fn sum_of_squares_and_constants() {
        let x = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let err = check(|t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        }, &[x.clone()], 1e-2);
        assert!(err < 1e-3, "{err}");

        // gradient of a constant function is zero everywhere
        let mut tape = Tape::new();
        let xv = tape.param(0, x);
        let c = tape.constant(Tensor::scalar(3.0));
        let zero = tape.scale(xv, 0.0);
        let s = tape.sum(zero);
        let out = tape.add(s, c).unwrap();
        let g = tape.backward(out).unwrap().wrt(xv).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_layer_mlp() {
        let x = randn(vec![5, 6], 0);
        let w1 = randn(vec![4, 6], 1).map(|v| v * 0.5);
        let b1 = randn(vec![4], 2);
        let w2 = randn(vec![3, 4], 3).map(|v| v * 0.5);
        let q = Tensor::new(vec![5, 3], (0..15).map(|i| if i % 3 == (i / 3) % 3 { 1.0 } else { 0.0 }).collect()).unwrap();
        let err = check(
            |t, v| {
                let h = t.linear(v[0], v[1])?;
                let h = t.add_bias(h, v[2])?;
                let h = t.relu(h);
                let z = t.linear(h, v[3])?;
                t.softmax_cross_entropy(z, 2.0, &q)
            },
            &[x, w1, b1, w2],
            1e-2,
        );
        assert!(err < 2e-2, "{err}");
    }

    #[test]
    fn each_op_matches_finite_differences() {
        let x = randn(vec![2, 3, 6, 6], 10);
        let w = randn(vec![4, 3, 3, 3], 11);
        // bilinear ops: central differences are exact up to rounding, so a wide step is safe
        let err = check(|t, v| {
            let y = t.conv2d(v[0], v[1], 1, 1)?;
            project(t, y, 0)
        }, &[x.clone(), w], 0.25);
        assert!(err < 1e-2, "conv2d {err}");

        let a = randn(vec![3, 5], 12);
        let b = randn(vec![5, 2], 13);
        let err = check(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 1)
        }, &[a.clone(), b], 0.25);
        assert!(err < 1e-2, "matmul {err}");

        let err = check(|t, v| {
            let y = t.mul(v[0], v[1])?;
            let y = t.add(y, v[0])?;
            let y = t.scale(y, -1.5);
            project(t, y, 2)
        }, &[a.clone(), randn(vec![3, 5], 14)], 0.25);
        assert!(err < 1e-2, "mul/add/scale {err}");

        // distinct, well separated values keep the argmax fixed under ±eps
        let pooled = Tensor::new(vec![1, 2, 4, 4], (0..32).map(|i| ((i * 13) % 32) as f32 * 0.1).collect()).unwrap();
        let err = check(|t, v| {
            let y = t.max_pool2d(v[0], 2)?;
            project(t, y, 3)
        }, &[pooled.clone()], 0.04);
        assert!(err < 1e-2, "max_pool {err}");

        let err = check(|t, v| {
            let y = t.global_avg_pool(v[0])?;
            let y = t.flatten(y)?;
            project(t, y, 4)
        }, &[x.clone()], 1e-2);
        assert!(err < 1e-2, "global_avg_pool {err}");

        let away = a.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
        let err = check(|t, v| {
            let y = t.relu(v[0]);
            project(t, y, 5)
        }, &[away], 0.05);
        assert!(err < 1e-2, "relu {err}");

        let err = check(|t, v| {
            let p = t.softmax_t(v[0], 3.0)?;
            project(t, p, 6)
        }, &[a.clone()], 1e-2);
        assert!(err < 2e-2, "softmax {err}");

        let err = check(|t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], BatchNormMode::Train { eps: 1e-5 })?;
            project(t, y, 7)
        }, &[randn(vec![4, 2], 15), randn(vec![2], 16), randn(vec![2], 17)], 3e-3);
        assert!(err < 3e-2, "batch_norm {err}");
    }
}
