use rand::Rng;

use super::layers::{LayerSpec, Network, NetworkSpec};
use super::tensor::Tensor;
use crate::error::Result;
use crate::seed;

/// Layer families covered by [`random_layer_spec`].
pub const LAYER_KINDS: [&str; 7] = ["conv", "relu", "max_pool", "residual", "global_avg_pool", "flatten", "fc"];

/// A small single-layer network of the given family with random geometry
/// (`fc` is preceded by a flatten).
pub fn random_layer_spec(kind: &str, rng: &mut impl Rng) -> NetworkSpec {
    let c = rng.random_range(1..=3);
    let h = rng.random_range(4..=8);
    let w = rng.random_range(4..=8);
    let layers = match kind {
        "conv" => {
            let kh = rng.random_range(1..=h.min(4));
            let kw = rng.random_range(1..=w.min(4));
            vec![LayerSpec::Conv {
                kernel: [kh, kw],
                channels: rng.random_range(1..=3),
                stride: rng.random_range(1..=2),
                padding: rng.random_range(0..=kh.min(kw) / 2),
            }]
        }
        "relu" => vec![LayerSpec::Relu],
        "max_pool" => vec![LayerSpec::MaxPool {
            size: [rng.random_range(1..=3), rng.random_range(1..=3)],
        }],
        "residual" => vec![LayerSpec::Residual { channels: c }],
        "global_avg_pool" => vec![LayerSpec::GlobalAvgPool],
        "flatten" => vec![LayerSpec::Flatten],
        "fc" => vec![
            LayerSpec::Flatten,
            LayerSpec::Fc {
                outputs: rng.random_range(1..=5),
            },
        ],
        other => panic!("unknown layer kind {other}"),
    };
    NetworkSpec {
        name: kind.into(),
        input: [c, h, w],
        layers,
        seed: rng.random(),
    }
}

/// Largest relative disagreement between back-propagated and central
/// finite-difference gradients (step `1e-6`) of a random linear functional
/// of the network output, over parameters and inputs.
pub fn max_gradient_error(spec: NetworkSpec, batch: usize, seed_value: u64) -> Result<f64> {
    let mut rng = seed::rng(seed_value, &[]);
    let mut net = Network::new(spec)?;
    // non-zero biases so ReLU units sit away from their kink
    for v in net.params_mut() {
        *v += rng.random_range(-0.1..0.1);
    }
    let [c, h, w] = net.spec().input;
    let n_in = batch * c * h * w;
    let x = Tensor::from_vec(&[batch, c, h, w], (0..n_in).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let d = net.output_dim();
    let coeffs: Vec<f64> = (0..batch * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let functional = |net: &Network, x: &Tensor| -> Result<f64> {
        let out = net.forward(x)?;
        Ok(out.data().iter().zip(&coeffs).map(|(a, b)| a * b).sum())
    };

    let (_, cache) = net.forward_train(&x)?;
    let mut grads = vec![0.0; net.n_params()];
    let dx = net.backward(cache, &Tensor::from_vec(&[batch, d], coeffs.clone())?, &mut grads)?;

    const EPS: f64 = 1e-6;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    for k in 0..net.n_params() {
        let orig = net.params()[k];
        net.params_mut()[k] = orig + EPS;
        let up = functional(&net, &x)?;
        net.params_mut()[k] = orig - EPS;
        let down = functional(&net, &x)?;
        net.params_mut()[k] = orig;
        worst = worst.max(rel(grads[k], (up - down) / (2.0 * EPS)));
    }
    let mut xp = x.clone();
    for k in 0..n_in {
        let orig = x.data()[k];
        xp.data_mut()[k] = orig + EPS;
        let up = functional(&net, &xp)?;
        xp.data_mut()[k] = orig - EPS;
        let down = functional(&net, &xp)?;
        xp.data_mut()[k] = orig;
        worst = worst.max(rel(dx.data()[k], (up - down) / (2.0 * EPS)));
    }
    Ok(worst)
}
