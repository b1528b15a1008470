use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::Network;
use super::loss::{kernel_loss, LossWeights};
use super::tensor::Tensor;
use crate::error::{check_len, Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayInterval {
    Epoch,
    HalfEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub decay_interval: DecayInterval,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::facial_desk()
    }
}

impl TrainConfig {
    pub fn facial_paper() -> Self {
        Self {
            learning_rate: 1e-3,
            decay: 0.9,
            decay_interval: DecayInterval::Epoch,
            epochs: 70,
            batch_size: 64,
            momentum: 0.9,
            loss_weights: LossWeights::default(),
            seed: 0,
        }
    }

    pub fn eye_paper() -> Self {
        Self {
            learning_rate: 1e-4,
            decay: 0.96,
            decay_interval: DecayInterval::HalfEpoch,
            epochs: 70,
            batch_size: 256,
            ..Self::facial_paper()
        }
    }

    pub fn facial_desk() -> Self {
        Self {
            learning_rate: 2e-4,
            epochs: 24,
            batch_size: 16,
            ..Self::facial_paper()
        }
    }

    pub fn eye_desk() -> Self {
        Self {
            learning_rate: 5e-4,
            epochs: 12,
            batch_size: 16,
            ..Self::eye_paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.decay > 0.0
            && self.epochs > 0
            && self.batch_size > 0
            && (0.0..1.0).contains(&self.momentum)
            && self.loss_weights.dense >= 0.0
            && self.loss_weights.landmark >= 0.0;
        if !ok {
            return Err(Error::InvalidInput(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }

    /// Learning rate for batch `batch` of `batches` in `epoch`.
    pub fn learning_rate_at(&self, epoch: usize, batch: usize, batches: usize) -> f64 {
        let steps = match self.decay_interval {
            DecayInterval::Epoch => epoch,
            DecayInterval::HalfEpoch => 2 * epoch + (2 * batch) / batches.max(1),
        };
        self.learning_rate * self.decay.powi(steps as i32)
    }
}

/// One training example: planar pixels (`/255` on use), regression target
/// and, for the three-term facial loss, its quadratic kernel.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub pixels: Vec<u8>,
    pub target: Vec<f64>,
    pub kernel: Option<Arc<DMatrix<f64>>>,
}

impl TrainSample {
    fn loss(&self, pred: &[f64]) -> (f64, Vec<f64>) {
        match &self.kernel {
            Some(q) => kernel_loss(pred, &self.target, q),
            None => {
                let grad = pred.iter().zip(&self.target).map(|(p, t)| 2.0 * (p - t)).collect();
                (pred.iter().zip(&self.target).map(|(p, t)| (p - t).powi(2)).sum(), grad)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch.
    pub loss: f64,
    /// Learning rate at the first batch of the epoch.
    pub learning_rate: f64,
}

/// Pixels of `samples` as a `[n, c, h, w]` tensor scaled to `[0, 1]`.
pub fn batch_tensor(input: [usize; 3], samples: &[&[u8]]) -> Result<Tensor> {
    let len: usize = input.iter().product();
    let mut data = Vec::with_capacity(len * samples.len());
    for s in samples {
        check_len("sample pixels", len, s.len())?;
        data.extend(s.iter().map(|&p| f64::from(p) / 255.0));
    }
    Tensor::from_vec(&[samples.len(), input[0], input[1], input[2]], data)
}

const CHUNK: usize = 8;

/// Loss sum and gradient sum (scaled by `scale`) over one chunk.
fn chunk_gradient(net: &Network, samples: &[&TrainSample], scale: f64) -> Result<(f64, Vec<f64>)> {
    let pixels: Vec<&[u8]> = samples.iter().map(|s| s.pixels.as_slice()).collect();
    let x = batch_tensor(net.spec().input, &pixels)?;
    let (out, cache) = net.forward_train(&x)?;
    let d = net.output_dim();
    let mut g = Tensor::zeros(&[samples.len(), d]);
    let mut total = 0.0;
    for (i, s) in samples.iter().enumerate() {
        check_len("training target", d, s.target.len())?;
        let (e, grad) = s.loss(out.item(i));
        total += e;
        g.item_mut(i).iter_mut().zip(grad).for_each(|(a, b)| *a = b * scale);
    }
    let mut grads = vec![0.0; net.n_params()];
    net.backward(cache, &g, &mut grads)?;
    Ok((total, grads))
}

/// Mean loss over `samples` and its gradient. Chunks are evaluated in
/// parallel and reduced in a fixed order, so the result does not depend on
/// the thread count.
pub fn batch_gradient(net: &Network, samples: &[&TrainSample]) -> Result<(f64, Vec<f64>)> {
    let scale = 1.0 / samples.len() as f64;
    let parts: Vec<(f64, Vec<f64>)> = samples
        .par_chunks(CHUNK)
        .map(|c| chunk_gradient(net, c, scale))
        .collect::<Result<_>>()?;
    let mut grads = vec![0.0; net.n_params()];
    let mut loss = 0.0;
    for (e, g) in parts {
        loss += e;
        grads.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    Ok((loss * scale, grads))
}

/// Mini-batch SGD with momentum (`v ← μv + g`, `w ← w − lr·v`). Each epoch
/// visits the samples in a permutation drawn from the config seed; one
/// JSON line per epoch goes to `log` when given.
pub fn train(
    net: &mut Network,
    samples: &[TrainSample],
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("no training samples".into()));
    }
    let batches = samples.len().div_ceil(config.batch_size);
    let mut velocity = vec![0.0; net.n_params()];
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = seed::rng(config.seed, &[seed::STREAM_SHUFFLE, epoch as u64]);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&TrainSample> = idx.iter().map(|&i| &samples[i]).collect();
            let (loss, grads) = batch_gradient(net, &batch)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "training diverged at epoch {epoch}, batch {b}: loss {loss} (learning rate {:e})",
                    config.learning_rate_at(epoch, b, batches)
                )));
            }
            let lr = config.learning_rate_at(epoch, b, batches);
            for ((w, v), g) in net.params_mut().iter_mut().zip(&mut velocity).zip(&grads) {
                *v = config.momentum * *v + g;
                *w -= lr * *v;
            }
            total += loss * batch.len() as f64;
        }
        let record = EpochRecord {
            epoch,
            loss: total / samples.len() as f64,
            learning_rate: config.learning_rate_at(epoch, 0, batches),
        };
        log::info!("epoch {epoch}: loss {:.6e}, lr {:.3e}", record.loss, record.learning_rate);
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(&record).expect("record serialises");
            writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        history.push(record);
    }
    Ok(history)
}

/// Network outputs for each sample, evaluated in fixed-size batches.
pub fn predict_batch(net: &Network, pixels: &[&[u8]]) -> Result<Vec<Vec<f64>>> {
    let parts: Vec<Vec<Vec<f64>>> = pixels
        .par_chunks(32)
        .map(|c| {
            let out = net.forward(&batch_tensor(net.spec().input, c)?)?;
            Ok((0..c.len()).map(|i| out.item(i).to_vec()).collect())
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}
