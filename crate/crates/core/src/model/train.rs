//! Mini-batch SGD with momentum, with optional PGD adversarial batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Classifier;
use crate::attacks::{pgd_perturb, random_start, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{BatchStats, Layer};
use crate::loss::cross_entropy_with_logits;
use crate::rng::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// L2 penalty on dense and conv weights.
    pub weight_decay: f64,
    /// Weight of the newest batch in the batchnorm running statistics.
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 0.01,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 0.0,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && (0.0..=1.0).contains(&self.bn_momentum);
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "train config needs batch_size > 0, finite lr > 0, momentum in [0, 1), weight_decay >= 0, bn_momentum in [0, 1]: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Trains a copy of `c` on `data` with cross-entropy loss.
pub fn train(c: &Classifier, data: &Dataset, cfg: &TrainConfig) -> Result<Classifier> {
    fit(c, data, cfg, None)
}

/// Like [`train`], but every batch is replaced by PGD examples crafted against
/// the current parameters (inference-mode batchnorm), one random start each.
pub fn adv_train(c: &Classifier, data: &Dataset, attack: &AttackConfig, cfg: &TrainConfig) -> Result<Classifier> {
    attack.validate()?;
    fit(c, data, cfg, Some(attack))
}

fn fit(c: &Classifier, data: &Dataset, cfg: &TrainConfig, attack: Option<&AttackConfig>) -> Result<Classifier> {
    cfg.validate()?;
    if data.input_dim() != c.input_dim() || data.num_classes() > c.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "dataset (D={}, K={}) does not fit classifier (D={}, K={})",
            data.input_dim(),
            data.num_classes(),
            c.input_dim(),
            c.num_classes()
        )));
    }
    let mut model = c.clone();
    let mut velocity: Vec<Vec<Tensor>> = model
        .layers()
        .iter()
        .map(|l| l.params().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let d = data.input_dim();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let labels: Vec<usize> = chunk.iter().map(|&i| data.label(i)).collect();
            let images: Vec<f64> = match attack {
                Some(ac) if ac.epsilon > 0.0 => {
                    let frozen = &model;
                    let perturbed: Vec<Vec<f64>> = chunk
                        .par_iter()
                        .enumerate()
                        .map(|(pos, &i)| {
                            let seed = derive_seed(ac.seed, &[epoch as u64, batch_idx as u64, pos as u64]);
                            let x = data.image(i);
                            let start = random_start(x, ac.epsilon, seed);
                            pgd_perturb(frozen, x, data.label(i), &start, ac, ac.n_init + ac.n_attack)
                        })
                        .collect::<Result<_>>()?;
                    perturbed.concat()
                }
                _ => chunk.iter().flat_map(|&i| data.image(i).iter().copied()).collect(),
            };
            debug_assert_eq!(images.len(), chunk.len() * d);
            let shape: Vec<usize> = std::iter::once(chunk.len())
                .chain(model.input_shape().iter().copied())
                .collect();
            let x = Tensor::new(shape, images)?;
            let loss = step(&mut model, &mut velocity, &x, &labels, cfg)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    loss,
                });
            }
        }
    }
    model.meta.train_seed = Some(cfg.seed);
    model.meta.epochs += cfg.epochs;
    model.meta.dataset_id = Some(data.id.clone());
    model.meta.adversarial_epsilon = attack.map(|a| a.epsilon);
    Ok(model)
}

/// One forward/backward/update on a batch; returns the mean loss.
fn step(
    model: &mut Classifier,
    velocity: &mut [Vec<Tensor>],
    x: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    let b = x.batch();
    let split = model.split();
    let repr_dim = model.repr_dim();

    // forward, training-mode batchnorm
    let mut inputs: Vec<Tensor> = Vec::with_capacity(model.layers().len());
    let mut stats: Vec<Option<BatchStats>> = vec![None; model.layers().len()];
    let mut h = x.clone();
    for (l, layer) in model.layers().iter().enumerate() {
        if l == split {
            h = h.reshape(vec![b, repr_dim])?;
        }
        let out = match layer {
            Layer::BatchNorm(bn) => {
                let (y, s) = bn.forward_train(&h)?;
                stats[l] = Some(s);
                y
            }
            other => other.forward(&h)?,
        };
        inputs.push(h);
        h = out;
    }
    let k = model.num_classes();
    let mut total = 0.0;
    let mut dz = vec![0.0; b * k];
    for (bi, &y) in labels.iter().enumerate() {
        let (loss, g) = cross_entropy_with_logits(h.item(bi), y)?;
        total += loss;
        for (d, gv) in dz[bi * k..(bi + 1) * k].iter_mut().zip(g) {
            *d = gv / b as f64;
        }
    }
    let mean_loss = total / b as f64;
    if !mean_loss.is_finite() {
        return Ok(mean_loss);
    }

    // backward
    let mut grads: Vec<Vec<Tensor>> = vec![Vec::new(); model.layers().len()];
    let mut g = Tensor::new(vec![b, k], dz)?;
    for l in (0..model.layers().len()).rev() {
        let layer = &model.layers()[l];
        let (dx, pg) = match (layer, &stats[l]) {
            (Layer::BatchNorm(bn), Some(s)) => bn.backward_train(&inputs[l], s, &g)?,
            _ => layer.backward(&inputs[l], &g)?,
        };
        grads[l] = pg;
        g = dx;
        if l == split && l > 0 {
            let head_out = model.layers()[l - 1].output_shape(inputs[l - 1].shape())?;
            g = g.reshape(head_out)?;
        }
    }

    // update
    for (l, layer) in model.layers_mut().iter_mut().enumerate() {
        let decays = matches!(layer, Layer::Dense(_) | Layer::Conv2d(_));
        for (pi, p) in layer.params_mut().into_iter().enumerate() {
            let vel = velocity[l][pi].data_mut();
            let gd = grads[l][pi].data();
            let wd = if decays && pi == 0 { cfg.weight_decay } else { 0.0 };
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(vel.iter_mut()).zip(gd) {
                *vv = cfg.momentum * *vv + gv + wd * *pv;
                *pv -= cfg.lr * *vv;
            }
        }
        if let (Layer::BatchNorm(bn), Some(s)) = (layer, &stats[l]) {
            let m = cfg.bn_momentum;
            let unbias = if s.count > 1 {
                s.count as f64 / (s.count - 1) as f64
            } else {
                1.0
            };
            for c in 0..bn.channels() {
                let rm = &mut bn.running_mean.data_mut()[c];
                *rm = (1.0 - m) * *rm + m * s.mean[c];
                let rv = &mut bn.running_var.data_mut()[c];
                *rv = (1.0 - m) * *rv + m * s.var[c] * unbias;
            }
        }
    }
    Ok(mean_loss)
}
