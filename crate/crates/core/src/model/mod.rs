//! A classifier viewed as a nonlinear head followed by one linear tail.
//!
//! For an input `x` the head produces the representation vector `v = f_h(x)`
//! in `R^N` and the tail produces logits `z = w v + b` in `R^K`. No softmax is
//! applied anywhere on the inference path.

mod checkpoint;
mod train;

pub use checkpoint::{from_bytes as checkpoint_from_bytes, load, save, to_bytes as checkpoint_bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{adv_train, train, TrainConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv2d, Dense, Layer, Padding};
use crate::loss::{argmax, cross_entropy_with_logits};
use crate::tensor::Tensor;

/// Architecture presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum Architecture {
    /// Two `conv 3x3 -> batchnorm -> relu -> maxpool` blocks (16 and 32
    /// channels, valid padding), then dense to `repr_dim`, then dense to
    /// `num_classes`.
    SmallCnn {
        input_shape: Vec<usize>,
        repr_dim: usize,
        num_classes: usize,
    },
    /// Dense + relu hidden layers, a dense layer to `repr_dim`, then the tail.
    Mlp {
        input_dim: usize,
        hidden: Vec<usize>,
        repr_dim: usize,
        num_classes: usize,
    },
    /// Empty head: `v = x`, so the classifier is a single linear layer.
    IdentityHead { input_dim: usize, num_classes: usize },
    /// Any layer stack loaded from a checkpoint.
    Custom,
}

/// Provenance stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub architecture: Option<Architecture>,
    pub init_seed: Option<u64>,
    pub train_seed: Option<u64>,
    pub epochs: usize,
    pub dataset_id: Option<String>,
    /// Epsilon of the PGD examples used for adversarial training, if any.
    pub adversarial_epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    repr_dim: usize,
    num_classes: usize,
    pub meta: ModelMeta,
}

/// Terminal scalar whose input gradient is requested.
#[derive(Debug, Clone, PartialEq)]
pub enum ScalarHead {
    /// Cross-entropy of the logits at `label`.
    CrossEntropy { label: usize },
    /// A single logit `z_class`.
    Logit { class: usize },
    /// A fixed affine functional `weights . v + bias` of the representation.
    Representation { weights: Vec<f64>, bias: f64 },
}

/// Per-layer inputs of one head pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    inputs: Vec<Tensor>,
    head_out_shape: Vec<usize>,
    pub representation: Vec<f64>,
}

impl Classifier {
    /// Validates the stack: the last layer must be dense and the head output
    /// must flatten to its input width.
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>, meta: ModelMeta) -> Result<Self> {
        let Some(Layer::Dense(tail)) = layers.last() else {
            return Err(Error::InvalidArgument("the final layer must be dense".into()));
        };
        let (repr_dim, num_classes) = (tail.in_dim(), tail.out_dim());
        if num_classes < 1 || input_shape.is_empty() {
            return Err(Error::InvalidArgument("empty input shape or class count".into()));
        }
        let mut shape: Vec<usize> = std::iter::once(1).chain(input_shape.iter().copied()).collect();
        for layer in &layers[..layers.len() - 1] {
            shape = layer.output_shape(&shape)?;
        }
        let flat: usize = shape[1..].iter().product();
        if flat != repr_dim {
            return Err(Error::shape(
                "tail",
                format!("head output of width {repr_dim}"),
                &shape,
            ));
        }
        Ok(Self {
            layers,
            input_shape,
            repr_dim,
            num_classes,
            meta,
        })
    }

    /// Builds a freshly initialized preset (He-uniform weights, zero biases,
    /// identity batchnorm).
    pub fn from_architecture(arch: &Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dense = |n_in: usize, n_out: usize, rng: &mut ChaCha8Rng| -> Result<Layer> {
            let limit = (6.0 / n_in as f64).sqrt();
            let w = (0..n_in * n_out).map(|_| rng.random_range(-limit..limit)).collect();
            Ok(Layer::Dense(Dense::new(
                Tensor::new(vec![n_out, n_in], w)?,
                Tensor::zeros(vec![n_out]),
            )?))
        };
        let (layers, input_shape) = match arch {
            Architecture::SmallCnn {
                input_shape,
                repr_dim,
                num_classes,
            } => {
                if input_shape.len() != 3 {
                    return Err(Error::InvalidArgument(format!(
                        "small_cnn needs a [C, H, W] input shape, got {input_shape:?}"
                    )));
                }
                let mut layers = Vec::new();
                let mut channels = input_shape[0];
                let mut shape = vec![1, input_shape[0], input_shape[1], input_shape[2]];
                for out in [16, 32] {
                    let fan_in = channels * 9;
                    let limit = (6.0 / fan_in as f64).sqrt();
                    let w = (0..out * fan_in).map(|_| rng.random_range(-limit..limit)).collect();
                    let conv = Layer::Conv2d(Conv2d::new(
                        Tensor::new(vec![out, channels, 3, 3], w)?,
                        Tensor::zeros(vec![out]),
                        Padding::Valid,
                    )?);
                    for layer in [
                        conv,
                        Layer::BatchNorm(BatchNorm::identity(out)),
                        Layer::Relu,
                        Layer::MaxPool2x2,
                    ] {
                        shape = layer.output_shape(&shape)?;
                        layers.push(layer);
                    }
                    channels = out;
                }
                layers.push(Layer::Flatten);
                let flat: usize = shape[1..].iter().product();
                layers.push(dense(flat, *repr_dim, &mut rng)?);
                layers.push(dense(*repr_dim, *num_classes, &mut rng)?);
                (layers, input_shape.clone())
            }
            Architecture::Mlp {
                input_dim,
                hidden,
                repr_dim,
                num_classes,
            } => {
                let mut layers = Vec::new();
                let mut width = *input_dim;
                for &h in hidden {
                    layers.push(dense(width, h, &mut rng)?);
                    layers.push(Layer::Relu);
                    width = h;
                }
                layers.push(dense(width, *repr_dim, &mut rng)?);
                layers.push(dense(*repr_dim, *num_classes, &mut rng)?);
                (layers, vec![*input_dim])
            }
            Architecture::IdentityHead {
                input_dim,
                num_classes,
            } => (vec![dense(*input_dim, *num_classes, &mut rng)?], vec![*input_dim]),
            Architecture::Custom => {
                return Err(Error::InvalidArgument("custom architectures cannot be initialized".into()))
            }
        };
        let meta = ModelMeta {
            architecture: Some(arch.clone()),
            init_seed: Some(seed),
            ..ModelMeta::default()
        };
        Self::new(layers, input_shape, meta)
    }

    /// Identity-head classifier with the given tail `w` (`K x N`) and `b`.
    pub fn linear(w: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let k = b.len();
        if k == 0 || w.len() % k != 0 {
            return Err(Error::InvalidArgument("tail weight is not K x N".into()));
        }
        let n = w.len() / k;
        let tail = Dense::new(Tensor::new(vec![k, n], w)?, Tensor::new(vec![k], b)?)?;
        let meta = ModelMeta {
            architecture: Some(Architecture::IdentityHead {
                input_dim: n,
                num_classes: k,
            }),
            ..ModelMeta::default()
        };
        Self::new(vec![Layer::Dense(tail)], vec![n], meta)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Index of the tail; `layers()[split()..]` is exactly the tail.
    pub fn split(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn head(&self) -> &[Layer] {
        &self.layers[..self.split()]
    }

    pub fn tail(&self) -> &Dense {
        match self.layers.last() {
            Some(Layer::Dense(d)) => d,
            _ => unreachable!("validated in Classifier::new"),
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Flattened input dimension `D`.
    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Representation dimension `N`.
    pub fn repr_dim(&self) -> usize {
        self.repr_dim
    }

    /// Class count `K`.
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn batch_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::shape(
                "classifier input",
                format!("[B, {}]", dims(&self.input_shape)),
                x.shape(),
            ));
        }
        Ok(())
    }

    /// `v = f_h(x)` for a batch `[B, ...input_shape]`, returned as `[B, N]`.
    pub fn head_forward(&self, x: &Tensor) -> Result<Tensor> {
        self.batch_input(x)?;
        warn_outside_unit_box(x.data());
        let mut h = x.clone();
        for layer in self.head() {
            h = layer.forward(&h)?;
        }
        let b = h.batch();
        h.reshape(vec![b, self.repr_dim])
    }

    /// `z = w v + b` for a batch `[B, N]`.
    pub fn tail_forward(&self, v: &Tensor) -> Result<Tensor> {
        if v.rank() != 2 || v.shape()[1] != self.repr_dim {
            return Err(Error::shape("tail", format!("[B, {}]", self.repr_dim), v.shape()));
        }
        self.layers[self.split()].forward(v)
    }

    /// Logits for a batch; the same computation as the head then the tail.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.tail_forward(&self.head_forward(x)?)
    }

    fn single(&self, x: &[f64]) -> Result<Tensor> {
        let shape: Vec<usize> = std::iter::once(1).chain(self.input_shape.iter().copied()).collect();
        Tensor::new(shape, x.to_vec()).map_err(|_| {
            Error::shape(
                "classifier input",
                format!("{} values", self.input_dim()),
                &[x.len()],
            )
        })
    }

    /// Representation vector of one flattened example.
    pub fn representation(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.head_forward(&self.single(x)?)?.into_data())
    }

    /// Logits of one flattened example.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(&self.single(x)?)?.into_data())
    }

    /// Logits of one representation vector.
    pub fn logits_from_representation(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.tail_forward(&Tensor::row(v.to_vec()))?.into_data())
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Runs the head on one example, keeping every layer input.
    pub fn trace(&self, x: &[f64]) -> Result<HeadTrace> {
        let mut h = self.single(x)?;
        warn_outside_unit_box(h.data());
        let mut inputs = Vec::with_capacity(self.split());
        for layer in self.head() {
            let next = layer.forward(&h)?;
            inputs.push(h);
            h = next;
        }
        Ok(HeadTrace {
            inputs,
            head_out_shape: h.shape().to_vec(),
            representation: h.into_data(),
        })
    }

    /// Pulls a cotangent `dv` on the representation back to the input.
    pub fn head_vjp(&self, trace: &HeadTrace, dv: &[f64]) -> Result<Vec<f64>> {
        if dv.len() != self.repr_dim {
            return Err(Error::shape("head_vjp", format!("{} values", self.repr_dim), &[dv.len()]));
        }
        let mut g = Tensor::new(trace.head_out_shape.clone(), dv.to_vec())?;
        for (layer, input) in self.head().iter().zip(&trace.inputs).rev() {
            g = layer.backward_input(input, &g)?;
        }
        Ok(g.into_data())
    }

    /// Value of `scalar` at `x` and its gradient with respect to `x`.
    pub fn input_gradient(&self, x: &[f64], scalar: &ScalarHead) -> Result<(f64, Vec<f64>)> {
        let trace = self.trace(x)?;
        let (value, dv) = self.scalar_cotangent(&trace.representation, scalar)?;
        Ok((value, self.head_vjp(&trace, &dv)?))
    }

    /// Value of a scalar head at representation `v`, and `d value / d v`.
    fn scalar_cotangent(&self, v: &[f64], scalar: &ScalarHead) -> Result<(f64, Vec<f64>)> {
        let tail = self.tail();
        let n = self.repr_dim;
        let pull_back = |dz: &[f64]| -> Vec<f64> {
            let mut dv = vec![0.0; n];
            for (k, &g) in dz.iter().enumerate() {
                for (d, w) in dv.iter_mut().zip(tail.weight_row(k)) {
                    *d += g * w;
                }
            }
            dv
        };
        match scalar {
            ScalarHead::CrossEntropy { label } => {
                let z = self.logits_from_representation(v)?;
                let (loss, dz) = cross_entropy_with_logits(&z, *label)?;
                Ok((loss, pull_back(&dz)))
            }
            ScalarHead::Logit { class } => {
                if *class >= self.num_classes {
                    return Err(Error::InvalidArgument(format!("class {class} out of range")));
                }
                let z = self.logits_from_representation(v)?;
                let mut dz = vec![0.0; self.num_classes];
                dz[*class] = 1.0;
                Ok((z[*class], pull_back(&dz)))
            }
            ScalarHead::Representation { weights, bias } => {
                if weights.len() != n {
                    return Err(Error::shape("representation functional", format!("{n} weights"), &[weights.len()]));
                }
                let value = weights.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() + bias;
                Ok((value, weights.clone()))
            }
        }
    }

    /// Logits at `x` and the input gradients of `z_k - z_y` for every `k != y`
    /// (entry `y` is empty). Uses whichever of `N` or `K - 1` backward passes
    /// is cheaper.
    pub fn logit_difference_gradients(&self, x: &[f64], y: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let k_count = self.num_classes;
        let trace = self.trace(x)?;
        let z = self.logits_from_representation(&trace.representation)?;
        let tail = self.tail();
        let diff_row = |k: usize| -> Vec<f64> {
            tail.weight_row(k)
                .iter()
                .zip(tail.weight_row(y))
                .map(|(a, b)| a - b)
                .collect()
        };
        let mut grads = vec![Vec::new(); k_count];
        if self.repr_dim < k_count - 1 {
            // Jacobian of v, one row per representation component.
            let jac: Vec<Vec<f64>> = (0..self.repr_dim)
                .map(|i| {
                    let mut e = vec![0.0; self.repr_dim];
                    e[i] = 1.0;
                    self.head_vjp(&trace, &e)
                })
                .collect::<Result<_>>()?;
            for (k, g) in grads.iter_mut().enumerate().filter(|(k, _)| *k != y) {
                let row = diff_row(k);
                let mut out = vec![0.0; self.input_dim()];
                for (coef, jrow) in row.iter().zip(&jac) {
                    for (o, j) in out.iter_mut().zip(jrow) {
                        *o += coef * j;
                    }
                }
                *g = out;
            }
        } else {
            for (k, g) in grads.iter_mut().enumerate().filter(|(k, _)| *k != y) {
                *g = self.head_vjp(&trace, &diff_row(k))?;
            }
        }
        Ok((z, grads))
    }
}

fn dims(shape: &[usize]) -> String {
    shape.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

fn warn_outside_unit_box(x: &[f64]) {
    use std::sync::atomic::{AtomicBool, Ordering};
    static WARNED: AtomicBool = AtomicBool::new(false);
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) && !WARNED.swap(true, Ordering::Relaxed) {
        eprintln!("warning: classifier input outside [0, 1]^D");
    }
}
