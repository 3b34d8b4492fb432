//! Deterministic training loop: Adam over the total loss, per-epoch loss
//! curve, divergence diagnostics.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::Dataset;
use crate::encoder::{forward, GraphParams, Mode, Params};
use crate::error::{MctError, Result};
use crate::graph::Graph;
use crate::heads::total_loss;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Train-time horizontal flip augmentation.
    pub flip: bool,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            flip: false,
            clip_norm: 1.0,
        }
    }
}

/// One loss-curve row: per-epoch means of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct EpochLoss {
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub cls_class: f64,
    pub cls_patch: f64,
    pub cct: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub params: Params,
    pub curve: Vec<EpochLoss>,
}

/// `epoch,step,loss_total,loss_cls_class,loss_cls_patch,loss_cct`
pub fn loss_curve_csv(curve: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,step,loss_total,loss_cls_class,loss_cls_patch,loss_cct\n");
    for row in curve {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            row.epoch, row.step, row.total, row.cls_class, row.cls_patch, row.cct
        ));
    }
    s
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    fn new(params: &Params) -> Adam {
        let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.len()).collect();
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut Params, grads: &[Vec<f64>], tc: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - tc.beta1.powi(self.t as i32);
        let bc2 = 1.0 - tc.beta2.powi(self.t as i32);
        params.for_each_tensor_mut(|i, tensor| {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut data = tensor.data().to_vec();
            for j in 0..data.len() {
                m[j] = tc.beta1 * m[j] + (1.0 - tc.beta1) * g[j];
                v[j] = tc.beta2 * v[j] + (1.0 - tc.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= tc.lr * mh / (vh.sqrt() + tc.eps);
            }
            *tensor = Tensor::new(tensor.shape().to_vec(), data).expect("same shape");
        });
    }
}

fn flip_horizontal(image: &Tensor) -> Tensor {
    let s = image.shape()[1];
    let d = image.data();
    Tensor::from_fn(image.shape(), |i| {
        let (c, rest) = (i / (s * s), i % (s * s));
        let (y, x) = (rest / s, rest % s);
        d[(c * s + y) * s + (s - 1 - x)]
    })
}

/// Forward + backward for one sample; returns per-parameter flat gradients
/// (canonical order) and the loss terms.
fn sample_gradients(
    params: &Params,
    cfg: &ModelConfig,
    image: &Tensor,
    labels: &Tensor,
    dropout_seed: u64,
) -> Result<(Vec<Vec<f64>>, [f64; 4])> {
    let g = Graph::new();
    let gp = GraphParams::from_params(&g, params);
    let fwd = forward(&g, &gp, image, cfg, &Mode::Train { dropout_seed })?;
    let losses = total_loss(&g, &fwd, &gp, labels, cfg)?;
    let grads = g.backward(losses.total)?;
    let named = params.named();
    let flat = gp
        .vars
        .iter()
        .zip(named.iter())
        .map(|(&v, (_, t))| grads.wrt_or_zeros(v, t.shape()).data().to_vec())
        .collect();
    Ok((
        flat,
        [
            g.value(losses.total).item(),
            g.value(losses.cls_class).item(),
            g.value(losses.cls_patch).item(),
            g.value(losses.cct).item(),
        ],
    ))
}

/// Deterministic for a fixed seed: same seed, same data, same curve and
/// parameters. Aborts with epoch/step diagnostics if the loss diverges.
pub fn train(dataset: &Dataset, cfg: &ModelConfig, tc: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    if dataset.samples.is_empty() {
        return Err(MctError::config("training dataset is empty".to_string()));
    }
    if dataset.spec.num_classes != cfg.num_classes {
        return Err(MctError::config(format!(
            "dataset has {} classes but config expects {}",
            dataset.spec.num_classes, cfg.num_classes
        )));
    }
    if dataset.spec.image_size != cfg.image_size {
        return Err(MctError::config(format!(
            "dataset image size {} but config expects {}",
            dataset.spec.image_size, cfg.image_size
        )));
    }

    let mut params = Params::init(cfg, tc.seed)?;
    let mut adam = Adam::new(&params);
    let n_tensors = params.named().len();
    let mut curve = Vec::with_capacity(tc.epochs);
    let mut global_step = 0usize;

    for epoch in 1..=tc.epochs {
        let mut order: Vec<usize> = (0..dataset.samples.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1).wrapping_add(epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let mut flip_rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(7919).wrapping_add(epoch as u64));

        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;

        for chunk in order.chunks(tc.batch_size.max(1)) {
            let mut acc: Vec<Vec<f64>> = Vec::with_capacity(n_tensors);
            let mut batch_losses = [0.0f64; 4];
            for (bi, &si) in chunk.iter().enumerate() {
                let sample = &dataset.samples[si];
                let image = if tc.flip && flip_rng.random::<f64>() < 0.5 {
                    flip_horizontal(&sample.image)
                } else {
                    sample.image.clone()
                };
                let labels = sample.label_tensor();
                let dropout_seed = tc
                    .seed
                    .wrapping_add(10_000_019)
                    .wrapping_add(global_step as u64 * 131 + bi as u64);
                let (grads, losses) =
                    sample_gradients(&params, cfg, &image, &labels, dropout_seed)?;
                if !losses[0].is_finite() {
                    return Err(MctError::numerical(format!(
                        "loss diverged at epoch {epoch}, step {global_step}"
                    )));
                }
                if acc.is_empty() {
                    acc = grads;
                } else {
                    for (a, g) in acc.iter_mut().zip(grads) {
                        for (av, gv) in a.iter_mut().zip(g) {
                            *av += gv;
                        }
                    }
                }
                for (s, l) in batch_losses.iter_mut().zip(losses) {
                    *s += l;
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            for a in acc.iter_mut() {
                for v in a.iter_mut() {
                    *v *= inv;
                }
            }
            if tc.clip_norm > 0.0 {
                let norm: f64 = acc
                    .iter()
                    .map(|a| a.iter().map(|&v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > tc.clip_norm {
                    let scale = tc.clip_norm / norm;
                    for a in acc.iter_mut() {
                        for v in a.iter_mut() {
                            *v *= scale;
                        }
                    }
                }
            }
            adam.step(&mut params, &acc, tc);
            global_step += 1;
            batches += 1;
            for (s, l) in sums.iter_mut().zip(batch_losses) {
                *s += l * inv;
            }
        }

        let inv = 1.0 / batches as f64;
        curve.push(EpochLoss {
            epoch,
            step: global_step,
            total: sums[0] * inv,
            cls_class: sums[1] * inv,
            cls_patch: sums[2] * inv,
            cct: sums[3] * inv,
        });
    }

    Ok(TrainResult { params, curve })
}
