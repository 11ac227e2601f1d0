use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{cross_entropy_loss, Dropout, UNet3d};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::sampler::{standardize, ChannelStats, SamplingSubject};

/// Optimization constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub patches_per_subject_per_epoch: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Permute the subject order at the start of every epoch.
    pub shuffle: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 640,
            patches_per_subject_per_epoch: 1,
            learning_rate: 5e-4,
            batch_size: 1,
            dropout_rate: 0.5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            shuffle: true,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.patches_per_subject_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("patch and batch counts must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig("dropout rate must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Adam with a constant learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &UNet3d, sched: &TrainSchedule) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            lr: sched.learning_rate,
            beta1: sched.adam_beta1,
            beta2: sched.adam_beta2,
            eps: sched.adam_eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update with gradients scaled by `scale`.
    pub fn step(&mut self, model: &mut UNet3d, grad: &UNet3d, scale: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in model
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                let gi = g[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Converts a `(D, H, W, C)` image to a channel-first tensor.
pub fn image_to_tensor(image: &Array4<f32>) -> Tensor {
    let (d, h, w, c) = image.dim();
    let v = d * h * w;
    let mut data = vec![0.0; c * v];
    for (i, voxel) in image.lanes(ndarray::Axis(3)).into_iter().enumerate() {
        for (ch, &x) in voxel.iter().enumerate() {
            data[ch * v + i] = x as f64;
        }
    }
    Tensor::from_vec(c, [d, h, w], data)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss of every gradient step, in order.
    pub loss_history: Vec<f64>,
    pub steps: usize,
}

/// Runs `epochs × subjects × patches_per_subject` single-patch steps.
pub fn train<R: Rng>(
    model: &mut UNet3d,
    subjects: &[SamplingSubject],
    stats: &ChannelStats,
    sched: &TrainSchedule,
    rng: &mut R,
) -> Result<TrainReport> {
    sched.validate()?;
    if subjects.is_empty() {
        return Err(Error::Empty("no training subjects".into()));
    }
    let n = model.config.patch_size;
    if let Some(s) = subjects.iter().find(|s| s.weights.patch_size != n) {
        return Err(Error::InvalidConfig(format!(
            "subject {} sampled with patch size {}, model expects {n}",
            s.id, s.weights.patch_size
        )));
    }
    let weights = model.config.class_weights;
    let mut adam = Adam::new(model, sched);
    let mut grad = model.zeros_like();
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..subjects.len()).collect();
    let mut pending = 0usize;
    for epoch in 0..sched.epochs {
        if sched.shuffle {
            order.shuffle(rng);
        }
        for &s in &order {
            for _ in 0..sched.patches_per_subject_per_epoch {
                let patch = standardize(&subjects[s].sample(rng)?, stats);
                let x = image_to_tensor(&patch.image);
                let dropout = (sched.dropout_rate > 0.0).then(|| Dropout {
                    rate: sched.dropout_rate,
                    rng: &mut *rng as &mut dyn rand::RngCore,
                });
                let (logits, cache) = model.forward_train(&x, dropout);
                let labels = patch.labels.as_standard_layout();
                let (loss, dlogits) =
                    cross_entropy_loss(&logits, labels.as_slice().expect("contiguous"), &weights)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step: report.steps,
                        loss,
                    });
                }
                model.backward(&cache, &dlogits, &mut grad);
                report.loss_history.push(loss);
                report.steps += 1;
                pending += 1;
                if pending == sched.batch_size {
                    adam.step(model, &grad, 1.0 / pending as f64);
                    for t in grad.tensors_mut() {
                        t.fill(0.0);
                    }
                    pending = 0;
                }
            }
        }
        log::debug!(
            "epoch {epoch}: mean loss {:.5}",
            report.loss_history[report.loss_history.len() - subjects.len() * sched.patches_per_subject_per_epoch..]
                .iter()
                .sum::<f64>()
                / (subjects.len() * sched.patches_per_subject_per_epoch) as f64
        );
    }
    if pending > 0 {
        adam.step(model, &grad, 1.0 / pending as f64);
    }
    Ok(report)
}
