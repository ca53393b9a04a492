//! Classifier interface, loss, and the mini-batch training loop.

pub mod classifier;
pub mod optim;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::imaging::Image;
pub use classifier::{BuiltinClassifier, ClassifierSpec};
pub use optim::{CosineSchedule, OptimizerConfig, Sgd};

/// Samples per unit of parallel gradient work. Fixed so the floating-point
/// reduction order does not depend on the thread count.
const CHUNK: usize = 16;

/// A differentiable classifier with a flat parameter vector.
///
/// `Clone` must produce a fully independent copy.
pub trait TrainableModel: Clone + Send + Sync {
    fn class_count(&self) -> usize;

    fn logits(&self, image: &Image) -> Vec<f64>;

    /// Adds the gradient of this sample's cross-entropy loss to `grad` and
    /// returns the loss.
    fn accumulate_gradient(&self, image: &Image, label: usize, grad: &mut [f64]) -> f64;

    fn parameters(&self) -> &[f64];

    fn parameters_mut(&mut self) -> &mut [f64];

    fn loss(&self, image: &Image, label: usize) -> f64 {
        cross_entropy(&self.logits(image), label)
    }

    fn predict(&self, image: &Image) -> usize {
        argmax(&self.logits(image))
    }
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&z| (z - lse).exp()).collect()
}

/// `-log softmax(logits)[label]`, computed through a stable log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    (log_sum_exp(logits) - logits[label]).max(0.0)
}

/// Cross-entropy against a one-hot target vector.
pub fn cross_entropy_one_hot(logits: &[f64], target: &[f64]) -> f64 {
    let label = target.iter().position(|&t| t == 1.0).expect("target must be one-hot");
    cross_entropy(logits, label)
}

/// Loss and softmax probabilities in one pass.
pub(crate) fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let probs = logits.iter().map(|&z| (z - lse).exp()).collect();
    ((lse - logits[label]).max(0.0), probs)
}

/// Mean loss and mean parameter gradient over a batch.
pub fn batch_gradient<M: TrainableModel>(model: &M, batch: &[(Image, usize)]) -> (f64, Vec<f64>) {
    assert!(!batch.is_empty(), "batch must not be empty");
    let n = model.parameters().len();
    let partials: Vec<(f64, Vec<f64>)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; n];
            let loss = chunk
                .iter()
                .map(|(img, label)| model.accumulate_gradient(img, *label, &mut grad))
                .sum::<f64>();
            (loss, grad)
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for (l, g) in partials {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    (loss * scale, grad)
}

/// A summed loss together with the number of samples it covers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSum {
    pub sum: f64,
    pub count: usize,
}

impl LossSum {
    pub fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }
}

/// Summed cross-entropy over `samples`.
pub fn mean_loss<M: TrainableModel>(model: &M, samples: &[(Image, usize)]) -> LossSum {
    let sum = samples
        .par_chunks(CHUNK)
        .map(|chunk| chunk.iter().map(|(img, l)| model.loss(img, *l)).sum::<f64>())
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    LossSum {
        sum,
        count: samples.len(),
    }
}

/// Fraction of `indices` the model labels correctly.
pub fn accuracy<M: TrainableModel>(model: &M, dataset: &Dataset, indices: &[usize]) -> f64 {
    let correct: usize = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .filter(|&&i| {
                    let s = dataset.get(i);
                    model.predict(&s.image) == s.label
                })
                .count()
        })
        .sum();
    correct as f64 / indices.len() as f64
}

/// A model together with its optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer<M> {
    pub model: M,
    pub optimizer: Sgd,
}

impl<M: TrainableModel> Trainer<M> {
    pub fn new(model: M, config: OptimizerConfig, schedule: CosineSchedule) -> Self {
        let n = model.parameters().len();
        Trainer {
            model,
            optimizer: Sgd::new(config, schedule, n),
        }
    }

    /// Runs `epochs` shuffled mini-batch passes over `indices` of `dataset`.
    ///
    /// `augment` is called once per sample visit, in visiting order. Batch
    /// order comes from `rng` alone. Returns the mean training loss of each
    /// epoch.
    pub fn train_epochs<R, A>(
        &mut self,
        dataset: &Dataset,
        indices: &[usize],
        epochs: usize,
        mut augment: A,
        rng: &mut R,
    ) -> Vec<f64>
    where
        R: Rng + ?Sized,
        A: FnMut(&Image) -> Image,
    {
        assert!(!indices.is_empty(), "cannot train on an empty sample set");
        let batch_size = self.optimizer.config.batch_size;
        let mut order = indices.to_vec();
        let mut epoch_losses = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            for batch_indices in order.chunks(batch_size) {
                let batch: Vec<(Image, usize)> = batch_indices
                    .iter()
                    .map(|&i| {
                        let s = dataset.get(i);
                        (augment(&s.image), s.label)
                    })
                    .collect();
                let (loss, grad) = batch_gradient(&self.model, &batch);
                total += loss * batch.len() as f64;
                self.optimizer.step(self.model.parameters_mut(), &grad);
            }
            epoch_losses.push(total / order.len() as f64);
        }
        epoch_losses
    }
}

/// Number of optimizer steps in one epoch over `samples` samples.
pub fn steps_per_epoch(samples: usize, batch_size: usize) -> u64 {
    samples.div_ceil(batch_size) as u64
}
