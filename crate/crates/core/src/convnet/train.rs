use std::borrow::Borrow;

use rand::seq::SliceRandom;

use super::network::{Gradients, Head, Network, Target};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{FeatureMap, LabelImage};

/// SGD-with-momentum settings for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 16,
            iterations: 2000,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Epoch-wise shuffled minibatch indices.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            cursor: n,
            rng: seed::rng(seed, "batches"),
        };
        s.reshuffle_if_needed();
        s
    }

    fn reshuffle_if_needed(&mut self) {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            self.reshuffle_if_needed();
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn run_sgd<'a, F>(
    mut net: Network,
    n: usize,
    schedule: &TrainSchedule,
    example: F,
) -> Result<Network>
where
    F: Fn(usize) -> (&'a FeatureMap, Target<'a>),
{
    schedule.validate()?;
    if n == 0 {
        return Err(Error::usage("training set is empty"));
    }
    let mut sampler = BatchSampler::new(n, schedule.seed);
    let mut velocity = Gradients::zeros_like(&net);
    for it in 0..schedule.iterations {
        let idx = sampler.next_batch(schedule.batch_size);
        let batch: Vec<_> = idx.iter().map(|&i| example(i)).collect();
        let bg = net.gradient(&batch)?;
        if !bg.loss.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                loss: bg.loss,
            });
        }
        if bg.terms == 0 {
            continue;
        }
        let mut g = bg.gradients;
        g.scale(1.0 / bg.terms as f64);
        for ((p, v), gr) in net
            .params_mut()
            .into_iter()
            .zip(velocity.groups.iter_mut())
            .zip(&g.groups)
        {
            for ((w, vel), &gv) in p.iter_mut().zip(v.iter_mut()).zip(gr) {
                *vel = schedule.momentum * *vel + gv;
                *w -= schedule.learning_rate * *vel;
            }
        }
        if it % 250 == 0 {
            log::debug!("iter {it}: loss {:.5}", bg.loss / bg.terms as f64);
        }
    }
    Ok(net)
}

/// Trains a classifier on `(image, label)` pairs with labels in `1..=K`.
pub fn train_classifier<I: Borrow<FeatureMap>>(
    net: Network,
    data: &[(I, usize)],
    schedule: &TrainSchedule,
) -> Result<Network> {
    if net.head() != Head::Classifier {
        return Err(Error::usage("train_classifier needs a classifier"));
    }
    run_sgd(net, data.len(), schedule, |i| {
        (data[i].0.borrow(), Target::Class(data[i].1))
    })
}

/// Trains a segmenter on `(image, mask)` pairs; `IGNORE` pixels contribute
/// nothing.
pub fn train_segmenter<I: Borrow<FeatureMap>, M: Borrow<LabelImage>>(
    net: Network,
    data: &[(I, M)],
    schedule: &TrainSchedule,
) -> Result<Network> {
    if net.head() != Head::Segmenter {
        return Err(Error::usage("train_segmenter needs a segmenter"));
    }
    run_sgd(net, data.len(), schedule, |i| {
        (data[i].0.borrow(), Target::Mask(data[i].1.borrow()))
    })
}

/// Mean cross-entropy over a probe set.
pub fn mean_loss(net: &Network, batch: &[(&FeatureMap, Target<'_>)]) -> Result<f64> {
    let mut loss = 0.0;
    let mut terms = 0;
    for (img, t) in batch {
        let trace = net.forward(img)?;
        let p = trace.last();
        match t {
            Target::Class(k) => {
                loss -= p.values()[k - 1].ln();
                terms += 1;
            }
            Target::Mask(m) => {
                let n = p.plane_len();
                for (px, &l) in m.labels().iter().enumerate() {
                    if l != crate::tensor::IGNORE {
                        loss -= p.values()[l as usize * n + px].ln();
                        terms += 1;
                    }
                }
            }
        }
    }
    Ok(if terms == 0 { 0.0 } else { loss / terms as f64 })
}
