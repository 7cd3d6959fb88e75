use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use super::classifier::{ClassifierNet, ClassifierOptimizer};
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Sampler over binary-labeled rows with weights inversely proportional to
/// class counts.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    len: usize,
    weights: Option<WeightedIndex<f64>>,
}

impl BalancedSampler {
    pub fn new(labels: &[u8]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("cannot sample from an empty buffer".into()));
        }
        let positives = labels.iter().filter(|&&y| y != 0).count();
        let negatives = labels.len() - positives;
        let weights = if positives > 0 && negatives > 0 {
            let (wp, wn) = (1.0 / positives as f64, 1.0 / negatives as f64);
            let w = labels.iter().map(|&y| if y != 0 { wp } else { wn });
            Some(WeightedIndex::new(w).expect("positive weights"))
        } else {
            None
        };
        Ok(Self {
            len: labels.len(),
            weights,
        })
    }

    /// False when only one class is present and sampling is uniform.
    pub fn weighted(&self) -> bool {
        self.weights.is_some()
    }

    /// Row indices drawn with replacement.
    pub fn sample<G: Rng + ?Sized>(&self, batch_size: usize, rng: &mut G) -> Vec<usize> {
        match &self.weights {
            Some(w) => (0..batch_size).map(|_| w.sample(rng)).collect(),
            None => (0..batch_size).map(|_| rng.gen_range(0..self.len)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BalancedBatch {
    pub indices: Vec<usize>,
    pub weighted: bool,
}

pub fn balanced_batch<G: Rng + ?Sized>(labels: &[u8], batch_size: usize, rng: &mut G) -> Result<BalancedBatch> {
    let sampler = BalancedSampler::new(labels)?;
    Ok(BalancedBatch {
        indices: sampler.sample(batch_size, rng),
        weighted: sampler.weighted(),
    })
}

/// Classifier training rows: flattened observations with one-hot slots and labels.
#[derive(Clone, Copy, Debug)]
pub struct LabeledRows<'a> {
    pub obs: &'a [f32],
    pub obs_shape: &'a [usize],
    pub slots: &'a [usize],
    pub labels: &'a [u8],
}

impl LabeledRows<'_> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>, Vec<u8>)> {
        let width: usize = self.obs_shape.iter().product();
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(&self.obs[i * width..(i + 1) * width]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.obs_shape);
        Ok((
            Tensor::new(shape, data)?,
            idx.iter().map(|&i| self.slots[i]).collect(),
            idx.iter().map(|&i| self.labels[i]).collect(),
        ))
    }
}

/// `ceil(len / batch_size)` balanced minibatch steps. Returns the mean loss.
pub fn train_classifier_epoch<G: Rng>(
    net: &mut ClassifierNet,
    opt: &mut ClassifierOptimizer,
    rows: &LabeledRows<'_>,
    batch_size: usize,
    rng: &mut G,
) -> Result<f64> {
    let width: usize = rows.obs_shape.iter().product();
    if rows.obs.len() != rows.len() * width || rows.slots.len() != rows.len() {
        return Err(Error::shape(
            "classifier rows",
            &[rows.len() * width, rows.len()],
            &[rows.obs.len(), rows.slots.len()],
        ));
    }
    if batch_size < 2 {
        return Err(Error::Config(
            "classifier batch size must be at least 2 for batch statistics".into(),
        ));
    }
    let sampler = BalancedSampler::new(rows.labels)?;
    let batches = rows.len().div_ceil(batch_size);
    let mut total = 0.0;
    for b in 0..batches {
        let idx = sampler.sample(batch_size, rng);
        let (obs, slots, labels) = rows.gather(&idx)?;
        let loss = net.train_step(opt, &obs, &slots, &labels, rng).map_err(|e| match e {
            Error::NonFinite(msg) => {
                Error::NonFinite(format!("{msg}; minibatch {b} of {batches}, {} rows", rows.len()))
            }
            other => other,
        })?;
        total += loss;
    }
    Ok(total / batches as f64)
}
