use std::fmt;

use crate::error::{Error, Result};
use crate::nn::{log_softmax, softmax};

/// Logit assigned to masked actions.
pub const MASKED_LOGIT: f64 = -1e9;

/// One bit per action; `true` keeps the action available.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask(Vec<bool>);

impl Mask {
    pub fn new(bits: Vec<bool>) -> Self {
        Mask(bits)
    }

    pub fn ones(len: usize) -> Self {
        Mask(vec![true; len])
    }

    pub fn from_probabilities(probs: &[f64], tau: f64) -> Self {
        Mask(probs.iter().map(|&p| p >= tau).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, value: bool) {
        self.0[i] = value;
    }

    pub fn all_ones(&self) -> bool {
        self.0.iter().all(|&b| b)
    }

    pub fn all_zeros(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

impl fmt::Display for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Categorical distribution after masking.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedDistribution {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// The mask was all zeros and got ignored.
    pub fallback: bool,
}

impl MaskedDistribution {
    pub fn sample<G: rand::Rng + ?Sized>(&self, rng: &mut G) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
        last
    }

    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .zip(&self.log_probs)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, lp)| -p * lp)
            .sum()
    }
}

/// Softmax over `logits` with masked entries replaced by [`MASKED_LOGIT`].
///
/// An all-zero mask falls back to the unmasked softmax and sets `fallback`.
pub fn masked_distribution(logits: &[f32], mask: &Mask) -> Result<MaskedDistribution> {
    if logits.len() != mask.len() {
        return Err(Error::shape("masked_distribution", &[logits.len()], &[mask.len()]));
    }
    if logits.is_empty() {
        return Err(Error::Empty("masked_distribution needs at least one logit".into()));
    }
    let fallback = mask.all_zeros();
    let masked: Vec<f64> = logits
        .iter()
        .zip(mask.bits())
        .map(|(&z, &keep)| if keep || fallback { z as f64 } else { MASKED_LOGIT })
        .collect();
    let probs = softmax(&masked)?;
    let log_probs = log_softmax(&masked)?;
    Ok(MaskedDistribution {
        probs,
        log_probs,
        fallback,
    })
}
