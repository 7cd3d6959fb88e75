//! Actor-critic PPO.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::applicability::{masked_distribution, Mask};
use crate::error::{Error, Result};
use crate::nn::{AdamState, Extractor, Gradients, LayerSpec, Network, Tensor};

/// Shared feature extractor with categorical policy and scalar value heads.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    pub extractor: Network,
    pub policy_head: Network,
    pub value_head: Network,
}

impl PolicyNet {
    pub fn new(arch: Extractor, obs_shape: &[usize], num_actions: usize, seed: u64) -> Result<Self> {
        let channels = *obs_shape
            .first()
            .ok_or_else(|| Error::Config("observation shape is empty".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extractor = Network::xavier_with_rng(arch.layers(channels), obs_shape, &mut rng)?;
        let features = extractor.output_shape()[0];
        let policy_head = Network::xavier_with_rng(
            vec![LayerSpec::Dense {
                inputs: features,
                outputs: num_actions,
            }],
            &[features],
            &mut rng,
        )?;
        let value_head = Network::xavier_with_rng(
            vec![LayerSpec::Dense {
                inputs: features,
                outputs: 1,
            }],
            &[features],
            &mut rng,
        )?;
        Self::from_parts(extractor, policy_head, value_head)
    }

    pub fn from_parts(extractor: Network, policy_head: Network, value_head: Network) -> Result<Self> {
        let features = extractor.output_shape();
        if features.len() != 1
            || policy_head.input_shape() != features
            || value_head.input_shape() != features
            || policy_head.output_shape().len() != 1
            || value_head.output_shape() != [1]
        {
            return Err(Error::Architecture(format!(
                "policy heads {:?}/{:?} do not fit extractor output {:?}",
                policy_head.input_shape(),
                value_head.input_shape(),
                features
            )));
        }
        Ok(Self {
            extractor,
            policy_head,
            value_head,
        })
    }

    pub fn num_actions(&self) -> usize {
        self.policy_head.output_shape()[0]
    }

    pub fn obs_shape(&self) -> &[usize] {
        self.extractor.input_shape()
    }

    /// Raw logits `[B, |A|]` and values for a batch of observations.
    pub fn forward(&self, obs: &Tensor) -> Result<(Tensor, Vec<f32>)> {
        let features = self.extractor.predict(obs)?;
        let logits = self.policy_head.predict(&features)?;
        let values = self.value_head.predict(&features)?.into_data();
        Ok((logits, values))
    }
}

fn single(obs: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(obs.shape());
    obs.clone().reshape(shape)
}

/// Unmasked logits and value estimate for one observation.
pub fn policy_forward(net: &PolicyNet, obs: &Tensor) -> Result<(Vec<f32>, f32)> {
    let (logits, values) = net.forward(&single(obs)?)?;
    Ok((logits.into_data(), values[0]))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampledAction {
    pub action: usize,
    pub log_prob: f64,
    pub value: f32,
    pub fallback: bool,
}

/// Draws from the masked policy distribution.
pub fn sample_action<G: Rng + ?Sized>(
    net: &PolicyNet,
    obs: &Tensor,
    mask: &Mask,
    rng: &mut G,
) -> Result<SampledAction> {
    let (logits, value) = policy_forward(net, obs)?;
    let dist = masked_distribution(&logits, mask)?;
    let action = dist.sample(rng);
    Ok(SampledAction {
        action,
        log_prob: dist.log_probs[action],
        value,
        fallback: dist.fallback,
    })
}

/// Generalized advantage estimation over one contiguous segment.
///
/// `last_value` bootstraps the step after the segment when it did not end an
/// episode.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::shape(
            "compute_gae inputs",
            &[n, n],
            &[values.len(), dones.len()],
        ));
    }
    let mut advantages = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        advantages[t] = next_adv;
        next_value = values[t];
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((advantages, returns))
}

/// Shifts to mean 0 and scales to standard deviation 1 (population).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for a in adv.iter_mut() {
        *a = (*a - mean) / std;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub lr: f64,
    pub clip: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub vf_coef: f64,
    pub ent_coef: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub normalize_advantages: bool,
    /// Global gradient-norm cap; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            clip: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            vf_coef: 0.5,
            ent_coef: 0.0,
            epochs: 10,
            minibatch: 64,
            normalize_advantages: true,
            max_grad_norm: None,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.lr > 0.0, "lr must be positive"),
            (self.clip > 0.0, "clip must be positive"),
            (self.gamma > 0.0 && self.gamma <= 1.0, "gamma must lie in (0, 1]"),
            ((0.0..=1.0).contains(&self.gae_lambda), "gae_lambda must lie in [0, 1]"),
            (self.epochs >= 1, "epochs must be at least 1"),
            (self.minibatch >= 1, "minibatch must be at least 1"),
            (
                self.max_grad_norm.is_none_or(|m| m > 0.0),
                "max_grad_norm must be positive",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config(format!("ppo: {msg}"))),
            None => Ok(()),
        }
    }
}

/// Adam state for the three policy networks.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOptimizer {
    pub extractor: AdamState,
    pub policy_head: AdamState,
    pub value_head: AdamState,
}

impl PolicyOptimizer {
    pub fn new(net: &PolicyNet, lr: f64) -> Self {
        Self {
            extractor: AdamState::new(&net.extractor, lr),
            policy_head: AdamState::new(&net.policy_head, lr),
            value_head: AdamState::new(&net.value_head, lr),
        }
    }
}

/// On-policy samples with everything the update needs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBatch {
    pub obs_shape: Vec<usize>,
    /// Flattened observations, one row per sample.
    pub obs: Vec<f32>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub masks: Vec<Mask>,
    /// Behavior log-probabilities under the stored masks.
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let width: usize = self.obs_shape.iter().product();
        let lens = [
            self.rewards.len(),
            self.dones.len(),
            self.masks.len(),
            self.log_probs.len(),
            self.values.len(),
            self.returns.len(),
            self.advantages.len(),
        ];
        if self.obs.len() != n * width || lens.iter().any(|&l| l != n) {
            return Err(Error::shape(
                "rollout batch",
                &[n * width, n],
                &[self.obs.len(), lens[0]],
            ));
        }
        if let Some(i) = self.advantages.iter().position(|a| !a.is_finite()) {
            return Err(Error::NonFinite(format!("advantage of sample {i}")));
        }
        Ok(())
    }

    fn gather_obs(&self, idx: &[usize]) -> Result<Tensor> {
        let width: usize = self.obs_shape.iter().product();
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(&self.obs[i * width..(i + 1) * width]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.obs_shape);
        Tensor::new(shape, data)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    /// Probability ratio at the first minibatch of the first epoch.
    pub initial_ratios: Vec<f64>,
    pub skipped_samples: usize,
    pub minibatches: usize,
}

/// Per-minibatch losses and parameter gradients.
pub struct MinibatchGrads {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clipped: usize,
    pub skipped: usize,
    pub ratios: Vec<f64>,
    pub extractor: Gradients,
    pub policy_head: Gradients,
    pub value_head: Gradients,
}

/// Clipped-surrogate loss and its gradients on the samples `idx`.
///
/// `advantages` are the (possibly normalized) advantages of the whole batch.
pub fn ppo_gradients(
    net: &PolicyNet,
    batch: &RolloutBatch,
    advantages: &[f64],
    idx: &[usize],
    cfg: &PpoConfig,
) -> Result<MinibatchGrads> {
    let obs = batch.gather_obs(idx)?;
    let (features, ext_cache) = net.extractor.forward_eval(&obs)?;
    let (logits, pol_cache) = net.policy_head.forward_eval(&features)?;
    let (values, val_cache) = net.value_head.forward_eval(&features)?;
    let a_count = net.num_actions();
    let m = idx.len();
    let mut used = 0usize;
    let mut skipped = 0usize;
    let mut dlogits = vec![0.0f32; m * a_count];
    let mut dvalues = vec![0.0f32; m];
    let (mut pl, mut vl, mut ent, mut kl) = (0.0, 0.0, 0.0, 0.0);
    let mut clipped = 0usize;
    let mut ratios = Vec::with_capacity(m);
    let mut per_sample = Vec::with_capacity(m);
    for (row, &i) in idx.iter().enumerate() {
        let dist = masked_distribution(logits.row(row), &batch.masks[i])?;
        let a = batch.actions[i];
        let log_ratio = dist.log_probs[a] - batch.log_probs[i];
        let ratio = log_ratio.exp();
        ratios.push(ratio);
        if !ratio.is_finite() || !log_ratio.is_finite() {
            skipped += 1;
            per_sample.push(None);
            continue;
        }
        used += 1;
        per_sample.push(Some((dist, ratio, log_ratio)));
    }
    let denom = used.max(1) as f64;
    for (row, (entry, &i)) in per_sample.into_iter().zip(idx).enumerate() {
        let Some((dist, ratio, log_ratio)) = entry else {
            continue;
        };
        let adv = advantages[i];
        let a = batch.actions[i];
        let clipped_ratio = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
        let surr1 = ratio * adv;
        let surr2 = clipped_ratio * adv;
        pl -= surr1.min(surr2);
        if (ratio - 1.0).abs() > cfg.clip {
            clipped += 1;
        }
        kl += (ratio - 1.0) - log_ratio;
        let grad_active = surr1 <= surr2;
        // dL/dlogp for the policy loss
        let dlogp = if grad_active { -adv * ratio } else { 0.0 };
        let h = dist.entropy();
        ent += h;
        let drow = &mut dlogits[row * a_count..(row + 1) * a_count];
        for j in 0..a_count {
            let p = dist.probs[j];
            let onehot = if j == a { 1.0 } else { 0.0 };
            let mut g = dlogp * (onehot - p);
            if cfg.ent_coef != 0.0 && p > 0.0 {
                // -ent_coef * dH/dz_j, dH/dz_j = -p_j (log p_j + H)
                g += cfg.ent_coef * p * (dist.log_probs[j] + h);
            }
            drow[j] = (g / denom) as f32;
        }
        let v = values.data()[row] as f64;
        let err = v - batch.returns[i];
        vl += err * err;
        dvalues[row] = (cfg.vf_coef * 2.0 * err / denom) as f32;
    }
    let (policy_head, dfeat_p) = net
        .policy_head
        .backward(&pol_cache, &Tensor::new(vec![m, a_count], dlogits)?)?;
    let (value_head, dfeat_v) = net
        .value_head
        .backward(&val_cache, &Tensor::new(vec![m, 1], dvalues)?)?;
    let mut dfeat = dfeat_p;
    for (x, y) in dfeat.data_mut().iter_mut().zip(dfeat_v.data()) {
        *x += *y;
    }
    let (extractor, _) = net.extractor.backward(&ext_cache, &dfeat)?;
    Ok(MinibatchGrads {
        policy_loss: pl / denom,
        value_loss: vl / denom,
        entropy: ent / denom,
        approx_kl: kl / denom,
        clipped,
        skipped,
        ratios,
        extractor,
        policy_head,
        value_head,
    })
}

/// `epochs` passes of shuffled minibatch Adam updates on the clipped surrogate.
pub fn ppo_update<G: Rng>(
    net: &mut PolicyNet,
    opt: &mut PolicyOptimizer,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    rng: &mut G,
) -> Result<PpoStats> {
    cfg.validate()?;
    batch.validate()?;
    if batch.is_empty() {
        return Err(Error::Empty("rollout batch".into()));
    }
    let mut advantages = batch.advantages.clone();
    if cfg.normalize_advantages {
        normalize_advantages(&mut advantages);
    }
    let mut stats = PpoStats::default();
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut samples = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for (k, idx) in order.chunks(cfg.minibatch).enumerate() {
            let mut g = ppo_gradients(net, batch, &advantages, idx, cfg)?;
            if epoch == 0 && k == 0 {
                stats.initial_ratios = g.ratios.clone();
            }
            for (name, v) in [("policy loss", g.policy_loss), ("value loss", g.value_loss)] {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("{name} at epoch {epoch}, minibatch {k}")));
                }
            }
            if let Some(max_norm) = cfg.max_grad_norm {
                let norm =
                    (g.extractor.squared_norm() + g.policy_head.squared_norm() + g.value_head.squared_norm()).sqrt();
                if norm > max_norm {
                    let s = (max_norm / (norm + 1e-6)) as f32;
                    g.extractor.scale(s);
                    g.policy_head.scale(s);
                    g.value_head.scale(s);
                }
            }
            opt.extractor.step(&mut net.extractor, &g.extractor)?;
            opt.policy_head.step(&mut net.policy_head, &g.policy_head)?;
            opt.value_head.step(&mut net.value_head, &g.value_head)?;
            let w = idx.len() as f64;
            stats.policy_loss += g.policy_loss * w;
            stats.value_loss += g.value_loss * w;
            stats.entropy += g.entropy * w;
            stats.approx_kl += g.approx_kl * w;
            stats.clip_fraction += g.clipped as f64;
            stats.skipped_samples += g.skipped;
            stats.minibatches += 1;
            samples += idx.len();
        }
    }
    let n = samples as f64;
    stats.policy_loss /= n;
    stats.value_loss /= n;
    stats.entropy /= n;
    stats.approx_kl /= n;
    stats.clip_fraction /= n;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_terminal_step() {
        let (a, r) = compute_gae(&[1.0], &[0.0], &[true], 0.0, 1.0, 0.95).unwrap();
        assert_eq!((a[0], r[0]), (1.0, 1.0));
    }

    #[test]
    fn gae_zero_rewards() {
        let (a, _) = compute_gae(
            &[0.0; 5],
            &[0.0; 5],
            &[false, false, true, false, false],
            0.0,
            0.99,
            0.95,
        )
        .unwrap();
        assert!(a.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gae_hand_recursion() {
        let (a, r) = compute_gae(&[0.0, 1.0], &[0.5, 0.5], &[false, true], 0.0, 0.99, 0.95).unwrap();
        assert!((a[1] - 0.5).abs() < 1e-12);
        assert!((a[0] - 0.46525).abs() < 1e-12);
        assert!((r[0] - 0.96525).abs() < 1e-12);
    }

    #[test]
    fn gae_bootstraps_unfinished_segment() {
        let (a, _) = compute_gae(&[0.0], &[0.0], &[false], 2.0, 0.5, 1.0).unwrap();
        assert_eq!(a[0], 1.0);
    }

    #[test]
    fn normalization_moments() {
        let mut adv: Vec<f64> = (0..100).map(|i| (i as f64).sin() * 3.0 + 7.0).collect();
        normalize_advantages(&mut adv);
        let mean = adv.iter().sum::<f64>() / 100.0;
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 100.0).sqrt();
        assert!(mean.abs() < 1e-6);
        assert!((std - 1.0).abs() < 1e-3);
    }

    #[test]
    fn one_hot_mask_is_deterministic() {
        let net = PolicyNet::new(Extractor::Small, &[2, 3, 3], 4, 1).unwrap();
        let obs = Tensor::filled(vec![2, 3, 3], 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mask = Mask::new(vec![false, false, true, false]);
        for _ in 0..20 {
            let s = sample_action(&net, &obs, &mask, &mut rng).unwrap();
            assert_eq!(s.action, 2);
            assert_eq!(s.log_prob, 0.0);
        }
    }
}
