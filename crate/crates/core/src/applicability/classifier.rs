use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::nn::{bce_with_logit, sigmoid, AdamState, Extractor, LayerSpec, Network, Tensor};

const DROPOUT: f32 = 0.3;

/// Binary applicability classifier: observation extractor, one-hot action
/// encoder and an MLP head producing a single logit.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierNet {
    pub extractor: Network,
    pub head: Network,
    /// Action names in one-hot order.
    pub actions: Vec<String>,
}

pub fn classifier_extractor_layers(arch: Extractor, channels: usize) -> Vec<LayerSpec> {
    let mut layers = vec![LayerSpec::BatchNorm { features: channels }];
    layers.extend(arch.layers(channels));
    layers
}

pub fn classifier_head_layers(inputs: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::BatchNorm { features: inputs },
        LayerSpec::Dense { inputs, outputs: 256 },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: DROPOUT },
        LayerSpec::BatchNorm { features: 256 },
        LayerSpec::Dense {
            inputs: 256,
            outputs: 96,
        },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: DROPOUT },
        LayerSpec::BatchNorm { features: 96 },
        LayerSpec::Dense { inputs: 96, outputs: 1 },
    ]
}

impl ClassifierNet {
    pub fn new(arch: Extractor, obs_shape: &[usize], actions: Vec<String>, seed: u64) -> Result<Self> {
        let channels = *obs_shape
            .first()
            .ok_or_else(|| Error::Config("observation shape is empty".into()))?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let extractor = Network::xavier_with_rng(classifier_extractor_layers(arch, channels), obs_shape, &mut rng)?;
        let features = extractor.output_shape()[0];
        let head = Network::xavier_with_rng(
            classifier_head_layers(features + actions.len()),
            &[features + actions.len()],
            &mut rng,
        )?;
        Self::from_parts(extractor, head, actions)
    }

    pub fn from_parts(extractor: Network, head: Network, actions: Vec<String>) -> Result<Self> {
        if extractor.output_shape().len() != 1 {
            return Err(Error::Architecture("classifier extractor must end flat".into()));
        }
        let width = extractor.output_shape()[0] + actions.len();
        if head.input_shape() != [width] || head.output_shape() != [1] {
            return Err(Error::Architecture(format!(
                "classifier head expects input [{width}] and output [1], found {:?} -> {:?}",
                head.input_shape(),
                head.output_shape()
            )));
        }
        Ok(Self {
            extractor,
            head,
            actions,
        })
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn obs_shape(&self) -> &[usize] {
        self.extractor.input_shape()
    }

    fn features(&self) -> usize {
        self.extractor.output_shape()[0]
    }

    fn head_input(&self, features: &Tensor, actions: &[usize]) -> Result<Tensor> {
        let f = self.features();
        let a = self.num_actions();
        let mut data = Vec::with_capacity(actions.len() * (f + a));
        for (row, &action) in actions.iter().enumerate() {
            if action >= a {
                return Err(Error::Usage(format!(
                    "classifier action index {action} out of range {a}"
                )));
            }
            data.extend_from_slice(features.row(row));
            let start = data.len();
            data.resize(start + a, 0.0);
            data[start + action] = 1.0;
        }
        Tensor::new(vec![actions.len(), f + a], data)
    }

    /// Inference-mode logits for one action per observation row.
    pub fn logits(&self, obs: &Tensor, actions: &[usize]) -> Result<Vec<f32>> {
        if obs.rows() != actions.len() {
            return Err(Error::shape("classifier batch", &[obs.rows()], &[actions.len()]));
        }
        let features = self.extractor.predict(obs)?;
        Ok(self.head.predict(&self.head_input(&features, actions)?)?.into_data())
    }

    /// Inference-mode probabilities for every one-hot action of every observation
    /// row; result is `[rows][num_actions]`.
    pub fn probabilities(&self, obs: &Tensor) -> Result<Vec<Vec<f64>>> {
        let rows = obs.rows();
        let a = self.num_actions();
        let features = self.extractor.predict(obs)?;
        let f = self.features();
        let mut repeated = Vec::with_capacity(rows * a * f);
        let mut actions = Vec::with_capacity(rows * a);
        for r in 0..rows {
            for i in 0..a {
                repeated.extend_from_slice(features.row(r));
                actions.push(i);
            }
        }
        let repeated = Tensor::new(vec![rows * a, f], repeated)?;
        let logits = self.head.predict(&self.head_input(&repeated, &actions)?)?;
        Ok(logits
            .data()
            .chunks(a)
            .map(|c| c.iter().map(|&z| sigmoid(z as f64)).collect())
            .collect())
    }

    /// One supervised step on a labeled batch in training mode. Returns the mean
    /// BCE loss of the batch.
    pub fn train_step<G: Rng>(
        &mut self,
        opt: &mut ClassifierOptimizer,
        obs: &Tensor,
        actions: &[usize],
        labels: &[u8],
        rng: &mut G,
    ) -> Result<f64> {
        let n = obs.rows();
        if n == 0 || actions.len() != n || labels.len() != n {
            return Err(Error::shape(
                "classifier training batch",
                &[n, n],
                &[actions.len(), labels.len()],
            ));
        }
        let (features, ext_cache) = self.extractor.forward_train(obs, rng)?;
        let input = self.head_input(&features, actions)?;
        let (logits, head_cache) = self.head.forward_train(&input, rng)?;
        let mut loss = 0.0;
        let mut dlogits = Vec::with_capacity(n);
        for (&z, &y) in logits.data().iter().zip(labels) {
            let (l, g) = bce_with_logit(z as f64, y as f64);
            loss += l;
            dlogits.push((g / n as f64) as f32);
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("classifier loss ({loss}) on a batch of {n}")));
        }
        let (head_grads, dinput) = self.head.backward(&head_cache, &Tensor::new(vec![n, 1], dlogits)?)?;
        let f = self.features();
        let width = f + self.num_actions();
        let mut dfeatures = Vec::with_capacity(n * f);
        for row in dinput.data().chunks(width) {
            dfeatures.extend_from_slice(&row[..f]);
        }
        let (ext_grads, _) = self
            .extractor
            .backward(&ext_cache, &Tensor::new(vec![n, f], dfeatures)?)?;
        opt.head.step(&mut self.head, &head_grads)?;
        opt.extractor.step(&mut self.extractor, &ext_grads)?;
        Ok(loss)
    }
}

/// Adam state for both classifier networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierOptimizer {
    pub extractor: AdamState,
    pub head: AdamState,
}

impl ClassifierOptimizer {
    pub fn new(net: &ClassifierNet, lr: f64) -> Self {
        Self {
            extractor: AdamState::new(&net.extractor, lr),
            head: AdamState::new(&net.head, lr),
        }
    }
}
