use super::network::{Gradients, Network};
use super::tensor::Real;
use crate::error::{Error, Result};

/// Adam optimizer state for one network.
///
/// Adam is elementwise, so several networks trained under one objective may each
/// keep their own `AdamState` as long as they step together.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<R = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<R>>,
    second: Vec<Vec<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn new<S: Real>(net: &Network<S>, lr: f64) -> Self {
        let sizes: Vec<usize> = net
            .params()
            .iter()
            .flat_map(|p| [&p.weight, &p.bias].into_iter().flatten())
            .map(|t| t.len())
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: sizes.iter().map(|n| vec![R::zero(); *n]).collect(),
            second: sizes.iter().map(|n| vec![R::zero(); *n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<R>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<R>] {
        &self.second
    }

    /// One bias-corrected Adam update of `net` with `grads`.
    ///
    /// Non-finite gradients are rejected before any parameter changes.
    pub fn step(&mut self, net: &mut Network<R>, grads: &Gradients<R>) -> Result<()> {
        if grads.layers.len() != net.params().len() {
            return Err(Error::Architecture("gradient layout does not match network".into()));
        }
        for (i, (g, spec)) in grads.layers.iter().zip(net.specs()).enumerate() {
            for t in [&g.weight, &g.bias].into_iter().flatten() {
                if !t.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of layer {i} ({})", spec.name())));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (R::of(self.beta1), R::of(self.beta2));
        let (one_b1, one_b2) = (R::of(1.0 - self.beta1), R::of(1.0 - self.beta2));
        let step_size = R::of(self.lr / bc1);
        let bc2_sqrt = R::of(bc2.sqrt());
        let eps = R::of(self.eps);
        let mut slot = 0;
        for (p, g) in net.params_mut().iter_mut().zip(&grads.layers) {
            let params = [&mut p.weight, &mut p.bias].into_iter().flatten();
            let gs = [&g.weight, &g.bias].into_iter().flatten();
            for (param, grad) in params.zip(gs) {
                let m = &mut self.first[slot];
                let v = &mut self.second[slot];
                for (((w, g), m), v) in param
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    *m = b1 * *m + one_b1 * *g;
                    *v = b2 * *v + one_b2 * *g * *g;
                    let denom = v.sqrt() / bc2_sqrt + eps;
                    *w = *w - step_size * *m / denom;
                }
                slot += 1;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, Tensor};

    fn scalar_net(w: f32) -> Network<f32> {
        let mut net = Network::<f32>::xavier(vec![LayerSpec::Dense { inputs: 1, outputs: 1 }], &[1], 0).unwrap();
        net.params_mut()[0].weight.as_mut().unwrap().data_mut()[0] = w;
        net
    }

    fn grads(w: f32, b: f32) -> Gradients<f32> {
        let mut g = Gradients::zeros_like(&scalar_net(0.0));
        g.layers[0].weight = Some(Tensor::new(vec![1, 1], vec![w]).unwrap());
        g.layers[0].bias = Some(Tensor::from_vec(vec![b]));
        g
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut net = scalar_net(0.5);
        let mut adam = AdamState::new(&net, 0.1);
        adam.step(&mut net, &grads(1.0, 0.0)).unwrap();
        let w = net.params()[0].weight.as_ref().unwrap().data()[0];
        let expected = 0.5 - 0.1 / (1.0 + 1e-8);
        assert!((w as f64 - expected).abs() < 1e-7, "w = {w}");
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_everything_unchanged() {
        let mut net = scalar_net(0.5);
        let before = net.clone();
        let mut adam = AdamState::new(&net, 0.1);
        adam.step(&mut net, &grads(0.0, 0.0)).unwrap();
        assert_eq!(net, before);
        assert!(adam.first_moments().iter().flatten().all(|m| *m == 0.0));
        assert!(adam.second_moments().iter().flatten().all(|m| *m == 0.0));
    }

    #[test]
    fn non_finite_gradient_names_the_layer() {
        let mut net = scalar_net(0.5);
        let before = net.clone();
        let mut adam = AdamState::new(&net, 0.1);
        let err = adam.step(&mut net, &grads(f32::NAN, 0.0)).unwrap_err();
        assert!(err.to_string().contains("layer 0 (dense)"), "{err}");
        assert_eq!(net, before);
        assert_eq!(adam.step_count(), 0);
    }
}
