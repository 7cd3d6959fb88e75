//! Central finite-difference checks of every layer kind in double precision.

use maskrl::nn::{LayerSpec, Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS: u64 = 20;

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Loss `sum(y * r)` in training mode with a dropout mask fixed by `mask_seed`.
fn loss(net: &mut Network<f64>, x: &Tensor<f64>, r: &[f64], mask_seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let (y, _) = net.forward_train(x, &mut rng).unwrap();
    y.data().iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Inputs in `[-1, 1]` kept at least `gap` away from zero.
fn input(rng: &mut ChaCha8Rng, shape: Vec<usize>, gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(gap..1.0);
            if rng.gen() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Worst relative error over all parameters and inputs for one network.
pub fn check(specs: Vec<LayerSpec>, sample_shape: &[usize], batch: usize, seed: u64, gap: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::<f64>::xavier(specs, sample_shape, seed).unwrap();
    for p in net.params_mut() {
        if let Some(w) = p.weight.as_mut() {
            for v in w.data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        if let Some(b) = p.bias.as_mut() {
            for v in b.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    let mut shape = vec![batch];
    shape.extend_from_slice(sample_shape);
    let x = input(&mut rng, shape, gap);
    let mask_seed = seed + 1000;
    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let (y, cache) = net.forward_train(&x, &mut mask_rng).unwrap();
    let r: Vec<f64> = (0..y.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dy = Tensor::new(y.shape().to_vec(), r.clone()).unwrap();
    let (grads, dx) = net.backward(&cache, &dy).unwrap();

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += H;
        let mut minus = x.clone();
        minus.data_mut()[i] -= H;
        let numeric = (loss(&mut net, &plus, &r, mask_seed) - loss(&mut net, &minus, &r, mask_seed)) / (2.0 * H);
        worst = worst.max(rel_err(dx.data()[i], numeric));
    }
    for layer in 0..net.params().len() {
        for which in 0..2 {
            let analytic = match which {
                0 => grads.layers[layer].weight.clone(),
                _ => grads.layers[layer].bias.clone(),
            };
            let Some(analytic) = analytic else { continue };
            for i in 0..analytic.len() {
                let nudge = |net: &mut Network<f64>, delta: f64| {
                    let p = &mut net.params_mut()[layer];
                    let t = if which == 0 { p.weight.as_mut() } else { p.bias.as_mut() };
                    t.unwrap().data_mut()[i] += delta;
                };
                nudge(&mut net, H);
                let up = loss(&mut net, &x, &r, mask_seed);
                nudge(&mut net, -2.0 * H);
                let down = loss(&mut net, &x, &r, mask_seed);
                nudge(&mut net, H);
                worst = worst.max(rel_err(analytic.data()[i], (up - down) / (2.0 * H)));
            }
        }
    }
    worst
}

/// Largest error over all seeds and the seed it came from.
pub fn worst_over_seeds(f: impl Fn(u64) -> f64) -> (f64, u64) {
    (0..SEEDS)
        .map(|s| (f(s), s))
        .fold((0.0, 0), |a, b| if b.0 > a.0 { b } else { a })
}

pub struct Case {
    pub name: &'static str,
    pub specs: Vec<LayerSpec>,
    pub sample_shape: Vec<usize>,
    pub batch: usize,
    pub gap: f64,
}

impl Case {
    fn new(name: &'static str, specs: Vec<LayerSpec>, sample_shape: &[usize], batch: usize) -> Self {
        Self {
            name,
            specs,
            sample_shape: sample_shape.to_vec(),
            batch,
            gap: 0.0,
        }
    }

    pub fn worst(&self) -> (f64, u64) {
        worst_over_seeds(|s| check(self.specs.clone(), &self.sample_shape, self.batch, s, self.gap))
    }
}

/// One case per layer kind plus a composed stack.
pub fn cases() -> Vec<Case> {
    vec![
        Case::new("dense", vec![LayerSpec::Dense { inputs: 5, outputs: 3 }], &[5], 4),
        Case::new(
            "conv2d",
            vec![LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 3,
                kernel: 3,
                stride: 1,
            }],
            &[2, 5, 5],
            2,
        ),
        Case::new(
            "strided conv2d",
            vec![LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 2,
                kernel: 2,
                stride: 2,
            }],
            &[2, 6, 6],
            2,
        ),
        Case {
            gap: 0.05,
            ..Case::new("relu", vec![LayerSpec::Relu], &[7], 3)
        },
        Case::new("flatten", vec![LayerSpec::Flatten], &[2, 3, 3], 2),
        Case::new("dropout", vec![LayerSpec::Dropout { rate: 0.3 }], &[8], 3),
        Case::new("batchnorm", vec![LayerSpec::BatchNorm { features: 4 }], &[4], 5),
        Case::new(
            "spatial batchnorm",
            vec![LayerSpec::BatchNorm { features: 2 }],
            &[2, 3, 3],
            3,
        ),
        Case::new(
            "stack",
            vec![
                LayerSpec::BatchNorm { features: 2 },
                LayerSpec::Conv2d {
                    in_channels: 2,
                    out_channels: 3,
                    kernel: 2,
                    stride: 1,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 27, outputs: 6 },
                LayerSpec::Dropout { rate: 0.25 },
                LayerSpec::Dense { inputs: 6, outputs: 2 },
            ],
            &[2, 4, 4],
            3,
        ),
    ]
}
