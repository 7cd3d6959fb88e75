use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layer::{infer_shapes, LayerSpec};
use super::tensor::{matmul, Real, Tensor};
use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Trainable and running-statistics tensors of one layer.
///
/// For `BatchNorm`, `weight`/`bias` hold the affine scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<R = f32> {
    pub weight: Option<Tensor<R>>,
    pub bias: Option<Tensor<R>>,
    pub running_mean: Option<Tensor<R>>,
    pub running_var: Option<Tensor<R>>,
}

impl<R: Real> LayerParams<R> {
    fn empty() -> Self {
        Self {
            weight: None,
            bias: None,
            running_mean: None,
            running_var: None,
        }
    }

    /// All tensors of the layer in serialization order.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<R>> {
        [&self.weight, &self.bias, &self.running_mean, &self.running_var]
            .into_iter()
            .flatten()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<R>> {
        [
            &mut self.weight,
            &mut self.bias,
            &mut self.running_mean,
            &mut self.running_var,
        ]
        .into_iter()
        .flatten()
    }
}

/// Gradient of a scalar loss with respect to each layer's trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads<R = f32> {
    pub weight: Option<Tensor<R>>,
    pub bias: Option<Tensor<R>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<R = f32> {
    pub layers: Vec<LayerGrads<R>>,
}

impl<R: Real> Gradients<R> {
    pub fn zeros_like(net: &Network<R>) -> Self {
        let layers = net
            .params
            .iter()
            .map(|p| LayerGrads {
                weight: p.weight.as_ref().map(|w| Tensor::zeros(w.shape().to_vec())),
                bias: p.bias.as_ref().map(|b| Tensor::zeros(b.shape().to_vec())),
            })
            .collect();
        Self { layers }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<R>> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias].into_iter().flatten())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<R>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias].into_iter().flatten())
    }

    pub fn add_assign(&mut self, other: &Gradients<R>) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: R) {
        for t in self.tensors_mut() {
            for x in t.data_mut() {
                *x = *x * factor;
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .flat_map(|t| t.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum()
    }
}

enum LayerCache<R> {
    Dense {
        input: Tensor<R>,
    },
    Conv {
        cols: Vec<R>,
        input_shape: Vec<usize>,
    },
    Relu {
        output: Tensor<R>,
    },
    Flatten {
        input_shape: Vec<usize>,
    },
    Dropout {
        mask: Option<Vec<R>>,
    },
    BatchNorm {
        xhat: Vec<R>,
        inv_std: Vec<R>,
        batch_stats: bool,
    },
}

/// Intermediates retained by a forward pass for the matching backward pass.
pub struct Cache<R = f32> {
    generation: u64,
    layers: Vec<LayerCache<R>>,
}

/// A sequential network: layer specs plus their parameters.
#[derive(Clone, Debug)]
pub struct Network<R: Real = f32> {
    specs: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
    params: Vec<LayerParams<R>>,
    generation: u64,
}

impl<R: Real> PartialEq for Network<R> {
    fn eq(&self, other: &Self) -> bool {
        self.specs == other.specs && self.shapes == other.shapes && self.params == other.params
    }
}

impl<R: Real> Network<R> {
    /// Xavier-uniform weights (`b = sqrt(6 / (fan_in + fan_out))`), zero biases,
    /// unit batchnorm scale.
    pub fn xavier(specs: Vec<LayerSpec>, input_shape: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::xavier_with_rng(specs, input_shape, &mut rng)
    }

    pub fn xavier_with_rng<G: Rng>(specs: Vec<LayerSpec>, input_shape: &[usize], rng: &mut G) -> Result<Self> {
        let shapes = infer_shapes(&specs, input_shape)?;
        let mut params = Vec::with_capacity(specs.len());
        for spec in &specs {
            let mut p = LayerParams::empty();
            match *spec {
                LayerSpec::Dense { inputs, outputs } => {
                    p.weight = Some(xavier_tensor(vec![outputs, inputs], spec, rng));
                    p.bias = Some(Tensor::zeros(vec![outputs]));
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    p.weight = Some(xavier_tensor(
                        vec![out_channels, in_channels, kernel, kernel],
                        spec,
                        rng,
                    ));
                    p.bias = Some(Tensor::zeros(vec![out_channels]));
                }
                LayerSpec::BatchNorm { features } => {
                    p.weight = Some(Tensor::filled(vec![features], R::one()));
                    p.bias = Some(Tensor::zeros(vec![features]));
                    p.running_mean = Some(Tensor::zeros(vec![features]));
                    p.running_var = Some(Tensor::filled(vec![features], R::one()));
                }
                LayerSpec::Relu | LayerSpec::Flatten | LayerSpec::Dropout { .. } => {}
            }
            params.push(p);
        }
        Ok(Self {
            specs,
            shapes,
            params,
            generation: next_generation(),
        })
    }

    /// Assembles a network from explicit parameters, validating every shape.
    pub fn from_parts(specs: Vec<LayerSpec>, input_shape: &[usize], params: Vec<LayerParams<R>>) -> Result<Self> {
        let template = Self::xavier_with_rng(specs, input_shape, &mut ChaCha8Rng::seed_from_u64(0))?;
        if template.params.len() != params.len() {
            return Err(Error::Architecture(format!(
                "expected parameters for {} layers, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for (i, (t, p)) in template.params.iter().zip(&params).enumerate() {
            let ts: Vec<_> = t.tensors().map(|x| x.shape().to_vec()).collect();
            let ps: Vec<_> = p.tensors().map(|x| x.shape().to_vec()).collect();
            if ts != ps {
                return Err(Error::Architecture(format!(
                    "layer {i} ({}) expects tensors {ts:?}, got {ps:?}",
                    template.specs[i].name()
                )));
            }
        }
        Ok(Self {
            params,
            generation: next_generation(),
            ..template
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("non-empty")
    }

    pub fn params(&self) -> &[LayerParams<R>] {
        &self.params
    }

    /// Mutable parameter access. Invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut [LayerParams<R>] {
        self.generation = next_generation();
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .flat_map(|p| [&p.weight, &p.bias].into_iter().flatten())
            .map(|t| t.len())
            .sum()
    }

    fn check_input(&self, x: &Tensor<R>) -> Result<usize> {
        let expected = &self.shapes[0];
        if x.shape().len() != expected.len() + 1 || &x.shape()[1..] != expected.as_slice() {
            let mut e = vec![x.rows()];
            e.extend_from_slice(expected);
            return Err(Error::shape("network input", &e, x.shape()));
        }
        Ok(x.rows())
    }

    /// Training-mode forward: dropout active, batchnorm on batch statistics
    /// (running statistics are updated).
    pub fn forward_train<G: Rng>(&mut self, x: &Tensor<R>, rng: &mut G) -> Result<(Tensor<R>, Cache<R>)> {
        let n = self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.specs.len());
        let mut cur = x.clone();
        for i in 0..self.specs.len() {
            let out_shape = batch_shape(n, &self.shapes[i + 1]);
            let (next, cache) = match self.specs[i] {
                LayerSpec::BatchNorm { features } => batchnorm_train(&cur, features, &mut self.params[i]),
                ref spec => forward_layer(spec, &self.params[i], cur, out_shape, Some(&mut *rng))?,
            };
            caches.push(cache);
            cur = next;
        }
        Ok((
            cur,
            Cache {
                generation: self.generation,
                layers: caches,
            },
        ))
    }

    /// Inference-mode forward that still records a cache for backward.
    pub fn forward_eval(&self, x: &Tensor<R>) -> Result<(Tensor<R>, Cache<R>)> {
        let n = self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.specs.len());
        let mut cur = x.clone();
        for i in 0..self.specs.len() {
            let out_shape = batch_shape(n, &self.shapes[i + 1]);
            let (next, cache) = forward_layer(&self.specs[i], &self.params[i], cur, out_shape, None)?;
            caches.push(cache);
            cur = next;
        }
        Ok((
            cur,
            Cache {
                generation: self.generation,
                layers: caches,
            },
        ))
    }

    pub fn predict(&self, x: &Tensor<R>) -> Result<Tensor<R>> {
        Ok(self.forward_eval(x)?.0)
    }

    /// Reverse pass. Returns parameter gradients and the gradient w.r.t. the input.
    pub fn backward(&self, cache: &Cache<R>, grad_output: &Tensor<R>) -> Result<(Gradients<R>, Tensor<R>)> {
        if cache.generation != self.generation || cache.layers.len() != self.specs.len() {
            return Err(Error::StaleCache {
                cache: cache.generation,
                network: self.generation,
            });
        }
        let n = grad_output.rows();
        let expected = batch_shape(n, self.output_shape());
        if grad_output.shape() != expected.as_slice() {
            return Err(Error::shape(
                "backward upstream gradient",
                &expected,
                grad_output.shape(),
            ));
        }
        let mut grads = Vec::with_capacity(self.specs.len());
        let mut dy = grad_output.clone();
        for i in (0..self.specs.len()).rev() {
            let (g, dx) = backward_layer(
                &self.specs[i],
                &self.params[i],
                &cache.layers[i],
                dy,
                batch_shape(n, &self.shapes[i]),
            )?;
            grads.push(g);
            dy = dx;
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, dy))
    }
}

fn batch_shape(n: usize, per_sample: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(per_sample.len() + 1);
    s.push(n);
    s.extend_from_slice(per_sample);
    s
}

fn xavier_tensor<R: Real, G: Rng>(shape: Vec<usize>, spec: &LayerSpec, rng: &mut G) -> Tensor<R> {
    let (fan_in, fan_out) = spec.fans().expect("weighted layer");
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| R::of(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

fn forward_layer<R: Real>(
    spec: &LayerSpec,
    p: &LayerParams<R>,
    x: Tensor<R>,
    out_shape: Vec<usize>,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<(Tensor<R>, LayerCache<R>)> {
    let n = x.rows();
    match *spec {
        LayerSpec::Dense { inputs, outputs } => {
            let w = p.weight.as_ref().expect("dense weight");
            let b = p.bias.as_ref().expect("dense bias");
            let mut y = vec![R::zero(); n * outputs];
            matmul(x.data(), false, w.data(), true, &mut y, n, inputs, outputs, false);
            for row in y.chunks_mut(outputs) {
                for (v, bias) in row.iter_mut().zip(b.data()) {
                    *v += *bias;
                }
            }
            Ok((Tensor::new(out_shape, y)?, LayerCache::Dense { input: x }))
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
        } => {
            let (h, w) = (x.shape()[2], x.shape()[3]);
            let (ho, wo) = (out_shape[2], out_shape[3]);
            let positions = ho * wo;
            let k = in_channels * kernel * kernel;
            // cols is [k, n * positions]: one row per (channel, ky, kx) tap
            let cols = im2col(x.data(), n, in_channels, h, w, kernel, stride, ho, wo);
            let weight = p.weight.as_ref().expect("conv weight");
            let bias = p.bias.as_ref().expect("conv bias");
            let mut yt = vec![R::zero(); out_channels * n * positions];
            matmul(
                weight.data(),
                false,
                &cols,
                false,
                &mut yt,
                out_channels,
                k,
                n * positions,
                false,
            );
            let mut y = vec![R::zero(); n * out_channels * positions];
            for (o, (src, b)) in yt.chunks(n * positions).zip(bias.data()).enumerate() {
                for (s, seg) in src.chunks(positions).enumerate() {
                    let dst = &mut y[(s * out_channels + o) * positions..(s * out_channels + o + 1) * positions];
                    for (d, v) in dst.iter_mut().zip(seg) {
                        *d = *v + *b;
                    }
                }
            }
            let input_shape = x.shape().to_vec();
            Ok((Tensor::new(out_shape, y)?, LayerCache::Conv { cols, input_shape }))
        }
        LayerSpec::Relu => {
            let mut y = x;
            for v in y.data_mut() {
                if *v < R::zero() {
                    *v = R::zero();
                }
            }
            Ok((y.clone(), LayerCache::Relu { output: y }))
        }
        LayerSpec::Flatten => {
            let input_shape = x.shape().to_vec();
            Ok((x.reshape(out_shape)?, LayerCache::Flatten { input_shape }))
        }
        LayerSpec::Dropout { rate } => match rng {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 - rate as f64;
                let scale = R::of(1.0 / keep);
                let mask: Vec<R> = (0..x.len())
                    .map(|_| if rng.gen::<f64>() < keep { scale } else { R::zero() })
                    .collect();
                let mut y = x;
                for (v, m) in y.data_mut().iter_mut().zip(&mask) {
                    *v = *v * *m;
                }
                Ok((y, LayerCache::Dropout { mask: Some(mask) }))
            }
            _ => Ok((x, LayerCache::Dropout { mask: None })),
        },
        LayerSpec::BatchNorm { features } => {
            // inference path: affine map with frozen statistics
            let inner = x.row_len() / features;
            let gamma = p.weight.as_ref().expect("bn weight").data();
            let beta = p.bias.as_ref().expect("bn bias").data();
            let mean = p.running_mean.as_ref().expect("bn mean").data();
            let var = p.running_var.as_ref().expect("bn var").data();
            let inv_std: Vec<R> = var.iter().map(|v| R::one() / (*v + R::of(BN_EPS)).sqrt()).collect();
            let mut y = x;
            let mut xhat = vec![R::zero(); y.len()];
            for (row, hrow) in y
                .data_mut()
                .chunks_mut(features * inner)
                .zip(xhat.chunks_mut(features * inner))
            {
                for (c, (seg, hseg)) in row.chunks_mut(inner).zip(hrow.chunks_mut(inner)).enumerate() {
                    for (v, h) in seg.iter_mut().zip(hseg.iter_mut()) {
                        *h = (*v - mean[c]) * inv_std[c];
                        *v = gamma[c] * *h + beta[c];
                    }
                }
            }
            Ok((
                y,
                LayerCache::BatchNorm {
                    xhat,
                    inv_std,
                    batch_stats: false,
                },
            ))
        }
    }
}

fn batchnorm_train<R: Real>(x: &Tensor<R>, features: usize, p: &mut LayerParams<R>) -> (Tensor<R>, LayerCache<R>) {
    let inner = x.row_len() / features;
    let m = x.rows() * inner;
    let mut mean = vec![0.0f64; features];
    let mut sq = vec![0.0f64; features];
    for row in x.data().chunks(features * inner) {
        for (c, seg) in row.chunks(inner).enumerate() {
            mean[c] += seg.iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    for v in mean.iter_mut() {
        *v /= m as f64;
    }
    for row in x.data().chunks(features * inner) {
        for (c, seg) in row.chunks(inner).enumerate() {
            sq[c] += seg.iter().map(|v| (v.as_f64() - mean[c]).powi(2)).sum::<f64>();
        }
    }
    let var: Vec<f64> = sq.iter().map(|s| s / m as f64).collect();
    let inv_std: Vec<R> = var.iter().map(|v| R::of(1.0 / (v + BN_EPS).sqrt())).collect();
    let mean_r: Vec<R> = mean.iter().map(|v| R::of(*v)).collect();
    {
        let rm = p.running_mean.as_mut().expect("bn mean").data_mut();
        for (r, b) in rm.iter_mut().zip(&mean) {
            *r = R::of((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * b);
        }
        let rv = p.running_var.as_mut().expect("bn var").data_mut();
        let unbias = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
        for (r, v) in rv.iter_mut().zip(&var) {
            *r = R::of((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * v * unbias);
        }
    }
    let gamma = p.weight.as_ref().expect("bn weight").data();
    let beta = p.bias.as_ref().expect("bn bias").data();
    let mut y = x.clone();
    let mut xhat = vec![R::zero(); y.len()];
    for (row, hrow) in y
        .data_mut()
        .chunks_mut(features * inner)
        .zip(xhat.chunks_mut(features * inner))
    {
        for (c, (seg, hseg)) in row.chunks_mut(inner).zip(hrow.chunks_mut(inner)).enumerate() {
            for (v, h) in seg.iter_mut().zip(hseg.iter_mut()) {
                *h = (*v - mean_r[c]) * inv_std[c];
                *v = gamma[c] * *h + beta[c];
            }
        }
    }
    (
        y,
        LayerCache::BatchNorm {
            xhat,
            inv_std,
            batch_stats: true,
        },
    )
}

fn backward_layer<R: Real>(
    spec: &LayerSpec,
    p: &LayerParams<R>,
    cache: &LayerCache<R>,
    dy: Tensor<R>,
    in_shape: Vec<usize>,
) -> Result<(LayerGrads<R>, Tensor<R>)> {
    let n = dy.rows();
    let none = LayerGrads {
        weight: None,
        bias: None,
    };
    match (spec, cache) {
        (&LayerSpec::Dense { inputs, outputs }, LayerCache::Dense { input }) => {
            let w = p.weight.as_ref().expect("dense weight");
            let mut dw = vec![R::zero(); outputs * inputs];
            matmul(dy.data(), true, input.data(), false, &mut dw, outputs, n, inputs, false);
            let mut db = vec![R::zero(); outputs];
            for row in dy.data().chunks(outputs) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += *v;
                }
            }
            let mut dx = vec![R::zero(); n * inputs];
            matmul(dy.data(), false, w.data(), false, &mut dx, n, outputs, inputs, false);
            Ok((
                LayerGrads {
                    weight: Some(Tensor::new(vec![outputs, inputs], dw)?),
                    bias: Some(Tensor::from_vec(db)),
                },
                Tensor::new(in_shape, dx)?,
            ))
        }
        (
            &LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            },
            LayerCache::Conv { cols, input_shape },
        ) => {
            let (h, w) = (input_shape[2], input_shape[3]);
            let (ho, wo) = (dy.shape()[2], dy.shape()[3]);
            let positions = ho * wo;
            let k = in_channels * kernel * kernel;
            let weight = p.weight.as_ref().expect("conv weight");
            let mut dyt = vec![R::zero(); out_channels * n * positions];
            let mut db = vec![R::zero(); out_channels];
            for (i, seg) in dy.data().chunks(positions).enumerate() {
                let (s, o) = (i / out_channels, i % out_channels);
                dyt[(o * n + s) * positions..(o * n + s + 1) * positions].copy_from_slice(seg);
                db[o] += seg.iter().copied().sum::<R>();
            }
            let mut dw = vec![R::zero(); out_channels * k];
            matmul(&dyt, false, cols, true, &mut dw, out_channels, n * positions, k, false);
            let mut dcols = vec![R::zero(); k * n * positions];
            matmul(
                weight.data(),
                true,
                &dyt,
                false,
                &mut dcols,
                k,
                out_channels,
                n * positions,
                false,
            );
            let dx = col2im(&dcols, n, in_channels, h, w, kernel, stride, ho, wo);
            Ok((
                LayerGrads {
                    weight: Some(Tensor::new(vec![out_channels, in_channels, kernel, kernel], dw)?),
                    bias: Some(Tensor::from_vec(db)),
                },
                Tensor::new(in_shape, dx)?,
            ))
        }
        (LayerSpec::Relu, LayerCache::Relu { output }) => {
            let mut dx = dy;
            for (d, y) in dx.data_mut().iter_mut().zip(output.data()) {
                if *y <= R::zero() {
                    *d = R::zero();
                }
            }
            Ok((none, dx))
        }
        (LayerSpec::Flatten, LayerCache::Flatten { input_shape }) => Ok((none, dy.reshape(input_shape.clone())?)),
        (LayerSpec::Dropout { .. }, LayerCache::Dropout { mask }) => {
            let mut dx = dy;
            if let Some(mask) = mask {
                for (d, m) in dx.data_mut().iter_mut().zip(mask) {
                    *d = *d * *m;
                }
            }
            Ok((none, dx))
        }
        (
            &LayerSpec::BatchNorm { features },
            LayerCache::BatchNorm {
                xhat,
                inv_std,
                batch_stats,
            },
        ) => {
            let inner = dy.row_len() / features;
            let m = R::of((n * inner) as f64);
            let gamma = p.weight.as_ref().expect("bn weight").data();
            let mut dgamma = vec![R::zero(); features];
            let mut dbeta = vec![R::zero(); features];
            for (row, hrow) in dy.data().chunks(features * inner).zip(xhat.chunks(features * inner)) {
                for (c, (seg, hseg)) in row.chunks(inner).zip(hrow.chunks(inner)).enumerate() {
                    for (d, h) in seg.iter().zip(hseg) {
                        dgamma[c] += *d * *h;
                        dbeta[c] += *d;
                    }
                }
            }
            let mut dx = dy;
            for (row, hrow) in dx
                .data_mut()
                .chunks_mut(features * inner)
                .zip(xhat.chunks(features * inner))
            {
                for (c, (seg, hseg)) in row.chunks_mut(inner).zip(hrow.chunks(inner)).enumerate() {
                    let (g, s) = (gamma[c], inv_std[c]);
                    if *batch_stats {
                        // batch mean and variance depend on x as well
                        let mean_term = dbeta[c] / m;
                        let var_term = dgamma[c] / m;
                        for (d, h) in seg.iter_mut().zip(hseg) {
                            *d = g * s * (*d - mean_term - *h * var_term);
                        }
                    } else {
                        for d in seg.iter_mut() {
                            *d = *d * g * s;
                        }
                    }
                }
            }
            Ok((
                LayerGrads {
                    weight: Some(Tensor::from_vec(dgamma)),
                    bias: Some(Tensor::from_vec(dbeta)),
                },
                dx,
            ))
        }
        _ => Err(Error::StaleCache { cache: 0, network: 0 }),
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<R: Real>(
    x: &[R],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Vec<R> {
    let positions = ho * wo;
    let mut cols = vec![R::zero(); c * k * k * n * positions];
    for (r, row) in cols.chunks_mut(n * positions).enumerate() {
        let (ch, ky, kx) = (r / (k * k), (r / k) % k, r % k);
        for (s, block) in row.chunks_mut(positions).enumerate() {
            let plane = &x[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
            for (oy, dst) in block.chunks_mut(wo).enumerate() {
                let src = (oy * stride + ky) * w + kx;
                if stride == 1 {
                    dst.copy_from_slice(&plane[src..src + wo]);
                } else {
                    for (ox, d) in dst.iter_mut().enumerate() {
                        *d = plane[src + ox * stride];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<R: Real>(
    cols: &[R],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Vec<R> {
    let positions = ho * wo;
    let mut x = vec![R::zero(); n * c * h * w];
    for (r, row) in cols.chunks(n * positions).enumerate() {
        let (ch, ky, kx) = (r / (k * k), (r / k) % k, r % k);
        for (s, block) in row.chunks(positions).enumerate() {
            let plane = &mut x[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
            for (oy, src) in block.chunks(wo).enumerate() {
                let dst = (oy * stride + ky) * w + kx;
                if stride == 1 {
                    for (d, v) in plane[dst..dst + wo].iter_mut().zip(src) {
                        *d += *v;
                    }
                } else {
                    for (ox, v) in src.iter().enumerate() {
                        plane[dst + ox * stride] += *v;
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f32>) -> Tensor<f32> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn xavier_dense_4x2_bound_is_one() {
        let net = Network::<f32>::xavier(vec![LayerSpec::Dense { inputs: 4, outputs: 2 }], &[4], 3).unwrap();
        let w = net.params()[0].weight.as_ref().unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 1.0));
        assert!(net.params()[0].bias.as_ref().unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn xavier_is_deterministic_per_seed() {
        let specs = vec![LayerSpec::Dense { inputs: 5, outputs: 3 }, LayerSpec::Relu];
        let a = Network::<f32>::xavier(specs.clone(), &[5], 11).unwrap();
        let b = Network::<f32>::xavier(specs.clone(), &[5], 11).unwrap();
        let c = Network::<f32>::xavier(specs, &[5], 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn xavier_variance_matches_uniform_law() {
        let net = Network::<f32>::xavier(
            vec![LayerSpec::Dense {
                inputs: 100,
                outputs: 100,
            }],
            &[100],
            5,
        )
        .unwrap();
        let mut samples: Vec<f64> = net.params()[0]
            .weight
            .as_ref()
            .unwrap()
            .data()
            .iter()
            .map(|v| *v as f64)
            .collect();
        // 10^5 draws: ten differently seeded 100x100 layers
        for seed in 6..15 {
            let n = Network::<f32>::xavier(
                vec![LayerSpec::Dense {
                    inputs: 100,
                    outputs: 100,
                }],
                &[100],
                seed,
            )
            .unwrap();
            samples.extend(n.params()[0].weight.as_ref().unwrap().data().iter().map(|v| *v as f64));
        }
        assert_eq!(samples.len(), 100_000);
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / samples.len() as f64;
        let b2 = 6.0 / 200.0;
        assert!((var - b2 / 3.0).abs() < 0.05 * b2 / 3.0, "var {var}");
    }

    #[test]
    fn relu_zeroes_negatives() {
        let net = Network::<f32>::xavier(vec![LayerSpec::Relu], &[3], 0).unwrap();
        let y = net.predict(&t(vec![1, 3], vec![-1.0, 0.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let net = Network::<f32>::xavier(vec![LayerSpec::Dropout { rate: 0.3 }], &[4], 0).unwrap();
        let x = t(vec![1, 4], vec![1.0, -2.0, 3.0, 4.0]);
        assert_eq!(net.predict(&x).unwrap(), x);
    }

    #[test]
    fn dropout_scales_kept_units_in_training() {
        let mut net = Network::<f32>::xavier(vec![LayerSpec::Dropout { rate: 0.5 }], &[1000], 0).unwrap();
        let x = t(vec![1, 1000], vec![1.0; 1000]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (y, _) = net.forward_train(&x, &mut rng).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0 || *v == 2.0));
        let kept = y.data().iter().filter(|v| **v > 0.0).count();
        assert!((400..600).contains(&kept));
    }

    #[test]
    fn conv_all_ones_gives_nine() {
        let mut net = Network::<f32>::xavier(
            vec![LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 1,
                kernel: 3,
                stride: 1,
            }],
            &[1, 3, 3],
            0,
        )
        .unwrap();
        net.params_mut()[0].weight.as_mut().unwrap().data_mut().fill(1.0);
        let y = net.predict(&t(vec![1, 1, 3, 3], vec![1.0; 9])).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_matches_direct_sum_with_stride() {
        let spec = LayerSpec::Conv2d {
            in_channels: 2,
            out_channels: 3,
            kernel: 2,
            stride: 2,
        };
        let net = Network::<f64>::xavier(vec![spec], &[2, 5, 5], 9).unwrap();
        let x: Vec<f64> = (0..2 * 2 * 25).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let xt = Tensor::new(vec![2, 2, 5, 5], x.clone()).unwrap();
        let y = net.predict(&xt).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2, 2]);
        let w = net.params()[0].weight.as_ref().unwrap().data();
        for s in 0..2 {
            for o in 0..3 {
                for oy in 0..2 {
                    for ox in 0..2 {
                        let mut acc = 0.0;
                        for c in 0..2 {
                            for ky in 0..2 {
                                for kx in 0..2 {
                                    acc += w[((o * 2 + c) * 2 + ky) * 2 + kx]
                                        * x[((s * 2 + c) * 5 + oy * 2 + ky) * 5 + ox * 2 + kx];
                                }
                            }
                        }
                        let got = y.data()[((s * 3 + o) * 2 + oy) * 2 + ox];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn dense_weight_gradient_is_input() {
        // L = w * x with x = 3
        let mut net = Network::<f32>::xavier(vec![LayerSpec::Dense { inputs: 1, outputs: 1 }], &[1], 0).unwrap();
        net.params_mut()[0].weight.as_mut().unwrap().data_mut()[0] = 0.7;
        let (_, cache) = net.forward_eval(&t(vec![1, 1], vec![3.0])).unwrap();
        let (g, dx) = net.backward(&cache, &t(vec![1, 1], vec![1.0])).unwrap();
        assert_eq!(g.layers[0].weight.as_ref().unwrap().data(), &[3.0]);
        assert!((dx.data()[0] - 0.7).abs() < 1e-7);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let specs = vec![
            LayerSpec::Dense { inputs: 3, outputs: 4 },
            LayerSpec::Relu,
            LayerSpec::BatchNorm { features: 4 },
            LayerSpec::Dense { inputs: 4, outputs: 2 },
        ];
        let mut net = Network::<f32>::xavier(specs, &[3], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = t(vec![2, 3], vec![0.1, -0.2, 0.3, 0.5, 0.4, -0.6]);
        let (y, cache) = net.forward_train(&x, &mut rng).unwrap();
        let (g, _) = net.backward(&cache, &Tensor::zeros(y.shape().to_vec())).unwrap();
        assert!(g.tensors().all(|t| t.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn backward_rejects_stale_cache() {
        let mut net = Network::<f32>::xavier(vec![LayerSpec::Dense { inputs: 2, outputs: 1 }], &[2], 0).unwrap();
        let (_, cache) = net.forward_eval(&t(vec![1, 2], vec![1.0, 2.0])).unwrap();
        net.params_mut()[0].weight.as_mut().unwrap().data_mut()[0] += 1.0;
        let err = net.backward(&cache, &t(vec![1, 1], vec![1.0])).unwrap_err();
        assert!(matches!(err, Error::StaleCache { .. }));
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let net = Network::<f32>::xavier(vec![LayerSpec::Dense { inputs: 2, outputs: 1 }], &[2], 0).unwrap();
        assert!(matches!(
            net.predict(&t(vec![1, 3], vec![0.0; 3])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn batchnorm_inference_is_affine() {
        let mut net = Network::<f64>::xavier(vec![LayerSpec::BatchNorm { features: 2 }], &[2], 0).unwrap();
        {
            let p = &mut net.params_mut()[0];
            p.weight.as_mut().unwrap().data_mut().copy_from_slice(&[2.0, 0.5]);
            p.bias.as_mut().unwrap().data_mut().copy_from_slice(&[1.0, -1.0]);
            p.running_mean
                .as_mut()
                .unwrap()
                .data_mut()
                .copy_from_slice(&[0.5, -0.5]);
            p.running_var.as_mut().unwrap().data_mut().copy_from_slice(&[4.0, 0.25]);
        }
        let f = |a: f64, b: f64| {
            net.predict(&Tensor::new(vec![1, 2], vec![a, b]).unwrap())
                .unwrap()
                .into_data()
        };
        let y0 = f(0.0, 0.0);
        let y1 = f(1.0, 1.0);
        let y2 = f(2.0, 2.0);
        for c in 0..2 {
            assert!(((y2[c] - y1[c]) - (y1[c] - y0[c])).abs() < 1e-12);
        }
        let expected0 = 2.0 * (1.0 - 0.5) / (4.0f64 + 1e-5).sqrt() + 1.0;
        assert!((y1[0] - expected0).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_updates_running_statistics_in_training() {
        let mut net = Network::<f32>::xavier(vec![LayerSpec::BatchNorm { features: 1 }], &[1], 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        net.forward_train(&t(vec![2, 1], vec![1.0, 3.0]), &mut rng).unwrap();
        let p = &net.params()[0];
        assert!((p.running_mean.as_ref().unwrap().data()[0] - 0.2).abs() < 1e-6);
        // unbiased batch variance 2.0
        assert!((p.running_var.as_ref().unwrap().data()[0] - (0.9 + 0.2)).abs() < 1e-6);
    }
}
