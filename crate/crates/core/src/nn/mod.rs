//! Minimal CPU network toolkit: batch-first `(N, C, H, W)` feature maps,
//! convolutions via im2col + matrix multiply, instance normalization,
//! pointwise activations, and SGD/Adam optimizers.
//!
//! There is no autograd tape. Each layer exposes `forward`, which returns
//! the output plus an explicit cache, and `backward`, which consumes that
//! cache, accumulates parameter gradients in place, and returns the input
//! gradient. Containers thread caches through in order.

pub mod act;
pub mod conv;
pub mod norm;
pub mod optim;

use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, Ix2, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use self::conv::{Conv2d, ConvCache, ConvTCache, ConvTranspose2d, PadMode};
use self::norm::{InstanceNorm, NormCache};

/// A batch of feature maps, `(batch, channels, height, width)`.
pub type Feat = ndarray::Array4<f32>;

/// One learnable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
}

impl Param {
    pub fn new(value: ArrayD<f32>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    /// Gaussian init with the given standard deviation.
    pub fn normal(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0_f32, std).expect("finite std");
        Param::new(ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng)))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// The value viewed as a matrix; panics if the parameter is not 2-D.
    pub fn view2(&self) -> ArrayView2<'_, f32> {
        self.value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-D parameter")
    }

    pub fn grad2_mut(&mut self) -> ArrayViewMut2<'_, f32> {
        self.grad
            .view_mut()
            .into_dimensionality::<Ix2>()
            .expect("2-D parameter")
    }
}

/// One step of a sequential network.
// Variant sizes differ wildly (weight-bearing vs stateless activations);
// boxing would put an indirection in the training hot path for no gain.
#[allow(clippy::large_enum_variant)]
pub enum Layer {
    Conv(Conv2d),
    ConvT(ConvTranspose2d),
    Norm(InstanceNorm),
    Relu,
    LeakyRelu(f32),
    Sigmoid,
    Res(ResBlock),
}

/// Saved forward state, one per layer, consumed by the matching backward.
#[allow(clippy::large_enum_variant)]
pub enum LayerCache {
    Conv(ConvCache),
    ConvT(ConvTCache),
    Norm(NormCache),
    /// Saved activation output (enough to recover the local slope).
    Act(Feat),
    Res(ResCache),
}

impl Layer {
    pub fn forward(&self, x: &Feat) -> (Feat, LayerCache) {
        match self {
            Layer::Conv(c) => {
                let (y, cache) = c.forward(x);
                (y, LayerCache::Conv(cache))
            }
            Layer::ConvT(c) => {
                let (y, cache) = c.forward(x);
                (y, LayerCache::ConvT(cache))
            }
            Layer::Norm(n) => {
                let (y, cache) = n.forward(x);
                (y, LayerCache::Norm(cache))
            }
            Layer::Relu => {
                let y = act::relu(x);
                (y.clone(), LayerCache::Act(y))
            }
            Layer::LeakyRelu(slope) => {
                let y = act::leaky_relu(x, *slope);
                (y.clone(), LayerCache::Act(y))
            }
            Layer::Sigmoid => {
                let y = act::sigmoid(x);
                (y.clone(), LayerCache::Act(y))
            }
            Layer::Res(r) => {
                let (y, cache) = r.forward(x);
                (y, LayerCache::Res(cache))
            }
        }
    }

    /// Forward without retaining backward state.
    pub fn infer(&self, x: &Feat) -> Feat {
        match self {
            Layer::Conv(c) => c.infer(x),
            Layer::ConvT(c) => c.infer(x),
            Layer::Norm(n) => n.forward(x).0,
            Layer::Relu => act::relu(x),
            Layer::LeakyRelu(slope) => act::leaky_relu(x, *slope),
            Layer::Sigmoid => act::sigmoid(x),
            Layer::Res(r) => r.infer(x),
        }
    }

    pub fn backward(&mut self, cache: LayerCache, gy: &Feat) -> Feat {
        match (self, cache) {
            (Layer::Conv(c), LayerCache::Conv(cache)) => c.backward(&cache, gy),
            (Layer::ConvT(c), LayerCache::ConvT(cache)) => c.backward(&cache, gy),
            (Layer::Norm(n), LayerCache::Norm(cache)) => n.backward(&cache, gy),
            (Layer::Relu, LayerCache::Act(y)) => act::relu_backward(&y, gy),
            (Layer::LeakyRelu(slope), LayerCache::Act(y)) => {
                act::leaky_relu_backward(&y, *slope, gy)
            }
            (Layer::Sigmoid, LayerCache::Act(y)) => act::sigmoid_backward(&y, gy),
            (Layer::Res(r), LayerCache::Res(cache)) => r.backward(cache, gy),
            _ => panic!("layer/cache kind mismatch in backward"),
        }
    }

    /// Input gradient only — used when this layer's own parameters are
    /// frozen (e.g. backpropagating through a fixed critic).
    pub fn backward_data(&self, cache: &LayerCache, gy: &Feat) -> Feat {
        match (self, cache) {
            (Layer::Conv(c), LayerCache::Conv(cache)) => c.backward_data(cache, gy),
            (Layer::ConvT(c), LayerCache::ConvT(cache)) => c.backward_data(cache, gy),
            (Layer::Norm(n), LayerCache::Norm(cache)) => n.backward(cache, gy),
            (Layer::Relu, LayerCache::Act(y)) => act::relu_backward(y, gy),
            (Layer::LeakyRelu(slope), LayerCache::Act(y)) => {
                act::leaky_relu_backward(y, *slope, gy)
            }
            (Layer::Sigmoid, LayerCache::Act(y)) => act::sigmoid_backward(y, gy),
            (Layer::Res(r), LayerCache::Res(cache)) => r.backward_data(cache, gy),
            _ => panic!("layer/cache kind mismatch in backward_data"),
        }
    }

    fn named_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        match self {
            Layer::Conv(c) => {
                out.push((format!("{prefix}.weight"), &c.weight));
                if let Some(b) = &c.bias {
                    out.push((format!("{prefix}.bias"), b));
                }
            }
            Layer::ConvT(c) => {
                out.push((format!("{prefix}.weight"), &c.weight));
                if let Some(b) = &c.bias {
                    out.push((format!("{prefix}.bias"), b));
                }
            }
            Layer::Res(r) => {
                out.push((format!("{prefix}.c1.weight"), &r.conv1.weight));
                out.push((format!("{prefix}.c2.weight"), &r.conv2.weight));
            }
            _ => {}
        }
    }
}

/// Residual block: two reflect-padded 3×3 convolutions with instance
/// normalization, ReLU between them, and an additive skip connection.
pub struct ResBlock {
    conv1: Conv2d,
    norm1: InstanceNorm,
    conv2: Conv2d,
    norm2: InstanceNorm,
}

pub struct ResCache {
    c1: ConvCache,
    n1: NormCache,
    relu_out: Feat,
    c2: ConvCache,
    n2: NormCache,
}

impl ResBlock {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        ResBlock {
            conv1: Conv2d::new(channels, channels, 3, 1, 1, PadMode::Reflect, false, rng),
            norm1: InstanceNorm::new(),
            conv2: Conv2d::new(channels, channels, 3, 1, 1, PadMode::Reflect, false, rng),
            norm2: InstanceNorm::new(),
        }
    }

    pub fn forward(&self, x: &Feat) -> (Feat, ResCache) {
        let (a, c1) = self.conv1.forward(x);
        let (b, n1) = self.norm1.forward(&a);
        let r = act::relu(&b);
        let (c, c2) = self.conv2.forward(&r);
        let (d, n2) = self.norm2.forward(&c);
        let y = x + &d;
        (
            y,
            ResCache {
                c1,
                n1,
                relu_out: r,
                c2,
                n2,
            },
        )
    }

    pub fn infer(&self, x: &Feat) -> Feat {
        let a = self.conv1.infer(x);
        let b = self.norm1.forward(&a).0;
        let r = act::relu(&b);
        let c = self.conv2.infer(&r);
        let d = self.norm2.forward(&c).0;
        x + &d
    }

    pub fn backward(&mut self, cache: ResCache, gy: &Feat) -> Feat {
        let g = self.norm2.backward(&cache.n2, gy);
        let g = self.conv2.backward(&cache.c2, &g);
        let g = act::relu_backward(&cache.relu_out, &g);
        let g = self.norm1.backward(&cache.n1, &g);
        let g = self.conv1.backward(&cache.c1, &g);
        g + gy
    }

    pub fn backward_data(&self, cache: &ResCache, gy: &Feat) -> Feat {
        let g = self.norm2.backward(&cache.n2, gy);
        let g = self.conv2.backward_data(&cache.c2, &g);
        let g = act::relu_backward(&cache.relu_out, &g);
        let g = self.norm1.backward(&cache.n1, &g);
        let g = self.conv1.backward_data(&cache.c1, &g);
        g + gy
    }
}

/// An ordered stack of layers run front to back.
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    pub fn forward(&self, x: &Feat) -> (Feat, Vec<LayerCache>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (y, cache) = layer.forward(&cur);
            caches.push(cache);
            cur = y;
        }
        (cur, caches)
    }

    pub fn infer(&self, x: &Feat) -> Feat {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.infer(&cur);
        }
        cur
    }

    /// Backward through the whole stack; accumulates parameter gradients
    /// and returns the gradient with respect to the stack input.
    pub fn backward(&mut self, caches: Vec<LayerCache>, gy: &Feat) -> Feat {
        assert_eq!(caches.len(), self.layers.len(), "one cache per layer");
        let mut g = gy.clone();
        for (layer, cache) in self.layers.iter_mut().zip(caches).rev() {
            g = layer.backward(cache, &g);
        }
        g
    }

    /// Backward for the input gradient only; parameters stay untouched,
    /// and the caches can be reused for further passes.
    pub fn backward_data(&self, caches: &[LayerCache], gy: &Feat) -> Feat {
        assert_eq!(caches.len(), self.layers.len(), "one cache per layer");
        let mut g = gy.clone();
        for (layer, cache) in self.layers.iter().zip(caches.iter()).rev() {
            g = layer.backward_data(cache, &g);
        }
        g
    }

    /// Named views of every parameter, in a deterministic order shared
    /// with [`Sequential::params_mut`].
    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.named_params(&format!("{prefix}.l{i}"), &mut out);
        }
        out
    }

    /// Mutable references to every parameter, ordered as in
    /// [`Sequential::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        for layer in self.layers.iter_mut() {
            match layer {
                Layer::Conv(c) => {
                    out.push(&mut c.weight);
                    if let Some(b) = &mut c.bias {
                        out.push(b);
                    }
                }
                Layer::ConvT(c) => {
                    out.push(&mut c.weight);
                    if let Some(b) = &mut c.bias {
                        out.push(b);
                    }
                }
                Layer::Res(r) => {
                    out.push(&mut r.conv1.weight);
                    out.push(&mut r.conv2.weight);
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params("").iter().map(|(_, p)| p.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}
