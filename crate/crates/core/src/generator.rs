//! The decomposition generator: one shared-weight encoder/residual/decoder
//! network applied N times, each pass re-consuming the input image
//! concatenated with the previous pass's mask (all zeros on the first
//! pass) and emitting a refined `(background, raindrop, mask)` triple.

use ndarray::{s, Array3, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decomp::{compose, DecompositionTriple, ImageTensor, TransparencyMask};
use crate::error::{Error, Result};
use crate::nn::conv::{Conv2d, ConvTranspose2d, PadMode};
use crate::nn::norm::InstanceNorm;
use crate::nn::{Feat, Layer, LayerCache, Param, ResBlock, Sequential};

/// Total spatial downsampling applied by the encoder (two stride-2 steps);
/// inputs must have spatial dims divisible by this.
pub const DOWNSAMPLE_FACTOR: usize = 4;

/// Smallest legal input edge: the bottleneck must keep at least 2 pixels
/// per axis for the reflect-padded residual blocks.
pub const MIN_INPUT_EDGE: usize = 8;

/// Architecture knobs for the generator backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Image channels C; the network input adds one mask channel on top.
    pub in_channels: usize,
    /// Width of the first feature stage (doubled at each downsampling).
    pub base_width: usize,
    /// Number of residual blocks at the bottleneck.
    pub res_blocks: usize,
    /// Feedback pass count N.
    pub iterations: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            in_channels: 3,
            base_width: 64,
            res_blocks: 9,
            iterations: 6,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.in_channels == 1 || self.in_channels == 3) {
            return Err(Error::Config(format!(
                "generator input channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        if self.base_width == 0 {
            return Err(Error::Config(
                "generator base width must be positive".into(),
            ));
        }
        if self.iterations == 0 {
            return Err(Error::Config(
                "generator iteration count must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One iteration's batched outputs.
pub struct GenIter {
    pub background: Feat,
    pub raindrop: Feat,
    pub mask: Feat,
}

/// Forward history of a batched N-iteration run, including the layer
/// caches needed for backpropagation through every pass.
pub struct BatchTrace {
    pub iters: Vec<GenIter>,
    caches: Vec<Vec<LayerCache>>,
}

impl BatchTrace {
    pub fn len(&self) -> usize {
        self.iters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iters.is_empty()
    }
}

/// Gradients flowing into one iteration's three heads.
pub struct HeadGrad {
    pub background: Feat,
    pub raindrop: Feat,
    pub mask: Feat,
}

impl HeadGrad {
    /// All-zero gradients shaped for one iteration of the given trace.
    pub fn zeros_like(iter: &GenIter) -> Self {
        HeadGrad {
            background: Feat::zeros(iter.background.raw_dim()),
            raindrop: Feat::zeros(iter.raindrop.raw_dim()),
            mask: Feat::zeros(iter.mask.raw_dim()),
        }
    }
}

/// The full per-image decomposition history: N triples plus their exact
/// recompositions.
pub struct IterationTrace {
    triples: Vec<DecompositionTriple>,
    reconstructions: Vec<ImageTensor>,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[DecompositionTriple] {
        &self.triples
    }

    pub fn reconstructions(&self) -> &[ImageTensor] {
        &self.reconstructions
    }

    /// The last iteration's background — the model's answer.
    pub fn final_background(&self) -> &ImageTensor {
        self.triples.last().expect("trace never empty").background()
    }
}

/// The shared-weight iterative generator.
pub struct Generator {
    cfg: GeneratorConfig,
    net: Sequential,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.in_channels;
        let w = cfg.base_width;
        let mut layers = vec![
            // Wide-kernel stem over image + fed-back mask channel.
            Layer::Conv(Conv2d::new(c + 1, w, 7, 1, 3, PadMode::Reflect, false, rng)),
            Layer::Norm(InstanceNorm::new()),
            Layer::Relu,
            Layer::Conv(Conv2d::new(w, 2 * w, 3, 2, 1, PadMode::Zero, false, rng)),
            Layer::Norm(InstanceNorm::new()),
            Layer::Relu,
            Layer::Conv(Conv2d::new(
                2 * w,
                4 * w,
                3,
                2,
                1,
                PadMode::Zero,
                false,
                rng,
            )),
            Layer::Norm(InstanceNorm::new()),
            Layer::Relu,
        ];
        for _ in 0..cfg.res_blocks {
            layers.push(Layer::Res(ResBlock::new(4 * w, rng)));
        }
        layers.extend([
            Layer::ConvT(ConvTranspose2d::new(4 * w, 2 * w, 3, 2, 1, 1, false, rng)),
            Layer::Norm(InstanceNorm::new()),
            Layer::Relu,
            Layer::ConvT(ConvTranspose2d::new(2 * w, w, 3, 2, 1, 1, false, rng)),
            Layer::Norm(InstanceNorm::new()),
            Layer::Relu,
            // Three heads in one projection: background, raindrop, mask.
            Layer::Conv(Conv2d::new(
                w,
                2 * c + 1,
                7,
                1,
                3,
                PadMode::Reflect,
                true,
                rng,
            )),
            Layer::Sigmoid,
        ]);
        Ok(Generator {
            cfg,
            net: Sequential::new(layers),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn named_params(&self) -> Vec<(String, &Param)> {
        self.net.named_params("gen")
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.net.params_mut()
    }

    pub fn zero_grads(&mut self) {
        self.net.zero_grads();
    }

    fn check_input(&self, n: usize, c: usize, h: usize, w: usize) -> Result<()> {
        if c != self.cfg.in_channels {
            return Err(Error::ShapeMismatch {
                context: "generator input channels".into(),
                expected: vec![n, self.cfg.in_channels, h, w],
                actual: vec![n, c, h, w],
            });
        }
        if h < MIN_INPUT_EDGE
            || w < MIN_INPUT_EDGE
            || !h.is_multiple_of(DOWNSAMPLE_FACTOR)
            || !w.is_multiple_of(DOWNSAMPLE_FACTOR)
        {
            return Err(Error::Config(format!(
                "generator input {h}x{w} must be at least {MIN_INPUT_EDGE}x{MIN_INPUT_EDGE} \
                 with each edge a multiple of {DOWNSAMPLE_FACTOR}"
            )));
        }
        Ok(())
    }

    /// One generator pass on an explicit previous mask, without caches.
    /// Exposed so the feedback path can be probed directly.
    pub fn forward_iteration(&self, rainy: &Feat, prev_mask: &Feat) -> Result<GenIter> {
        let (n, c, h, w) = rainy.dim();
        self.check_input(n, c, h, w)?;
        if prev_mask.dim() != (n, 1, h, w) {
            return Err(Error::ShapeMismatch {
                context: "fed-back mask".into(),
                expected: vec![n, 1, h, w],
                actual: prev_mask.shape().to_vec(),
            });
        }
        let x = concat_channels(rainy, prev_mask);
        let y = self.net.infer(&x);
        Ok(split_heads(&y, c))
    }

    /// Runs all N iterations on a batch, keeping backward state.
    pub fn forward_batch(&self, rainy: &Feat) -> Result<BatchTrace> {
        self.forward_batch_n(rainy, self.cfg.iterations)
    }

    /// Like [`Generator::forward_batch`] with an explicit iteration count
    /// (training may shorten the chain, e.g. to a single pass).
    pub fn forward_batch_n(&self, rainy: &Feat, iterations: usize) -> Result<BatchTrace> {
        let (n, c, h, w) = rainy.dim();
        self.check_input(n, c, h, w)?;
        if iterations == 0 {
            return Err(Error::Config("at least one iteration is required".into()));
        }
        let mut iters = Vec::with_capacity(iterations);
        let mut caches = Vec::with_capacity(iterations);
        let mut mask = Feat::zeros((n, 1, h, w));
        for _ in 0..iterations {
            let x = concat_channels(rainy, &mask);
            let (y, cache) = self.net.forward(&x);
            let out = split_heads(&y, c);
            mask = out.mask.clone();
            iters.push(out);
            caches.push(cache);
        }
        Ok(BatchTrace { iters, caches })
    }

    /// Runs `iterations` passes without retaining backward state.
    pub fn infer_batch(&self, rainy: &Feat, iterations: usize) -> Result<Vec<GenIter>> {
        let (n, c, h, w) = rainy.dim();
        self.check_input(n, c, h, w)?;
        let mut iters = Vec::with_capacity(iterations);
        let mut mask = Feat::zeros((n, 1, h, w));
        for _ in 0..iterations {
            let x = concat_channels(rainy, &mask);
            let y = self.net.infer(&x);
            let out = split_heads(&y, c);
            mask = out.mask.clone();
            iters.push(out);
        }
        Ok(iters)
    }

    /// Backpropagates through the whole feedback chain. `head_grads[i]`
    /// is the loss gradient at iteration i's three outputs; the gradient
    /// flowing through the fed-back mask channel is added automatically.
    /// Parameter gradients accumulate in place.
    pub fn backward_batch(&mut self, trace: BatchTrace, mut head_grads: Vec<HeadGrad>) {
        assert_eq!(
            trace.iters.len(),
            head_grads.len(),
            "one head gradient per iteration"
        );
        let c = self.cfg.in_channels;
        let mut fed_back: Option<Feat> = None;
        for cache in trace.caches.into_iter().rev() {
            let hg = head_grads.pop().expect("length checked above");
            let mut gm = hg.mask;
            if let Some(extra) = fed_back.take() {
                gm += &extra;
            }
            let gy = merge_heads(&hg.background, &hg.raindrop, &gm);
            let gx = self.net.backward(cache, &gy);
            // Channels 0..c are the (unused) image-input gradient; channel
            // c feeds the previous iteration's mask head.
            fed_back = Some(gx.slice(s![.., c..c + 1, .., ..]).to_owned());
        }
    }

    /// Full N-iteration decomposition of a single image, as domain values.
    pub fn run(&self, rainy: &ImageTensor) -> Result<IterationTrace> {
        let batch = image_to_batch(rainy);
        let iters = self.infer_batch(&batch, self.cfg.iterations)?;
        let mut triples = Vec::with_capacity(iters.len());
        let mut reconstructions = Vec::with_capacity(iters.len());
        for out in &iters {
            let triple = DecompositionTriple::new(
                batch_to_image(&out.background)?,
                batch_to_image(&out.raindrop)?,
                TransparencyMask::new(out.mask.index_axis(Axis(0), 0).to_owned())?,
            )?;
            reconstructions.push(compose(&triple));
            triples.push(triple);
        }
        Ok(IterationTrace {
            triples,
            reconstructions,
        })
    }
}

/// Stacks a `(n,1,h,w)` mask behind image channels: `(n,c+1,h,w)`.
pub fn concat_channels(image: &Feat, mask: &Feat) -> Feat {
    let (n, c, h, w) = image.dim();
    debug_assert_eq!(mask.dim(), (n, 1, h, w));
    let mut out = Array4::zeros((n, c + 1, h, w));
    out.slice_mut(s![.., 0..c, .., ..]).assign(image);
    out.slice_mut(s![.., c..c + 1, .., ..]).assign(mask);
    out
}

/// Splits a `(n,2c+1,h,w)` head tensor into background/raindrop/mask.
fn split_heads(y: &Feat, c: usize) -> GenIter {
    GenIter {
        background: y.slice(s![.., 0..c, .., ..]).to_owned(),
        raindrop: y.slice(s![.., c..2 * c, .., ..]).to_owned(),
        mask: y.slice(s![.., 2 * c..2 * c + 1, .., ..]).to_owned(),
    }
}

fn merge_heads(gb: &Feat, gr: &Feat, gm: &Feat) -> Feat {
    let (n, c, h, w) = gb.dim();
    let mut out = Array4::zeros((n, 2 * c + 1, h, w));
    out.slice_mut(s![.., 0..c, .., ..]).assign(gb);
    out.slice_mut(s![.., c..2 * c, .., ..]).assign(gr);
    out.slice_mut(s![.., 2 * c..2 * c + 1, .., ..]).assign(gm);
    out
}

/// Lifts a single image into a batch of one.
pub fn image_to_batch(image: &ImageTensor) -> Feat {
    let (c, h, w) = image.shape();
    image
        .data()
        .to_owned()
        .into_shape_with_order((1, c, h, w))
        .expect("batch of one")
}

/// Extracts the single image of a one-entry batch.
pub fn batch_to_image(batch: &Feat) -> Result<ImageTensor> {
    let (n, c, h, w) = batch.dim();
    debug_assert_eq!(n, 1, "batch of one expected");
    let data: Array3<f32> = batch
        .index_axis(Axis(0), 0)
        .to_owned()
        .into_shape_with_order((c, h, w))
        .expect("3-D");
    ImageTensor::new(data)
}
