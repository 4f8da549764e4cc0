//! Patch-level critic: a fully convolutional stack that maps an image to a
//! grid of raw realness scores, one per overlapping receptive-field patch.
//! Two instances with identical architecture but separate weights judge
//! candidate backgrounds and reconstructed rainy images respectively.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv::{Conv2d, PadMode};
use crate::nn::norm::InstanceNorm;
use crate::nn::{Feat, Layer, LayerCache, Param, Sequential};

const KERNEL: usize = 4;
const PAD: usize = 1;
const LEAKY_SLOPE: f32 = 0.2;

/// Architecture knobs for the patch critic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Image channels judged by this critic.
    pub in_channels: usize,
    /// Width of the first stage; later stages double up to 8×.
    pub base_width: usize,
    /// Number of stride-2 stages (the first stage included).
    pub strided_layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            in_channels: 3,
            base_width: 64,
            strided_layers: 3,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.in_channels == 1 || self.in_channels == 3) {
            return Err(Error::Config(format!(
                "discriminator input channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        if self.base_width == 0 || self.strided_layers == 0 {
            return Err(Error::Config(
                "discriminator base width and strided layer count must be positive".into(),
            ));
        }
        Ok(())
    }

    fn stage_width(&self, stage: usize) -> usize {
        self.base_width * (1 << stage).min(8)
    }

    /// Smallest input edge that still yields a 1×1 score map.
    pub fn min_input_edge(&self) -> usize {
        // The two stride-1 layers each shave one pixel; each stride-2
        // layer doubles the requirement.
        let mut need = 3usize;
        for _ in 0..self.strided_layers {
            need *= 2;
        }
        need
    }

    /// Score-map spatial dims for an `h×w` input, from the layer
    /// stride/kernel/padding arithmetic alone.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let min = self.min_input_edge();
        if h < min || w < min {
            return Err(Error::Structural(format!(
                "discriminator input {h}x{w} below the minimum {min}x{min}"
            )));
        }
        let step = |edge: usize, stride: usize| (edge + 2 * PAD - KERNEL) / stride + 1;
        let (mut oh, mut ow) = (h, w);
        for _ in 0..self.strided_layers {
            oh = step(oh, 2);
            ow = step(ow, 2);
        }
        for _ in 0..2 {
            oh = step(oh, 1);
            ow = step(ow, 1);
        }
        Ok((oh, ow))
    }
}

/// One patch critic. Output scores are raw (no sigmoid); the loss module
/// applies whatever transform its objective needs.
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    net: Sequential,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut layers = vec![
            // First stage: no normalization, so keep the bias.
            Layer::Conv(Conv2d::new(
                cfg.in_channels,
                cfg.stage_width(0),
                KERNEL,
                2,
                PAD,
                PadMode::Zero,
                true,
                rng,
            )),
            Layer::LeakyRelu(LEAKY_SLOPE),
        ];
        for stage in 1..cfg.strided_layers {
            layers.extend([
                Layer::Conv(Conv2d::new(
                    cfg.stage_width(stage - 1),
                    cfg.stage_width(stage),
                    KERNEL,
                    2,
                    PAD,
                    PadMode::Zero,
                    false,
                    rng,
                )),
                Layer::Norm(InstanceNorm::new()),
                Layer::LeakyRelu(LEAKY_SLOPE),
            ]);
        }
        let deep = cfg.stage_width(cfg.strided_layers);
        layers.extend([
            Layer::Conv(Conv2d::new(
                cfg.stage_width(cfg.strided_layers - 1),
                deep,
                KERNEL,
                1,
                PAD,
                PadMode::Zero,
                false,
                rng,
            )),
            Layer::Norm(InstanceNorm::new()),
            Layer::LeakyRelu(LEAKY_SLOPE),
            // 1-channel raw score projection.
            Layer::Conv(Conv2d::new(
                deep,
                1,
                KERNEL,
                1,
                PAD,
                PadMode::Zero,
                true,
                rng,
            )),
        ]);
        Ok(Discriminator {
            cfg,
            net: Sequential::new(layers),
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Param)> {
        self.net.named_params(prefix)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.net.params_mut()
    }

    pub fn zero_grads(&mut self) {
        self.net.zero_grads();
    }

    fn check_input(&self, x: &Feat) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.cfg.in_channels {
            return Err(Error::ShapeMismatch {
                context: "discriminator input channels".into(),
                expected: vec![self.cfg.in_channels],
                actual: vec![c],
            });
        }
        self.cfg.output_dims(h, w).map(|_| ())
    }

    /// Patch score map `(n, 1, h', w')` without backward state.
    pub fn score(&self, x: &Feat) -> Result<Feat> {
        self.check_input(x)?;
        Ok(self.net.infer(x))
    }

    /// Forward keeping caches for a subsequent backward.
    pub fn forward_batch(&self, x: &Feat) -> Result<(Feat, Vec<LayerCache>)> {
        self.check_input(x)?;
        Ok(self.net.forward(x))
    }

    /// Backward accumulating this critic's parameter gradients; returns
    /// the input-image gradient.
    pub fn backward_batch(&mut self, caches: Vec<LayerCache>, gy: &Feat) -> Feat {
        self.net.backward(caches, gy)
    }

    /// Backward through frozen weights: input gradient only. Caches are
    /// borrowed, so one forward can serve repeated calls.
    pub fn backward_data(&self, caches: &[LayerCache], gy: &Feat) -> Feat {
        self.net.backward_data(caches, gy)
    }
}
