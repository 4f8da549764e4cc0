//! The alternating adversarial training loop. Each step updates the two
//! critics against the frozen generator, then the generator against the
//! frozen critics, over unpaired rainy/clean batches. All randomness is
//! derived from the base seed plus (purpose, index) keys, so a resumed
//! run continues the exact stream without replay.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::s;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, CheckpointMeta};
use crate::data::{self, horizontal_flip, random_crop};
use crate::decomp::ImageTensor;
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{
    BatchTrace, Generator, GeneratorConfig, HeadGrad, DOWNSAMPLE_FACTOR, MIN_INPUT_EDGE,
};
use crate::losses::{
    adversarial_d_grads, adversarial_d_real_grad, adversarial_g_grad, adversarial_g_loss,
    adversarial_loss, cycle_loss, cycle_loss_grad, identity_loss, identity_loss_grad,
    sparsity_loss, sparsity_loss_grad, total_loss, AdversarialMode, LossComponents, LossReport,
    LossWeights,
};
use crate::nn::optim::{OptimConfig, Optimizer};
use crate::nn::{Feat, Param};

/// Loss terms that can be removed wholesale for component studies. A
/// removed term is neither computed nor weighted; its report column is
/// exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AblationSet {
    pub no_cyc: bool,
    pub no_identity: bool,
    pub no_sparsity: bool,
    /// Collapses the feedback chain to a single pass.
    pub no_iternn: bool,
}

impl AblationSet {
    /// Switches one named variant on.
    pub fn enable(&mut self, name: &str) -> Result<()> {
        match name {
            "no_cyc" => self.no_cyc = true,
            "no_identity" => self.no_identity = true,
            "no_sparsity" => self.no_sparsity = true,
            "no_iternn" => self.no_iternn = true,
            other => {
                let expected = "no_cyc, no_identity, no_sparsity, or no_iternn";
                return Err(Error::Config(format!(
                    "unknown ablation {other}; expected {expected}"
                )));
            }
        }
        Ok(())
    }

    pub fn any(&self) -> bool {
        self.no_cyc || self.no_identity || self.no_sparsity || self.no_iternn
    }
}

/// Which update rule drives all three parameter collections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    /// Momentum SGD — the default, matching the full-run recipe.
    Sgd,
    /// Adaptive moments — converges faster at smoke scale.
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!(
                "optimizer must be sgd or adam, got \"{other}\""
            ))),
        }
    }
}

/// Everything the training loop needs to know.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Square patch edge cut from each training image.
    pub crop: usize,
    pub weights: LossWeights,
    pub ablation: AblationSet,
    pub seed: u64,
    /// Steps between periodic checkpoints.
    pub checkpoint_every: u64,
    /// Hard cap on total optimizer steps; 0 runs the full epoch budget.
    /// Useful for fixed-step experiments that should not round up to an
    /// epoch boundary.
    pub max_steps: u64,
    pub adversarial: AdversarialMode,
    pub optimizer: OptimizerKind,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            batch_size: 6,
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-5,
            crop: 256,
            weights: LossWeights::default(),
            ablation: AblationSet::default(),
            seed: 0,
            checkpoint_every: 1000,
            max_steps: 0,
            adversarial: AdversarialMode::LeastSquares,
            optimizer: OptimizerKind::Sgd,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "epochs, batch size, and checkpoint interval must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(
                "learning rate must be positive and finite".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "weight decay must be nonnegative and finite".into(),
            ));
        }
        self.weights.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.generator.in_channels != self.discriminator.in_channels {
            return Err(Error::Config(
                "generator and critic channel counts must match".into(),
            ));
        }
        let min_edge = self.discriminator.min_input_edge().max(MIN_INPUT_EDGE);
        if self.crop < min_edge || !self.crop.is_multiple_of(DOWNSAMPLE_FACTOR) {
            return Err(Error::Config(format!(
                "crop must be a multiple of {DOWNSAMPLE_FACTOR} and at least {min_edge} pixels, got {}",
                self.crop
            )));
        }
        Ok(())
    }

    /// Iterations actually run per step (1 when the chain is ablated).
    pub fn effective_iterations(&self) -> usize {
        if self.ablation.no_iternn {
            1
        } else {
            self.generator.iterations
        }
    }

    /// β weights with ablated components zeroed.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.ablation.no_cyc {
            w.beta2 = 0.0;
        }
        if self.ablation.no_identity {
            w.beta3 = 0.0;
        }
        if self.ablation.no_sparsity {
            w.beta4 = 0.0;
        }
        w
    }

    fn optim_config(&self) -> OptimConfig {
        match self.optimizer {
            OptimizerKind::Sgd => {
                OptimConfig::sgd(self.learning_rate, self.momentum, self.weight_decay)
            }
            OptimizerKind::Adam => OptimConfig::adam(self.learning_rate, self.weight_decay),
        }
    }

    /// Every key a flat config file may set, in display order.
    pub fn valid_keys() -> &'static [&'static str] {
        &[
            "epochs",
            "batch_size",
            "learning_rate",
            "momentum",
            "weight_decay",
            "crop",
            "seed",
            "checkpoint_every",
            "max_steps",
            "adversarial",
            "optimizer",
            "schedule",
            "beta1",
            "beta2",
            "beta3",
            "beta4",
            "iterations",
            "in_channels",
            "gen_base_width",
            "res_blocks",
            "disc_base_width",
            "strided_layers",
            "ablation",
        ]
    }

    /// Sets one flat config key. `ablation` takes a comma-separated list
    /// of variant names, or `none` to clear previously set variants.
    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::Config(format!(
                    "config key \"{key}\" has unparsable value \"{value}\""
                ))
            })
        }
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "crop" => self.crop = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "adversarial" => self.adversarial = value.parse()?,
            "optimizer" => self.optimizer = value.parse()?,
            "schedule" => self.weights.schedule = value.parse()?,
            "beta1" => self.weights.beta1 = parse(key, value)?,
            "beta2" => self.weights.beta2 = parse(key, value)?,
            "beta3" => self.weights.beta3 = parse(key, value)?,
            "beta4" => self.weights.beta4 = parse(key, value)?,
            "iterations" => self.generator.iterations = parse(key, value)?,
            "in_channels" => {
                self.generator.in_channels = parse(key, value)?;
                self.discriminator.in_channels = self.generator.in_channels;
            }
            "gen_base_width" => self.generator.base_width = parse(key, value)?,
            "res_blocks" => self.generator.res_blocks = parse(key, value)?,
            "disc_base_width" => self.discriminator.base_width = parse(key, value)?,
            "strided_layers" => self.discriminator.strided_layers = parse(key, value)?,
            "ablation" => {
                if value == "none" {
                    self.ablation = AblationSet::default();
                } else {
                    for name in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                        self.ablation.enable(name)?;
                    }
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown config key \"{other}\"; valid keys: {}",
                    Self::valid_keys().join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies a `key = value` config file on top of the current values.
    /// Blank lines and `#` comments are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key = value, got \"{line}\"",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.apply_key(key.trim(), value.trim())?;
        }
        Ok(())
    }
}

/// Key purposes for derived random streams.
const TAG_INIT: u64 = 1;
const TAG_EPOCH: u64 = 2;
const TAG_STEP: u64 = 3;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// An independent random stream keyed on (seed, purpose, index); resume
/// re-derives any stream without replaying earlier draws.
fn stream_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(
        mix64(seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)) ^ index,
    ))
}

/// The generator, its two critics, their optimizers, and the counters.
pub struct TrainState {
    pub generator: Generator,
    /// Judges candidate backgrounds against the clean domain.
    pub critic_bg: Discriminator,
    /// Judges recompositions against the rainy domain.
    pub critic_recon: Discriminator,
    opt_gen: Optimizer,
    opt_bg: Optimizer,
    opt_recon: Optimizer,
    /// Completed training steps.
    pub step: u64,
    /// Completed epochs (derived from `step` during `fit`).
    pub epoch: u64,
    pub seed: u64,
}

fn optimizer_for(cfg: OptimConfig, named: &[(String, &Param)]) -> Optimizer {
    let refs: Vec<&Param> = named.iter().map(|(_, p)| *p).collect();
    Optimizer::new(cfg, &refs)
}

impl TrainState {
    /// Fresh state with parameters drawn from the seed's init stream.
    pub fn new(config: &TrainConfig) -> Result<TrainState> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, TAG_INIT, 0);
        let generator = Generator::new(config.generator, &mut rng)?;
        let critic_bg = Discriminator::new(config.discriminator, &mut rng)?;
        let critic_recon = Discriminator::new(config.discriminator, &mut rng)?;
        let ocfg = config.optim_config();
        let opt_gen = optimizer_for(ocfg, &generator.named_params());
        let opt_bg = optimizer_for(ocfg, &critic_bg.named_params("critic_bg"));
        let opt_recon = optimizer_for(ocfg, &critic_recon.named_params("critic_recon"));
        Ok(TrainState {
            generator,
            critic_bg,
            critic_recon,
            opt_gen,
            opt_bg,
            opt_recon,
            step: 0,
            epoch: 0,
            seed: config.seed,
        })
    }

    /// Writes the full state (parameters, optimizer slots, counters) as
    /// one archive.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            generator: *self.generator.config(),
            discriminator: *self.critic_bg.config(),
            optimizer: self.opt_gen.config(),
            optim_steps: [
                self.opt_gen.step_count(),
                self.opt_bg.step_count(),
                self.opt_recon.step_count(),
            ],
            step: self.step,
            epoch: self.epoch,
            seed: self.seed,
        };
        let mut tensors = Vec::new();
        checkpoint::pack_params(&self.generator.named_params(), &mut tensors);
        checkpoint::pack_params(&self.critic_bg.named_params("critic_bg"), &mut tensors);
        checkpoint::pack_params(
            &self.critic_recon.named_params("critic_recon"),
            &mut tensors,
        );
        checkpoint::pack_optimizer("opt_gen", &self.opt_gen, &mut tensors);
        checkpoint::pack_optimizer("opt_critic_bg", &self.opt_bg, &mut tensors);
        checkpoint::pack_optimizer("opt_critic_recon", &self.opt_recon, &mut tensors);
        Checkpoint { meta, tensors }.save(path)
    }
}

/// Restores a [`TrainState`] bit-exactly; the next step index is the
/// saved index + 1. Model geometry and optimizer settings come from the
/// archive; the config supplies loop-level knobs and must agree on the
/// image channel count and optimizer kind.
pub fn resume(path: &Path, config: &TrainConfig) -> Result<TrainState> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.meta.generator.in_channels != config.generator.in_channels {
        return Err(Error::Structural(format!(
            "checkpoint holds a {}-channel model but the config expects {} channels",
            ckpt.meta.generator.in_channels, config.generator.in_channels
        )));
    }
    let same_kind = matches!(
        (&ckpt.meta.optimizer, &config.optim_config()),
        (OptimConfig::Sgd { .. }, OptimConfig::Sgd { .. })
            | (OptimConfig::Adam { .. }, OptimConfig::Adam { .. })
    );
    if !same_kind {
        return Err(Error::Structural(
            "checkpoint optimizer kind differs from the config; resuming would not be bit-exact"
                .into(),
        ));
    }
    let mut rng = stream_rng(ckpt.meta.seed, TAG_INIT, 0);
    let mut generator = Generator::new(ckpt.meta.generator, &mut rng)?;
    let mut critic_bg = Discriminator::new(ckpt.meta.discriminator, &mut rng)?;
    let mut critic_recon = Discriminator::new(ckpt.meta.discriminator, &mut rng)?;

    let gen_names: Vec<String> = generator
        .named_params()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    checkpoint::unpack_params(&ckpt, &gen_names, generator.params_mut())?;
    let bg_names: Vec<String> = critic_bg
        .named_params("critic_bg")
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    checkpoint::unpack_params(&ckpt, &bg_names, critic_bg.params_mut())?;
    let re_names: Vec<String> = critic_recon
        .named_params("critic_recon")
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    checkpoint::unpack_params(&ckpt, &re_names, critic_recon.params_mut())?;

    let ocfg = ckpt.meta.optimizer;
    let mut opt_gen = optimizer_for(ocfg, &generator.named_params());
    let mut opt_bg = optimizer_for(ocfg, &critic_bg.named_params("critic_bg"));
    let mut opt_recon = optimizer_for(ocfg, &critic_recon.named_params("critic_recon"));
    checkpoint::unpack_optimizer(&ckpt, "opt_gen", ckpt.meta.optim_steps[0], &mut opt_gen)?;
    checkpoint::unpack_optimizer(
        &ckpt,
        "opt_critic_bg",
        ckpt.meta.optim_steps[1],
        &mut opt_bg,
    )?;
    checkpoint::unpack_optimizer(
        &ckpt,
        "opt_critic_recon",
        ckpt.meta.optim_steps[2],
        &mut opt_recon,
    )?;

    Ok(TrainState {
        generator,
        critic_bg,
        critic_recon,
        opt_gen,
        opt_bg,
        opt_recon,
        step: ckpt.meta.step,
        epoch: ckpt.meta.epoch,
        seed: ckpt.meta.seed,
    })
}

/// Batched composition (1−α)⊙B + α⊙R with the mask broadcast over
/// channels. Unlike the domain-level composition this does not clamp;
/// head outputs are sigmoid-squashed, so the blend already lies in (0,1),
/// and training needs the raw linear form for gradients.
pub fn compose_batch(background: &Feat, raindrop: &Feat, mask: &Feat) -> Feat {
    let (n, c, h, w) = background.dim();
    let mut out = Feat::zeros((n, c, h, w));
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let a = mask[[b, 0, y, x]];
                    out[[b, ch, y, x]] =
                        (1.0 - a) * background[[b, ch, y, x]] + a * raindrop[[b, ch, y, x]];
                }
            }
        }
    }
    out
}

/// Gradients of [`compose_batch`] given the gradient at its output:
/// ∂/∂B = (1−α)·g, ∂/∂R = α·g, ∂/∂α = Σ_channels (R−B)·g.
pub fn compose_batch_backward(
    gy: &Feat,
    background: &Feat,
    raindrop: &Feat,
    mask: &Feat,
) -> (Feat, Feat, Feat) {
    let (n, c, h, w) = background.dim();
    let mut gb = Feat::zeros((n, c, h, w));
    let mut gr = Feat::zeros((n, c, h, w));
    let mut gm = Feat::zeros((n, 1, h, w));
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let g = gy[[b, ch, y, x]];
                    let a = mask[[b, 0, y, x]];
                    gb[[b, ch, y, x]] = (1.0 - a) * g;
                    gr[[b, ch, y, x]] = a * g;
                    gm[[b, 0, y, x]] += (raindrop[[b, ch, y, x]] - background[[b, ch, y, x]]) * g;
                }
            }
        }
    }
    (gb, gr, gm)
}

/// Per-iteration critic-update scales: β₁ · (K_i / ΣK) / 2. The schedule
/// is normalized to unit sum on the critic side so deep chains do not
/// inflate the critic's effective learning rate.
fn critic_scales(weights: &LossWeights, n_iters: usize) -> Vec<f32> {
    let k: Vec<f32> = (1..=n_iters).map(|i| weights.schedule.weight(i)).collect();
    let sum: f32 = k.iter().sum();
    if sum <= 0.0 || weights.beta1 == 0.0 {
        return vec![0.0; n_iters];
    }
    k.into_iter()
        .map(|ki| weights.beta1 * (ki / sum) / 2.0)
        .collect()
}

/// One critic's update against a real batch and one fake per iteration.
fn critic_phase(
    critic: &mut Discriminator,
    opt: &mut Optimizer,
    real: &Feat,
    fakes: &[&Feat],
    scales: &[f32],
    mode: AdversarialMode,
) -> Result<()> {
    critic.zero_grads();
    if scales.iter().any(|&s| s > 0.0) {
        let (s_real, real_caches) = critic.forward_batch(real)?;
        let mut real_weight = 0.0;
        for (fake, &scale) in fakes.iter().zip(scales) {
            if scale == 0.0 {
                continue;
            }
            let (s_fake, fake_caches) = critic.forward_batch(fake)?;
            adversarial_loss(&s_real, &s_fake, mode)?; // validates finiteness
            let (_, g_fake) = adversarial_d_grads(&s_real, &s_fake, mode);
            critic.backward_batch(fake_caches, &(g_fake * scale));
            real_weight += scale;
        }
        let g_real = adversarial_d_real_grad(&s_real, mode) * real_weight;
        critic.backward_batch(real_caches, &g_real);
    }
    let mut params = critic.params_mut();
    opt.step(&mut params);
    Ok(())
}

/// Updates both critics against the frozen generator's outputs. The
/// generator's parameters are untouched.
pub fn discriminator_phase(
    state: &mut TrainState,
    trace: &BatchTrace,
    recons: &[Feat],
    rainy: &Feat,
    clean: &Feat,
    config: &TrainConfig,
) -> Result<()> {
    let scales = critic_scales(&config.weights, trace.len());
    let backgrounds: Vec<&Feat> = trace.iters.iter().map(|it| &it.background).collect();
    critic_phase(
        &mut state.critic_bg,
        &mut state.opt_bg,
        clean,
        &backgrounds,
        &scales,
        config.adversarial,
    )?;
    let recon_refs: Vec<&Feat> = recons.iter().collect();
    critic_phase(
        &mut state.critic_recon,
        &mut state.opt_recon,
        rainy,
        &recon_refs,
        &scales,
        config.adversarial,
    )
}

/// Updates the generator against the frozen critics with the full
/// objective; consumes the forward trace. The critics' parameters are
/// untouched. Returns the step's loss report.
pub fn generator_phase(
    state: &mut TrainState,
    trace: BatchTrace,
    recons: Vec<Feat>,
    rainy: &Feat,
    clean: &Feat,
    config: &TrainConfig,
) -> Result<LossReport> {
    let n_iters = trace.len();
    let inv_n = 1.0 / n_iters as f32;
    state.generator.zero_grads();
    let mut head_grads: Vec<HeadGrad> = trace.iters.iter().map(HeadGrad::zeros_like).collect();
    let mut per_iter_gan = Vec::with_capacity(n_iters);
    let mut cyc_sum = 0.0f64;
    let mut sp_sum = 0.0f64;
    for i in 0..n_iters {
        let it = &trace.iters[i];
        let adv_scale = config.weights.beta1 * config.weights.schedule.weight(i + 1) / 2.0;

        let (s_bg, bg_caches) = state.critic_bg.forward_batch(&it.background)?;
        let g_bg = adversarial_g_loss(&s_bg, config.adversarial)?;
        if adv_scale != 0.0 {
            let dscore = adversarial_g_grad(&s_bg, config.adversarial) * adv_scale;
            head_grads[i].background += &state.critic_bg.backward_data(&bg_caches, &dscore);
        }

        let (s_re, re_caches) = state.critic_recon.forward_batch(&recons[i])?;
        let g_re = adversarial_g_loss(&s_re, config.adversarial)?;
        let mut d_recon = Feat::zeros(recons[i].raw_dim());
        if adv_scale != 0.0 {
            let dscore = adversarial_g_grad(&s_re, config.adversarial) * adv_scale;
            d_recon += &state.critic_recon.backward_data(&re_caches, &dscore);
        }
        if !config.ablation.no_cyc {
            cyc_sum += cycle_loss(&recons[i], rainy)? as f64;
            let w = config.weights.beta2 * inv_n;
            if w != 0.0 {
                d_recon += &(cycle_loss_grad(&recons[i], rainy) * w);
            }
        }
        let (gb, gr, gm) = compose_batch_backward(&d_recon, &it.background, &it.raindrop, &it.mask);
        head_grads[i].background += &gb;
        head_grads[i].raindrop += &gr;
        head_grads[i].mask += &gm;

        if !config.ablation.no_sparsity {
            sp_sum += sparsity_loss(&it.mask)? as f64;
            let w = config.weights.beta4 * inv_n;
            if w != 0.0 {
                head_grads[i].mask += &(sparsity_loss_grad(&it.mask) * w);
            }
        }
        per_iter_gan.push(0.5 * (g_bg + g_re));
    }
    state.generator.backward_batch(trace, head_grads);

    // Identity: clean inputs sent through the same chain should pass
    // through unchanged at every iteration.
    let mut identity_mean = 0.0f32;
    if !config.ablation.no_identity {
        let id_trace = state.generator.forward_batch_n(clean, n_iters)?;
        let mut id_grads: Vec<HeadGrad> = id_trace.iters.iter().map(HeadGrad::zeros_like).collect();
        let w = config.weights.beta3 * inv_n;
        let mut id_sum = 0.0f64;
        for (iter, grad) in id_trace.iters.iter().zip(&mut id_grads) {
            id_sum += identity_loss(&iter.background, clean)? as f64;
            if w != 0.0 {
                grad.background += &(identity_loss_grad(&iter.background, clean) * w);
            }
        }
        state.generator.backward_batch(id_trace, id_grads);
        identity_mean = (id_sum * inv_n as f64) as f32;
    }

    let parts = LossComponents {
        per_iteration_gan: per_iter_gan,
        cyc: if config.ablation.no_cyc {
            0.0
        } else {
            (cyc_sum * inv_n as f64) as f32
        },
        identity: identity_mean,
        sparsity: if config.ablation.no_sparsity {
            0.0
        } else {
            (sp_sum * inv_n as f64) as f32
        },
    };
    let report = total_loss(&parts, &config.effective_weights()).map_err(|e| match e {
        Error::NonFinite(what) => Error::NonFinite(format!(
            "{what}; components: per-iteration gan {:?}, cyc {}, identity {}, sparsity {}",
            parts.per_iteration_gan, parts.cyc, parts.identity, parts.sparsity
        )),
        other => other,
    })?;
    let mut params = state.generator.params_mut();
    state.opt_gen.step(&mut params);
    Ok(report)
}

/// One alternating update: critics first, then the generator. Batches
/// are unpaired samples from the two domains, already cropped.
pub fn train_step(
    state: &mut TrainState,
    rainy: &Feat,
    clean: &Feat,
    config: &TrainConfig,
) -> Result<LossReport> {
    let abort_step = state.step + 1;
    let wrap = |e: Error| match e {
        Error::NonFinite(detail) => Error::TrainAbort {
            step: abort_step,
            detail,
        },
        other => other,
    };
    let n_iters = config.effective_iterations();
    let trace = state
        .generator
        .forward_batch_n(rainy, n_iters)
        .map_err(wrap)?;
    let recons: Vec<Feat> = trace
        .iters
        .iter()
        .map(|it| compose_batch(&it.background, &it.raindrop, &it.mask))
        .collect();
    discriminator_phase(state, &trace, &recons, rainy, clean, config).map_err(wrap)?;
    let report = generator_phase(state, trace, recons, rainy, clean, config).map_err(wrap)?;
    state.step += 1;
    Ok(report)
}

/// Decoded images stay in memory when the stream fits the budget;
/// otherwise each batch decodes on demand.
enum ImageSource {
    Preloaded(Vec<ImageTensor>),
    Lazy(Vec<PathBuf>),
}

const PRELOAD_BUDGET_BYTES: usize = 1 << 30;

impl ImageSource {
    fn build(paths: Vec<PathBuf>) -> Result<ImageSource> {
        let first = data::load_image(&paths[0])?;
        let (c, h, w) = first.shape();
        if c * h * w * 4 * paths.len() <= PRELOAD_BUDGET_BYTES {
            let mut images = Vec::with_capacity(paths.len());
            images.push(first);
            for path in &paths[1..] {
                images.push(data::load_image(path)?);
            }
            Ok(ImageSource::Preloaded(images))
        } else {
            Ok(ImageSource::Lazy(paths))
        }
    }

    fn len(&self) -> usize {
        match self {
            ImageSource::Preloaded(v) => v.len(),
            ImageSource::Lazy(v) => v.len(),
        }
    }

    fn get(&self, idx: usize) -> Result<ImageTensor> {
        match self {
            ImageSource::Preloaded(v) => Ok(v[idx].clone()),
            ImageSource::Lazy(v) => data::load_image(&v[idx]),
        }
    }
}

/// Cuts one augmented batch out of a shuffled stream, cycling when the
/// stream is shorter than the epoch.
fn assemble_batch(
    source: &ImageSource,
    order: &[usize],
    start: usize,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Feat> {
    let channels = config.generator.in_channels;
    let crop = config.crop;
    let mut out = Feat::zeros((config.batch_size, channels, crop, crop));
    for k in 0..config.batch_size {
        let idx = order[(start + k) % order.len()];
        let img = source.get(idx)?;
        let (c, h, w) = img.shape();
        if c != channels {
            return Err(Error::Structural(format!(
                "expected {channels}-channel images, found {c} channels"
            )));
        }
        let cropped = if (h, w) == (crop, crop) {
            img
        } else {
            random_crop(&img, crop, rng)?
        };
        let sample = if rng.random::<bool>() {
            horizontal_flip(&cropped)
        } else {
            cropped
        };
        out.slice_mut(s![k, .., .., ..]).assign(sample.data());
    }
    Ok(out)
}

/// Trains from scratch; see [`continue_fit`] for the loop itself.
pub fn fit(
    config: &TrainConfig,
    rainy_dir: &Path,
    clean_dir: &Path,
    out_dir: &Path,
) -> Result<PathBuf> {
    let state = TrainState::new(config)?;
    continue_fit(state, config, rainy_dir, clean_dir, out_dir)
}

/// Runs the training loop from the given state until `epochs` epochs are
/// complete, appending to the metrics log and writing periodic plus final
/// checkpoints. Returns the final checkpoint path.
pub fn continue_fit(
    mut state: TrainState,
    config: &TrainConfig,
    rainy_dir: &Path,
    clean_dir: &Path,
    out_dir: &Path,
) -> Result<PathBuf> {
    config.validate()?;
    let rainy = ImageSource::build(data::validated_image_dir(rainy_dir)?)?;
    let clean = ImageSource::build(data::validated_image_dir(clean_dir)?)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let log_path = out_dir.join("metrics.tsv");
    let mut log = if state.step == 0 {
        let mut f = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
        writeln!(f, "step\tgan\tcyc\tidentity\tsparsity\ttotal")
            .map_err(|e| Error::io(&log_path, e))?;
        f
    } else {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        BufWriter::new(f)
    };

    let steps_per_epoch = (rainy.len().max(clean.len())).div_ceil(config.batch_size) as u64;
    let mut total_steps = steps_per_epoch * config.epochs as u64;
    if config.max_steps > 0 {
        total_steps = total_steps.min(config.max_steps);
    }
    let mut epoch_orders: Option<(u64, Vec<usize>, Vec<usize>)> = None;

    while state.step < total_steps {
        let epoch = state.step / steps_per_epoch;
        let step_in_epoch = (state.step % steps_per_epoch) as usize;
        if epoch_orders.as_ref().map(|(e, _, _)| *e) != Some(epoch) {
            let mut rng = stream_rng(state.seed, TAG_EPOCH, epoch);
            let mut r: Vec<usize> = (0..rainy.len()).collect();
            r.shuffle(&mut rng);
            let mut c: Vec<usize> = (0..clean.len()).collect();
            c.shuffle(&mut rng);
            epoch_orders = Some((epoch, r, c));
        }
        let (_, r_order, c_order) = epoch_orders.as_ref().expect("orders built above");

        let mut rng = stream_rng(state.seed, TAG_STEP, state.step);
        let start = step_in_epoch * config.batch_size;
        let rainy_batch = assemble_batch(&rainy, r_order, start, config, &mut rng)?;
        let clean_batch = assemble_batch(&clean, c_order, start, config, &mut rng)?;

        let report = train_step(&mut state, &rainy_batch, &clean_batch, config)?;
        state.epoch = state.step / steps_per_epoch;

        writeln!(
            log,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            state.step, report.gan, report.cyc, report.identity, report.sparsity, report.total
        )
        .map_err(|e| Error::io(&log_path, e))?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;

        if state.step.is_multiple_of(config.checkpoint_every) && state.step < total_steps {
            let ckpt_path = out_dir.join(format!("checkpoint_{:06}.ckpt", state.step));
            if let Err(e) = state.save(&ckpt_path) {
                let _ = log.flush();
                return Err(e);
            }
        }
    }

    let final_path = out_dir.join("checkpoint_final.ckpt");
    if let Err(e) = state.save(&final_path) {
        let _ = log.flush();
        return Err(e);
    }
    Ok(final_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, write_corpus, SyntheticSpec};
    use crate::losses::IterationSchedule;
    use ndarray::ArrayD;
    use tempfile::tempdir;

    /// Small-but-real configuration: every constraint satisfied, every
    /// tensor tiny.
    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 2,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            crop: 24,
            weights: LossWeights {
                schedule: IterationSchedule::Geometric,
                ..LossWeights::default()
            },
            seed: 11,
            checkpoint_every: 100,
            generator: GeneratorConfig {
                in_channels: 3,
                base_width: 4,
                res_blocks: 1,
                iterations: 2,
            },
            discriminator: DiscriminatorConfig {
                in_channels: 3,
                base_width: 4,
                strided_layers: 3,
            },
            ..TrainConfig::default()
        }
    }

    fn unit_batch(seed: u64, n: usize, c: usize, h: usize, w: usize) -> Feat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Feat::from_shape_fn((n, c, h, w), |_| rng.random::<f32>())
    }

    fn snapshot(state: &TrainState) -> Vec<(String, ArrayD<f32>)> {
        let mut out = Vec::new();
        checkpoint::pack_params(&state.generator.named_params(), &mut out);
        checkpoint::pack_params(&state.critic_bg.named_params("critic_bg"), &mut out);
        checkpoint::pack_params(&state.critic_recon.named_params("critic_recon"), &mut out);
        out
    }

    fn assert_snapshots_equal(a: &[(String, ArrayD<f32>)], b: &[(String, ArrayD<f32>)]) {
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(b) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb, "parameter {na} drifted");
        }
    }

    #[test]
    fn compose_batch_matches_the_domain_composition() {
        use crate::decomp::{compose, DecompositionTriple, TransparencyMask};
        use crate::generator::image_to_batch;
        use ndarray::Array3;
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let b = ImageTensor::new(Array3::from_shape_fn((3, 6, 7), |_| rng.random())).unwrap();
        let r = ImageTensor::new(Array3::from_shape_fn((3, 6, 7), |_| rng.random())).unwrap();
        let m = TransparencyMask::new(Array3::from_shape_fn((1, 6, 7), |_| rng.random())).unwrap();
        let triple = DecompositionTriple::new(b.clone(), r.clone(), m.clone()).unwrap();
        let domain = compose(&triple);
        let batched = compose_batch(
            &image_to_batch(&b),
            &image_to_batch(&r),
            &image_to_batch_mask(&m),
        );
        for (i, (x, y)) in domain.data().iter().zip(batched.iter()).enumerate() {
            assert!((x - y).abs() <= 1e-6, "cell {i}: {x} vs {y}");
        }
    }

    fn image_to_batch_mask(mask: &crate::decomp::TransparencyMask) -> Feat {
        let (h, w) = (mask.height(), mask.width());
        let mut out = Feat::zeros((1, 1, h, w));
        out.slice_mut(s![0, .., .., ..]).assign(mask.data());
        out
    }

    #[test]
    fn compose_backward_matches_finite_differences() {
        let b = unit_batch(50, 1, 3, 5, 5);
        let r = unit_batch(51, 1, 3, 5, 5);
        let m = unit_batch(52, 1, 1, 5, 5);
        let gy = unit_batch(53, 1, 3, 5, 5);
        let loss = |bb: &Feat, rr: &Feat, mm: &Feat| -> f64 {
            compose_batch(bb, rr, mm)
                .iter()
                .zip(gy.iter())
                .map(|(&o, &g)| o as f64 * g as f64)
                .sum()
        };
        let (gb, gr, gm) = compose_batch_backward(&gy, &b, &r, &m);
        let h = 0.25f32;
        for (target, grad, which) in [(&b, &gb, "bg"), (&r, &gr, "drop"), (&m, &gm, "mask")] {
            for idx in 0..target.len() {
                let mut plus = (*target).clone();
                *plus.iter_mut().nth(idx).unwrap() += h;
                let mut minus = (*target).clone();
                *minus.iter_mut().nth(idx).unwrap() -= h;
                let (lp, lm) = match which {
                    "bg" => (loss(&plus, &r, &m), loss(&minus, &r, &m)),
                    "drop" => (loss(&b, &plus, &m), loss(&b, &minus, &m)),
                    _ => (loss(&b, &r, &plus), loss(&b, &r, &minus)),
                };
                let fd = (lp - lm) / (2.0 * h as f64);
                let an = *grad.iter().nth(idx).unwrap() as f64;
                assert!(
                    (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-6),
                    "{which}[{idx}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn null_objective_leaves_every_parameter_unchanged() {
        let mut config = tiny_config();
        config.weights = LossWeights {
            beta1: 0.0,
            beta2: 0.0,
            beta3: 0.0,
            beta4: 0.0,
            schedule: IterationSchedule::Uniform,
        };
        config.weight_decay = 0.0;
        let mut state = TrainState::new(&config).unwrap();
        let before = snapshot(&state);
        let rainy = unit_batch(60, 2, 3, 24, 24);
        let clean = unit_batch(61, 2, 3, 24, 24);
        train_step(&mut state, &rainy, &clean, &config).unwrap();
        assert_snapshots_equal(&before, &snapshot(&state));
    }

    #[test]
    fn phases_do_not_touch_the_other_side() {
        let config = tiny_config();
        let mut state = TrainState::new(&config).unwrap();
        let rainy = unit_batch(62, 2, 3, 24, 24);
        let clean = unit_batch(63, 2, 3, 24, 24);
        let trace = state.generator.forward_batch_n(&rainy, 2).unwrap();
        let recons: Vec<Feat> = trace
            .iters
            .iter()
            .map(|it| compose_batch(&it.background, &it.raindrop, &it.mask))
            .collect();

        let gen_before: Vec<ArrayD<f32>> = state
            .generator
            .named_params()
            .iter()
            .map(|(_, p)| p.value.clone())
            .collect();
        discriminator_phase(&mut state, &trace, &recons, &rainy, &clean, &config).unwrap();
        for ((_, p), before) in state.generator.named_params().iter().zip(&gen_before) {
            assert_eq!(&p.value, before, "critic phase must not move the generator");
        }

        let critics_before: Vec<ArrayD<f32>> = state
            .critic_bg
            .named_params("a")
            .iter()
            .chain(state.critic_recon.named_params("b").iter())
            .map(|(_, p)| p.value.clone())
            .collect();
        generator_phase(&mut state, trace, recons, &rainy, &clean, &config).unwrap();
        let critics_after: Vec<ArrayD<f32>> = state
            .critic_bg
            .named_params("a")
            .iter()
            .chain(state.critic_recon.named_params("b").iter())
            .map(|(_, p)| p.value.clone())
            .collect();
        for (a, b) in critics_before.iter().zip(&critics_after) {
            assert_eq!(a, b, "generator phase must not move the critics");
        }
    }

    #[test]
    fn single_pass_ablation_shortens_the_chain() {
        let mut config = tiny_config();
        config.generator.iterations = 3;
        config.ablation.no_iternn = true;
        let mut state = TrainState::new(&config).unwrap();
        let rainy = unit_batch(64, 2, 3, 24, 24);
        let clean = unit_batch(65, 2, 3, 24, 24);
        let report = train_step(&mut state, &rainy, &clean, &config).unwrap();
        assert_eq!(
            report.per_iteration_gan.len(),
            1,
            "the chain must collapse to one pass"
        );
    }

    type ComponentPick = fn(&LossReport) -> f32;

    #[test]
    fn ablated_components_report_exactly_zero() {
        let variants: [(&str, ComponentPick); 3] = [
            ("no_cyc", |r| r.cyc),
            ("no_identity", |r| r.identity),
            ("no_sparsity", |r| r.sparsity),
        ];
        for (name, pick) in variants {
            let mut config = tiny_config();
            config.ablation.enable(name).unwrap();
            let mut state = TrainState::new(&config).unwrap();
            let rainy = unit_batch(66, 2, 3, 24, 24);
            let clean = unit_batch(67, 2, 3, 24, 24);
            let report = train_step(&mut state, &rainy, &clean, &config).unwrap();
            assert_eq!(pick(&report), 0.0, "{name} must zero its component");
            assert!(report.total.is_finite());
        }
    }

    #[test]
    fn identical_seeds_produce_identical_first_reports() {
        let config = tiny_config();
        let rainy = unit_batch(68, 2, 3, 24, 24);
        let clean = unit_batch(69, 2, 3, 24, 24);
        let mut a = TrainState::new(&config).unwrap();
        let mut b = TrainState::new(&config).unwrap();
        let ra = train_step(&mut a, &rainy, &clean, &config).unwrap();
        let rb = train_step(&mut b, &rainy, &clean, &config).unwrap();
        assert_eq!(ra, rb, "same seed and inputs must give the same report");
        assert_snapshots_equal(&snapshot(&a), &snapshot(&b));
    }

    #[test]
    fn save_resume_round_trip_reproduces_the_next_step() {
        let dir = tempdir().unwrap();
        let config = tiny_config();
        let mut original = TrainState::new(&config).unwrap();
        let rainy1 = unit_batch(70, 2, 3, 24, 24);
        let clean1 = unit_batch(71, 2, 3, 24, 24);
        train_step(&mut original, &rainy1, &clean1, &config).unwrap();

        let path = dir.path().join("mid.ckpt");
        original.save(&path).unwrap();
        let mut restored = resume(&path, &config).unwrap();
        assert_eq!(restored.step, original.step);
        assert_eq!(restored.seed, original.seed);

        let rainy2 = unit_batch(72, 2, 3, 24, 24);
        let clean2 = unit_batch(73, 2, 3, 24, 24);
        let ra = train_step(&mut original, &rainy2, &clean2, &config).unwrap();
        let rb = train_step(&mut restored, &rainy2, &clean2, &config).unwrap();
        assert_eq!(ra, rb, "the step after a round trip must match exactly");
        assert_snapshots_equal(&snapshot(&original), &snapshot(&restored));
    }

    #[test]
    fn resume_rejects_channel_and_optimizer_mismatches() {
        let dir = tempdir().unwrap();
        let config = tiny_config();
        let state = TrainState::new(&config).unwrap();
        let path = dir.path().join("s.ckpt");
        state.save(&path).unwrap();

        let mut other = config.clone();
        other.generator.in_channels = 1;
        other.discriminator.in_channels = 1;
        match resume(&path, &other) {
            Err(Error::Structural(msg)) => assert!(msg.contains("channel"), "{msg}"),
            other => panic!("expected structural error, got {:?}", other.map(|_| ())),
        }

        let mut other = config.clone();
        other.optimizer = OptimizerKind::Adam;
        assert!(matches!(resume(&path, &other), Err(Error::Structural(_))));
    }

    #[test]
    fn config_file_round_trip_and_unknown_key_listing() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(
            &path,
            "# comment\n\nepochs = 7\nbeta2 = 3.5\nschedule = linear\nablation = no_cyc\n",
        )
        .unwrap();
        let mut config = TrainConfig::default();
        config.apply_file(&path).unwrap();
        assert_eq!(config.epochs, 7);
        assert_eq!(config.weights.beta2, 3.5);
        assert_eq!(config.weights.schedule, IterationSchedule::Linear);
        assert!(config.ablation.no_cyc);
        assert_eq!(config.batch_size, 6, "untouched keys keep their defaults");

        match config.apply_key("learning_rte", "0.1") {
            Err(Error::Config(msg)) => {
                assert!(msg.contains("learning_rte"), "{msg}");
                assert!(
                    msg.contains("learning_rate"),
                    "message must list valid keys: {msg}"
                );
            }
            other => panic!("expected config error, got {other:?}"),
        }

        fs::write(&path, "epochs 7\n").unwrap();
        assert!(matches!(config.apply_file(&path), Err(Error::Config(_))));
        fs::write(&path, "epochs = many\n").unwrap();
        assert!(matches!(config.apply_file(&path), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut config = tiny_config();
        config.crop = 23;
        assert!(config.validate().is_err(), "crop off the grid");
        let mut config = tiny_config();
        config.learning_rate = 0.0;
        assert!(config.validate().is_err(), "zero learning rate");
        let mut config = tiny_config();
        config.momentum = 1.0;
        assert!(config.validate().is_err(), "momentum at 1");
        let mut config = tiny_config();
        config.discriminator.in_channels = 1;
        assert!(config.validate().is_err(), "channel mismatch");
        let mut config = tiny_config();
        config.ablation.enable("no_everything").unwrap_err();
        config.ablation.enable("no_cyc").unwrap();
        assert!(config.validate().is_ok());
    }

    #[test]
    fn fit_writes_log_and_final_checkpoint_deterministically() {
        let dir = tempdir().unwrap();
        let corpus = dir.path().join("corpus");
        let spec = SyntheticSpec {
            count: 4,
            height: 24,
            width: 24,
            droplet_radius: (2.0, 4.0),
            ..SyntheticSpec::default()
        };
        write_corpus(&corpus, &synthesize(&spec).unwrap()).unwrap();

        let config = tiny_config();
        let run = |out: &Path| -> PathBuf {
            fit(&config, &corpus.join("rain"), &corpus.join("clean"), out).unwrap()
        };
        let final_a = run(&dir.path().join("out_a"));
        let final_b = run(&dir.path().join("out_b"));

        let log_a = fs::read_to_string(dir.path().join("out_a/metrics.tsv")).unwrap();
        let log_b = fs::read_to_string(dir.path().join("out_b/metrics.tsv")).unwrap();
        assert_eq!(log_a, log_b, "same seed must give byte-identical logs");
        assert_eq!(log_a.lines().count(), 3, "header plus ⌈4/2⌉ = 2 steps");

        let ckpt = Checkpoint::load(&final_a).unwrap();
        assert_eq!(ckpt.meta.step, 2);
        assert!(final_b.exists());
    }

    #[test]
    fn fit_rejects_an_empty_stream() {
        let dir = tempdir().unwrap();
        fs::create_dir_all(dir.path().join("rain")).unwrap();
        fs::create_dir_all(dir.path().join("clean")).unwrap();
        let config = tiny_config();
        assert!(matches!(
            fit(
                &config,
                &dir.path().join("rain"),
                &dir.path().join("clean"),
                &dir.path().join("out")
            ),
            Err(Error::Structural(_))
        ));
    }
}
