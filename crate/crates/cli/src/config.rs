//! Resolving the effective training configuration.
//!
//! Precedence, lowest to highest: built-in defaults, config file, command
//! line flags, then the `DROPCYCLE_SEED` environment variable (which pins
//! the seed for fully reproducible runs).

use std::path::Path;

use clap::Args;
use dropcycle::error::{Error, Result};
use dropcycle::train::TrainConfig;

/// Command-line overrides for training; any flag left unset keeps the
/// config-file (or built-in) value.
#[derive(Debug, Args)]
pub struct TrainOverrides {
    /// Training epochs [default: 400]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Images per batch [default: 6]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Step size for all three optimizers [default: 0.001]
    #[arg(long)]
    pub learning_rate: Option<f32>,
    /// SGD momentum [default: 0.9]
    #[arg(long)]
    pub momentum: Option<f32>,
    /// L2 weight decay [default: 0.00001]
    #[arg(long)]
    pub weight_decay: Option<f32>,
    /// Training crop edge in pixels [default: 256]
    #[arg(long)]
    pub crop: Option<usize>,
    /// Base random seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Steps between periodic checkpoints [default: 1000]
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Hard cap on total optimizer steps; 0 means no cap [default: 0]
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Adversarial formulation: least_squares or log_form [default: least_squares]
    #[arg(long)]
    pub adversarial: Option<String>,
    /// Parameter update rule: sgd or adam [default: sgd]
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Per-iteration adversarial weighting: linear, geometric, or uniform [default: geometric]
    #[arg(long)]
    pub schedule: Option<String>,
    /// Adversarial term weight β₁ [default: 1]
    #[arg(long)]
    pub beta1: Option<f32>,
    /// Reconstruction term weight β₂ [default: 10]
    #[arg(long)]
    pub beta2: Option<f32>,
    /// Identity term weight β₃ [default: 5]
    #[arg(long)]
    pub beta3: Option<f32>,
    /// Mask sparsity term weight β₄ [default: 1]
    #[arg(long)]
    pub beta4: Option<f32>,
    /// Feedback passes per step [default: 6]
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Image channels, 1 or 3, for generator and critics alike [default: 3]
    #[arg(long)]
    pub in_channels: Option<usize>,
    /// First-stage generator width [default: 64]
    #[arg(long)]
    pub gen_base_width: Option<usize>,
    /// Residual blocks at the generator bottleneck [default: 9]
    #[arg(long)]
    pub res_blocks: Option<usize>,
    /// First-stage critic width [default: 64]
    #[arg(long)]
    pub disc_base_width: Option<usize>,
    /// Stride-2 critic stages [default: 3]
    #[arg(long)]
    pub strided_layers: Option<usize>,
    /// Disable a component: no_cyc, no_identity, no_sparsity, or no_iternn
    /// (repeatable) [default: none]
    #[arg(long)]
    pub ablation: Vec<String>,
}

impl TrainOverrides {
    /// Applies the set flags on top of `config`, reusing the config-file
    /// key semantics so flags and file entries cannot drift apart.
    pub fn apply(&self, config: &mut TrainConfig) -> Result<()> {
        macro_rules! set {
            ($key:literal, $value:expr) => {
                if let Some(v) = &$value {
                    config.apply_key($key, &v.to_string())?;
                }
            };
        }
        set!("epochs", self.epochs);
        set!("batch_size", self.batch_size);
        set!("learning_rate", self.learning_rate);
        set!("momentum", self.momentum);
        set!("weight_decay", self.weight_decay);
        set!("crop", self.crop);
        set!("seed", self.seed);
        set!("checkpoint_every", self.checkpoint_every);
        set!("max_steps", self.max_steps);
        set!("adversarial", self.adversarial);
        set!("optimizer", self.optimizer);
        set!("schedule", self.schedule);
        set!("beta1", self.beta1);
        set!("beta2", self.beta2);
        set!("beta3", self.beta3);
        set!("beta4", self.beta4);
        set!("iterations", self.iterations);
        set!("in_channels", self.in_channels);
        set!("gen_base_width", self.gen_base_width);
        set!("res_blocks", self.res_blocks);
        set!("disc_base_width", self.disc_base_width);
        set!("strided_layers", self.strided_layers);
        for name in &self.ablation {
            config.apply_key("ablation", name)?;
        }
        Ok(())
    }
}

/// Reads `DROPCYCLE_SEED`, the deterministic-mode override.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var("DROPCYCLE_SEED") {
        Ok(raw) => raw.parse().map(Some).map_err(|_| {
            Error::Config(format!(
                "DROPCYCLE_SEED must be an unsigned integer, got \"{raw}\""
            ))
        }),
        Err(_) => Ok(None),
    }
}

/// Resolves the final config from an optional file, flag overrides, and
/// the environment.
pub fn resolve(file: Option<&Path>, overrides: &TrainOverrides) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    if let Some(path) = file {
        config.apply_file(path)?;
    }
    overrides.apply(&mut config)?;
    if let Some(seed) = env_seed()? {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}
