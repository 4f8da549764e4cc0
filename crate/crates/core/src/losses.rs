//! The training objective: adversarial terms (two interchangeable forms),
//! cycle reconstruction, identity preservation, and mask sparsity, plus
//! the per-iteration weighting and the weighted total. Every loss is a
//! pure function of tensors and ships its analytic gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Feat;

/// How realness scores enter the adversarial objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdversarialMode {
    /// Binary cross-entropy on sigmoid-squashed scores; the generator
    /// side uses the non-saturating form.
    LogForm,
    /// Least squares against 1/0 targets — the default for training
    /// stability.
    LeastSquares,
}

/// Per-iteration weight K_i applied to the adversarial term, i = 1…N.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IterationSchedule {
    /// K_i = i − 1 (the first iteration gets zero adversarial weight).
    Linear,
    /// K_i = 2·1.5^{i−1} — the default.
    Geometric,
    /// K_i = 1.
    Uniform,
}

impl IterationSchedule {
    /// Weight for 1-based iteration `i`.
    pub fn weight(&self, i: usize) -> f32 {
        assert!(i >= 1, "iterations are 1-based");
        match self {
            IterationSchedule::Linear => (i - 1) as f32,
            IterationSchedule::Geometric => 2.0 * 1.5_f32.powi(i as i32 - 1),
            IterationSchedule::Uniform => 1.0,
        }
    }
}

impl std::str::FromStr for AdversarialMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "least_squares" => Ok(AdversarialMode::LeastSquares),
            "log_form" => Ok(AdversarialMode::LogForm),
            other => Err(Error::Config(format!(
                "adversarial mode must be least_squares or log_form, got \"{other}\""
            ))),
        }
    }
}

impl std::str::FromStr for IterationSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(IterationSchedule::Linear),
            "geometric" => Ok(IterationSchedule::Geometric),
            "uniform" => Ok(IterationSchedule::Uniform),
            other => Err(Error::Config(format!(
                "schedule must be linear, geometric, or uniform, got \"{other}\""
            ))),
        }
    }
}

/// The four objective weights β₁…β₄ plus the per-iteration schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Adversarial weight (multiplies the schedule-weighted sum).
    pub beta1: f32,
    /// Cycle-reconstruction weight.
    pub beta2: f32,
    /// Identity-preservation weight.
    pub beta3: f32,
    /// Mask-sparsity weight.
    pub beta4: f32,
    pub schedule: IterationSchedule,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta1: 1.0,
            beta2: 10.0,
            beta3: 5.0,
            beta4: 1.0,
            schedule: IterationSchedule::Geometric,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let betas = [self.beta1, self.beta2, self.beta3, self.beta4];
        if betas.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::Config(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// One step's loss components. `gan` is already schedule-weighted;
/// `total` applies β₁…β₄.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub gan: f32,
    pub cyc: f32,
    pub identity: f32,
    pub sparsity: f32,
    pub total: f32,
    pub per_iteration_gan: Vec<f32>,
}

fn check_finite(value: f64, what: &str) -> Result<f32> {
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("{what} loss")));
    }
    Ok(value as f32)
}

fn check_shapes(a: &Feat, b: &Feat, context: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            context: context.into(),
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable ln(1 + eˣ).
fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Critic and generator losses from raw patch scores.
///
/// The critic loss is the negated classification objective (0 at the
/// optimum); the generator loss rewards fakes the critic accepts, using
/// the non-saturating form under [`AdversarialMode::LogForm`].
pub fn adversarial_loss(
    scores_real: &Feat,
    scores_fake: &Feat,
    mode: AdversarialMode,
) -> Result<(f32, f32)> {
    if scores_real
        .iter()
        .chain(scores_fake.iter())
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("adversarial scores".into()));
    }
    let nr = scores_real.len() as f64;
    let nf = scores_fake.len() as f64;
    let (d, g) = match mode {
        AdversarialMode::LogForm => {
            let d_real: f64 = scores_real
                .iter()
                .map(|&s| softplus(-s) as f64)
                .sum::<f64>()
                / nr;
            let d_fake: f64 = scores_fake.iter().map(|&s| softplus(s) as f64).sum::<f64>() / nf;
            let g: f64 = scores_fake
                .iter()
                .map(|&s| softplus(-s) as f64)
                .sum::<f64>()
                / nf;
            (d_real + d_fake, g)
        }
        AdversarialMode::LeastSquares => {
            let d_real: f64 = scores_real
                .iter()
                .map(|&s| ((s - 1.0) as f64).powi(2))
                .sum::<f64>()
                / nr;
            let d_fake: f64 = scores_fake.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / nf;
            let g: f64 = scores_fake
                .iter()
                .map(|&s| ((s - 1.0) as f64).powi(2))
                .sum::<f64>()
                / nf;
            (d_real + d_fake, g)
        }
    };
    Ok((
        check_finite(d, "adversarial critic")?,
        check_finite(g, "adversarial generator")?,
    ))
}

/// Generator-side loss alone, from the critic's scores on fakes.
pub fn adversarial_g_loss(scores_fake: &Feat, mode: AdversarialMode) -> Result<f32> {
    if scores_fake.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("adversarial scores".into()));
    }
    let nf = scores_fake.len() as f64;
    let g = match mode {
        AdversarialMode::LogForm => {
            scores_fake
                .iter()
                .map(|&s| softplus(-s) as f64)
                .sum::<f64>()
                / nf
        }
        AdversarialMode::LeastSquares => {
            scores_fake
                .iter()
                .map(|&s| ((s - 1.0) as f64).powi(2))
                .sum::<f64>()
                / nf
        }
    };
    check_finite(g, "adversarial generator")
}

/// Gradients of the critic loss with respect to (real, fake) scores.
pub fn adversarial_d_grads(
    scores_real: &Feat,
    scores_fake: &Feat,
    mode: AdversarialMode,
) -> (Feat, Feat) {
    let nr = scores_real.len() as f32;
    let nf = scores_fake.len() as f32;
    match mode {
        AdversarialMode::LogForm => (
            scores_real.mapv(|s| (sigmoid(s) - 1.0) / nr),
            scores_fake.mapv(|s| sigmoid(s) / nf),
        ),
        AdversarialMode::LeastSquares => (
            scores_real.mapv(|s| 2.0 * (s - 1.0) / nr),
            scores_fake.mapv(|s| 2.0 * s / nf),
        ),
    }
}

/// Real-side critic gradient alone; it does not depend on the fakes, so
/// a trainer weighing several fake sets against one real batch can apply
/// it once with the summed weight.
pub fn adversarial_d_real_grad(scores_real: &Feat, mode: AdversarialMode) -> Feat {
    let nr = scores_real.len() as f32;
    match mode {
        AdversarialMode::LogForm => scores_real.mapv(|s| (sigmoid(s) - 1.0) / nr),
        AdversarialMode::LeastSquares => scores_real.mapv(|s| 2.0 * (s - 1.0) / nr),
    }
}

/// Gradient of the generator-side loss with respect to fake scores.
pub fn adversarial_g_grad(scores_fake: &Feat, mode: AdversarialMode) -> Feat {
    let nf = scores_fake.len() as f32;
    match mode {
        AdversarialMode::LogForm => scores_fake.mapv(|s| (sigmoid(s) - 1.0) / nf),
        AdversarialMode::LeastSquares => scores_fake.mapv(|s| 2.0 * (s - 1.0) / nf),
    }
}

/// Schedule-weighted sum over per-iteration adversarial losses.
pub fn weighted_gan_loss(per_iter: &[f32], schedule: IterationSchedule) -> Result<f32> {
    if per_iter.is_empty() {
        return Err(Error::Structural(
            "weighted adversarial loss needs at least one iteration".into(),
        ));
    }
    let sum: f64 = per_iter
        .iter()
        .enumerate()
        .map(|(idx, &v)| schedule.weight(idx + 1) as f64 * v as f64)
        .sum();
    check_finite(sum, "weighted adversarial")
}

fn mean_abs(a: &Feat, b: &Feat) -> f64 {
    let n = a.len() as f64;
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() as f64)
        .sum::<f64>()
        / n
}

/// Gradient of mean |a − b| with respect to `a`.
fn mean_abs_grad(a: &Feat, b: &Feat) -> Feat {
    let n = a.len() as f32;
    let mut g = a - b;
    g.mapv_inplace(|d| {
        if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        }
    });
    g
}

/// Mean absolute gap between a recomposed image and the original input.
pub fn cycle_loss(reconstructed: &Feat, rainy: &Feat) -> Result<f32> {
    check_shapes(reconstructed, rainy, "cycle loss: reconstructed vs input")?;
    check_finite(mean_abs(reconstructed, rainy), "cycle")
}

/// Gradient of [`cycle_loss`] with respect to the reconstruction.
pub fn cycle_loss_grad(reconstructed: &Feat, rainy: &Feat) -> Feat {
    mean_abs_grad(reconstructed, rainy)
}

/// Mean absolute gap between the background emitted for a clean input and
/// that input itself.
pub fn identity_loss(output_background: &Feat, clean_input: &Feat) -> Result<f32> {
    check_shapes(
        output_background,
        clean_input,
        "identity loss: output vs clean input",
    )?;
    check_finite(mean_abs(output_background, clean_input), "identity")
}

/// Gradient of [`identity_loss`] with respect to the emitted background.
pub fn identity_loss_grad(output_background: &Feat, clean_input: &Feat) -> Feat {
    mean_abs_grad(output_background, clean_input)
}

/// L1 pull of the mask toward all-zero: mean |α|.
pub fn sparsity_loss(mask: &Feat) -> Result<f32> {
    check_finite(
        mask.iter().map(|&v| v.abs() as f64).sum::<f64>() / mask.len() as f64,
        "sparsity",
    )
}

/// Gradient of [`sparsity_loss`] with respect to the mask.
pub fn sparsity_loss_grad(mask: &Feat) -> Feat {
    let n = mask.len() as f32;
    mask.mapv(|v| {
        if v > 0.0 {
            1.0 / n
        } else if v < 0.0 {
            -1.0 / n
        } else {
            0.0
        }
    })
}

/// Raw component values for one step, before β weighting.
#[derive(Debug, Clone)]
pub struct LossComponents {
    pub per_iteration_gan: Vec<f32>,
    pub cyc: f32,
    pub identity: f32,
    pub sparsity: f32,
}

/// Combines components into the weighted total.
pub fn total_loss(parts: &LossComponents, weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    let gan = weighted_gan_loss(&parts.per_iteration_gan, weights.schedule)?;
    for (value, name) in [
        (parts.cyc, "cycle"),
        (parts.identity, "identity"),
        (parts.sparsity, "sparsity"),
    ] {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{name} component")));
        }
    }
    let total = weights.beta1 as f64 * gan as f64
        + weights.beta2 as f64 * parts.cyc as f64
        + weights.beta3 as f64 * parts.identity as f64
        + weights.beta4 as f64 * parts.sparsity as f64;
    Ok(LossReport {
        gan,
        cyc: parts.cyc,
        identity: parts.identity,
        sparsity: parts.sparsity,
        total: check_finite(total, "total")?,
        per_iteration_gan: parts.per_iteration_gan.clone(),
    })
}
