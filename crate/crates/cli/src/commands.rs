//! Implementations of the five subcommands.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use dropcycle::checkpoint::{self, Checkpoint};
use dropcycle::data::{self, Layout, Pairing, SyntheticSpec};
use dropcycle::decomp::ImageTensor;
use dropcycle::error::{Error, Result};
use dropcycle::generator::{
    batch_to_image, image_to_batch, Generator, DOWNSAMPLE_FACTOR, MIN_INPUT_EDGE,
};
use dropcycle::metrics;
use dropcycle::nn::Feat;
use dropcycle::train::{self, compose_batch};

use crate::config::{self, TrainOverrides};
use crate::heatmap;

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of rainy training images
    #[arg(long)]
    pub rainy: PathBuf,
    /// Directory of clean (raindrop-free) training images
    #[arg(long)]
    pub clean: PathBuf,
    /// Output directory for checkpoints and the metrics log
    #[arg(long)]
    pub out: PathBuf,
    /// Flat key = value config file; flags below override its entries
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint instead of initializing fresh
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Trained model checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root holding the paired test split
    #[arg(long)]
    pub data: PathBuf,
    /// Directory convention under the root: flat, nus, or rainds
    #[arg(long, default_value = "flat")]
    pub layout: String,
    /// Where to write the per-image score table
    #[arg(long)]
    pub report: PathBuf,
    /// Mirror-pad inputs whose edges are not multiples of the
    /// downsampling factor, cropping outputs back afterwards
    #[arg(long)]
    pub pad: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Trained model checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of rainy images to clean
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory; each result keeps its input file name
    #[arg(long)]
    pub out: PathBuf,
    /// Mirror-pad inputs whose edges are not multiples of the
    /// downsampling factor, cropping outputs back afterwards
    #[arg(long)]
    pub pad: bool,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// Trained model checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Single rainy image to decompose
    #[arg(long)]
    pub image: PathBuf,
    /// Output directory for the per-iteration layer images
    #[arg(long)]
    pub out: PathBuf,
    /// Mirror-pad inputs whose edges are not multiples of the
    /// downsampling factor, cropping outputs back afterwards
    #[arg(long)]
    pub pad: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory; gains rain/, clean/, and mask/ subdirectories
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Image height in pixels
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    /// Image width in pixels
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Fewest droplets per image
    #[arg(long, default_value_t = 1)]
    pub min_droplets: usize,
    /// Most droplets per image
    #[arg(long, default_value_t = 4)]
    pub max_droplets: usize,
    /// Smallest droplet semi-axis in pixels
    #[arg(long, default_value_t = 3.0)]
    pub min_radius: f32,
    /// Largest droplet semi-axis in pixels
    #[arg(long, default_value_t = 8.0)]
    pub max_radius: f32,
    /// Soft-edge width around each droplet in pixels (0 = hard edge)
    #[arg(long, default_value_t = 1.5)]
    pub feather: f32,
    /// Box-blur radius forming the droplet layer from the background
    #[arg(long, default_value_t = 2)]
    pub blur_radius: usize,
    /// Random seed
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let config = config::resolve(args.config.as_deref(), &args.overrides)?;
    let final_ckpt = match &args.resume {
        Some(ckpt) => {
            let state = train::resume(ckpt, &config)?;
            train::continue_fit(state, &config, &args.rainy, &args.clean, &args.out)?
        }
        None => train::fit(&config, &args.rainy, &args.clean, &args.out)?,
    };
    println!(
        "training complete; final checkpoint at {}",
        final_ckpt.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(Generator, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let generator = checkpoint::load_generator(&ckpt)?;
    Ok((generator, ckpt))
}

/// Turns one image into a unit batch the network accepts, mirror-padding
/// when allowed. Returns the original (height, width) when padding grew
/// the image, so outputs can be cropped back.
fn prepare_input(
    image: &ImageTensor,
    channels: usize,
    pad: bool,
    origin: &Path,
) -> Result<(Feat, Option<(usize, usize)>)> {
    let (c, h, w) = image.shape();
    if c != channels {
        return Err(Error::Structural(format!(
            "{} has {c} channels but the checkpointed model expects {channels}",
            origin.display()
        )));
    }
    let aligned = h % DOWNSAMPLE_FACTOR == 0
        && w % DOWNSAMPLE_FACTOR == 0
        && h >= MIN_INPUT_EDGE
        && w >= MIN_INPUT_EDGE;
    if aligned {
        return Ok((image_to_batch(image), None));
    }
    if !pad {
        return Err(Error::Structural(format!(
            "{} is {h}×{w}, but both edges must be multiples of {DOWNSAMPLE_FACTOR} \
             and at least {MIN_INPUT_EDGE}; pass --pad to mirror-pad and crop back automatically",
            origin.display()
        )));
    }
    let (padded, original) = data::reflect_pad_to_multiple(image, DOWNSAMPLE_FACTOR)?;
    let (_, ph, pw) = padded.shape();
    if ph < MIN_INPUT_EDGE || pw < MIN_INPUT_EDGE {
        return Err(Error::Structural(format!(
            "{} is {h}×{w}; inputs must reach {MIN_INPUT_EDGE}×{MIN_INPUT_EDGE} even after padding",
            origin.display()
        )));
    }
    Ok((image_to_batch(&padded), Some(original)))
}

fn unpad(image: ImageTensor, original: Option<(usize, usize)>) -> Result<ImageTensor> {
    match original {
        Some((h, w)) => data::crop_to(&image, h, w),
        None => Ok(image),
    }
}

/// Final-iteration background for one image.
fn clean_one(
    generator: &Generator,
    image: &ImageTensor,
    pad: bool,
    origin: &Path,
) -> Result<ImageTensor> {
    let channels = generator.config().in_channels;
    let (batch, original) = prepare_input(image, channels, pad, origin)?;
    let trace = generator.forward_batch(&batch)?;
    let last = trace.iters.last().expect("at least one iteration");
    unpad(batch_to_image(&last.background)?, original)
}

pub fn infer(args: &InferArgs) -> Result<()> {
    let (generator, _) = load_model(&args.checkpoint)?;
    let inputs = data::validated_image_dir(&args.input)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    for path in &inputs {
        let image = data::load_image(path)?;
        let background = clean_one(&generator, &image, args.pad, path)?;
        let name = path.file_name().expect("listing returns files only");
        data::save_image(&args.out.join(name), &background)?;
    }
    println!(
        "cleaned {} images into {}",
        inputs.len(),
        args.out.display()
    );
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let layout = match args.layout.as_str() {
        "flat" => Layout::Flat,
        "nus" => Layout::Nus,
        "rainds" => Layout::Rainds,
        other => {
            return Err(Error::Config(format!(
                "layout must be flat, nus, or rainds, got \"{other}\""
            )))
        }
    };
    let (generator, _) = load_model(&args.checkpoint)?;
    let manifest = data::build_manifest(&args.data, layout, Pairing::Paired)?;
    let pairs = manifest.pairs()?;

    if let Some(parent) = args.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(&args.report).map_err(|e| Error::io(&args.report, e))?;
    let mut report = BufWriter::new(file);
    writeln!(report, "filename\tpsnr\tssim").map_err(|e| Error::io(&args.report, e))?;

    let mut outputs = Vec::with_capacity(pairs.len());
    let mut truths = Vec::with_capacity(pairs.len());
    for (rainy_path, clean_path) in &pairs {
        let rainy = data::load_image(rainy_path)?;
        let truth = data::load_image(clean_path)?;
        let background = clean_one(&generator, &rainy, args.pad, rainy_path)?;
        let psnr = metrics::psnr(&background, &truth)?;
        let ssim = metrics::ssim(&background, &truth)?;
        let name = rainy_path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("?");
        writeln!(report, "{name}\t{psnr:.4}\t{ssim:.4}").map_err(|e| Error::io(&args.report, e))?;
        outputs.push(background);
        truths.push(truth);
    }
    let summary = metrics::evaluate_pairs(&outputs, &truths)?;
    writeln!(
        report,
        "mean\t{:.4}\t{:.4}",
        summary.mean_psnr, summary.mean_ssim
    )
    .map_err(|e| Error::io(&args.report, e))?;
    report.flush().map_err(|e| Error::io(&args.report, e))?;
    println!(
        "evaluated {} pairs: mean PSNR {:.4} dB, mean SSIM {:.4}",
        summary.count, summary.mean_psnr, summary.mean_ssim
    );
    Ok(())
}

pub fn decompose(args: &DecomposeArgs) -> Result<()> {
    let (generator, _) = load_model(&args.checkpoint)?;
    let image = data::load_image(&args.image)?;
    let channels = generator.config().in_channels;
    let (batch, original) = prepare_input(&image, channels, args.pad, &args.image)?;
    let trace = generator.forward_batch(&batch)?;

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let stem = args
        .image
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Structural(format!("{} has no UTF-8 stem", args.image.display())))?;

    for (idx, it) in trace.iters.iter().enumerate() {
        let i = idx + 1;
        let save = |kind: &str, img: ImageTensor| -> Result<()> {
            let path = args.out.join(format!("{stem}_{kind}_iter{i}.png"));
            data::save_image(&path, &unpad(img, original)?)
        };
        save("background", batch_to_image(&it.background)?)?;
        save("raindrop", batch_to_image(&it.raindrop)?)?;
        save(
            "mask",
            heatmap::mask_to_heatmap(&batch_to_image(&it.mask)?)?,
        )?;
        let recon = compose_batch(&it.background, &it.raindrop, &it.mask);
        save("recon", batch_to_image(&recon)?)?;
    }
    data::save_image(&args.out.join("colorbar.png"), &heatmap::colorbar()?)?;
    println!(
        "wrote {} iterations of layers for {} into {}",
        trace.len(),
        args.image.display(),
        args.out.display()
    );
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let seed = config::env_seed()?.unwrap_or(args.seed);
    let spec = SyntheticSpec {
        count: args.count,
        height: args.height,
        width: args.width,
        droplet_count: (args.min_droplets, args.max_droplets),
        droplet_radius: (args.min_radius, args.max_radius),
        feather: args.feather,
        blur_radius: args.blur_radius,
        seed,
    };
    let samples = data::synthesize(&spec)?;
    data::write_corpus(&args.out, &samples)?;
    println!(
        "wrote {} synthetic samples into {}",
        samples.len(),
        args.out.display()
    );
    Ok(())
}
