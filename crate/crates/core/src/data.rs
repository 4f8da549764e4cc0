//! Dataset discovery, image IO, patch augmentation, and the synthetic
//! raindrop compositor used by tests and smoke training.
//!
//! Two benchmark directory conventions are supported next to a plain
//! `rain/` + `clean/` layout; manifests are fully validated (every file
//! must decode) and deterministic (lexicographic order).

use std::fs;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decomp::{compose, DecompositionTriple, ImageTensor, TransparencyMask};
use crate::error::{Error, Result};

/// Directory convention a dataset root follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// `rain/` and `clean/` subdirectories; paired files share a stem.
    Flat,
    /// `data/` and `gt/` subdirectories with `_rain` / `_clean` stem
    /// suffixes, as shipped by the NUS raindrop benchmark.
    Nus,
    /// `raindrop/` and `gt/` subdirectories as shipped by RainDS; stems
    /// correspond after stripping the `rd-` / `norain-` / `gt-` prefixes.
    Rainds,
}

impl Layout {
    /// (rainy subdir, clean subdir) for this convention.
    fn subdirs(&self) -> (&'static str, &'static str) {
        match self {
            Layout::Flat => ("rain", "clean"),
            Layout::Nus => ("data", "gt"),
            Layout::Rainds => ("raindrop", "gt"),
        }
    }

    /// Reduces a file stem to the key used for pairing.
    fn pair_key(&self, stem: &str) -> String {
        match self {
            Layout::Flat => stem.to_string(),
            Layout::Nus => {
                for suffix in ["_rain", "_clean", "-rain", "-clean"] {
                    if let Some(base) = stem.strip_suffix(suffix) {
                        return base.to_string();
                    }
                }
                stem.to_string()
            }
            Layout::Rainds => {
                for prefix in ["rd-", "rd_", "norain-", "norain_", "gt-", "gt_"] {
                    if let Some(base) = stem.strip_prefix(prefix) {
                        return base.to_string();
                    }
                }
                stem.to_string()
            }
        }
    }
}

/// Whether the two streams are index-aligned counterparts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pairing {
    Unpaired,
    Paired,
}

/// Validated, sorted listing of one dataset root.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub layout: Layout,
    pub pairing: Pairing,
    pub rainy_paths: Vec<PathBuf>,
    pub clean_paths: Vec<PathBuf>,
}

impl DatasetManifest {
    /// Index-aligned (rainy, clean) pairs; only valid for paired manifests.
    pub fn pairs(&self) -> Result<Vec<(&Path, &Path)>> {
        if self.pairing != Pairing::Paired {
            return Err(Error::Structural(
                "manifest is unpaired; no pair list exists".into(),
            ));
        }
        Ok(self
            .rainy_paths
            .iter()
            .zip(&self.clean_paths)
            .map(|(r, c)| (r.as_path(), c.as_path()))
            .collect())
    }
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Lists image files in `dir`, sorted by file name.
fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() && is_image_file(&path) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string()
}

/// Lists and decode-validates every image directly inside `dir`; errors
/// when the directory holds none.
pub fn validated_image_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::Structural(format!(
            "no images found under {}",
            dir.display()
        )));
    }
    for path in &paths {
        load_image(path)?;
    }
    Ok(paths)
}

/// Scans `root` under the given convention, decodes every file once to
/// validate it, and (for paired mode) aligns the two streams by the
/// layout's correspondence rule.
pub fn build_manifest(root: &Path, layout: Layout, pairing: Pairing) -> Result<DatasetManifest> {
    let (rain_dir, clean_dir) = layout.subdirs();
    let rainy = list_images(&root.join(rain_dir))?;
    let clean = list_images(&root.join(clean_dir))?;
    if rainy.is_empty() && clean.is_empty() {
        return Err(Error::Structural(format!(
            "no images found under {}",
            root.display()
        )));
    }
    for path in rainy.iter().chain(&clean) {
        load_image(path)?;
    }
    match pairing {
        Pairing::Unpaired => {
            if rainy.is_empty() || clean.is_empty() {
                return Err(Error::Structural(format!(
                    "unpaired training needs both streams; {}/{} holds no images",
                    root.display(),
                    if rainy.is_empty() {
                        rain_dir
                    } else {
                        clean_dir
                    }
                )));
            }
            Ok(DatasetManifest {
                layout,
                pairing,
                rainy_paths: rainy,
                clean_paths: clean,
            })
        }
        Pairing::Paired => {
            let mut clean_by_key: std::collections::BTreeMap<String, &PathBuf> =
                std::collections::BTreeMap::new();
            for path in &clean {
                clean_by_key.insert(layout.pair_key(&stem_of(path)), path);
            }
            let mut pairs = Vec::with_capacity(rainy.len());
            for path in &rainy {
                let key = layout.pair_key(&stem_of(path));
                match clean_by_key.remove(&key) {
                    Some(counterpart) => pairs.push((path.clone(), counterpart.clone())),
                    None => {
                        return Err(Error::Structural(format!(
                            "no clean counterpart for {}",
                            path.display()
                        )))
                    }
                }
            }
            if let Some((_, orphan)) = clean_by_key.into_iter().next() {
                return Err(Error::Structural(format!(
                    "no rainy counterpart for {}",
                    orphan.display()
                )));
            }
            let (rainy_paths, clean_paths) = pairs.into_iter().unzip();
            Ok(DatasetManifest {
                layout,
                pairing,
                rainy_paths,
                clean_paths,
            })
        }
    }
}

/// Decodes an 8-bit PNG/JPEG into a unit-range tensor (grayscale stays
/// single-channel; anything else becomes RGB, alpha dropped).
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let decoded = image::open(path).map_err(|e| Error::image(path, e.to_string()))?;
    let tensor = match decoded {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            Array3::from_shape_fn((1, h as usize, w as usize), |(_, y, x)| {
                img.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
            })
        }
        other => {
            let img = other.to_rgb8();
            let (w, h) = img.dimensions();
            Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
                img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
            })
        }
    };
    ImageTensor::new(tensor)
}

fn to_byte(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes a tensor as an 8-bit PNG (grayscale or RGB by channel count).
pub fn save_image(path: &Path, image: &ImageTensor) -> Result<()> {
    let (c, h, w) = image.shape();
    let result = if c == 1 {
        let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([to_byte(image.data()[[0, y as usize, x as usize]])])
        });
        img.save(path)
    } else {
        let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb([
                to_byte(image.data()[[0, y as usize, x as usize]]),
                to_byte(image.data()[[1, y as usize, x as usize]]),
                to_byte(image.data()[[2, y as usize, x as usize]]),
            ])
        });
        img.save(path)
    };
    result.map_err(|e| Error::image(path, e.to_string()))
}

/// Writes a transparency mask as an 8-bit grayscale PNG.
pub fn save_mask(path: &Path, mask: &TransparencyMask) -> Result<()> {
    let (h, w) = (mask.height(), mask.width());
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_byte(mask.data()[[0, y as usize, x as usize]])])
    });
    img.save(path)
        .map_err(|e| Error::image(path, e.to_string()))
}

/// Cuts a `size`×`size` patch at a uniformly random offset.
pub fn random_crop(image: &ImageTensor, size: usize, rng: &mut impl Rng) -> Result<ImageTensor> {
    let (_, h, w) = image.shape();
    if h < size || w < size {
        return Err(Error::Structural(format!(
            "cannot crop {size}×{size} from a {h}×{w} image"
        )));
    }
    let top = rng.random_range(0..=(h - size));
    let left = rng.random_range(0..=(w - size));
    let view = image
        .data()
        .slice(ndarray::s![.., top..top + size, left..left + size]);
    ImageTensor::new(view.to_owned())
}

/// Cuts the same random patch from both images of an aligned pair.
pub fn random_crop_pair(
    a: &ImageTensor,
    b: &ImageTensor,
    size: usize,
    rng: &mut impl Rng,
) -> Result<(ImageTensor, ImageTensor)> {
    if a.shape() != b.shape() {
        let (c, h, w) = b.shape();
        let (ec, eh, ew) = a.shape();
        return Err(Error::ShapeMismatch {
            context: "random_crop_pair".into(),
            expected: vec![ec, eh, ew],
            actual: vec![c, h, w],
        });
    }
    let (_, h, w) = a.shape();
    if h < size || w < size {
        return Err(Error::Structural(format!(
            "cannot crop {size}×{size} from a {h}×{w} image"
        )));
    }
    let top = rng.random_range(0..=(h - size));
    let left = rng.random_range(0..=(w - size));
    let slice = ndarray::s![.., top..top + size, left..left + size];
    Ok((
        ImageTensor::new(a.data().slice(slice).to_owned())?,
        ImageTensor::new(b.data().slice(slice).to_owned())?,
    ))
}

/// Mirrors an image left-to-right.
pub fn horizontal_flip(image: &ImageTensor) -> ImageTensor {
    let mut data = image.data().clone();
    data.invert_axis(ndarray::Axis(2));
    ImageTensor::new(data).expect("flip preserves validity")
}

/// Flips both images of a pair with probability ½, or neither.
pub fn maybe_flip_pair(
    a: ImageTensor,
    b: ImageTensor,
    rng: &mut impl Rng,
) -> (ImageTensor, ImageTensor) {
    if rng.random::<bool>() {
        (horizontal_flip(&a), horizontal_flip(&b))
    } else {
        (a, b)
    }
}

/// Mirror-pads the bottom and right edges (no edge repeat) until both
/// dimensions are multiples of `factor`. Padding only those two edges
/// lets callers undo it with a plain corner crop. Returns the padded
/// image with the original (height, width).
pub fn reflect_pad_to_multiple(
    image: &ImageTensor,
    factor: usize,
) -> Result<(ImageTensor, (usize, usize))> {
    let (c, h, w) = image.shape();
    let target_h = h.div_ceil(factor) * factor;
    let target_w = w.div_ceil(factor) * factor;
    if target_h == h && target_w == w {
        return Ok((image.clone(), (h, w)));
    }
    if target_h > 2 * h - 1 || target_w > 2 * w - 1 {
        return Err(Error::Structural(format!(
            "cannot mirror-pad a {h}×{w} image to {target_h}×{target_w}; \
             the image is smaller than the required padding"
        )));
    }
    let src = image.data();
    let mut out = Array3::zeros((c, target_h, target_w));
    for ch in 0..c {
        for y in 0..target_h {
            let sy = if y < h { y } else { 2 * h - 2 - y };
            for x in 0..target_w {
                let sx = if x < w { x } else { 2 * w - 2 - x };
                out[[ch, y, x]] = src[[ch, sy, sx]];
            }
        }
    }
    Ok((ImageTensor::new(out)?, (h, w)))
}

/// Removes padding added by [`reflect_pad_to_multiple`].
pub fn crop_to(image: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    let (_, h, w) = image.shape();
    if height > h || width > w {
        return Err(Error::Structural(format!(
            "cannot crop {height}×{width} out of a {h}×{w} image"
        )));
    }
    ImageTensor::new(
        image
            .data()
            .slice(ndarray::s![.., ..height, ..width])
            .to_owned(),
    )
}

/// Recipe for a procedurally generated corpus with exact ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Number of samples.
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of droplets per image.
    pub droplet_count: (usize, usize),
    /// Inclusive range of droplet semi-axes, in pixels.
    pub droplet_radius: (f32, f32),
    /// Width of the soft edge around each droplet, in pixels (0 = hard).
    pub feather: f32,
    /// Box-blur radius applied to the background to form the raindrop layer.
    pub blur_radius: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            count: 8,
            height: 64,
            width: 64,
            droplet_count: (1, 4),
            droplet_radius: (3.0, 8.0),
            feather: 1.5,
            blur_radius: 2,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count < 1 {
            return Err(Error::Config(
                "synthetic corpus needs at least one sample".into(),
            ));
        }
        if self.height < 1 || self.width < 1 {
            return Err(Error::Config(
                "synthetic image size must be positive".into(),
            ));
        }
        if self.droplet_count.0 > self.droplet_count.1 {
            return Err(Error::Config("droplet count range is inverted".into()));
        }
        if !(self.droplet_radius.0 >= 1.0 && self.droplet_radius.1 >= self.droplet_radius.0) {
            return Err(Error::Config(
                "droplet radii must be ≥ 1 pixel and ordered".into(),
            ));
        }
        if self.feather < 0.0 || self.feather.is_nan() {
            return Err(Error::Config("feather width must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Brightness added to the blurred background inside droplets.
const DROPLET_LIFT: f32 = 0.35;

/// Smooth background: per-channel base tone, a linear gradient, and a few
/// soft blobs, clamped away from the range limits.
/// Clean plates share fixed global statistics — mid-gray base, bounded
/// contrast — and differ only in spatial arrangement: a directional ramp,
/// soft blobs, and low-frequency gratings. Per-sample brightness offsets
/// are deliberately absent: the normalization layers used throughout the
/// networks erase any global offset, so a corpus whose samples differ
/// mainly in absolute level cannot be reconstructed, only one whose
/// variation lives in structure.
fn synthesize_background(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let mut pattern = ndarray::Array2::<f32>::zeros((h, w));
    let diag = (h.min(w)).max(1) as f32;

    let theta = rng.random_range(0.0..std::f32::consts::TAU);
    let (dy, dx) = theta.sin_cos();
    for ((y, x), p) in pattern.indexed_iter_mut() {
        let proj = (dy * y as f32 + dx * x as f32) / diag;
        *p += 0.30 * (proj - 0.5);
    }

    for _ in 0..4 {
        let cy = rng.random_range(0.0..h as f32);
        let cx = rng.random_range(0.0..w as f32);
        let sigma = rng.random_range(0.10..0.30) * diag;
        let amp = rng.random_range(0.15..0.30) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        for ((y, x), p) in pattern.indexed_iter_mut() {
            let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
            *p += amp * (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }

    for _ in 0..2 {
        let phi = rng.random_range(0.0..std::f32::consts::TAU);
        let (fy, fx) = phi.sin_cos();
        let period = rng.random_range(0.4..1.0) * diag;
        let phase = rng.random_range(0.0..std::f32::consts::TAU);
        let amp = rng.random_range(0.06..0.12);
        for ((y, x), p) in pattern.indexed_iter_mut() {
            let t = std::f32::consts::TAU * (fy * y as f32 + fx * x as f32) / period + phase;
            *p += amp * t.sin();
        }
    }

    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.0));
    let mut data = Array3::zeros((3, h, w));
    for ((c, y, x), v) in data.indexed_iter_mut() {
        *v = (0.5 + tint[c] * pattern[[y, x]]).clamp(0.05, 0.95);
    }
    data
}

/// Paints one feathered ellipse into `mask` (combined with max so overlaps
/// stay in range). Opacity falls from 1 to 0 across `feather` pixels
/// around the boundary; feather 0 gives a hard edge at the boundary.
fn paint_droplet(
    mask: &mut Array3<f32>,
    cy: f32,
    cx: f32,
    ry: f32,
    rx: f32,
    feather: f32,
    peak: f32,
) {
    let (h, w) = (mask.shape()[1], mask.shape()[2]);
    let reach = ry.max(rx) + feather + 1.0;
    let y0 = (cy - reach).floor().max(0.0) as usize;
    let y1 = ((cy + reach).ceil() as usize).min(h.saturating_sub(1));
    let x0 = (cx - reach).floor().max(0.0) as usize;
    let x1 = ((cx + reach).ceil() as usize).min(w.saturating_sub(1));
    let mean_r = 0.5 * (ry + rx);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let rho = (((y as f32 - cy) / ry).powi(2) + ((x as f32 - cx) / rx).powi(2)).sqrt();
            let edge_px = (rho - 1.0) * mean_r;
            let opacity = if feather == 0.0 {
                if edge_px <= 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                (0.5 - edge_px / feather).clamp(0.0, 1.0)
            };
            let v = peak * opacity;
            if v > mask[[0, y, x]] {
                mask[[0, y, x]] = v;
            }
        }
    }
}

/// Separable box blur with edge replication.
fn box_blur(src: &Array3<f32>, radius: usize) -> Array3<f32> {
    if radius == 0 {
        return src.clone();
    }
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let k = (2 * radius + 1) as f32;
    let mut horiz = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dx in -(radius as isize)..=(radius as isize) {
                    let xi = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    acc += src[[ch, y, xi]];
                }
                horiz[[ch, y, x]] = acc / k;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -(radius as isize)..=(radius as isize) {
                    let yi = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    acc += horiz[[ch, yi, x]];
                }
                out[[ch, y, x]] = acc / k;
            }
        }
    }
    out
}

/// Generates `spec.count` samples with exact ground-truth decompositions:
/// the returned rainy image is the composition of its triple, bit for bit.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Vec<(ImageTensor, DecompositionTriple)>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);
    let mut samples = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let bg = synthesize_background(h, w, &mut rng);
        let mut mask = Array3::<f32>::zeros((1, h, w));
        let n_droplets = rng.random_range(spec.droplet_count.0..=spec.droplet_count.1);
        for _ in 0..n_droplets {
            let cy = rng.random_range(0.0..h as f32);
            let cx = rng.random_range(0.0..w as f32);
            let (rlo, rhi) = spec.droplet_radius;
            let ry = if rlo == rhi {
                rlo
            } else {
                rng.random_range(rlo..rhi)
            };
            let rx = if rlo == rhi {
                rlo
            } else {
                rng.random_range(rlo..rhi)
            };
            let peak = rng.random_range(0.6..0.95);
            paint_droplet(&mut mask, cy, cx, ry, rx, spec.feather, peak);
        }
        let mut drop_layer = box_blur(&bg, spec.blur_radius);
        drop_layer.mapv_inplace(|v| (v + DROPLET_LIFT).clamp(0.0, 1.0));

        let background = ImageTensor::new(bg)?;
        let raindrop = ImageTensor::new(drop_layer)?;
        let alpha = TransparencyMask::new(mask)?;
        let triple = DecompositionTriple::new(background, raindrop, alpha)?;
        let rainy = compose(&triple);
        samples.push((rainy, triple));
    }
    Ok(samples)
}

/// Materializes a synthetic corpus on disk: `rain/`, `clean/`, and
/// `mask/` PNGs plus a `manifest.tsv` listing each triple. The directory
/// doubles as a [`Layout::Flat`] dataset root.
pub fn write_corpus(dir: &Path, samples: &[(ImageTensor, DecompositionTriple)]) -> Result<()> {
    for sub in ["rain", "clean", "mask"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut manifest = String::from("rainy\tclean\tmask\n");
    for (i, (rainy, triple)) in samples.iter().enumerate() {
        let rain_rel = format!("rain/{i:04}.png");
        let clean_rel = format!("clean/{i:04}.png");
        let mask_rel = format!("mask/{i:04}.png");
        save_image(&dir.join(&rain_rel), rainy)?;
        save_image(&dir.join(&clean_rel), triple.background())?;
        save_mask(&dir.join(&mask_rel), triple.mask())?;
        manifest.push_str(&format!("{rain_rel}\t{clean_rel}\t{mask_rel}\n"));
    }
    fs::write(dir.join("manifest.tsv"), manifest)
        .map_err(|e| Error::io(dir.join("manifest.tsv"), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_png(path: &Path, tone: u8) {
        let img =
            image::RgbImage::from_fn(6, 5, |x, y| image::Rgb([tone, x as u8 * 10, y as u8 * 10]));
        img.save(path).unwrap();
    }

    #[test]
    fn reflect_pad_mirrors_without_repeating_the_edge() {
        let data = Array3::from_shape_fn((1, 5, 6), |(_, y, x)| (y * 10 + x) as f32 / 100.0);
        let img = ImageTensor::new(data).unwrap();
        let (padded, (h, w)) = reflect_pad_to_multiple(&img, 4).unwrap();
        assert_eq!((h, w), (5, 6));
        assert_eq!(padded.shape(), (1, 8, 8));
        // Row 5 mirrors row 3 (row 4 is the edge and is not repeated).
        for x in 0..6 {
            assert_eq!(padded.data()[[0, 5, x]], img.data()[[0, 3, x]]);
            assert_eq!(padded.data()[[0, 6, x]], img.data()[[0, 2, x]]);
        }
        // Column 6 mirrors column 4, column 7 mirrors column 3.
        for y in 0..5 {
            assert_eq!(padded.data()[[0, y, 6]], img.data()[[0, y, 4]]);
            assert_eq!(padded.data()[[0, y, 7]], img.data()[[0, y, 3]]);
        }
        let cropped = crop_to(&padded, h, w).unwrap();
        assert_eq!(cropped.data(), img.data(), "crop must undo the pad exactly");
    }

    #[test]
    fn reflect_pad_is_identity_on_aligned_images_and_rejects_tiny_ones() {
        let img = ImageTensor::new(Array3::zeros((1, 8, 8))).unwrap();
        let (padded, _) = reflect_pad_to_multiple(&img, 4).unwrap();
        assert_eq!(padded.shape(), (1, 8, 8));
        let tiny = ImageTensor::new(Array3::zeros((1, 2, 9))).unwrap();
        assert!(
            matches!(reflect_pad_to_multiple(&tiny, 8), Err(Error::Structural(_))),
            "2 rows cannot mirror out to 8"
        );
    }

    #[test]
    fn flat_unpaired_manifest_lists_both_streams_sorted() {
        let dir = tempdir().unwrap();
        fs::create_dir_all(dir.path().join("rain")).unwrap();
        fs::create_dir_all(dir.path().join("clean")).unwrap();
        for name in ["c.png", "a.png", "b.png", "e.png", "d.png"] {
            tiny_png(&dir.path().join("rain").join(name), 100);
            tiny_png(&dir.path().join("clean").join(name), 200);
        }
        let m = build_manifest(dir.path(), Layout::Flat, Pairing::Unpaired).unwrap();
        assert_eq!(m.rainy_paths.len(), 5);
        assert_eq!(m.clean_paths.len(), 5);
        let stems: Vec<_> = m.rainy_paths.iter().map(|p| stem_of(p)).collect();
        assert_eq!(
            stems,
            ["a", "b", "c", "d", "e"],
            "entries must sort lexicographically"
        );
    }

    #[test]
    fn empty_root_is_rejected() {
        let dir = tempdir().unwrap();
        fs::create_dir_all(dir.path().join("rain")).unwrap();
        fs::create_dir_all(dir.path().join("clean")).unwrap();
        match build_manifest(dir.path(), Layout::Flat, Pairing::Unpaired) {
            Err(Error::Structural(msg)) => assert!(msg.contains("no images found"), "{msg}"),
            other => panic!("expected structural error, got {other:?}"),
        }
    }

    #[test]
    fn paired_orphan_error_names_the_file() {
        let dir = tempdir().unwrap();
        fs::create_dir_all(dir.path().join("raindrop")).unwrap();
        fs::create_dir_all(dir.path().join("gt")).unwrap();
        tiny_png(&dir.path().join("raindrop").join("rd-1.png"), 10);
        tiny_png(&dir.path().join("raindrop").join("rd-2.png"), 20);
        tiny_png(&dir.path().join("gt").join("norain-1.png"), 30);
        match build_manifest(dir.path(), Layout::Rainds, Pairing::Paired) {
            Err(Error::Structural(msg)) => {
                assert!(msg.contains("rd-2"), "error must name the orphan: {msg}")
            }
            other => panic!("expected structural error, got {other:?}"),
        }
    }

    #[test]
    fn nus_suffix_convention_pairs_by_stem() {
        let dir = tempdir().unwrap();
        fs::create_dir_all(dir.path().join("data")).unwrap();
        fs::create_dir_all(dir.path().join("gt")).unwrap();
        for idx in [3, 1, 2] {
            tiny_png(&dir.path().join("data").join(format!("{idx}_rain.png")), 10);
            tiny_png(&dir.path().join("gt").join(format!("{idx}_clean.png")), 30);
        }
        let m = build_manifest(dir.path(), Layout::Nus, Pairing::Paired).unwrap();
        let pairs = m.pairs().unwrap();
        assert_eq!(pairs.len(), 3);
        for (rainy, clean) in pairs {
            assert_eq!(
                Layout::Nus.pair_key(&stem_of(rainy)),
                Layout::Nus.pair_key(&stem_of(clean)),
                "pairs must share a key"
            );
        }
    }

    #[test]
    fn undecodable_file_fails_at_manifest_build() {
        let dir = tempdir().unwrap();
        fs::create_dir_all(dir.path().join("rain")).unwrap();
        fs::create_dir_all(dir.path().join("clean")).unwrap();
        tiny_png(&dir.path().join("clean").join("a.png"), 10);
        fs::write(dir.path().join("rain").join("a.png"), b"not a png").unwrap();
        assert!(matches!(
            build_manifest(dir.path(), Layout::Flat, Pairing::Unpaired),
            Err(Error::Image { .. })
        ));
    }

    #[test]
    fn manifests_are_deterministic() {
        let dir = tempdir().unwrap();
        fs::create_dir_all(dir.path().join("rain")).unwrap();
        fs::create_dir_all(dir.path().join("clean")).unwrap();
        for name in ["x.png", "y.png"] {
            tiny_png(&dir.path().join("rain").join(name), 1);
            tiny_png(&dir.path().join("clean").join(name), 2);
        }
        let a = build_manifest(dir.path(), Layout::Flat, Pairing::Paired).unwrap();
        let b = build_manifest(dir.path(), Layout::Flat, Pairing::Paired).unwrap();
        assert_eq!(a.rainy_paths, b.rainy_paths);
        assert_eq!(a.clean_paths, b.clean_paths);
    }

    #[test]
    fn png_round_trip_stays_within_quantization() {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let img =
            ImageTensor::new(Array3::from_shape_fn((3, 9, 7), |_| rng.random::<f32>())).unwrap();
        let path = dir.path().join("t.png");
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.shape(), (3, 9, 7));
        for (a, b) in img.data().iter().zip(back.data().iter()) {
            assert!(
                (a - b).abs() <= 0.5 / 255.0 + 1e-6,
                "8-bit round trip drifted: {a} vs {b}"
            );
        }
    }

    #[test]
    fn exact_size_crop_returns_the_image_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let img =
            ImageTensor::new(Array3::from_shape_fn((3, 16, 16), |_| rng.random::<f32>())).unwrap();
        let crop = random_crop(&img, 16, &mut rng).unwrap();
        assert_eq!(img.data(), crop.data(), "the only valid offset is (0,0)");
        assert!(
            random_crop(&img, 17, &mut rng).is_err(),
            "upscaling is not implied"
        );
    }

    #[test]
    fn crops_are_reproducible_under_a_fixed_seed() {
        let img = ImageTensor::new(Array3::from_shape_fn((3, 40, 40), |(c, y, x)| {
            ((c * 1600 + y * 40 + x) % 251) as f32 / 251.0
        }))
        .unwrap();
        let a = random_crop(&img, 20, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = random_crop(&img, 20, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn crop_offsets_are_uniform() {
        // Channel 0 encodes the row index, channel 1 the column index, in
        // exactly representable dyadic steps, so each crop reveals its
        // offset. 300×300 at size 256 leaves offsets in {0..44}².
        let img = ImageTensor::new(Array3::from_shape_fn((3, 300, 300), |(c, y, x)| match c {
            0 => y as f32 / 512.0,
            1 => x as f32 / 512.0,
            _ => 0.0,
        }))
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut row_counts = [0u32; 45];
        let mut col_counts = [0u32; 45];
        let draws = 10_000;
        for _ in 0..draws {
            let crop = random_crop(&img, 256, &mut rng).unwrap();
            let top = (crop.data()[[0, 0, 0]] * 512.0).round() as usize;
            let left = (crop.data()[[1, 0, 0]] * 512.0).round() as usize;
            row_counts[top] += 1;
            col_counts[left] += 1;
        }
        let expected = draws as f64 / 45.0;
        for (axis, counts) in [("rows", &row_counts), ("cols", &col_counts)] {
            let chi2: f64 = counts
                .iter()
                .map(|&c| (c as f64 - expected).powi(2) / expected)
                .sum();
            // 44 degrees of freedom: mean 44, σ ≈ 9.4; 100 is ≈ 6σ.
            assert!(
                chi2 < 100.0,
                "{axis} offsets look non-uniform: chi² = {chi2:.1}"
            );
        }
    }

    #[test]
    fn paired_crop_uses_one_offset_for_both() {
        let img_a = ImageTensor::new(Array3::from_shape_fn((3, 30, 30), |(c, y, x)| match c {
            0 => y as f32 / 64.0,
            1 => x as f32 / 64.0,
            _ => 0.1,
        }))
        .unwrap();
        let img_b = img_a.clone();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (ca, cb) = random_crop_pair(&img_a, &img_b, 8, &mut rng).unwrap();
            assert_eq!(
                ca.data(),
                cb.data(),
                "aligned pair must receive the same offset"
            );
        }
    }

    #[test]
    fn horizontal_flip_is_an_involution_that_mirrors_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let img =
            ImageTensor::new(Array3::from_shape_fn((3, 6, 9), |_| rng.random::<f32>())).unwrap();
        let flipped = horizontal_flip(&img);
        assert_eq!(img.data()[[1, 2, 0]], flipped.data()[[1, 2, 8]]);
        let twice = horizontal_flip(&flipped);
        assert_eq!(
            img.data(),
            twice.data(),
            "flipping twice must restore the image"
        );
    }

    #[test]
    fn pair_flip_applies_to_both_or_neither() {
        let img = ImageTensor::new(Array3::from_shape_fn((3, 4, 5), |(c, y, x)| {
            (c + 2 * y + 3 * x) as f32 / 40.0
        }))
        .unwrap();
        let marker = img.data()[[0, 0, 0]];
        let mut saw_flip = false;
        let mut saw_keep = false;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = maybe_flip_pair(img.clone(), img.clone(), &mut rng);
            assert_eq!(a.data(), b.data(), "pair members must agree");
            if a.data()[[0, 0, 0]] == marker {
                saw_keep = true;
            } else {
                saw_flip = true;
            }
        }
        assert!(
            saw_flip && saw_keep,
            "both branches must occur across seeds"
        );
    }

    #[test]
    fn zero_droplets_reproduce_the_background_exactly() {
        let spec = SyntheticSpec {
            count: 3,
            droplet_count: (0, 0),
            ..Default::default()
        };
        for (rainy, triple) in synthesize(&spec).unwrap() {
            assert_eq!(
                rainy.data(),
                triple.background().data(),
                "no droplets ⇒ rainy = B"
            );
            assert_eq!(triple.mask().mean(), 0.0);
        }
    }

    #[test]
    fn synthesized_samples_recompose_exactly() {
        let samples = synthesize(&SyntheticSpec::default()).unwrap();
        assert_eq!(samples.len(), SyntheticSpec::default().count);
        for (rainy, triple) in &samples {
            let r = crate::decomp::residual(rainy, triple).unwrap();
            assert_eq!(r, 0.0, "samples are built by composition");
            assert!(
                triple.mask().mean() < 0.5,
                "default droplets must stay sparse"
            );
        }
    }

    #[test]
    fn synthesis_is_deterministic_in_the_seed() {
        let spec = SyntheticSpec {
            count: 2,
            ..Default::default()
        };
        let a = synthesize(&spec).unwrap();
        let b = synthesize(&spec).unwrap();
        for ((ra, ta), (rb, tb)) in a.iter().zip(&b) {
            assert_eq!(ra.data(), rb.data());
            assert_eq!(ta.mask().data(), tb.mask().data());
        }
    }

    #[test]
    fn hard_edged_droplet_area_matches_a_pixel_counting_oracle() {
        let r = 5.0_f32;
        // The oracle scans sub-pixel centers to bound how far the
        // rasterized area may drift from πr².
        let count_disc = |cy: f32, cx: f32| -> usize {
            let mut n = 0;
            for y in 0..64 {
                for x in 0..64 {
                    let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    if d2.sqrt() <= r {
                        n += 1;
                    }
                }
            }
            n
        };
        let ideal = std::f32::consts::PI * r * r;
        let mut slack = 0.0_f32;
        for oy in 0..10 {
            for ox in 0..10 {
                let n = count_disc(32.0 + oy as f32 / 10.0, 32.0 + ox as f32 / 10.0);
                slack = slack.max((n as f32 - ideal).abs());
            }
        }
        for (cy, cx) in [(32.0, 32.0), (32.3, 32.7), (31.5, 32.5)] {
            let mut mask = Array3::<f32>::zeros((1, 64, 64));
            paint_droplet(&mut mask, cy, cx, r, r, 0.0, 1.0);
            let support = mask.iter().filter(|&&v| v > 0.0).count();
            assert_eq!(
                support,
                count_disc(cy, cx),
                "rasterization must match the oracle"
            );
            assert!(
                (support as f32 - ideal).abs() <= slack,
                "area {support} strays beyond πr² = {ideal:.1} ± {slack:.1}"
            );
        }
    }

    #[test]
    fn corpus_on_disk_round_trips_through_a_flat_manifest() {
        let dir = tempdir().unwrap();
        let spec = SyntheticSpec {
            count: 4,
            ..Default::default()
        };
        let samples = synthesize(&spec).unwrap();
        write_corpus(dir.path(), &samples).unwrap();
        let manifest = build_manifest(dir.path(), Layout::Flat, Pairing::Paired).unwrap();
        assert_eq!(manifest.pairs().unwrap().len(), 4);
        assert!(dir.path().join("manifest.tsv").exists());
        let loaded = load_image(&manifest.rainy_paths[0]).unwrap();
        assert_eq!(loaded.shape(), (3, spec.height, spec.width));
    }

    #[test]
    fn spec_validation_rejects_bad_ranges() {
        let broken = [
            (
                "sub-pixel radius",
                SyntheticSpec {
                    droplet_radius: (0.5, 3.0),
                    ..Default::default()
                },
            ),
            (
                "inverted count range",
                SyntheticSpec {
                    droplet_count: (4, 1),
                    ..Default::default()
                },
            ),
            (
                "negative feather",
                SyntheticSpec {
                    feather: -1.0,
                    ..Default::default()
                },
            ),
            (
                "empty corpus",
                SyntheticSpec {
                    count: 0,
                    ..Default::default()
                },
            ),
        ];
        for (why, spec) in broken {
            assert!(spec.validate().is_err(), "{why}");
        }
    }
}
