//! Layer-decomposition domain: images, transparency masks, and the
//! composition law every other module builds on.
//!
//! A rainy image decomposes into a clean background `B`, a raindrop layer
//! `R`, and a transparency mask `α`; recomposition is the per-pixel convex
//! blend `(1 − α)·B + α·R` with the single-channel mask broadcast across
//! all image channels.

use ndarray::{Array3, Zip};

use crate::error::{Error, Result};

/// A `C×H×W` image with intensities in `[0,1]`.
///
/// Out-of-range values are clamped at construction; non-finite values are
/// rejected. Channel count is restricted to grayscale or RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f32>,
}

impl ImageTensor {
    /// Wraps an array, clamping every element into `[0,1]`.
    pub fn new(mut data: Array3<f32>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if !(c == 1 || c == 3) || h == 0 || w == 0 {
            return Err(Error::Structural(format!(
                "image must be 1- or 3-channel with nonzero spatial dims, got {c}x{h}x{w}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image tensor element".into()));
        }
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Ok(ImageTensor { data })
    }

    /// A uniform image of the given value.
    pub fn filled(c: usize, h: usize, w: usize, value: f32) -> Result<Self> {
        ImageTensor::new(Array3::from_elem((c, h, w), value))
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

/// A `1×H×W` blend-coefficient mask in `[0,1]`; 1 means pure raindrop
/// content at that pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct TransparencyMask {
    data: Array3<f32>,
}

impl TransparencyMask {
    /// Wraps a `1×H×W` array, clamping every element into `[0,1]`.
    pub fn new(mut data: Array3<f32>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 1 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch {
                context: "transparency mask".into(),
                expected: vec![1, h.max(1), w.max(1)],
                actual: vec![c, h, w],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("transparency mask element".into()));
        }
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Ok(TransparencyMask { data })
    }

    /// The all-zero mask used to seed the first generator iteration.
    pub fn zeros(h: usize, w: usize) -> Result<Self> {
        TransparencyMask::new(Array3::zeros((1, h, w)))
    }

    /// A uniform mask of the given value.
    pub fn filled(h: usize, w: usize, value: f32) -> Result<Self> {
        TransparencyMask::new(Array3::from_elem((1, h, w), value))
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// Mean mask value — the fraction of the image claimed by raindrops.
    pub fn mean(&self) -> f32 {
        self.data.mean().unwrap_or(0.0)
    }
}

/// One decomposition `(B, R, α)`: all members share spatial dims, and
/// background/raindrop share channel count.
#[derive(Debug, Clone)]
pub struct DecompositionTriple {
    background: ImageTensor,
    raindrop: ImageTensor,
    mask: TransparencyMask,
}

impl DecompositionTriple {
    pub fn new(
        background: ImageTensor,
        raindrop: ImageTensor,
        mask: TransparencyMask,
    ) -> Result<Self> {
        if background.shape() != raindrop.shape() {
            let (c, h, w) = background.shape();
            let (ac, ah, aw) = raindrop.shape();
            return Err(Error::ShapeMismatch {
                context: "decomposition triple: background vs raindrop".into(),
                expected: vec![c, h, w],
                actual: vec![ac, ah, aw],
            });
        }
        if (background.height(), background.width()) != (mask.height(), mask.width()) {
            return Err(Error::ShapeMismatch {
                context: "decomposition triple: image vs mask spatial dims".into(),
                expected: vec![background.height(), background.width()],
                actual: vec![mask.height(), mask.width()],
            });
        }
        Ok(DecompositionTriple {
            background,
            raindrop,
            mask,
        })
    }

    pub fn background(&self) -> &ImageTensor {
        &self.background
    }

    pub fn raindrop(&self) -> &ImageTensor {
        &self.raindrop
    }

    pub fn mask(&self) -> &TransparencyMask {
        &self.mask
    }

    pub fn into_parts(self) -> (ImageTensor, ImageTensor, TransparencyMask) {
        (self.background, self.raindrop, self.mask)
    }
}

/// Recomposes a triple into a rainy image: `(1 − α)·B + α·R` per pixel,
/// mask broadcast over channels.
///
/// The result of the blend is pinned inside `[min(B,R), max(B,R)]`; the
/// exact value always lies there, but a rounded float can spill past an
/// endpoint by an ulp.
pub fn compose(triple: &DecompositionTriple) -> ImageTensor {
    let b = triple.background.data();
    let r = triple.raindrop.data();
    let m = &triple.mask.data;
    let (c, _, _) = b.dim();
    let mut out = Array3::zeros(b.raw_dim());
    for ch in 0..c {
        Zip::from(out.index_axis_mut(ndarray::Axis(0), ch))
            .and(b.index_axis(ndarray::Axis(0), ch))
            .and(r.index_axis(ndarray::Axis(0), ch))
            .and(m.index_axis(ndarray::Axis(0), 0))
            .for_each(|o, &bv, &rv, &a| {
                let blend = (1.0 - a) * bv + a * rv;
                *o = blend.clamp(bv.min(rv), bv.max(rv));
            });
    }
    ImageTensor { data: out }
}

/// Mean absolute difference between a rainy image and the recomposition of
/// a candidate triple — a consistency diagnostic, 0 for exact decompositions.
pub fn residual(rainy: &ImageTensor, triple: &DecompositionTriple) -> Result<f32> {
    let recomposed = compose(triple);
    if rainy.shape() != recomposed.shape() {
        let (c, h, w) = recomposed.shape();
        let (ac, ah, aw) = rainy.shape();
        return Err(Error::ShapeMismatch {
            context: "residual: rainy vs recomposed".into(),
            expected: vec![c, h, w],
            actual: vec![ac, ah, aw],
        });
    }
    let n = rainy.data().len() as f64;
    let sum: f64 = rainy
        .data()
        .iter()
        .zip(recomposed.data().iter())
        .map(|(&x, &y)| (x - y).abs() as f64)
        .sum();
    Ok((sum / n) as f32)
}
