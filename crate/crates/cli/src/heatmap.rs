//! Rendering transparency masks as heat maps.
//!
//! The ramp is linear black → red → yellow over [0, 1]: the red channel
//! rises from 0 to 1 on the lower half, then the green channel rises from
//! 0 to 1 on the upper half. Fully transparent regions are black; the
//! closer a pixel's share of raindrop content is to 1, the hotter the
//! color. `colorbar` renders the ramp itself as a legend.

use dropcycle::decomp::ImageTensor;
use dropcycle::error::Result;
use ndarray::Array3;

/// Maps one mask value through the ramp.
fn ramp(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    if t <= 0.5 {
        [2.0 * t, 0.0, 0.0]
    } else {
        [1.0, 2.0 * (t - 0.5), 0.0]
    }
}

/// Renders a single-channel mask image as an RGB heat map.
pub fn mask_to_heatmap(mask: &ImageTensor) -> Result<ImageTensor> {
    let (_, h, w) = mask.shape();
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let [r, g, b] = ramp(mask.data()[[0, y, x]]);
            out[[0, y, x]] = r;
            out[[1, y, x]] = g;
            out[[2, y, x]] = b;
        }
    }
    ImageTensor::new(out)
}

/// A 256×16 legend strip running the full ramp left to right.
pub fn colorbar() -> Result<ImageTensor> {
    let (h, w) = (16, 256);
    let mut out = Array3::zeros((3, h, w));
    for x in 0..w {
        let [r, g, b] = ramp(x as f32 / (w - 1) as f32);
        for y in 0..h {
            out[[0, y, x]] = r;
            out[[1, y, x]] = g;
            out[[2, y, x]] = b;
        }
    }
    ImageTensor::new(out)
}
