//! Instance normalization (no learned affine): each channel of each batch
//! entry is standardized over its own spatial extent.

use ndarray::{Array2, Array4, Axis};

use super::Feat;

const EPS: f64 = 1e-5;

pub struct InstanceNorm;

pub struct NormCache {
    /// The normalized output (reused as x̂ in the backward pass).
    xhat: Feat,
    /// Per-(batch, channel) reciprocal standard deviation.
    inv_std: Array2<f32>,
}

impl InstanceNorm {
    pub fn new() -> Self {
        InstanceNorm
    }

    pub fn forward(&self, x: &Feat) -> (Feat, NormCache) {
        let (n, c, h, w) = x.dim();
        let area = (h * w) as f64;
        let mut y = Array4::zeros(x.raw_dim());
        let mut inv_std = Array2::zeros((n, c));
        for i in 0..n {
            for ci in 0..c {
                let plane = x.index_axis(Axis(0), i);
                let plane = plane.index_axis(Axis(0), ci);
                let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / area;
                let var = plane
                    .iter()
                    .map(|&v| (v as f64 - mean).powi(2))
                    .sum::<f64>()
                    / area;
                let inv = 1.0 / (var + EPS).sqrt();
                inv_std[(i, ci)] = inv as f32;
                let mut out = y.index_axis_mut(Axis(0), i);
                let mut out = out.index_axis_mut(Axis(0), ci);
                for (o, &v) in out.iter_mut().zip(plane.iter()) {
                    *o = ((v as f64 - mean) * inv) as f32;
                }
            }
        }
        (y.clone(), NormCache { xhat: y, inv_std })
    }

    /// No parameters, so backward only maps the output gradient to the
    /// input gradient:
    /// `gx = inv_std · (gy − mean(gy) − x̂ · mean(gy ⊙ x̂))`.
    pub fn backward(&self, cache: &NormCache, gy: &Feat) -> Feat {
        let (n, c, h, w) = gy.dim();
        assert_eq!(cache.xhat.dim(), gy.dim(), "norm cache/gradient shape");
        let area = (h * w) as f64;
        let mut gx = Array4::zeros(gy.raw_dim());
        for i in 0..n {
            for ci in 0..c {
                let g = gy.index_axis(Axis(0), i);
                let g = g.index_axis(Axis(0), ci);
                let xh = cache.xhat.index_axis(Axis(0), i);
                let xh = xh.index_axis(Axis(0), ci);
                let sum_g = g.iter().map(|&v| v as f64).sum::<f64>();
                let sum_gx = g
                    .iter()
                    .zip(xh.iter())
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum::<f64>();
                let inv = cache.inv_std[(i, ci)] as f64;
                let mut out = gx.index_axis_mut(Axis(0), i);
                let mut out = out.index_axis_mut(Axis(0), ci);
                for ((o, &gv), &xv) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
                    *o = (inv * (gv as f64 - sum_g / area - xv as f64 * sum_gx / area)) as f32;
                }
            }
        }
        gx
    }
}

impl Default for InstanceNorm {
    fn default() -> Self {
        InstanceNorm::new()
    }
}
