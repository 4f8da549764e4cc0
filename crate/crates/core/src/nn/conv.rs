//! 2-D convolution and transposed convolution with explicit gradients.
//!
//! Each image is unrolled with im2col so forward and backward both reduce
//! to one matrix multiply per image; col2im scatters column gradients back
//! onto the (padded) image grid. Zero and reflect padding share one code
//! path through a per-axis source-index map.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, Axis, Ix1};
use rand_chacha::ChaCha8Rng;

use super::{Feat, Param};

/// How out-of-bounds taps are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

/// For a padded axis of `n + 2p` positions, the source index each position
/// reads from, or `None` outside the image (zero padding).
fn axis_source_map(n: usize, p: usize, mode: PadMode) -> Vec<Option<usize>> {
    (0..n + 2 * p)
        .map(|ip| {
            let src = ip as isize - p as isize;
            match mode {
                PadMode::Zero => {
                    if src < 0 || src >= n as isize {
                        None
                    } else {
                        Some(src as usize)
                    }
                }
                PadMode::Reflect => {
                    assert!(
                        p < n,
                        "reflect padding needs pad < axis length ({p} vs {n})"
                    );
                    let r = if src < 0 {
                        -src
                    } else if src >= n as isize {
                        2 * (n as isize - 1) - src
                    } else {
                        src
                    };
                    Some(r as usize)
                }
            }
        })
        .collect()
}

fn pad_image(x: ArrayView3<'_, f32>, p: usize, mode: PadMode) -> Array3<f32> {
    let (c, h, w) = x.dim();
    if p == 0 {
        return x.to_owned();
    }
    let rows = axis_source_map(h, p, mode);
    let cols = axis_source_map(w, p, mode);
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = Array3::zeros((c, hp, wp));
    let src = x.as_slice().expect("standard-layout image");
    let dst = out.as_slice_mut().expect("freshly allocated");
    for ci in 0..c {
        for (ip, row) in rows.iter().enumerate() {
            let Some(sy) = row else { continue };
            let sbase = (ci * h + sy) * w;
            let dbase = (ci * hp + ip) * wp;
            // Interior columns map one-to-one; only the p-wide borders
            // need the per-column source lookup.
            dst[dbase + p..dbase + p + w].copy_from_slice(&src[sbase..sbase + w]);
            for (jp, col) in cols
                .iter()
                .enumerate()
                .take(p)
                .chain(cols.iter().enumerate().skip(p + w))
            {
                if let Some(sx) = col {
                    dst[dbase + jp] = src[sbase + sx];
                }
            }
        }
    }
    out
}

/// Adjoint of [`pad_image`]: folds a padded-grid gradient back onto the
/// original grid (crop for zero padding, crop + border fold for reflect).
fn unpad_grad(gp: &Array3<f32>, p: usize, mode: PadMode, h: usize, w: usize) -> Array3<f32> {
    let c = gp.dim().0;
    if p == 0 {
        return gp.clone();
    }
    let rows = axis_source_map(h, p, mode);
    let cols = axis_source_map(w, p, mode);
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = Array3::zeros((c, h, w));
    let src = gp.as_slice().expect("standard-layout gradient");
    let dst = out.as_slice_mut().expect("freshly allocated");
    for ci in 0..c {
        for (ip, row) in rows.iter().enumerate() {
            let Some(sy) = row else { continue };
            let sbase = (ci * hp + ip) * wp;
            let dbase = (ci * h + sy) * w;
            for (d, s) in dst[dbase..dbase + w]
                .iter_mut()
                .zip(&src[sbase + p..sbase + p + w])
            {
                *d += s;
            }
            for (jp, col) in cols
                .iter()
                .enumerate()
                .take(p)
                .chain(cols.iter().enumerate().skip(p + w))
            {
                if let Some(sx) = col {
                    dst[dbase + sx] += src[sbase + jp];
                }
            }
        }
    }
    out
}

/// Unrolls sliding `k×k` windows of a padded `(c, hp, wp)` image into a
/// `(c·k·k, ho·wo)` matrix, windows advancing by `stride`.
fn im2col(padded: &Array3<f32>, k: usize, stride: usize, ho: usize, wo: usize) -> Array2<f32> {
    let (c, hp, wp) = padded.dim();
    let mut col = Array2::zeros((c * k * k, ho * wo));
    let src = padded.as_slice().expect("standard-layout image");
    let dst = col.as_slice_mut().expect("freshly allocated");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row_base = ((ci * k + ky) * k + kx) * (ho * wo);
                for oy in 0..ho {
                    let sbase = (ci * hp + oy * stride + ky) * wp + kx;
                    let dbase = row_base + oy * wo;
                    if stride == 1 {
                        dst[dbase..dbase + wo].copy_from_slice(&src[sbase..sbase + wo]);
                    } else {
                        let srow = &src[sbase..sbase + (wo - 1) * stride + 1];
                        for (d, s) in dst[dbase..dbase + wo]
                            .iter_mut()
                            .zip(srow.iter().step_by(stride))
                        {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: accumulates a `(c·k·k, ho·wo)` matrix back onto a
/// zeroed `(c, hp, wp)` grid, summing overlapping windows.
// Geometry kernels take their dimensions flat; a parameter struct would
// only rename the same eight numbers.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    col: &Array2<f32>,
    c: usize,
    hp: usize,
    wp: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Array3<f32> {
    let mut out = Array3::zeros((c, hp, wp));
    let src = col.as_slice().expect("standard-layout column matrix");
    let dst = out.as_slice_mut().expect("freshly allocated");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row_base = ((ci * k + ky) * k + kx) * (ho * wo);
                for oy in 0..ho {
                    let dbase = (ci * hp + oy * stride + ky) * wp + kx;
                    let sbase = row_base + oy * wo;
                    if stride == 1 {
                        for (d, s) in dst[dbase..dbase + wo]
                            .iter_mut()
                            .zip(&src[sbase..sbase + wo])
                        {
                            *d += s;
                        }
                    } else {
                        let drow = &mut dst[dbase..dbase + (wo - 1) * stride + 1];
                        for (d, s) in drow.iter_mut().step_by(stride).zip(&src[sbase..sbase + wo]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// `aᵀ · b` for a `(k, m)` × `(k, n)` pair. Matrix kernels pack operands
/// per output tile, which wastes most of their work when the shared
/// dimension `k` is a handful of channels; below this threshold a plain
/// row-streaming accumulation is several times faster.
const SMALL_K_LIMIT: usize = 8;

fn at_b_small_k(a: ndarray::ArrayView2<'_, f32>, b: ndarray::ArrayView2<'_, f32>) -> Array2<f32> {
    let (k, m) = a.dim();
    let (kb, n) = b.dim();
    debug_assert_eq!(k, kb, "shared dimension");
    let mut out = Array2::zeros((m, n));
    let dst = out.as_slice_mut().expect("freshly allocated");
    let bs = b.as_slice().expect("standard-layout operand");
    for r in 0..m {
        let row = &mut dst[r * n..(r + 1) * n];
        for kk in 0..k {
            let w = a[(kk, r)];
            for (o, s) in row.iter_mut().zip(&bs[kk * n..kk * n + n]) {
                *o += w * s;
            }
        }
    }
    out
}

/// A convolution layer. The weight is stored pre-flattened as
/// `(c_out, c_in·k·k)` so forward is a single matrix product per image.
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    pad_mode: PadMode,
}

pub struct ConvCache {
    x: Feat,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        pad_mode: PadMode,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(k >= 1 && stride >= 1 && c_in >= 1 && c_out >= 1);
        Conv2d {
            weight: Param::normal(&[c_out, c_in * k * k], 0.02, rng),
            bias: bias.then(|| Param::zeros(&[c_out])),
            c_in,
            c_out,
            k,
            stride,
            pad,
            pad_mode,
        }
    }

    /// Output spatial dims for an `h×w` input.
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let hp = h + 2 * self.pad;
        let wp = w + 2 * self.pad;
        assert!(
            hp >= self.k && wp >= self.k,
            "input {h}x{w} smaller than {}x{} kernel after padding {}",
            self.k,
            self.k,
            self.pad
        );
        (
            (hp - self.k) / self.stride + 1,
            (wp - self.k) / self.stride + 1,
        )
    }

    fn run(&self, x: &Feat) -> Feat {
        let (n, c_in, h, w) = x.dim();
        assert_eq!(c_in, self.c_in, "conv input channels");
        let (ho, wo) = self.out_dims(h, w);
        let wmat = self.weight.view2();
        let mut y = Array4::zeros((n, self.c_out, ho, wo));
        for i in 0..n {
            let padded = pad_image(x.index_axis(Axis(0), i), self.pad, self.pad_mode);
            let col = im2col(&padded, self.k, self.stride, ho, wo);
            let mut ymat = wmat.dot(&col);
            if let Some(b) = &self.bias {
                let bv = b
                    .value
                    .view()
                    .into_dimensionality::<Ix1>()
                    .expect("1-D bias");
                for (mut row, &bias) in ymat.rows_mut().into_iter().zip(bv.iter()) {
                    row += bias;
                }
            }
            y.index_axis_mut(Axis(0), i).assign(
                &ymat
                    .into_shape_with_order((self.c_out, ho, wo))
                    .expect("conv reshape"),
            );
        }
        y
    }

    pub fn forward(&self, x: &Feat) -> (Feat, ConvCache) {
        (self.run(x), ConvCache { x: x.clone() })
    }

    pub fn infer(&self, x: &Feat) -> Feat {
        self.run(x)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &ConvCache, gy: &Feat) -> Feat {
        let x = &cache.x;
        let (n, _, h, w) = x.dim();
        let (ho, wo) = self.out_dims(h, w);
        assert_eq!(
            gy.dim(),
            (n, self.c_out, ho, wo),
            "conv upstream gradient shape"
        );
        let wmat = self.weight.view2().to_owned();
        let mut gw = Array2::<f32>::zeros((self.c_out, self.c_in * self.k * self.k));
        let mut gb = Array1::<f32>::zeros(self.c_out);
        let mut gx = Array4::zeros(x.raw_dim());
        for i in 0..n {
            let padded = pad_image(x.index_axis(Axis(0), i), self.pad, self.pad_mode);
            let col = im2col(&padded, self.k, self.stride, ho, wo);
            let gyi = gy.index_axis(Axis(0), i);
            let gymat = gyi
                .to_shape((self.c_out, ho * wo))
                .expect("contiguous gradient");
            general_mat_mul(1.0, &gymat, &col.t(), 1.0, &mut gw);
            if self.bias.is_some() {
                gb += &gymat.sum_axis(Axis(1));
            }
            self.backward_data_one(&wmat, &gymat, &mut gx, i, h, w, ho, wo);
        }
        self.weight.grad2_mut().scaled_add(1.0, &gw);
        if let Some(b) = &mut self.bias {
            let mut gview = b
                .grad
                .view_mut()
                .into_dimensionality::<Ix1>()
                .expect("1-D bias");
            gview.scaled_add(1.0, &gb);
        }
        gx
    }

    /// Input gradient only, leaving parameter gradients untouched — for
    /// backpropagating through a frozen layer.
    pub fn backward_data(&self, cache: &ConvCache, gy: &Feat) -> Feat {
        let x = &cache.x;
        let (n, _, h, w) = x.dim();
        let (ho, wo) = self.out_dims(h, w);
        assert_eq!(
            gy.dim(),
            (n, self.c_out, ho, wo),
            "conv upstream gradient shape"
        );
        let wmat = self.weight.view2().to_owned();
        let mut gx = Array4::zeros(x.raw_dim());
        for i in 0..n {
            let gyi = gy.index_axis(Axis(0), i);
            let gymat = gyi
                .to_shape((self.c_out, ho * wo))
                .expect("contiguous gradient");
            self.backward_data_one(&wmat, &gymat, &mut gx, i, h, w, ho, wo);
        }
        gx
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_data_one(
        &self,
        wmat: &Array2<f32>,
        gymat: &ndarray::CowArray<'_, f32, ndarray::Ix2>,
        gx: &mut Feat,
        i: usize,
        h: usize,
        w: usize,
        ho: usize,
        wo: usize,
    ) {
        let hp = h + 2 * self.pad;
        let wp = w + 2 * self.pad;
        let gcol = if self.c_out <= SMALL_K_LIMIT {
            at_b_small_k(wmat.view(), gymat.view())
        } else {
            wmat.t().dot(gymat)
        };
        let gpad = col2im_add(&gcol, self.c_in, hp, wp, self.k, self.stride, ho, wo);
        gx.index_axis_mut(Axis(0), i)
            .assign(&unpad_grad(&gpad, self.pad, self.pad_mode, h, w));
    }
}

/// A fractionally-strided (transposed) convolution layer, the adjoint of a
/// stride-`s` convolution; used for upsampling. Weight is stored as
/// `(c_in, c_out·k·k)`.
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Option<Param>,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
}

pub struct ConvTCache {
    x: Feat,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(
            out_pad < stride,
            "output padding must be smaller than stride"
        );
        ConvTranspose2d {
            weight: Param::normal(&[c_in, c_out * k * k], 0.02, rng),
            bias: bias.then(|| Param::zeros(&[c_out])),
            c_in,
            c_out,
            k,
            stride,
            pad,
            out_pad,
        }
    }

    /// Output spatial dims for an `h×w` input.
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = (h - 1) * self.stride + self.k + self.out_pad;
        let wo = (w - 1) * self.stride + self.k + self.out_pad;
        assert!(
            ho > 2 * self.pad && wo > 2 * self.pad,
            "transposed conv output collapses"
        );
        (ho - 2 * self.pad, wo - 2 * self.pad)
    }

    /// Canvas dims before cropping the padding margin.
    fn canvas_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.k + self.out_pad,
            (w - 1) * self.stride + self.k + self.out_pad,
        )
    }

    fn run(&self, x: &Feat) -> Feat {
        let (n, c_in, h, w) = x.dim();
        assert_eq!(c_in, self.c_in, "transposed conv input channels");
        let (ho, wo) = self.out_dims(h, w);
        let (hc, wc) = self.canvas_dims(h, w);
        let wmat = self.weight.view2();
        let mut y = Array4::zeros((n, self.c_out, ho, wo));
        for i in 0..n {
            let xi = x.index_axis(Axis(0), i);
            let xmat = xi.to_shape((self.c_in, h * w)).expect("contiguous input");
            let gcol = wmat.t().dot(&xmat);
            let canvas = col2im_add(&gcol, self.c_out, hc, wc, self.k, self.stride, h, w);
            let p = self.pad;
            let mut yi = y.index_axis_mut(Axis(0), i);
            yi.assign(&canvas.slice(ndarray::s![.., p..p + ho, p..p + wo]));
            if let Some(b) = &self.bias {
                let bv = b
                    .value
                    .view()
                    .into_dimensionality::<Ix1>()
                    .expect("1-D bias");
                for (mut plane, &bias) in yi.outer_iter_mut().zip(bv.iter()) {
                    plane += bias;
                }
            }
        }
        y
    }

    pub fn forward(&self, x: &Feat) -> (Feat, ConvTCache) {
        (self.run(x), ConvTCache { x: x.clone() })
    }

    pub fn infer(&self, x: &Feat) -> Feat {
        self.run(x)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &ConvTCache, gy: &Feat) -> Feat {
        let x = &cache.x;
        let (n, _, h, w) = x.dim();
        let (ho, wo) = self.out_dims(h, w);
        assert_eq!(
            gy.dim(),
            (n, self.c_out, ho, wo),
            "transposed conv upstream gradient shape"
        );
        let (hc, wc) = self.canvas_dims(h, w);
        let p = self.pad;
        let wmat = self.weight.view2().to_owned();
        let mut gw = Array2::<f32>::zeros((self.c_in, self.c_out * self.k * self.k));
        let mut gb = Array1::<f32>::zeros(self.c_out);
        let mut gx = Array4::zeros(x.raw_dim());
        for i in 0..n {
            // Undo the crop: the gradient lands in the canvas interior.
            let mut gcanvas = Array3::<f32>::zeros((self.c_out, hc, wc));
            gcanvas
                .slice_mut(ndarray::s![.., p..p + ho, p..p + wo])
                .assign(&gy.index_axis(Axis(0), i));
            let gcol = im2col(&gcanvas, self.k, self.stride, h, w);
            let xi = x.index_axis(Axis(0), i);
            let xmat = xi.to_shape((self.c_in, h * w)).expect("contiguous input");
            general_mat_mul(1.0, &xmat, &gcol.t(), 1.0, &mut gw);
            let gxmat = wmat.dot(&gcol);
            gx.index_axis_mut(Axis(0), i).assign(
                &gxmat
                    .into_shape_with_order((self.c_in, h, w))
                    .expect("reshape"),
            );
            if self.bias.is_some() {
                let gyi = gy.index_axis(Axis(0), i);
                for (ci, plane) in gyi.outer_iter().enumerate() {
                    gb[ci] += plane.sum();
                }
            }
        }
        self.weight.grad2_mut().scaled_add(1.0, &gw);
        if let Some(b) = &mut self.bias {
            let mut gview = b
                .grad
                .view_mut()
                .into_dimensionality::<Ix1>()
                .expect("1-D bias");
            gview.scaled_add(1.0, &gb);
        }
        gx
    }

    /// Input gradient only, leaving parameter gradients untouched.
    pub fn backward_data(&self, cache: &ConvTCache, gy: &Feat) -> Feat {
        let x = &cache.x;
        let (n, _, h, w) = x.dim();
        let (ho, wo) = self.out_dims(h, w);
        assert_eq!(
            gy.dim(),
            (n, self.c_out, ho, wo),
            "transposed conv upstream gradient shape"
        );
        let (hc, wc) = self.canvas_dims(h, w);
        let p = self.pad;
        let wmat = self.weight.view2().to_owned();
        let mut gx = Array4::zeros(x.raw_dim());
        for i in 0..n {
            let mut gcanvas = Array3::<f32>::zeros((self.c_out, hc, wc));
            gcanvas
                .slice_mut(ndarray::s![.., p..p + ho, p..p + wo])
                .assign(&gy.index_axis(Axis(0), i));
            let gcol = im2col(&gcanvas, self.k, self.stride, h, w);
            let gxmat = wmat.dot(&gcol);
            gx.index_axis_mut(Axis(0), i).assign(
                &gxmat
                    .into_shape_with_order((self.c_in, h, w))
                    .expect("reshape"),
            );
        }
        gx
    }
}
