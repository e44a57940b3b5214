//! Image buffers, bilinear sampling, inverse warping and pyramids.

use nalgebra::Vector2;

use crate::geometry::FlowField;
use crate::{Error, Result};

/// Interleaved `H x W x C` image with intensities normalised to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch {
                expected: (width * height * channels, 1),
                got: (data.len(), 1),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("image contains non-finite values".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    /// Single-channel image from a per-pixel function.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            channels: 1,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Mean over channels.
    pub fn to_gray(&self) -> ImagePlane {
        if self.channels == 1 {
            return self.clone();
        }
        let c = self.channels as f64;
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() / c)
            .collect();
        ImagePlane {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImagePlane {
        ImagePlane {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Extracts channel `c` as a single-channel image.
    pub fn channel(&self, c: usize) -> ImagePlane {
        ImagePlane {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
        }
    }
}

/// Per-pixel boolean mask; `true` marks a usable pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width * height, "mask size");
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask::from_vec(
            self.width,
            self.height,
            self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        )
    }

    pub fn not(&self) -> Mask {
        Mask::from_vec(self.width, self.height, self.data.iter().map(|v| !v).collect())
    }

    /// Intersection over union with another mask; 1 when both are empty.
    pub fn iou(&self, other: &Mask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.data.iter().zip(&other.data) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// 2x2 reduction keeping a coarse pixel only if all four children are set.
    pub fn downsample(&self) -> Mask {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut out = Mask::new(w, h, false);
        for y in 0..h {
            for x in 0..w {
                out.data[y * w + x] = self.get(2 * x, 2 * y)
                    && self.get(2 * x + 1, 2 * y)
                    && self.get(2 * x, 2 * y + 1)
                    && self.get(2 * x + 1, 2 * y + 1);
            }
        }
        out
    }
}

/// Locates the bilinear cell of a continuous coordinate along one axis.
///
/// The valid domain is `[0, n - 1]`; the cell origin is clamped to `n - 2` so
/// that the last lattice line is reproduced exactly.
#[inline]
fn cell(q: f64, n: usize) -> Option<(usize, f64)> {
    if !(q >= 0.0 && q <= (n - 1) as f64) {
        return None;
    }
    if n == 1 {
        return Some((0, 0.0));
    }
    let i = (q.floor() as usize).min(n - 2);
    Some((i, q - i as f64))
}

/// Bilinear sample of all channels at `(qx, qy)` written to `out`.
/// Returns `false` (leaving `out` zeroed) when any neighbour is out of bounds.
#[inline]
pub fn sample_into(img: &ImagePlane, qx: f64, qy: f64, out: &mut [f64]) -> bool {
    sample_impl(img, qx, qy, out, None)
}

/// Like [`sample_into`], additionally writing the derivative of each channel
/// with respect to `qx` and `qy`.
#[inline]
pub fn sample_with_grad(
    img: &ImagePlane,
    qx: f64,
    qy: f64,
    out: &mut [f64],
    dx: &mut [f64],
    dy: &mut [f64],
) -> bool {
    sample_impl(img, qx, qy, out, Some((dx, dy)))
}

#[inline]
fn sample_impl(
    img: &ImagePlane,
    qx: f64,
    qy: f64,
    out: &mut [f64],
    grad: Option<(&mut [f64], &mut [f64])>,
) -> bool {
    let c = img.channels;
    let cells = cell(qx, img.width).zip(cell(qy, img.height));
    let Some(((x0, ax), (y0, ay))) = cells else {
        out.iter_mut().for_each(|v| *v = 0.0);
        if let Some((dx, dy)) = grad {
            dx.iter_mut().for_each(|v| *v = 0.0);
            dy.iter_mut().for_each(|v| *v = 0.0);
        }
        return false;
    };
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let i00 = (y0 * img.width + x0) * c;
    let i10 = (y0 * img.width + x1) * c;
    let i01 = (y1 * img.width + x0) * c;
    let i11 = (y1 * img.width + x1) * c;
    let d = &img.data;
    match grad {
        None => {
            for k in 0..c {
                let top = (1.0 - ax) * d[i00 + k] + ax * d[i10 + k];
                let bot = (1.0 - ax) * d[i01 + k] + ax * d[i11 + k];
                out[k] = (1.0 - ay) * top + ay * bot;
            }
        }
        Some((gx, gy)) => {
            let sx = if img.width > 1 { 1.0 } else { 0.0 };
            let sy = if img.height > 1 { 1.0 } else { 0.0 };
            for k in 0..c {
                let top = (1.0 - ax) * d[i00 + k] + ax * d[i10 + k];
                let bot = (1.0 - ax) * d[i01 + k] + ax * d[i11 + k];
                out[k] = (1.0 - ay) * top + ay * bot;
                gx[k] = sx * ((1.0 - ay) * (d[i10 + k] - d[i00 + k]) + ay * (d[i11 + k] - d[i01 + k]));
                gy[k] = sy * (bot - top);
            }
        }
    }
    true
}

/// Bilinear interpolation at a continuous pixel coordinate.
pub fn bilinear_sample(img: &ImagePlane, q: Vector2<f64>) -> (Vec<f64>, bool) {
    let mut out = vec![0.0; img.channels];
    let valid = sample_into(img, q.x, q.y, &mut out);
    (out, valid)
}

fn check_flow(img: &ImagePlane, flow: &FlowField) -> Result<()> {
    if img.dims() != flow.dims() {
        return Err(Error::DimensionMismatch {
            expected: img.dims(),
            got: flow.dims(),
        });
    }
    Ok(())
}

/// `out(p) = img(p - flow(p))`, with the mask of pixels whose sample is valid.
pub fn inverse_warp(img: &ImagePlane, flow: &FlowField) -> Result<(ImagePlane, Mask)> {
    check_flow(img, flow)?;
    let (w, h, c) = (img.width, img.height, img.channels);
    let mut out = ImagePlane::filled(w, h, c, 0.0);
    let mut mask = Mask::new(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let q = (x as f64 - flow.u[i], y as f64 - flow.v[i]);
            mask.data[i] = sample_into(img, q.0, q.1, &mut out.data[i * c..(i + 1) * c]);
        }
    }
    Ok((out, mask))
}

/// Inverse warp with the per-pixel, per-channel derivative of the warped
/// value with respect to the sample location `p - flow(p)`.
#[derive(Clone, Debug)]
pub struct WarpedImage {
    pub image: ImagePlane,
    pub valid: Mask,
    pub grad_x: Vec<f64>,
    pub grad_y: Vec<f64>,
}

pub fn inverse_warp_with_grad(img: &ImagePlane, flow: &FlowField) -> Result<WarpedImage> {
    check_flow(img, flow)?;
    let (w, h, c) = (img.width, img.height, img.channels);
    let mut image = ImagePlane::filled(w, h, c, 0.0);
    let mut valid = Mask::new(w, h, false);
    let mut grad_x = vec![0.0; w * h * c];
    let mut grad_y = vec![0.0; w * h * c];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let r = i * c..(i + 1) * c;
            valid.data[i] = sample_with_grad(
                img,
                x as f64 - flow.u[i],
                y as f64 - flow.v[i],
                &mut image.data[r.clone()],
                &mut grad_x[r.clone()],
                &mut grad_y[r],
            );
        }
    }
    Ok(WarpedImage {
        image,
        valid,
        grad_x,
        grad_y,
    })
}

/// 2x2 area average, dropping a trailing odd row or column.
pub fn area_downsample(img: &ImagePlane) -> ImagePlane {
    let (w, h, c) = (img.width / 2, img.height / 2, img.channels);
    let mut out = ImagePlane::filled(w.max(1), h.max(1), c, 0.0);
    if w == 0 || h == 0 {
        return out;
    }
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                out.data[(y * w + x) * c + k] = 0.25
                    * (img.get(2 * x, 2 * y, k)
                        + img.get(2 * x + 1, 2 * y, k)
                        + img.get(2 * x, 2 * y + 1, k)
                        + img.get(2 * x + 1, 2 * y + 1, k));
            }
        }
    }
    out
}

fn halve_flow(flow: &FlowField) -> FlowField {
    let (w, h) = (flow.width / 2, flow.height / 2);
    let mut out = FlowField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let idx = [
                2 * y * flow.width + 2 * x,
                2 * y * flow.width + 2 * x + 1,
                (2 * y + 1) * flow.width + 2 * x,
                (2 * y + 1) * flow.width + 2 * x + 1,
            ];
            // area average then halve the displacement
            out.u[y * w + x] = 0.125 * idx.iter().map(|&i| flow.u[i]).sum::<f64>();
            out.v[y * w + x] = 0.125 * idx.iter().map(|&i| flow.v[i]).sum::<f64>();
        }
    }
    out
}

/// Flow at `levels` resolutions; entry 0 is the input, entry `l` is area
/// downsampled `l` times with displacements scaled by `2^-l`.
pub fn downsample_flow(flow: &FlowField, levels: usize) -> Result<Vec<FlowField>> {
    if levels == 0 {
        return Err(Error::Config("downsample_flow needs at least one level".into()));
    }
    let mut out = vec![flow.clone()];
    for l in 1..levels {
        let prev = &out[l - 1];
        if prev.width < 2 || prev.height < 2 {
            return Err(Error::Config(format!(
                "flow of size {}x{} cannot be downsampled to level {l}",
                flow.width, flow.height
            )));
        }
        out.push(halve_flow(prev));
    }
    Ok(out)
}

/// Adjoint of [`downsample_flow`]: accumulates gradients given at every level
/// back onto the full-resolution flow. `grads[l]` holds `(d/du, d/dv)` for
/// level `l` and must match that level's size.
pub fn downsample_flow_adjoint(grads: &[(Vec<f64>, Vec<f64>)], width: usize, height: usize) -> (Vec<f64>, Vec<f64>) {
    let mut dims = vec![(width, height)];
    for l in 1..grads.len() {
        let (w, h) = dims[l - 1];
        dims.push((w / 2, h / 2));
    }
    let mut acc_u = grads.last().map(|g| g.0.clone()).unwrap_or_default();
    let mut acc_v = grads.last().map(|g| g.1.clone()).unwrap_or_default();
    for l in (1..grads.len()).rev() {
        let (fw, fh) = dims[l - 1];
        let (cw, ch) = dims[l];
        let mut gu = grads[l - 1].0.clone();
        let mut gv = grads[l - 1].1.clone();
        debug_assert_eq!(gu.len(), fw * fh);
        for y in 0..ch {
            for x in 0..cw {
                let (a, b) = (0.125 * acc_u[y * cw + x], 0.125 * acc_v[y * cw + x]);
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let i = (2 * y + dy) * fw + 2 * x + dx;
                    gu[i] += a;
                    gv[i] += b;
                }
            }
        }
        acc_u = gu;
        acc_v = gv;
    }
    (acc_u, acc_v)
}

/// Forward differences; the last column of `dx` and last row of `dy` are zero.
pub fn image_gradients(img: &ImagePlane) -> Result<(ImagePlane, ImagePlane)> {
    if img.width < 2 || img.height < 2 {
        return Err(Error::Config("image gradients need at least 2x2 pixels".into()));
    }
    let (w, h, c) = (img.width, img.height, img.channels);
    let mut dx = ImagePlane::filled(w, h, c, 0.0);
    let mut dy = ImagePlane::filled(w, h, c, 0.0);
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let i = (y * w + x) * c + k;
                if x + 1 < w {
                    dx.data[i] = img.get(x + 1, y, k) - img.get(x, y, k);
                }
                if y + 1 < h {
                    dy.data[i] = img.get(x, y + 1, k) - img.get(x, y, k);
                }
            }
        }
    }
    Ok((dx, dy))
}
