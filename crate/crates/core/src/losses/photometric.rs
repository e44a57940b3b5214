use rayon::prelude::*;

use super::{CensusCoding, CensusParams, FlowTermOutput};
use crate::features::{census_distance, soft_code, soft_code_derivative, ternary_code, PatchSet, NEIGHBOURS};
use crate::features::CENSUS_DISTANCE_SOFTNESS;
use crate::geometry::FlowField;
use crate::imaging::{sample_with_grad, ImagePlane, Mask};
use crate::reduce::pairwise_sum;
use crate::{Error, Result};

fn code(diff: f64, p: &CensusParams) -> f64 {
    match p.coding {
        CensusCoding::Soft => soft_code(diff, p.epsilon),
        CensusCoding::Hard => ternary_code(diff, p.epsilon) as f64,
    }
}

/// Derivative of `d^2 / (d^2 + c)`.
fn distance_derivative(d: f64) -> f64 {
    let c = CENSUS_DISTANCE_SOFTNESS;
    let s = d * d + c;
    2.0 * d * c / (s * s)
}

struct PixelTerm {
    value: f64,
    /// `(pixel index, d/du, d/dv)` of the centre and its eight neighbours.
    grads: [(usize, f64, f64); 9],
}

/// Census distance between the source image and the target warped by `flow`
/// (`target(p - flow(p))`), averaged over every patch pixel whose 3x3
/// neighbourhood warps inside the target. Neighbours off the image edge are
/// clamped, as in the census transform. When `mask` is given, a patch pixel
/// also needs its whole neighbourhood inside the mask.
pub fn patch_photometric_loss(
    target: &ImagePlane,
    source: &ImagePlane,
    flow: &FlowField,
    patches: &PatchSet,
    mask: Option<&Mask>,
    census: &CensusParams,
) -> Result<FlowTermOutput> {
    let (w, h) = target.dims();
    for dims in [source.dims(), flow.dims()] {
        if dims != (w, h) {
            return Err(Error::DimensionMismatch { expected: (w, h), got: dims });
        }
    }
    if let Some(m) = mask {
        if (m.width, m.height) != (w, h) {
            return Err(Error::DimensionMismatch {
                expected: (w, h),
                got: (m.width, m.height),
            });
        }
    }
    if !patches.fits(w, h) {
        return Err(Error::Config("patch footprint exceeds the image".into()));
    }
    if !(census.epsilon > 0.0) {
        return Err(Error::Config("census epsilon must be positive".into()));
    }
    let tgt = target.to_gray();
    let src = source.to_gray();
    let pixels: Vec<(usize, usize)> = patches.pixels().collect();
    if pixels.is_empty() {
        return Ok(FlowTermOutput::empty(w * h, 0));
    }

    let terms: Vec<Option<PixelTerm>> = pixels
        .par_iter()
        .map(|&(x, y)| pixel_term(&tgt, &src, flow, mask, census, x, y))
        .collect();

    let contributions: Vec<Option<f64>> = terms.iter().map(|t| t.as_ref().map(|t| t.value)).collect();
    let values: Vec<f64> = contributions.iter().flatten().copied().collect();
    if values.is_empty() {
        return Ok(FlowTermOutput::empty(w * h, pixels.len()));
    }
    let n = values.len() as f64;
    let mut grad_u = vec![0.0; w * h];
    let mut grad_v = vec![0.0; w * h];
    for t in terms.iter().flatten() {
        for &(i, gu, gv) in &t.grads {
            grad_u[i] += gu / n;
            grad_v[i] += gv / n;
        }
    }
    Ok(FlowTermOutput {
        value: pairwise_sum(&values) / n,
        count: values.len(),
        empty: false,
        grad_u,
        grad_v,
        contributions,
    })
}

fn pixel_term(
    tgt: &ImagePlane,
    src: &ImagePlane,
    flow: &FlowField,
    mask: Option<&Mask>,
    census: &CensusParams,
    x: usize,
    y: usize,
) -> Option<PixelTerm> {
    let (w, h) = tgt.dims();
    // slot 0 is the centre, slots 1..=8 follow NEIGHBOURS
    let mut idx = [y * w + x; 9];
    for (j, (dx, dy)) in NEIGHBOURS.iter().enumerate() {
        let nx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
        let ny = (y as isize + dy).clamp(0, h as isize - 1) as usize;
        idx[j + 1] = ny * w + nx;
    }
    if let Some(m) = mask {
        if idx.iter().any(|&i| !m.data[i]) {
            return None;
        }
    }
    let mut warped = [0.0; 9];
    let mut gx = [0.0; 9];
    let mut gy = [0.0; 9];
    for s in 0..9 {
        let i = idx[s];
        let qx = (i % w) as f64 - flow.u[i];
        let qy = (i / w) as f64 - flow.v[i];
        let (mut v, mut a, mut b) = ([0.0], [0.0], [0.0]);
        if !sample_with_grad(tgt, qx, qy, &mut v, &mut a, &mut b) {
            return None;
        }
        warped[s] = v[0];
        gx[s] = a[0];
        gy[s] = b[0];
    }
    let sc = src.data[idx[0]];
    let mut src_code = [0.0; 8];
    let mut warp_code = [0.0; 8];
    for j in 0..8 {
        src_code[j] = code(src.data[idx[j + 1]] - sc, census);
        warp_code[j] = code(warped[j + 1] - warped[0], census);
    }
    let value = census_distance(&src_code, &warp_code);

    let mut grads = [(0, 0.0, 0.0); 9];
    for s in 0..9 {
        grads[s].0 = idx[s];
    }
    if census.coding == CensusCoding::Soft {
        let mut centre = 0.0;
        for j in 0..8 {
            // d value / d warped[j + 1]
            let a = -distance_derivative(src_code[j] - warp_code[j])
                * soft_code_derivative(warped[j + 1] - warped[0], census.epsilon);
            // warped sample moves with -flow
            grads[j + 1].1 = -a * gx[j + 1];
            grads[j + 1].2 = -a * gy[j + 1];
            centre -= a;
        }
        grads[0].1 = -centre * gx[0];
        grads[0].2 = -centre * gy[0];
    }
    Some(PixelTerm { value, grads })
}
