use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, DepthMap};
use crate::{Error, Result};

/// Segments smaller than this are ignored by the planar term.
pub const MIN_SEGMENT_PIXELS: usize = 20;

/// Relative eigenvalue floor below which a fit is treated as rank deficient.
const RANK_TOLERANCE: f64 = 1e-12;

/// Integer label per pixel; 0 means unsegmented.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

impl SegmentMap {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::Config(format!(
                "segment map of {width}x{height} needs {} labels, got {}",
                width * height,
                labels.len()
            )));
        }
        Ok(Self { width, height, labels })
    }

    pub fn unsegmented(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    /// Sorted distinct non-zero labels.
    pub fn labels_present(&self) -> Vec<u32> {
        let mut l: Vec<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        l.sort_unstable();
        l.dedup();
        l
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanarOutput {
    pub value: f64,
    /// Pixels that contributed.
    pub count: usize,
    /// No segment could be fitted; `value` is zero.
    pub empty: bool,
    /// Labels skipped as too small, rank deficient, or not covering all of
    /// their pixels in front of the camera.
    pub skipped: Vec<u32>,
    /// Gradient with respect to depth.
    pub grad: Vec<f64>,
}

struct SegmentFit {
    value_sum: f64,
    /// `(pixel, d value_sum / d depth)`.
    grads: Vec<(usize, f64)>,
}

/// Fits `n . X = 1` by least squares to the back-projected points of one
/// segment and returns the summed absolute depth residuals against the fit,
/// with their exact gradient (the fit is differentiated too).
fn fit_segment(pixels: &[usize], depth: &DepthMap, k: &CameraIntrinsics) -> Option<SegmentFit> {
    let w = depth.width;
    let rays: Vec<Vector3<f64>> = pixels.iter().map(|&i| k.ray((i % w) as f64, (i / w) as f64)).collect();
    let pts: Vec<Vector3<f64>> = pixels.iter().zip(&rays).map(|(&i, r)| r * depth.values[i]).collect();
    let mut m = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for x in &pts {
        m += x * x.transpose();
        b += x;
    }
    let eig = m.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(hi > 0.0) || lo <= RANK_TOLERANCE * hi {
        return None;
    }
    let m_inv = m.try_inverse()?;
    let n = m_inv * b;

    let mut value_sum = 0.0;
    let mut signs = Vec::with_capacity(pixels.len());
    let mut g = Vector3::zeros();
    for (&i, r) in pixels.iter().zip(&rays) {
        let nr = n.dot(r);
        if nr <= 0.0 {
            return None;
        }
        let e = depth.values[i] - 1.0 / nr;
        value_sum += e.abs();
        let s = if e > 0.0 {
            1.0
        } else if e < 0.0 {
            -1.0
        } else {
            0.0
        };
        signs.push(s);
        g -= r * (s / (nr * nr));
    }
    // d n / d d_i = M^-1 (r_i (1 - n.X_i) - X_i (n.r_i)), so the refit adds
    // -v . (...) with v = M^-1 g
    let v = m_inv * g;
    let grads = pixels
        .iter()
        .zip(rays.iter().zip(&pts))
        .zip(&signs)
        .map(|((&i, (r, x)), &s)| {
            let dn = r * (1.0 - n.dot(x)) - x * n.dot(r);
            (i, s - v.dot(&dn))
        })
        .collect();
    Some(SegmentFit { value_sum, grads })
}

/// Mean absolute difference between depth and its per-segment least-squares
/// plane, over all pixels of fitted segments.
pub fn planar_consistency_loss(depth: &DepthMap, segments: &SegmentMap, k: &CameraIntrinsics) -> Result<PlanarOutput> {
    if depth.dims() != (segments.width, segments.height) {
        return Err(Error::DimensionMismatch {
            expected: depth.dims(),
            got: (segments.width, segments.height),
        });
    }
    if depth.dims() != k.dims() {
        return Err(Error::DimensionMismatch {
            expected: k.dims(),
            got: depth.dims(),
        });
    }
    let n = depth.values.len();
    let mut skipped = Vec::new();
    let mut fits = Vec::new();
    for label in segments.labels_present() {
        let pixels: Vec<usize> = (0..n)
            .filter(|&i| segments.labels[i] == label && depth.valid[i])
            .collect();
        if pixels.len() < MIN_SEGMENT_PIXELS {
            skipped.push(label);
            continue;
        }
        match fit_segment(&pixels, depth, k) {
            Some(f) => fits.push((pixels.len(), f)),
            None => skipped.push(label),
        }
    }
    let count: usize = fits.iter().map(|(c, _)| c).sum();
    let mut grad = vec![0.0; n];
    if count == 0 {
        return Ok(PlanarOutput {
            value: 0.0,
            count: 0,
            empty: true,
            skipped,
            grad,
        });
    }
    let total = count as f64;
    let mut value = 0.0;
    for (_, f) in &fits {
        value += f.value_sum;
        for &(i, g) in &f.grads {
            grad[i] = g / total;
        }
    }
    Ok(PlanarOutput {
        value: value / total,
        count,
        empty: false,
        skipped,
        grad,
    })
}
