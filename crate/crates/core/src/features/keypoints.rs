use serde::{Deserialize, Serialize};

use crate::imaging::ImagePlane;
use crate::{Error, Result};

/// Block-wise gradient keypoint selection parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeypointParams {
    /// Side of the square selection blocks, in pixels.
    pub block_size: usize,
    /// Added to the block's median gradient magnitude to form its threshold.
    pub threshold_offset: f64,
    /// Patch offset radius: offsets are `{-r, 0, r}` on both axes.
    pub radius: usize,
}

impl Default for KeypointParams {
    fn default() -> Self {
        Self {
            block_size: 8,
            threshold_offset: 7.0 / 255.0,
            radius: 2,
        }
    }
}

/// Keypoints with the dilated 3x3 patch around each one.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct PatchSet {
    pub keypoints: Vec<(usize, usize)>,
    pub radius: usize,
}

impl PatchSet {
    pub fn new(keypoints: Vec<(usize, usize)>, radius: usize) -> Self {
        Self { keypoints, radius }
    }

    pub fn offsets(&self) -> [(isize, isize); 9] {
        let r = self.radius as isize;
        let mut out = [(0, 0); 9];
        let mut k = 0;
        for dy in [-r, 0, r] {
            for dx in [-r, 0, r] {
                out[k] = (dx, dy);
                k += 1;
            }
        }
        out
    }

    /// Every patch pixel, patch by patch (pixels shared by two patches repeat).
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let offsets = self.offsets();
        self.keypoints.iter().flat_map(move |&(x, y)| {
            offsets
                .into_iter()
                .map(move |(dx, dy)| ((x as isize + dx) as usize, (y as isize + dy) as usize))
        })
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    /// True when every patch footprint lies inside a `width x height` image.
    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.keypoints
            .iter()
            .all(|&(x, y)| x >= self.radius && y >= self.radius && x + self.radius < width && y + self.radius < height)
    }
}

/// Central-difference gradient magnitude; zero on the image border.
pub fn gradient_magnitude(img: &ImagePlane) -> Vec<f64> {
    let (w, h) = img.dims();
    let mut out = vec![0.0; w * h];
    if w < 3 || h < 3 {
        return out;
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = 0.5 * (img.get(x + 1, y, 0) - img.get(x - 1, y, 0));
            let gy = 0.5 * (img.get(x, y + 1, 0) - img.get(x, y - 1, 0));
            out[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

fn lower_median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    values[(values.len() - 1) / 2]
}

/// Selects at most one keypoint per block: the block's strongest gradient,
/// kept only if it exceeds the block median plus `threshold_offset`. Points
/// whose patch would leave the image are dropped, and the survivors are
/// capped at `max_points` by descending gradient magnitude.
pub fn extract_keypoints(img: &ImagePlane, max_points: usize, params: &KeypointParams) -> Result<PatchSet> {
    if img.channels != 1 {
        return Err(Error::Config("keypoint extraction expects a grayscale image".into()));
    }
    if max_points == 0 {
        return Err(Error::Config("max_points must be at least 1".into()));
    }
    if params.block_size == 0 || !(params.threshold_offset > 0.0) {
        return Err(Error::Config("keypoint block size and threshold offset must be positive".into()));
    }
    let (w, h) = img.dims();
    let r = params.radius;
    let grad = gradient_magnitude(img);
    let d = params.block_size;
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    let mut block = Vec::with_capacity(d * d);
    for by in (0..h).step_by(d) {
        for bx in (0..w).step_by(d) {
            block.clear();
            let mut best: Option<(f64, usize, usize)> = None;
            for y in by..(by + d).min(h) {
                for x in bx..(bx + d).min(w) {
                    let g = grad[y * w + x];
                    block.push(g);
                    if best.is_none_or(|(bg, _, _)| g > bg) {
                        best = Some((g, x, y));
                    }
                }
            }
            let threshold = lower_median(&mut block) + params.threshold_offset;
            if let Some((g, x, y)) = best {
                let fits = x >= r && y >= r && x + r < w && y + r < h;
                if g > threshold && fits {
                    candidates.push((g, x, y));
                }
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
    candidates.truncate(max_points);
    Ok(PatchSet::new(candidates.into_iter().map(|(_, x, y)| (x, y)).collect(), r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_image_has_no_keypoints() {
        let p = extract_keypoints(&ImagePlane::filled(32, 24, 1, 0.5), 100, &KeypointParams::default()).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn bright_dot_keypoints_stay_close() {
        let img = ImagePlane::from_fn(40, 30, |x, y| if (x, y) == (17, 12) { 1.0 } else { 0.0 });
        let p = extract_keypoints(&img, 100, &KeypointParams::default()).unwrap();
        assert!(!p.is_empty());
        for &(x, y) in &p.keypoints {
            let dist = ((x as f64 - 17.0).powi(2) + (y as f64 - 12.0).powi(2)).sqrt();
            assert!(dist <= 2.0, "keypoint {x},{y} too far from the dot");
        }
    }

    #[test]
    fn offsets_are_dilated_grid() {
        let p = PatchSet::new(vec![(5, 5)], 2);
        let px: Vec<_> = p.pixels().collect();
        assert_eq!(px.len(), 9);
        assert!(px.contains(&(3, 3)) && px.contains(&(7, 7)) && px.contains(&(5, 5)));
        assert!(!px.contains(&(4, 5)));
    }

    #[test]
    fn cap_keeps_strongest() {
        let img = ImagePlane::from_fn(64, 64, |x, y| ((x * 7 + y * 13) % 11) as f64 / 10.0 * (x as f64 / 64.0));
        let all = extract_keypoints(&img, 1000, &KeypointParams::default()).unwrap();
        let few = extract_keypoints(&img, 5, &KeypointParams::default()).unwrap();
        assert_eq!(few.len(), 5);
        let grad = gradient_magnitude(&img);
        let weakest_kept = few.keypoints.iter().map(|&(x, y)| grad[y * 64 + x]).fold(f64::MAX, f64::min);
        for &(x, y) in all.keypoints.iter().filter(|k| !few.keypoints.contains(k)) {
            assert!(grad[y * 64 + x] <= weakest_kept);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let img = ImagePlane::filled(8, 8, 1, 0.0);
        assert!(extract_keypoints(&img, 0, &KeypointParams::default()).is_err());
        assert!(extract_keypoints(&ImagePlane::filled(8, 8, 3, 0.0), 1, &KeypointParams::default()).is_err());
    }

    proptest! {
        #[test]
        fn footprints_stay_in_bounds(seed in 0u64..1000, w in 6usize..40, h in 6usize..40, r in 1usize..4) {
            let img = ImagePlane::from_fn(w, h, |x, y| {
                let v = (x as u64 * 2654435761 ^ y as u64 * 40503 ^ seed).wrapping_mul(0x9E3779B97F4A7C15);
                (v >> 11) as f64 / (1u64 << 53) as f64
            });
            let params = KeypointParams { radius: r, ..KeypointParams::default() };
            let p = extract_keypoints(&img, 1000, &params).unwrap();
            prop_assert!(p.fits(w, h));
            let grad = gradient_magnitude(&img);
            for &(x, y) in &p.keypoints {
                prop_assert!(grad[y * w + x] > params.threshold_offset);
            }
            let mut uniq = p.keypoints.clone();
            uniq.sort();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), p.len());
        }
    }
}
