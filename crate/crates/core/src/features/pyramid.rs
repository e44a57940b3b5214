use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::imaging::{area_downsample, ImagePlane};
use crate::{Error, Result};

const ORIENTATIONS: usize = 8;
const CHANNELS_PER_SCALE: usize = 2 * ORIENTATIONS + 1;
const SCALES: usize = 12;
const BASE_SIGMA: f64 = 0.75;
const DOG_RATIO: f64 = 1.6;

/// Channel counts per pyramid level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PyramidConfig {
    /// Channel count of each level, finest first.
    pub channels: Vec<usize>,
    /// Resolution level of the first entry (0 = full resolution).
    pub first_level: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 96, 128, 192],
            first_level: 0,
        }
    }
}

/// One zero-DC filter tap list: `response(p) = sum_k w_k (I(p + o_k) - I(p))`.
#[derive(Clone, Debug)]
struct Filter {
    taps: Vec<(isize, isize, f64)>,
}

/// Fixed bank of oriented first and second Gaussian derivatives and a
/// difference of Gaussians, over a geometric ladder of scales.
///
/// Channels are ordered scale-major; asking for `n` channels takes the first
/// `n` filters. Every filter is written relative to the centre pixel, so a
/// constant image produces exactly zero in every channel.
#[derive(Clone, Debug)]
pub struct FilterBank {
    filters: Vec<Filter>,
}

fn gaussian(r2: f64, sigma: f64) -> f64 {
    (-r2 / (2.0 * sigma * sigma)).exp()
}

fn build_filter(radius: isize, f: impl Fn(f64, f64) -> f64) -> Filter {
    let mut taps = Vec::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dx == 0 && dy == 0 {
                continue;
            }
            let w = f(dx as f64, dy as f64);
            if w != 0.0 {
                taps.push((dx, dy, w));
            }
        }
    }
    Filter { taps }
}

impl FilterBank {
    pub const MAX_CHANNELS: usize = SCALES * CHANNELS_PER_SCALE;

    pub fn new(channels: usize) -> Result<Self> {
        if channels == 0 || channels > Self::MAX_CHANNELS {
            return Err(Error::Config(format!(
                "filter bank supports 1..={} channels, requested {channels}",
                Self::MAX_CHANNELS
            )));
        }
        let mut filters = Vec::with_capacity(channels);
        'outer: for s in 0..SCALES {
            let sigma = BASE_SIGMA * 2f64.sqrt().powi(s as i32);
            let radius = (3.0 * sigma).ceil() as isize;
            let norm: f64 = {
                let mut acc = 0.0;
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        acc += gaussian((dx * dx + dy * dy) as f64, sigma);
                    }
                }
                acc
            };
            for kind in 0..CHANNELS_PER_SCALE {
                if filters.len() == channels {
                    break 'outer;
                }
                let filter = if kind < ORIENTATIONS {
                    let th = std::f64::consts::PI * kind as f64 / ORIENTATIONS as f64;
                    let (c, sn) = (th.cos(), th.sin());
                    // sigma-normalised first derivative along (c, sn)
                    build_filter(radius, |x, y| {
                        (x * c + y * sn) / sigma * gaussian(x * x + y * y, sigma) / norm
                    })
                } else if kind < 2 * ORIENTATIONS {
                    let th = std::f64::consts::PI * (kind - ORIENTATIONS) as f64 / ORIENTATIONS as f64;
                    let (c, sn) = (th.cos(), th.sin());
                    build_filter(radius, |x, y| {
                        let t = (x * c + y * sn) / sigma;
                        (t * t - 1.0) * gaussian(x * x + y * y, sigma) / norm
                    })
                } else {
                    let big = DOG_RATIO * sigma;
                    let r2 = (3.0 * big).ceil() as isize;
                    let norm_big: f64 = {
                        let mut acc = 0.0;
                        for dy in -r2..=r2 {
                            for dx in -r2..=r2 {
                                acc += gaussian((dx * dx + dy * dy) as f64, big);
                            }
                        }
                        acc
                    };
                    let norm_small: f64 = {
                        let mut acc = 0.0;
                        for dy in -r2..=r2 {
                            for dx in -r2..=r2 {
                                acc += gaussian((dx * dx + dy * dy) as f64, sigma);
                            }
                        }
                        acc
                    };
                    build_filter(r2, |x, y| {
                        let r = x * x + y * y;
                        gaussian(r, sigma) / norm_small - gaussian(r, big) / norm_big
                    })
                };
                filters.push(filter);
            }
        }
        Ok(Self { filters })
    }

    pub fn channels(&self) -> usize {
        self.filters.len()
    }

    /// Filters a grayscale image with replicated borders.
    pub fn apply(&self, img: &ImagePlane) -> Result<ImagePlane> {
        if img.channels != 1 {
            return Err(Error::Config("filter bank expects a grayscale image".into()));
        }
        let (w, h) = img.dims();
        let responses: Vec<Vec<f64>> = self
            .filters
            .par_iter()
            .map(|f| {
                let mut out = vec![0.0; w * h];
                for y in 0..h {
                    for x in 0..w {
                        let centre = img.get(x, y, 0);
                        let mut acc = 0.0;
                        for &(dx, dy, wt) in &f.taps {
                            let nx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                            let ny = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                            acc += wt * (img.get(nx, ny, 0) - centre);
                        }
                        out[y * w + x] = acc;
                    }
                }
                out
            })
            .collect();
        let c = self.filters.len();
        let mut data = vec![0.0; w * h * c];
        for (k, resp) in responses.iter().enumerate() {
            for (i, v) in resp.iter().enumerate() {
                data[i * c + k] = *v;
            }
        }
        ImagePlane::new(w, h, c, data)
    }
}

/// Multi-channel feature maps at successive 2x reductions.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub first_level: usize,
    pub levels: Vec<ImagePlane>,
}

impl FeaturePyramid {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Same level structure: first level, sizes and channel counts.
    pub fn compatible(&self, other: &FeaturePyramid) -> bool {
        self.first_level == other.first_level
            && self.levels.len() == other.levels.len()
            && self
                .levels
                .iter()
                .zip(&other.levels)
                .all(|(a, b)| a.dims() == b.dims() && a.channels == b.channels)
    }
}

pub fn build_feature_pyramid(img: &ImagePlane, config: &PyramidConfig) -> Result<FeaturePyramid> {
    if config.channels.is_empty() {
        return Err(Error::Config("feature pyramid needs at least one level".into()));
    }
    let banks = config
        .channels
        .iter()
        .map(|&c| FilterBank::new(c))
        .collect::<Result<Vec<_>>>()?;
    let mut level_img = img.to_gray();
    for _ in 0..config.first_level {
        level_img = downsample_checked(&level_img)?;
    }
    let mut levels = Vec::with_capacity(banks.len());
    for (i, bank) in banks.iter().enumerate() {
        if i > 0 {
            level_img = downsample_checked(&level_img)?;
        }
        levels.push(bank.apply(&level_img)?);
    }
    Ok(FeaturePyramid {
        first_level: config.first_level,
        levels,
    })
}

fn downsample_checked(img: &ImagePlane) -> Result<ImagePlane> {
    if img.width < 2 || img.height < 2 {
        return Err(Error::Config(format!(
            "image of size {}x{} is too small for the requested pyramid depth",
            img.width, img.height
        )));
    }
    Ok(area_downsample(img))
}
