use crate::imaging::ImagePlane;
use crate::{Error, Result};

/// Offsets of the eight neighbours compared by the census transform.
pub const NEIGHBOURS: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

/// Deadband of the ternary comparison, in normalised intensity.
pub const DEFAULT_CENSUS_EPSILON: f64 = 0.02;

/// Constant in the robust per-position code distance `d^2 / (d^2 + c)`.
pub const CENSUS_DISTANCE_SOFTNESS: f64 = 0.81;

/// Ternary census codes over the 3x3 neighbourhood (centre excluded).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CensusMap {
    pub width: usize,
    pub height: usize,
    pub codes: Vec<[i8; 8]>,
    /// `false` on the one-pixel border, where codes use clamped neighbours.
    pub interior: Vec<bool>,
}

impl CensusMap {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[i8; 8] {
        &self.codes[y * self.width + x]
    }
}

/// Sign with a deadband of half-width `eps`.
#[inline]
pub fn ternary_code(diff: f64, eps: f64) -> i8 {
    if diff > eps {
        1
    } else if diff < -eps {
        -1
    } else {
        0
    }
}

/// Smooth ternary code `d / sqrt(d^2 + eps^2)`: near zero inside the deadband,
/// saturating to +-1 outside it.
#[inline]
pub fn soft_code(diff: f64, eps: f64) -> f64 {
    diff / (diff * diff + eps * eps).sqrt()
}

#[inline]
pub fn soft_code_derivative(diff: f64, eps: f64) -> f64 {
    let s = diff * diff + eps * eps;
    eps * eps / (s * s.sqrt())
}

pub fn census_transform(img: &ImagePlane, eps: f64) -> Result<CensusMap> {
    if img.channels != 1 {
        return Err(Error::Config("census transform expects a grayscale image".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("census threshold must be positive, got {eps}")));
    }
    let (w, h) = img.dims();
    let mut codes = Vec::with_capacity(w * h);
    let mut interior = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let centre = img.get(x, y, 0);
            let mut code = [0i8; 8];
            for (j, (dx, dy)) in NEIGHBOURS.iter().enumerate() {
                let nx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                let ny = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                code[j] = ternary_code(img.get(nx, ny, 0) - centre, eps);
            }
            codes.push(code);
            interior.push(x > 0 && y > 0 && x + 1 < w && y + 1 < h);
        }
    }
    Ok(CensusMap {
        width: w,
        height: h,
        codes,
        interior,
    })
}

/// Robust Hamming-like distance between two code vectors.
pub fn census_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d2 = (x - y) * (x - y);
            d2 / (d2 + CENSUS_DISTANCE_SOFTNESS)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> ImagePlane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImagePlane::new(w, h, 1, (0..w * h).map(|_| rng.random::<f64>() * 0.6).collect()).unwrap()
    }

    #[test]
    fn constant_image_gives_zero_codes() {
        let c = census_transform(&ImagePlane::filled(6, 5, 1, 0.4), 0.02).unwrap();
        assert!(c.codes.iter().all(|code| code.iter().all(|&v| v == 0)));
    }

    #[test]
    fn additive_shift_invariance() {
        let img = random_image(20, 15, 1);
        let a = census_transform(&img, 0.02).unwrap();
        for shift in [0.3, -0.3, 0.125] {
            let b = census_transform(&img.map(|v| v + shift), 0.02).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn matches_loop_oracle() {
        let img = random_image(9, 7, 2);
        let eps = 0.05;
        let c = census_transform(&img, eps).unwrap();
        for y in 0..7usize {
            for x in 0..9usize {
                let mut j = 0;
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let nx = (x as i32 + dx).clamp(0, 8) as usize;
                        let ny = (y as i32 + dy).clamp(0, 6) as usize;
                        let d = img.get(nx, ny, 0) - img.get(x, y, 0);
                        let expected = if d > eps { 1 } else if d < -eps { -1 } else { 0 };
                        assert_eq!(c.at(x, y)[j], expected);
                        j += 1;
                    }
                }
                assert_eq!(c.interior[y * 9 + x], x > 0 && y > 0 && x < 8 && y < 6);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(census_transform(&ImagePlane::filled(3, 3, 2, 0.0), 0.02).is_err());
        assert!(census_transform(&ImagePlane::filled(3, 3, 1, 0.0), 0.0).is_err());
    }

    #[test]
    fn distance_examples() {
        let a = [1.0, -1.0, 0.0, 1.0, 1.0, -1.0, 0.0, 1.0];
        assert_eq!(census_distance(&a, &a), 0.0);
        let p = [1.0; 8];
        let m = [-1.0; 8];
        let d = census_distance(&p, &m);
        assert!((d - 8.0 * 4.0 / 4.81).abs() < 1e-12);
        assert!((d - 6.653).abs() < 1e-3);
        assert_eq!(census_distance(&p, &m), census_distance(&m, &p));
        assert!(d < 8.0);
    }

    #[test]
    fn distance_is_monotone_in_hard_hamming() {
        // more differing positions never lowers the distance
        let base = [0.0; 8];
        let mut prev = 0.0;
        for k in 0..=8 {
            let mut other = [0.0; 8];
            other.iter_mut().take(k).for_each(|v| *v = 1.0);
            let d = census_distance(&base, &other);
            assert!(d >= prev);
            prev = d;
        }
    }

    #[test]
    fn soft_code_limits() {
        let eps = 0.02;
        assert_eq!(soft_code(0.0, eps), 0.0);
        assert!(soft_code(0.5, eps) > 0.99);
        assert!(soft_code(-0.5, eps) < -0.99);
        let h = 1e-7;
        for d in [-0.1, -0.01, 0.0, 0.003, 0.04] {
            let fd = (soft_code(d + h, eps) - soft_code(d - h, eps)) / (2.0 * h);
            assert!((fd - soft_code_derivative(d, eps)).abs() < 1e-5 * fd.abs().max(1.0));
        }
    }
}
