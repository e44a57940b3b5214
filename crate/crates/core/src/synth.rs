//! Ray-cast planar scenes with analytic depth, flow, occlusion and
//! segmentation.
//!
//! A scene is a stack of planar patches seen from a target camera and a
//! source camera `T` (target to source). Each patch lies on `n . X = offset`
//! in the target frame and covers a rectangle of target pixels (or the whole
//! plane). Textures are functions of target pixel coordinates, so both views
//! see the same surface pattern. Ground-truth flow comes from the plane
//! homography `K (R + t n^T / offset) K^-1`, independently of
//! [`crate::geometry::rigid_flow`].

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, DepthMap, FlowField, PoseSE3};
use crate::imaging::{ImagePlane, Mask};
use crate::losses::{SegmentMap, MIN_SEGMENT_PIXELS};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Flat,
    /// Smooth checker `sin(2 pi u / period) sin(2 pi v / period)`.
    Checker { period: f64, amplitude: f64 },
    /// Value noise with smoothstep interpolation, `octaves` octaves starting
    /// at a lattice spacing of `scale` pixels.
    Noise { scale: f64, octaves: u32, amplitude: f64 },
}

impl Texture {
    fn amplitude(&self) -> f64 {
        match self {
            Texture::Flat => 0.0,
            Texture::Checker { amplitude, .. } | Texture::Noise { amplitude, .. } => *amplitude,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanarPatch {
    /// Plane normal in the target frame; the plane is `normal . X = offset`.
    pub normal: [f64; 3],
    pub offset: f64,
    /// Target pixel rectangle `[x0, y0, x1, y1)` covered by the patch, in
    /// whole pixels; `None` covers the whole plane.
    #[serde(default)]
    pub rect: Option<[i64; 4]>,
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub intrinsics: CameraIntrinsics,
    /// Target-to-source camera motion.
    pub pose: PoseSE3,
    pub patches: Vec<PlanarPatch>,
    #[serde(default = "default_albedo")]
    pub base_albedo: f64,
    /// Width in pixels over which a bounded patch's texture fades in.
    #[serde(default = "default_taper")]
    pub taper: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_albedo() -> f64 {
    0.5
}

fn default_taper() -> f64 {
    4.0
}

/// Everything [`render`] produces.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRender {
    pub target: ImagePlane,
    pub source: ImagePlane,
    pub depth: DepthMap,
    pub source_depth: DepthMap,
    /// Target-to-source flow.
    pub flow: FlowField,
    /// Source-to-target flow, zero where the source sees no patch.
    pub backward_flow: FlowField,
    /// Target pixels hidden in the source view or leaving it.
    pub occlusion: Mask,
    pub segments: SegmentMap,
    /// Target pixels whose texture modulation is non-zero.
    pub textured: Mask,
}

impl SceneRender {
    /// Mean target depth, the usual initial depth prior.
    pub fn mean_depth(&self) -> f64 {
        self.depth.values.iter().sum::<f64>() / self.depth.values.len() as f64
    }
}

/// Pixels that are untextured together with all of their in-image
/// neighbours, so their intensity gradient is exactly zero before noise.
pub fn flat_region(textured: &Mask) -> Mask {
    let (w, h) = (textured.width, textured.height);
    let mut out = Mask::new(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let mut flat = true;
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    flat &= !textured.get(xx, yy);
                }
            }
            out.data[y * w + x] = flat;
        }
    }
    out
}

struct Patch {
    n: Vector3<f64>,
    offset: f64,
    /// Plane in the source frame.
    n_src: Vector3<f64>,
    offset_src: f64,
    rect: Option<[f64; 4]>,
    texture: Texture,
    phase: [f64; 2],
    noise_seed: u64,
}

impl Patch {
    fn contains(&self, u: f64, v: f64) -> bool {
        match self.rect {
            None => true,
            Some([x0, y0, x1, y1]) => u >= x0 && u < x1 && v >= y0 && v < y1,
        }
    }

    fn taper(&self, u: f64, v: f64, width: f64) -> f64 {
        match self.rect {
            None => 1.0,
            Some([x0, y0, x1, y1]) => {
                let d = (u - x0).min(x1 - u).min(v - y0).min(y1 - v).max(0.0);
                let t = (d / width).min(1.0);
                t * t * (3.0 - 2.0 * t)
            }
        }
    }

    /// Texture modulation at target pixel coordinates.
    fn modulation(&self, u: f64, v: f64, taper: f64) -> f64 {
        let pattern = match &self.texture {
            Texture::Flat => return 0.0,
            Texture::Checker { period, amplitude } => {
                let k = 2.0 * std::f64::consts::PI / period;
                amplitude * (k * (u + self.phase[0])).sin() * (k * (v + self.phase[1])).sin()
            }
            Texture::Noise {
                scale,
                octaves,
                amplitude,
            } => amplitude * value_noise(u + self.phase[0], v + self.phase[1], *scale, *octaves, self.noise_seed),
        };
        pattern * self.taper(u, v, taper)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Lattice value in `[-1, 1]`.
fn lattice(ix: i64, iy: i64, octave: u32, seed: u64) -> f64 {
    let h = splitmix(seed ^ splitmix((ix as u64) ^ splitmix((iy as u64) ^ splitmix(octave as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn value_noise(u: f64, v: f64, scale: f64, octaves: u32, seed: u64) -> f64 {
    let mut total = 0.0;
    let mut norm = 0.0;
    let mut amp = 1.0;
    let mut spacing = scale;
    for o in 0..octaves.max(1) {
        let (x, y) = (u / spacing, v / spacing);
        let (fx, fy) = (x.floor(), y.floor());
        let (ix, iy) = (fx as i64, fy as i64);
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (ax, ay) = (s(x - fx), s(y - fy));
        let top = (1.0 - ax) * lattice(ix, iy, o, seed) + ax * lattice(ix + 1, iy, o, seed);
        let bot = (1.0 - ax) * lattice(ix, iy + 1, o, seed) + ax * lattice(ix + 1, iy + 1, o, seed);
        total += amp * ((1.0 - ay) * top + ay * bot);
        norm += amp;
        amp *= 0.5;
        spacing *= 0.5;
    }
    total / norm
}

/// Nearest patch hit along a source ray: `(patch, source depth, target pixel)`.
fn cast_source_ray(patches: &[Patch], spec: &SceneSpec, qx: f64, qy: f64) -> Option<(usize, f64, [f64; 2])> {
    let k = &spec.intrinsics;
    let r = k.ray(qx, qy);
    let rt = spec.pose.rotation.transpose();
    let mut best: Option<(usize, f64, [f64; 2])> = None;
    for (j, p) in patches.iter().enumerate() {
        let nr = p.n_src.dot(&r);
        if nr <= 0.0 {
            continue;
        }
        let z = p.offset_src / nr;
        let xt = rt * (r * z - spec.pose.translation);
        if xt.z <= 0.0 {
            continue;
        }
        let u = k.fx * xt.x / xt.z + k.cx;
        let v = k.fy * xt.y / xt.z + k.cy;
        if !p.contains(u, v) {
            continue;
        }
        if best.is_none_or(|b| z < b.1) {
            best = Some((j, z, [u, v]));
        }
    }
    best
}

fn build_patches(spec: &SceneSpec) -> Result<Vec<Patch>> {
    let k = &spec.intrinsics;
    if spec.patches.is_empty() {
        return Err(Error::Scene("scene has no patches".into()));
    }
    if !spec.pose.is_valid() {
        return Err(Error::Scene("pose rotation is not orthonormal".into()));
    }
    if !(spec.noise_sigma >= 0.0) || !(spec.taper > 0.0) {
        return Err(Error::Scene("noise sigma must be >= 0 and taper > 0".into()));
    }
    let (w, h) = (k.width as f64, k.height as f64);
    let corners = [(0.0, 0.0), (w - 1.0, 0.0), (0.0, h - 1.0), (w - 1.0, h - 1.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.patches.len());
    for (j, p) in spec.patches.iter().enumerate() {
        let n = Vector3::from(p.normal);
        if !(n.norm() > 0.0) || !(p.offset > 0.0) {
            return Err(Error::Scene(format!(
                "patch {j}: plane must have a non-zero normal and pass in front of the camera"
            )));
        }
        let n_src = spec.pose.rotation * n;
        let offset_src = p.offset + n_src.dot(&spec.pose.translation);
        if !(offset_src > 0.0) {
            return Err(Error::Scene(format!("patch {j}: plane passes behind the source camera")));
        }
        for (x, y) in corners {
            if n.dot(&k.ray(x, y)) <= 0.0 || n_src.dot(&k.ray(x, y)) <= 0.0 {
                return Err(Error::Scene(format!(
                    "patch {j}: plane does not have positive depth over the whole view"
                )));
            }
        }
        if p.texture.amplitude() < 0.0 {
            return Err(Error::Scene(format!("patch {j}: negative texture amplitude")));
        }
        if let Some([x0, y0, x1, y1]) = p.rect {
            if x1 <= x0 || y1 <= y0 {
                return Err(Error::Scene(format!("patch {j}: empty rectangle")));
            }
        }
        out.push(Patch {
            n,
            offset: p.offset,
            n_src,
            offset_src,
            // pixel centres of columns x0..x1 lie inside [x0 - 0.5, x1 - 0.5)
            rect: p
                .rect
                .map(|[x0, y0, x1, y1]| [x0 as f64 - 0.5, y0 as f64 - 0.5, x1 as f64 - 0.5, y1 as f64 - 0.5]),
            texture: p.texture.clone(),
            phase: [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)],
            noise_seed: rng.random(),
        });
    }
    Ok(out)
}

struct TargetPixel {
    patch: usize,
    depth: f64,
    value: f64,
    textured: bool,
    flow: (f64, f64),
    occluded: bool,
}

/// Renders both views and all ground truth.
pub fn render(spec: &SceneSpec) -> Result<SceneRender> {
    let patches = build_patches(spec)?;
    let k = &spec.intrinsics;
    let (w, h) = k.dims();
    let km = k.matrix();
    let k_inv = km
        .try_inverse()
        .ok_or_else(|| Error::Scene("intrinsics are singular".into()))?;
    let (rot, t) = (spec.pose.rotation, spec.pose.translation);
    let homographies: Vec<Matrix3<f64>> = patches
        .iter()
        .map(|p| km * (rot + t * p.n.transpose() / p.offset) * k_inv)
        .collect();

    let target_pixels: Vec<Option<TargetPixel>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let r = k.ray(x, y);
            let (j, depth) = patches
                .iter()
                .enumerate()
                .filter(|(_, p)| p.contains(x, y))
                .map(|(j, p)| (j, p.offset / p.n.dot(&r)))
                .min_by(|a, b| a.1.total_cmp(&b.1))?;
            let m = patches[j].modulation(x, y, spec.taper);
            let hp = homographies[j] * Vector3::new(x, y, 1.0);
            let flow = (hp.x / hp.z - x, hp.y / hp.z - y);
            let (sx, sy) = (x + flow.0, y + flow.1);
            let in_view = sx >= 0.0 && sx <= (w - 1) as f64 && sy >= 0.0 && sy <= (h - 1) as f64;
            let occluded = !in_view || {
                let z_here = (rot * (r * depth) + t).z;
                match cast_source_ray(&patches, spec, sx, sy) {
                    Some((jj, z, _)) => jj != j && z < z_here * (1.0 - 1e-9),
                    None => true,
                }
            };
            Some(TargetPixel {
                patch: j,
                depth,
                value: spec.base_albedo + m,
                textured: m != 0.0,
                flow,
                occluded,
            })
        })
        .collect();
    if target_pixels.iter().any(|p| p.is_none()) {
        return Err(Error::Scene("some target pixels see no patch".into()));
    }
    let target_pixels: Vec<TargetPixel> = target_pixels.into_iter().flatten().collect();

    let source_pixels: Vec<Option<(f64, f64, [f64; 2])>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            cast_source_ray(&patches, spec, x, y).map(|(j, z, [u, v])| {
                (spec.base_albedo + patches[j].modulation(u, v, spec.taper), z, [u - x, v - y])
            })
        })
        .collect();

    let mut target = ImagePlane::from_fn(w, h, |x, y| target_pixels[y * w + x].value);
    let mut source = ImagePlane::from_fn(w, h, |x, y| {
        source_pixels[y * w + x].map(|s| s.0).unwrap_or(spec.base_albedo)
    });
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Scene(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(spec.seed ^ 0x5EED));
        for v in target.data.iter_mut().chain(source.data.iter_mut()) {
            *v += normal.sample(&mut rng);
        }
    }

    let depth = DepthMap::new(w, h, target_pixels.iter().map(|p| p.depth).collect())?;
    let source_depth = DepthMap::new(w, h, source_pixels.iter().map(|s| s.map_or(0.0, |s| s.1)).collect())?;
    let flow = FlowField::new(
        w,
        h,
        target_pixels.iter().map(|p| p.flow.0).collect(),
        target_pixels.iter().map(|p| p.flow.1).collect(),
    )?;
    let backward_flow = FlowField::new(
        w,
        h,
        source_pixels.iter().map(|s| s.map_or(0.0, |s| s.2[0])).collect(),
        source_pixels.iter().map(|s| s.map_or(0.0, |s| s.2[1])).collect(),
    )?;
    let occlusion = Mask::from_vec(w, h, target_pixels.iter().map(|p| p.occluded).collect());
    let textured = Mask::from_vec(w, h, target_pixels.iter().map(|p| p.textured).collect());

    let mut labels: Vec<u32> = target_pixels.iter().map(|p| p.patch as u32 + 1).collect();
    for label in 1..=patches.len() as u32 {
        if labels.iter().filter(|&&l| l == label).count() < MIN_SEGMENT_PIXELS {
            labels.iter_mut().filter(|l| **l == label).for_each(|l| *l = 0);
        }
    }
    Ok(SceneRender {
        target,
        source,
        depth,
        source_depth,
        flow,
        backward_flow,
        occlusion,
        segments: SegmentMap::new(w, h, labels)?,
        textured,
    })
}

/// Default camera for the presets: 96 rows by 128 columns.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(110.0, 110.0, 63.5, 47.5, 128, 96).expect("valid preset intrinsics")
}

fn default_pose() -> PoseSE3 {
    PoseSE3::from_axis_angle(Vector3::new(0.01, -0.015, 0.004), Vector3::new(0.15, 0.03, 0.05))
}

impl SceneSpec {
    /// Textured slanted background at about 4 m with a textured foreground
    /// rectangle at about 2 m.
    pub fn textured_two_plane(seed: u64) -> Self {
        Self {
            intrinsics: default_intrinsics(),
            pose: default_pose(),
            patches: vec![
                PlanarPatch {
                    normal: [0.1, -0.08, 1.0],
                    offset: 4.0,
                    rect: None,
                    texture: Texture::Noise {
                        scale: 10.0,
                        octaves: 2,
                        amplitude: 0.3,
                    },
                },
                PlanarPatch {
                    normal: [-0.05, 0.03, 1.0],
                    offset: 2.0,
                    rect: Some([40, 22, 92, 70]),
                    texture: Texture::Noise {
                        scale: 8.0,
                        octaves: 2,
                        amplitude: 0.3,
                    },
                },
            ],
            base_albedo: 0.5,
            taper: 4.0,
            noise_sigma: 0.002,
            seed,
        }
    }

    /// Perfectly flat wall (most of the view) with a textured box, a textured
    /// poster on the wall and a textured slab along the bottom.
    pub fn low_texture(seed: u64) -> Self {
        let noise = |scale: f64| Texture::Noise {
            scale,
            octaves: 2,
            amplitude: 0.3,
        };
        Self {
            intrinsics: default_intrinsics(),
            pose: default_pose(),
            patches: vec![
                PlanarPatch {
                    normal: [0.05, -0.05, 1.0],
                    offset: 3.5,
                    rect: None,
                    texture: Texture::Flat,
                },
                PlanarPatch {
                    normal: [0.0, 0.0, 1.0],
                    offset: 2.2,
                    rect: Some([20, 24, 56, 60]),
                    texture: noise(8.0),
                },
                PlanarPatch {
                    normal: [0.05, -0.05, 1.0],
                    offset: 3.49,
                    rect: Some([84, 16, 116, 44]),
                    texture: noise(8.0),
                },
                PlanarPatch {
                    normal: [0.0, 0.6, 1.0],
                    offset: 3.0,
                    rect: Some([0, 70, 128, 96]),
                    texture: noise(10.0),
                },
            ],
            base_albedo: 0.5,
            taper: 4.0,
            noise_sigma: 0.002,
            seed,
        }
    }

    /// A single textured fronto-parallel plane at `depth`.
    pub fn fronto_parallel(intrinsics: CameraIntrinsics, depth: f64, pose: PoseSE3, seed: u64) -> Self {
        Self {
            intrinsics,
            pose,
            patches: vec![PlanarPatch {
                normal: [0.0, 0.0, 1.0],
                offset: depth,
                rect: None,
                texture: Texture::Noise {
                    scale: 6.0,
                    octaves: 2,
                    amplitude: 0.3,
                },
            }],
            base_albedo: 0.5,
            taper: 4.0,
            noise_sigma: 0.0,
            seed,
        }
    }

    /// Random scene for oracle tests: a slanted textured background and one to
    /// three bounded patches in front of it, under a random small motion.
    pub fn random(intrinsics: CameraIntrinsics, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (intrinsics.width as i64, intrinsics.height as i64);
        let mut patches = vec![PlanarPatch {
            normal: [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15), 1.0],
            offset: rng.random_range(3.5..6.0),
            rect: None,
            texture: Texture::Noise {
                scale: 7.0,
                octaves: 3,
                amplitude: 0.3,
            },
        }];
        for _ in 0..rng.random_range(1..=3) {
            let x0 = rng.random_range(0..w / 2);
            let y0 = rng.random_range(0..h / 2);
            patches.push(PlanarPatch {
                normal: [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15), 1.0],
                offset: rng.random_range(1.5..3.0),
                rect: Some([x0, y0, x0 + rng.random_range(8..w / 2), y0 + rng.random_range(8..h / 2)]),
                texture: Texture::Checker {
                    period: rng.random_range(6.0..14.0),
                    amplitude: 0.25,
                },
            });
        }
        let aa = Vector3::new(
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.02..0.02),
        );
        let t = Vector3::new(
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
        );
        Self {
            intrinsics,
            pose: PoseSE3::from_axis_angle(aa, t),
            patches,
            base_albedo: 0.5,
            taper: 4.0,
            noise_sigma: 0.0,
            seed,
        }
    }
}
