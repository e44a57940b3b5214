//! Finite-difference checks of every analytic gradient on random states.
//!
//! Each state is drawn from a seeded generator. A coordinate subset is
//! differentiated with central differences at step `h` and again at `h / 2`;
//! if the two disagree the state sits on a kink (a bilinear cell boundary, an
//! L1 corner, a validity flip) and is redrawn, so only differentiable points
//! are scored. The score of a state is the relative error
//! `|g - g_fd| / max(|g|, |g_fd|)` over its coordinate subset.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::{build_feature_pyramid, FeaturePyramid, PatchSet, PyramidConfig};
use crate::geometry::{CameraIntrinsics, FlowField, PoseChart};
use crate::imaging::{ImagePlane, Mask};
use crate::losses::{
    disparity_smoothness_loss, feature_synthesis_loss, flow_consistency_loss, patch_photometric_loss,
    planar_consistency_loss, smoothness_loss, CensusParams, DepthProblem, FrontEndConfig, LossConfig, SegmentMap,
    SourceInput,
};
use crate::synth::{render, SceneSpec};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTerm {
    PatchPhotometric,
    FlowSmoothness,
    FlowConsistency,
    FeatureSynthesis,
    Planar,
    DepthSmoothness,
    /// Full weighted depth objective with respect to log-depth and pose.
    DepthObjective,
}

impl GradTerm {
    pub const ALL: [GradTerm; 7] = [
        GradTerm::PatchPhotometric,
        GradTerm::FlowSmoothness,
        GradTerm::FlowConsistency,
        GradTerm::FeatureSynthesis,
        GradTerm::Planar,
        GradTerm::DepthSmoothness,
        GradTerm::DepthObjective,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradTerm::PatchPhotometric => "patch_photometric",
            GradTerm::FlowSmoothness => "flow_smoothness",
            GradTerm::FlowConsistency => "flow_consistency",
            GradTerm::FeatureSynthesis => "feature_synthesis",
            GradTerm::Planar => "planar",
            GradTerm::DepthSmoothness => "depth_smoothness",
            GradTerm::DepthObjective => "depth_objective",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub states: usize,
    pub width: usize,
    pub height: usize,
    pub step: f64,
    /// Coordinates differentiated per state.
    pub coords_per_state: usize,
    pub tolerance: f64,
    /// Attempts per state before giving up on finding a differentiable point.
    pub max_redraws: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            states: 100,
            width: 48,
            height: 32,
            step: 1e-5,
            coords_per_state: 24,
            tolerance: 1e-4,
            max_redraws: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub term: GradTerm,
    pub states: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// States rejected because they sat on a kink.
    pub redraws: usize,
    pub passed: bool,
}

/// A differentiable scalar function with its analytic gradient at `x0`.
struct Instance {
    x0: Vec<f64>,
    grad: Vec<f64>,
    f: Box<dyn Fn(&[f64]) -> Option<f64> + Sync>,
    /// Coordinates that must be included, checked with a finer step. A pose
    /// coordinate moves every pixel at once, so at the base step it almost
    /// surely crosses some bilinear cell edge or L1 corner.
    forced: Vec<usize>,
}

/// Step reduction applied to forced coordinates.
const FINE_STEP_FACTOR: f64 = 1e-2;

fn smooth_image(w: usize, h: usize, rng: &mut ChaCha8Rng) -> ImagePlane {
    let waves: Vec<[f64; 4]> = (0..5)
        .map(|_| {
            [
                rng.random_range(0.05..0.6),
                rng.random_range(0.05..0.6),
                rng.random_range(0.0..6.3),
                rng.random_range(0.03..0.08),
            ]
        })
        .collect();
    ImagePlane::from_fn(w, h, |x, y| {
        0.5 + waves
            .iter()
            .map(|[a, b, p, amp]| amp * (a * x as f64 + b * y as f64 + p).sin())
            .sum::<f64>()
    })
}

fn random_flow(w: usize, h: usize, amp: f64, rng: &mut ChaCha8Rng) -> FlowField {
    FlowField::from_fn(w, h, |_, _| (rng.random_range(-amp..amp), rng.random_range(-amp..amp)))
}

fn random_mask(w: usize, h: usize, keep: f64, rng: &mut ChaCha8Rng) -> Mask {
    Mask::from_vec(w, h, (0..w * h).map(|_| rng.random_bool(keep)).collect())
}

fn flow_vec(f: &FlowField) -> Vec<f64> {
    f.u.iter().chain(&f.v).copied().collect()
}

fn flow_from(x: &[f64], w: usize, h: usize) -> FlowField {
    FlowField::new(w, h, x[..w * h].to_vec(), x[w * h..].to_vec()).expect("flow size")
}

fn test_pyramid() -> PyramidConfig {
    PyramidConfig {
        channels: vec![8, 12, 16],
        first_level: 0,
    }
}

fn block_segments(w: usize, h: usize, rng: &mut ChaCha8Rng) -> SegmentMap {
    let bx = rng.random_range(w / 3..2 * w / 3);
    let by = rng.random_range(h / 3..2 * h / 3);
    SegmentMap::new(
        w,
        h,
        (0..w * h)
            .map(|i| 1 + (i % w >= bx) as u32 + 2 * (i / w >= by) as u32)
            .collect(),
    )
    .expect("segment size")
}

fn intrinsics(w: usize, h: usize) -> CameraIntrinsics {
    CameraIntrinsics::new(0.9 * w as f64, 0.9 * w as f64, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h)
        .expect("valid intrinsics")
}

fn instance(term: GradTerm, w: usize, h: usize, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let n = w * h;
    Ok(match term {
        GradTerm::PatchPhotometric => {
            let tgt = smooth_image(w, h, rng);
            let src = smooth_image(w, h, rng);
            let kps = (0..12)
                .map(|_| (rng.random_range(3..w - 3), rng.random_range(3..h - 3)))
                .collect();
            let patches = PatchSet::new(kps, 2);
            let flow = random_flow(w, h, 2.0, rng);
            let cp = CensusParams::default();
            let out = patch_photometric_loss(&tgt, &src, &flow, &patches, None, &cp)?;
            Instance {
                x0: flow_vec(&flow),
                grad: out.grad_u.iter().chain(&out.grad_v).copied().collect(),
                f: Box::new(move |x| {
                    patch_photometric_loss(&tgt, &src, &flow_from(x, w, h), &patches, None, &cp)
                        .ok()
                        .map(|o| o.value)
                }),
                forced: vec![],
            }
        }
        GradTerm::FlowSmoothness => {
            let img = smooth_image(w, h, rng);
            let flow = random_flow(w, h, 3.0, rng);
            let out = smoothness_loss(&flow, &img)?;
            Instance {
                x0: flow_vec(&flow),
                grad: out.grad_u.iter().chain(&out.grad_v).copied().collect(),
                f: Box::new(move |x| smoothness_loss(&flow_from(x, w, h), &img).ok().map(|o| o.value)),
                forced: vec![],
            }
        }
        GradTerm::FlowConsistency => {
            let a = random_flow(w, h, 4.0, rng);
            let b = random_flow(w, h, 4.0, rng);
            let mask = random_mask(w, h, 0.7, rng);
            let out = flow_consistency_loss(&a, &b, &mask)?;
            Instance {
                x0: flow_vec(&a),
                grad: out.grad_u.iter().chain(&out.grad_v).copied().collect(),
                f: Box::new(move |x| flow_consistency_loss(&flow_from(x, w, h), &b, &mask).ok().map(|o| o.value)),
                forced: vec![],
            }
        }
        GradTerm::FeatureSynthesis => {
            let cfg = test_pyramid();
            let tgt: FeaturePyramid = build_feature_pyramid(&smooth_image(w, h, rng), &cfg)?;
            let src = build_feature_pyramid(&smooth_image(w, h, rng), &cfg)?;
            let flow = random_flow(w, h, 2.0, rng);
            let mask = random_mask(w, h, 0.8, rng);
            let out = feature_synthesis_loss(&src, &tgt, &flow, Some(&mask))?;
            Instance {
                x0: flow_vec(&flow),
                grad: out.grad_u.iter().chain(&out.grad_v).copied().collect(),
                f: Box::new(move |x| {
                    feature_synthesis_loss(&src, &tgt, &flow_from(x, w, h), Some(&mask))
                        .ok()
                        .map(|o| o.value)
                }),
                forced: vec![],
            }
        }
        GradTerm::Planar => {
            let k = intrinsics(w, h);
            let seg = block_segments(w, h, rng);
            let planes: Vec<[f64; 3]> = (0..5)
                .map(|_| [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(0.25..0.6)])
                .collect();
            let depth: Vec<f64> = (0..n)
                .map(|i| {
                    let [a, b, c] = planes[seg.labels[i] as usize];
                    let r = k.ray((i % w) as f64, (i / w) as f64);
                    (1.0 / (a * r.x + b * r.y + c * r.z)) * (1.0 + rng.random_range(-0.05..0.05))
                })
                .collect();
            let dm = crate::geometry::DepthMap::new(w, h, depth.clone())?;
            let out = planar_consistency_loss(&dm, &seg, &k)?;
            Instance {
                x0: depth,
                grad: out.grad,
                f: Box::new(move |x| {
                    let dm = crate::geometry::DepthMap::new(w, h, x.to_vec()).ok()?;
                    planar_consistency_loss(&dm, &seg, &k).ok().map(|o| o.value)
                }),
                forced: vec![],
            }
        }
        GradTerm::DepthSmoothness => {
            let img = smooth_image(w, h, rng);
            let ld: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.5)).collect();
            let out = disparity_smoothness_loss(&ld, &img)?;
            Instance {
                x0: ld,
                grad: out.grad_log_depth,
                f: Box::new(move |x| disparity_smoothness_loss(x, &img).ok().map(|o| o.value)),
                forced: vec![],
            }
        }
        GradTerm::DepthObjective => {
            let spec = SceneSpec::random(intrinsics(w, h), rng.random());
            let scene = render(&spec)?;
            let front = FrontEndConfig {
                pyramid: test_pyramid(),
                max_keypoints: 60,
                ..FrontEndConfig::default()
            };
            let problem = DepthProblem::prepare(
                spec.intrinsics.clone(),
                scene.target.clone(),
                vec![SourceInput {
                    image: scene.source.clone(),
                    supervision: Some(scene.flow.clone()),
                    supervision_mask: Some(scene.occlusion.not()),
                    visibility: Some(scene.occlusion.not()),
                }],
                Some(scene.segments.clone()),
                LossConfig::default(),
                &front,
            )?;
            let mut x0: Vec<f64> = scene
                .depth
                .values
                .iter()
                .map(|d| d.ln() + rng.random_range(-0.1..0.1))
                .collect();
            let chart = spec.pose.to_chart();
            x0.extend(chart.0.iter().map(|c| c + rng.random_range(-0.01..0.01)));
            let split = move |x: &[f64]| (x[..n].to_vec(), vec![PoseChart(std::array::from_fn(|c| x[n + c]))]);
            let (ld, poses) = split(&x0);
            let ev = problem.evaluate(&ld, &poses, true)?;
            let mut grad = ev.grad_log_depth;
            grad.extend(ev.grad_pose[0]);
            Instance {
                x0,
                grad,
                f: Box::new(move |x| {
                    let (ld, poses) = split(x);
                    problem.evaluate(&ld, &poses, false).ok().map(|e| e.breakdown.total)
                }),
                forced: (n..n + 6).collect(),
            }
        }
    })
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative error of one state, or `None` when it sits on a kink.
fn score(inst: &Instance, coords: &[usize], h: f64) -> Option<f64> {
    let mut x = inst.x0.clone();
    let mut central = |i: usize, step: f64| -> Option<f64> {
        let orig = x[i];
        x[i] = orig + step;
        let fp = (inst.f)(&x);
        x[i] = orig - step;
        let fm = (inst.f)(&x);
        x[i] = orig;
        Some((fp? - fm?) / (2.0 * step))
    };
    let mut fd = Vec::with_capacity(coords.len());
    for &i in coords {
        let h = if inst.forced.contains(&i) { h * FINE_STEP_FACTOR } else { h };
        let full = central(i, h)?;
        let half = central(i, h / 2.0)?;
        if (full - half).abs() > 1e-6 * (full.abs() + half.abs()) + 1e-8 {
            return None;
        }
        fd.push(full);
    }
    let an: Vec<f64> = coords.iter().map(|&i| inst.grad[i]).collect();
    let diff = norm(an.iter().zip(&fd).map(|(a, b)| a - b));
    let scale = norm(an.iter().copied()).max(norm(fd.iter().copied()));
    if scale < 1e-12 {
        return Some(diff);
    }
    Some(diff / scale)
}

/// Half of the coordinates come from the gradient's support, the rest are
/// uniform so that missing gradient entries are caught too.
fn pick_coords(inst: &Instance, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let support: Vec<usize> = (0..inst.grad.len()).filter(|&i| inst.grad[i] != 0.0).collect();
    let mut coords = inst.forced.clone();
    let from_support = (count / 2).min(support.len());
    coords.extend(sample(rng, support.len(), from_support).into_iter().map(|k| support[k]));
    let rest = count.saturating_sub(coords.len()).min(inst.x0.len());
    coords.extend(sample(rng, inst.x0.len(), rest).into_iter());
    coords.sort_unstable();
    coords.dedup();
    coords
}

/// Checks one term on `cfg.states` random differentiable states.
pub fn check_term(term: GradTerm, cfg: &GradCheckConfig) -> Result<TermReport> {
    if cfg.width < 12 || cfg.height < 12 || !(cfg.step > 0.0) || cfg.states == 0 {
        return Err(Error::Config(
            "gradient check needs at least 12x12 pixels, a positive step and one state".into(),
        ));
    }
    let results: Vec<Result<(f64, usize)>> = (0..cfg.states)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((term as u64) << 48) ^ (s as u64).wrapping_mul(0x9E37_79B9));
            for attempt in 0..=cfg.max_redraws {
                let inst = match instance(term, cfg.width, cfg.height, &mut rng) {
                    Ok(i) => i,
                    Err(Error::Scene(_)) => continue,
                    Err(e) => return Err(e),
                };
                let coords = pick_coords(&inst, cfg.coords_per_state, &mut rng);
                if let Some(err) = score(&inst, &coords, cfg.step) {
                    return Ok((err, attempt));
                }
            }
            Err(Error::Config(format!(
                "{}: no differentiable state found for state {s} after {} redraws",
                term.name(),
                cfg.max_redraws
            )))
        })
        .collect();
    let mut errors = Vec::with_capacity(cfg.states);
    let mut redraws = 0;
    for r in results {
        let (e, a) = r?;
        errors.push(e);
        redraws += a;
    }
    let max_rel_error = errors.iter().copied().fold(0.0, f64::max);
    Ok(TermReport {
        term,
        states: cfg.states,
        max_rel_error,
        mean_rel_error: errors.iter().sum::<f64>() / errors.len() as f64,
        redraws,
        passed: max_rel_error < cfg.tolerance,
    })
}

pub fn check_all(cfg: &GradCheckConfig) -> Result<Vec<TermReport>> {
    GradTerm::ALL.iter().map(|&t| check_term(t, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_term_passes_a_small_check() {
        let cfg = GradCheckConfig {
            states: 4,
            ..GradCheckConfig::default()
        };
        for r in check_all(&cfg).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn broken_gradient_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut inst = instance(GradTerm::FlowConsistency, 16, 12, &mut rng).unwrap();
        for g in inst.grad.iter_mut() {
            *g *= 1.01;
        }
        let coords = pick_coords(&inst, 16, &mut rng);
        assert!(score(&inst, &coords, 1e-5).unwrap() > 1e-3);
    }

    #[test]
    fn term_names_round_trip() {
        for t in GradTerm::ALL {
            assert_eq!(GradTerm::parse(t.name()), Some(t));
        }
        assert_eq!(GradTerm::parse("nope"), None);
    }
}
