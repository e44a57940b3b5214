//! First-order descent on log-depth (and optionally pose) with a backtracking
//! line search, plus the central-difference gradient used as a test oracle.
//!
//! Two direction rules are available. [`DescentRule::Gradient`] is scaled
//! steepest descent with one global step. [`DescentRule::PerCoordinate`]
//! (the default) gives every coordinate its own step multiplier, grown while
//! its partial derivative keeps its sign and halved when the sign flips.
//! Most terms are L1, so the objective is riddled with per-pixel kinks; a
//! single global step has to shrink to the distance of the nearest kink and
//! steepest descent stalls, while per-coordinate steps only shrink where a
//! kink is actually being crossed. Each per-coordinate move is also clipped
//! to a small bound. Both rules produce descent directions and
//! every move passes the same Armijo test, so the loss never increases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{DepthMap, PoseChart, PoseSE3};
use crate::losses::{DepthEvaluation, DepthProblem, LossBreakdown};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub max_iterations: usize,
    /// Sufficient-decrease constant of the Armijo test.
    pub armijo: f64,
    /// Step multiplier applied on each rejected trial.
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    /// Step multiplier applied after each accepted step.
    pub growth: f64,
    pub initial_step: f64,
    pub max_step: f64,
    /// Direction scale of the log-depth group. The gradient of a mean over
    /// pixels shrinks with the pixel count, so this is multiplied by it.
    pub depth_scale: f64,
    pub rotation_scale: f64,
    pub translation_scale: f64,
    /// When false the poses stay at their initial value.
    pub optimize_pose: bool,
    /// Keep translations fixed even when optimizing pose.
    pub freeze_translation: bool,
    pub rule: DescentRule,
    /// Multipliers of a coordinate's step when its derivative keeps or flips
    /// sign between accepted iterates (per-coordinate rule only).
    pub rate_increase: f64,
    pub rate_decrease: f64,
    /// Upper bound of a rate relative to its initial value.
    pub max_rate_ratio: f64,
    /// Largest move of one coordinate per trial step: log-depth, rotation
    /// (radians) and translation. Keeps a single pixel from leaping to a far
    /// depth where every gradient vanishes and it can never return.
    pub max_move: [f64; 3],
    pub init: InitConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescentRule {
    /// Direction `-scale * gradient` with one global line-search step.
    Gradient,
    /// Direction `-rate_i * gradient_i` with per-coordinate rates.
    #[default]
    PerCoordinate,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            armijo: 1e-4,
            backtrack_factor: 0.5,
            max_backtracks: 40,
            growth: 2.0,
            initial_step: 0.01,
            max_step: 1e3,
            depth_scale: 1.0,
            rotation_scale: 1e-6,
            translation_scale: 1e-5,
            optimize_pose: false,
            freeze_translation: false,
            rule: DescentRule::PerCoordinate,
            rate_increase: 1.2,
            rate_decrease: 0.5,
            max_rate_ratio: 10.0,
            max_move: [0.1, 0.01, 0.01],
            init: InitConfig::default(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return Err(Error::Config("armijo constant must lie in (0, 1)".into()));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::Config("backtrack factor must lie in (0, 1)".into()));
        }
        if !(self.growth >= 1.0) {
            return Err(Error::Config("step growth must be at least 1".into()));
        }
        if !(self.initial_step > 0.0 && self.max_step >= self.initial_step) {
            return Err(Error::Config("need 0 < initial_step <= max_step".into()));
        }
        for (name, v) in [
            ("depth_scale", self.depth_scale),
            ("rotation_scale", self.rotation_scale),
            ("translation_scale", self.translation_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if !self.max_move.iter().all(|m| *m > 0.0) {
            return Err(Error::Config("max_move entries must be positive".into()));
        }
        if !(self.max_rate_ratio >= 1.0) {
            return Err(Error::Config("max_rate_ratio must be at least 1".into()));
        }
        if !(self.rate_increase >= 1.0 && self.rate_decrease > 0.0 && self.rate_decrease < 1.0) {
            return Err(Error::Config("need rate_increase >= 1 and 0 < rate_decrease < 1".into()));
        }
        self.init.validate()
    }
}

/// Starting depth field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    /// Constant prior depth; callers usually pass the scene mean.
    pub depth: Option<f64>,
    /// Uniform relative perturbation half-width (0.2 gives +-20%).
    pub perturbation: f64,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            depth: None,
            perturbation: 0.0,
            seed: 0,
        }
    }
}

impl InitConfig {
    fn validate(&self) -> Result<()> {
        if let Some(d) = self.depth {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::InvalidDepth(d));
            }
        }
        if !(0.0..1.0).contains(&self.perturbation) {
            return Err(Error::Config("perturbation must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub log_depth: Vec<f64>,
    pub poses: Vec<PoseChart>,
    pub iteration: usize,
    /// Current line-search step.
    pub step: f64,
    /// Per-coordinate step multipliers (log-depth first, then six per pose);
    /// filled on first use.
    #[serde(default)]
    pub rates: Vec<f64>,
    /// Sign of each coordinate's derivative at the current iterate.
    #[serde(default)]
    pub signs: Vec<i8>,
}

impl OptimState {
    /// Constant (optionally perturbed) depth and the given poses.
    pub fn initial(pixels: usize, poses: Vec<PoseChart>, init: &InitConfig, step: f64) -> Result<Self> {
        init.validate()?;
        let d = init
            .depth
            .ok_or_else(|| Error::Config("initial depth prior is required".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
        let log_depth = (0..pixels)
            .map(|_| {
                let f = if init.perturbation > 0.0 {
                    1.0 + rng.random_range(-init.perturbation..init.perturbation)
                } else {
                    1.0
                };
                (d * f).ln()
            })
            .collect();
        Ok(Self {
            log_depth,
            poses,
            iteration: 0,
            step,
            rates: Vec::new(),
            signs: Vec::new(),
        })
    }

    pub fn from_depth(depth: &DepthMap, poses: Vec<PoseChart>, step: f64) -> Result<Self> {
        if let Some(bad) = depth.values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidDepth(*bad));
        }
        Ok(Self {
            log_depth: depth.values.iter().map(|v| v.ln()).collect(),
            poses,
            iteration: 0,
            step,
            rates: Vec::new(),
            signs: Vec::new(),
        })
    }

    pub fn depth(&self, width: usize, height: usize) -> Result<DepthMap> {
        DepthMap::new(width, height, self.log_depth.iter().map(|l| l.exp()).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub breakdown: LossBreakdown,
    /// Step of the accepted move (0 for the initial entry).
    pub step: f64,
    pub backtracks: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    /// The gradient vanished in every optimized group.
    ZeroGradient,
    /// No trial step satisfied the sufficient-decrease test.
    LineSearchExhausted,
}

#[derive(Clone, Debug)]
pub struct OptimResult {
    pub depth: DepthMap,
    pub poses: Vec<PoseSE3>,
    pub state: OptimState,
    pub trace: Vec<TraceEntry>,
    pub stop: StopReason,
}

struct Direction {
    log_depth: Vec<f64>,
    poses: Vec<[f64; 6]>,
    /// `g . d` (negative for a descent direction).
    slope: f64,
}

/// Direction scale of each coordinate group: log-depth, rotation, translation.
fn group_scales(cfg: &OptimConfig, pixels: usize) -> [f64; 3] {
    [cfg.depth_scale * pixels as f64, cfg.rotation_scale, cfg.translation_scale]
}

fn group_of(i: usize, pixels: usize) -> usize {
    if i < pixels {
        0
    } else if (i - pixels) % 6 < 3 {
        1
    } else {
        2
    }
}

fn initial_rates(cfg: &OptimConfig, pixels: usize, poses: usize) -> Vec<f64> {
    let scales = group_scales(cfg, pixels);
    (0..pixels + 6 * poses)
        .map(|i| cfg.initial_step * scales[group_of(i, pixels)])
        .collect()
}

fn pose_active(cfg: &OptimConfig, c: usize) -> bool {
    cfg.optimize_pose && (c < 3 || !cfg.freeze_translation)
}

fn rate_direction(eval: &DepthEvaluation, cfg: &OptimConfig, rates: &[f64]) -> Direction {
    let n = eval.grad_log_depth.len();
    let clip = |d: f64, group: usize| d.clamp(-cfg.max_move[group], cfg.max_move[group]);
    let log_depth: Vec<f64> = eval
        .grad_log_depth
        .iter()
        .zip(rates)
        .map(|(g, r)| clip(-r * g, 0))
        .collect();
    let mut slope: f64 = eval.grad_log_depth.iter().zip(&log_depth).map(|(g, d)| g * d).sum();
    let poses: Vec<[f64; 6]> = eval
        .grad_pose
        .iter()
        .enumerate()
        .map(|(k, g)| {
            std::array::from_fn(|c| {
                if pose_active(cfg, c) {
                    clip(-rates[n + 6 * k + c] * g[c], 1 + c / 3)
                } else {
                    0.0
                }
            })
        })
        .collect();
    for (g, d) in eval.grad_pose.iter().zip(&poses) {
        slope += (0..6).map(|c| g[c] * d[c]).sum::<f64>();
    }
    Direction { log_depth, poses, slope }
}

fn sign(g: f64) -> i8 {
    if g > 0.0 {
        1
    } else if g < 0.0 {
        -1
    } else {
        0
    }
}

fn all_signs(eval: &DepthEvaluation) -> Vec<i8> {
    eval.grad_log_depth
        .iter()
        .chain(eval.grad_pose.iter().flatten())
        .map(|&g| sign(g))
        .collect()
}

/// Grows or shrinks each rate by whether its derivative kept its sign. Rates
/// stay within `max_rate_ratio` times their initial value.
fn adapt_rates(state: &mut OptimState, new_signs: Vec<i8>, cfg: &OptimConfig, pixels: usize) {
    let scales = group_scales(cfg, pixels);
    for (i, r) in state.rates.iter_mut().enumerate() {
        let factor = match state.signs[i] * new_signs[i] {
            1 => cfg.rate_increase,
            -1 => cfg.rate_decrease,
            _ => 1.0,
        };
        *r = (*r * factor).min(cfg.max_rate_ratio * cfg.initial_step * scales[group_of(i, pixels)]);
    }
    state.signs = new_signs;
}

fn direction(eval: &DepthEvaluation, cfg: &OptimConfig, pixels: usize) -> Direction {
    let ds = cfg.depth_scale * pixels as f64;
    let log_depth: Vec<f64> = eval.grad_log_depth.iter().map(|g| -ds * g).collect();
    let mut slope: f64 = eval.grad_log_depth.iter().zip(&log_depth).map(|(g, d)| g * d).sum();
    let poses = eval
        .grad_pose
        .iter()
        .map(|g| {
            let mut d = [0.0; 6];
            if cfg.optimize_pose {
                for c in 0..3 {
                    d[c] = -cfg.rotation_scale * g[c];
                    if !cfg.freeze_translation {
                        d[3 + c] = -cfg.translation_scale * g[3 + c];
                    }
                }
            }
            d
        })
        .collect::<Vec<_>>();
    for (g, d) in eval.grad_pose.iter().zip(&poses) {
        slope += (0..6).map(|c| g[c] * d[c]).sum::<f64>();
    }
    Direction { log_depth, poses, slope }
}

fn moved(state: &OptimState, dir: &Direction, alpha: f64) -> (Vec<f64>, Vec<PoseChart>) {
    let ld = state.log_depth.iter().zip(&dir.log_depth).map(|(x, d)| x + alpha * d).collect();
    let poses = state
        .poses
        .iter()
        .zip(&dir.poses)
        .map(|(p, d)| PoseChart(std::array::from_fn(|c| p.0[c] + alpha * d[c])))
        .collect();
    (ld, poses)
}

/// Minimizes the depth objective from `state`. Deterministic: the same
/// problem, state and config give a bit-identical trace.
pub fn optimize(problem: &DepthProblem, mut state: OptimState, cfg: &OptimConfig) -> Result<OptimResult> {
    cfg.validate()?;
    let (w, h) = problem.intrinsics.dims();
    let n = w * h;
    let mut eval = problem.evaluate(&state.log_depth, &state.poses, true)?;
    let mut trace = vec![TraceEntry {
        iteration: state.iteration,
        breakdown: eval.breakdown.clone(),
        step: 0.0,
        backtracks: 0,
    }];
    let adaptive = cfg.rule == DescentRule::PerCoordinate;
    if adaptive {
        let len = n + 6 * state.poses.len();
        if state.rates.len() != len {
            state.rates = initial_rates(cfg, n, state.poses.len());
        }
        if state.signs.len() != len {
            state.signs = all_signs(&eval);
        }
    }
    let mut stop = StopReason::MaxIterations;
    while state.iteration < cfg.max_iterations {
        let dir = if adaptive {
            rate_direction(&eval, cfg, &state.rates)
        } else {
            direction(&eval, cfg, n)
        };
        if !(dir.slope < 0.0) {
            stop = StopReason::ZeroGradient;
            break;
        }
        let f0 = eval.breakdown.total;
        let mut alpha = if adaptive { 1.0 } else { state.step };
        let mut accepted = None;
        for k in 0..=cfg.max_backtracks {
            let (ld, poses) = moved(&state, &dir, alpha);
            // a trial that leaves the valid domain counts as a rejection
            if let Ok(trial) = problem.evaluate(&ld, &poses, true) {
                if trial.breakdown.total <= f0 + cfg.armijo * alpha * dir.slope {
                    accepted = Some((ld, poses, trial, k));
                    break;
                }
            }
            alpha *= cfg.backtrack_factor;
        }
        let Some((ld, poses, trial, backtracks)) = accepted else {
            stop = StopReason::LineSearchExhausted;
            break;
        };
        state.log_depth = ld;
        state.poses = poses;
        state.iteration += 1;
        if adaptive {
            adapt_rates(&mut state, all_signs(&trial), cfg, n);
        } else {
            state.step = (alpha * cfg.growth).min(cfg.max_step);
        }
        eval = trial;
        trace.push(TraceEntry {
            iteration: state.iteration,
            breakdown: eval.breakdown.clone(),
            step: alpha,
            backtracks,
        });
    }
    Ok(OptimResult {
        depth: state.depth(w, h)?,
        poses: state.poses.iter().map(|c| c.to_pose()).collect(),
        state,
        trace,
        stop,
    })
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` at every
/// coordinate in `coords` (all when `None`); other entries are zero. Panics
/// if `h` is not positive.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64, coords: Option<&[usize]>) -> Vec<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    for &i in coords {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_exact_on_quadratic() {
        let a = [3.0, -1.5, 0.25, 7.0];
        let f = |x: &[f64]| x.iter().zip(&a).map(|(xi, ai)| ai * xi * xi + 2.0 * xi).sum::<f64>() + x[0] * x[1];
        let x = [0.3, -1.2, 2.0, 0.05];
        let g = fd_gradient(f, &x, 1e-5, None);
        let exact = [
            2.0 * a[0] * x[0] + 2.0 + x[1],
            2.0 * a[1] * x[1] + 2.0 + x[0],
            2.0 * a[2] * x[2] + 2.0,
            2.0 * a[3] * x[3] + 2.0,
        ];
        for (gi, ei) in g.iter().zip(&exact) {
            assert!((gi - ei).abs() < 1e-8);
        }
    }

    #[test]
    fn fd_of_zero_function_is_zero() {
        let g = fd_gradient(|_| 0.0, &[1.0, 2.0, 3.0], 1e-5, None);
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn fd_subset_leaves_other_entries_zero() {
        let g = fd_gradient(|x| x.iter().sum(), &[1.0, 2.0, 3.0], 1e-5, Some(&[1]));
        assert_eq!(g[0], 0.0);
        assert_eq!(g[2], 0.0);
        assert!((g[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    #[should_panic]
    fn fd_rejects_non_positive_step() {
        fd_gradient(|_| 0.0, &[1.0], 0.0, None);
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::default().validate().is_ok());
        let bad = OptimConfig {
            backtrack_factor: 1.5,
            ..OptimConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn perturbed_initialization_is_seeded() {
        let init = InitConfig {
            depth: Some(3.0),
            perturbation: 0.2,
            seed: 9,
        };
        let a = OptimState::initial(50, vec![], &init, 0.1).unwrap();
        let b = OptimState::initial(50, vec![], &init, 0.1).unwrap();
        assert_eq!(a, b);
        assert!(a.log_depth.iter().all(|l| (l.exp() / 3.0 - 1.0).abs() <= 0.2 + 1e-12));
        assert!(OptimState::initial(5, vec![], &InitConfig::default(), 0.1).is_err());
    }
}
