//! Loss terms, their gradients, and the two weighted objectives.
//!
//! The flow objective scores a dense flow field on keypoint patches plus an
//! edge-aware smoothness prior. The depth objective scores a depth field (and
//! relative poses) through the rigid flow it induces; see [`DepthProblem`].

mod depth;
mod flow_terms;
mod photometric;
mod planar;
mod smoothness;

pub use depth::{DepthEvaluation, DepthProblem, FrontEndConfig, SourceFrame, SourceInput};
pub use flow_terms::{feature_synthesis_loss, flow_consistency_loss, occlusion_mask, out_of_view};
pub use photometric::patch_photometric_loss;
pub use planar::{planar_consistency_loss, PlanarOutput, SegmentMap, MIN_SEGMENT_PIXELS};
pub use smoothness::{disparity_smoothness_loss, smoothness_loss, DepthSmoothnessOutput};

use serde::{Deserialize, Serialize};

use crate::features::{PatchSet, DEFAULT_CENSUS_EPSILON};
use crate::geometry::FlowField;
use crate::imaging::ImagePlane;
use crate::{Error, Result};

/// How census comparisons are encoded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CensusCoding {
    /// `d / sqrt(d^2 + eps^2)`: differentiable, approximately shift invariant.
    #[default]
    Soft,
    /// Ternary `{-1, 0, 1}`: exactly shift invariant, zero gradient.
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CensusParams {
    pub epsilon: f64,
    pub coding: CensusCoding,
}

impl Default for CensusParams {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_CENSUS_EPSILON,
            coding: CensusCoding::Soft,
        }
    }
}

/// Forward-backward consistency tolerances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcclusionParams {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for OcclusionParams {
    fn default() -> Self {
        Self {
            alpha1: 0.01,
            alpha2: 0.5,
        }
    }
}

/// Which depth-objective terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TermToggles {
    pub photometric: bool,
    pub smoothness: bool,
    pub planar: bool,
    pub flow_consistency: bool,
    pub feature: bool,
}

impl Default for TermToggles {
    fn default() -> Self {
        Self {
            photometric: true,
            smoothness: true,
            planar: true,
            flow_consistency: true,
            feature: true,
        }
    }
}

impl TermToggles {
    /// Photometric, smoothness and planar terms only.
    pub fn photometric_only() -> Self {
        Self {
            flow_consistency: false,
            feature: false,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Smoothness weight of the flow objective.
    pub flow_smoothness_weight: f64,
    /// Smoothness weight of the depth objective.
    pub depth_smoothness_weight: f64,
    /// Planar consistency weight of the depth objective.
    pub planar_weight: f64,
    /// Feature synthesis weight of the depth objective.
    pub feature_weight: f64,
    pub census: CensusParams,
    pub occlusion: OcclusionParams,
    pub terms: TermToggles,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            flow_smoothness_weight: 50.0,
            depth_smoothness_weight: 0.001,
            planar_weight: 0.05,
            feature_weight: 3.0,
            census: CensusParams::default(),
            occlusion: OcclusionParams::default(),
            terms: TermToggles::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("flow_smoothness_weight", self.flow_smoothness_weight),
            ("depth_smoothness_weight", self.depth_smoothness_weight),
            ("planar_weight", self.planar_weight),
            ("feature_weight", self.feature_weight),
            ("occlusion.alpha1", self.occlusion.alpha1),
            ("occlusion.alpha2", self.occlusion.alpha2),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {w}")));
            }
        }
        if !(self.census.epsilon > 0.0) {
            return Err(Error::Config("census epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Value and gradient of a term that depends on a flow field.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowTermOutput {
    pub value: f64,
    /// Number of contributions averaged into `value`.
    pub count: usize,
    /// Nothing contributed; `value` is defined as zero.
    pub empty: bool,
    pub grad_u: Vec<f64>,
    pub grad_v: Vec<f64>,
    /// Per-entry contributions before averaging (`None` when excluded). For
    /// multi-level terms these are the finest level's.
    pub contributions: Vec<Option<f64>>,
}

impl FlowTermOutput {
    pub(crate) fn empty(n: usize, entries: usize) -> Self {
        Self {
            value: 0.0,
            count: 0,
            empty: true,
            grad_u: vec![0.0; n],
            grad_v: vec![0.0; n],
            contributions: vec![None; entries],
        }
    }
}

/// Unweighted term values, counts and diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub patch_photometric: f64,
    pub smoothness: f64,
    pub planar: f64,
    pub flow_consistency: f64,
    pub feature_synthesis: f64,
    pub total: f64,
    pub counts: TermCounts,
    /// Degenerate situations met while evaluating (empty masks, skipped
    /// segments, ...).
    pub flags: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermCounts {
    pub patch_photometric: usize,
    pub smoothness: usize,
    pub planar: usize,
    pub flow_consistency: usize,
    pub feature_synthesis: usize,
}

/// `photometric + lambda * smoothness`.
pub fn flow_total(photometric: f64, smoothness: f64, cfg: &LossConfig) -> f64 {
    photometric + cfg.flow_smoothness_weight * smoothness
}

/// `photometric + l1 * smoothness + l2 * planar + consistency + l3 * feature`.
pub fn depth_total(b: &LossBreakdown, cfg: &LossConfig) -> f64 {
    b.patch_photometric
        + cfg.depth_smoothness_weight * b.smoothness
        + cfg.planar_weight * b.planar
        + b.flow_consistency
        + cfg.feature_weight * b.feature_synthesis
}

impl LossBreakdown {
    /// Fills `total` with the depth objective's weighted sum.
    pub fn with_depth_total(mut self, cfg: &LossConfig) -> Self {
        self.total = depth_total(&self, cfg);
        self
    }
}

/// Flow objective with its gradient with respect to the flow.
#[derive(Clone, Debug)]
pub struct FlowObjective {
    pub breakdown: LossBreakdown,
    pub grad_u: Vec<f64>,
    pub grad_v: Vec<f64>,
}

/// Patch census loss plus weighted edge-aware smoothness of `flow`.
pub fn total_flow_loss(
    target: &ImagePlane,
    source: &ImagePlane,
    flow: &FlowField,
    patches: &PatchSet,
    cfg: &LossConfig,
) -> Result<FlowObjective> {
    cfg.validate()?;
    let ph = patch_photometric_loss(target, source, flow, patches, None, &cfg.census)?;
    let sm = smoothness_loss(flow, target)?;
    let mut flags = Vec::new();
    if ph.empty {
        flags.push("patch_photometric: no valid patch pixels".to_string());
    }
    let lambda = cfg.flow_smoothness_weight;
    let breakdown = LossBreakdown {
        patch_photometric: ph.value,
        smoothness: sm.value,
        total: flow_total(ph.value, sm.value, cfg),
        counts: TermCounts {
            patch_photometric: ph.count,
            smoothness: sm.count,
            ..TermCounts::default()
        },
        flags,
        ..LossBreakdown::default()
    };
    let grad_u = ph.grad_u.iter().zip(&sm.grad_u).map(|(a, b)| a + lambda * b).collect();
    let grad_v = ph.grad_v.iter().zip(&sm.grad_v).map(|(a, b)| a + lambda * b).collect();
    Ok(FlowObjective {
        breakdown,
        grad_u,
        grad_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn terms(v: [f64; 5]) -> LossBreakdown {
        LossBreakdown {
            patch_photometric: v[0],
            smoothness: v[1],
            planar: v[2],
            flow_consistency: v[3],
            feature_synthesis: v[4],
            ..LossBreakdown::default()
        }
    }

    #[test]
    fn default_weights() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.flow_smoothness_weight, 50.0);
        assert_eq!(
            (cfg.depth_smoothness_weight, cfg.planar_weight, cfg.feature_weight),
            (0.001, 0.05, 3.0)
        );
    }

    #[test]
    fn depth_total_examples() {
        let cfg = LossConfig::default();
        assert_eq!(depth_total(&terms([0.0; 5]), &cfg), 0.0);
        assert!((depth_total(&terms([1.0; 5]), &cfg) - 5.051).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let v: [f64; 5] = std::array::from_fn(|_| rng.random_range(0.0..10.0));
            let manual = v[0] + 0.001 * v[1] + 0.05 * v[2] + v[3] + 3.0 * v[4];
            assert!((depth_total(&terms(v), &cfg) - manual).abs() < 1e-12);
        }
    }

    #[test]
    fn totals_are_linear_in_each_weight() {
        let b = terms([0.3, 1.7, 0.2, 0.9, 0.4]);
        let base = LossConfig::default();
        let mut doubled = base.clone();
        doubled.feature_weight *= 2.0;
        let delta = depth_total(&b, &doubled) - depth_total(&b, &base);
        assert!((delta - base.feature_weight * b.feature_synthesis).abs() < 1e-12);
        let mut zeroed = base.clone();
        zeroed.planar_weight = 0.0;
        assert!((depth_total(&b, &base) - depth_total(&b, &zeroed) - 0.05 * 0.2).abs() < 1e-12);
        assert_eq!(flow_total(0.2, 0.1, &base), 0.2 + 50.0 * 0.1);
    }

    #[test]
    fn rejects_negative_weights() {
        let cfg = LossConfig {
            planar_weight: -1.0,
            ..LossConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_json_round_trip_and_defaults() {
        let cfg = LossConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<LossConfig>(&s).unwrap(), cfg);
        let partial: LossConfig = serde_json::from_str(r#"{"terms": {"feature": false}}"#).unwrap();
        assert!(!partial.terms.feature && partial.terms.photometric);
        assert_eq!(partial.feature_weight, 3.0);
    }
}
