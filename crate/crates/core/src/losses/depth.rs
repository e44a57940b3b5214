use serde::{Deserialize, Serialize};

use super::{
    depth_total, disparity_smoothness_loss, feature_synthesis_loss, flow_consistency_loss, patch_photometric_loss,
    planar_consistency_loss, FlowTermOutput, LossBreakdown, LossConfig, SegmentMap,
};
use crate::features::{build_feature_pyramid, extract_keypoints, FeaturePyramid, KeypointParams, PatchSet, PyramidConfig};
use crate::geometry::{linearize_rigid_flow, CameraIntrinsics, DepthMap, FlowField, PoseChart};
use crate::imaging::{ImagePlane, Mask};
use crate::reduce::pairwise_sum;
use crate::{Error, Result};

/// Keypoint and feature-pyramid settings used to prepare a [`DepthProblem`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontEndConfig {
    pub pyramid: PyramidConfig,
    pub keypoints: KeypointParams,
    pub max_keypoints: usize,
}

impl Default for FrontEndConfig {
    fn default() -> Self {
        Self {
            pyramid: PyramidConfig::default(),
            keypoints: KeypointParams::default(),
            max_keypoints: 1000,
        }
    }
}

/// One source view of a depth problem.
#[derive(Clone, Debug)]
pub struct SourceFrame {
    pub image: ImagePlane,
    pub features: FeaturePyramid,
    /// Reference target-to-source flow for the consistency term.
    pub supervision: Option<FlowField>,
    /// Pixels where `supervision` is trusted; all when `None`.
    pub supervision_mask: Option<Mask>,
    /// Non-occluded target pixels, used by the photometric and feature terms.
    pub visibility: Option<Mask>,
}

/// Raw inputs for one source view.
#[derive(Clone, Debug)]
pub struct SourceInput {
    pub image: ImagePlane,
    pub supervision: Option<FlowField>,
    pub supervision_mask: Option<Mask>,
    pub visibility: Option<Mask>,
}

/// Depth objective of a target frame against one or more source frames.
/// Per-source terms are summed over sources.
#[derive(Clone, Debug)]
pub struct DepthProblem {
    pub intrinsics: CameraIntrinsics,
    pub target: ImagePlane,
    pub target_features: FeaturePyramid,
    /// Keypoint patches, selected on the target.
    pub patches: PatchSet,
    pub segments: Option<SegmentMap>,
    pub sources: Vec<SourceFrame>,
    pub config: LossConfig,
}

#[derive(Clone, Debug)]
pub struct DepthEvaluation {
    pub breakdown: LossBreakdown,
    pub grad_log_depth: Vec<f64>,
    /// One gradient per source pose, in chart coordinates.
    pub grad_pose: Vec<[f64; 6]>,
}

impl DepthProblem {
    /// Builds pyramids and keypoints from raw frames.
    pub fn prepare(
        intrinsics: CameraIntrinsics,
        target: ImagePlane,
        sources: Vec<SourceInput>,
        segments: Option<SegmentMap>,
        config: LossConfig,
        front_end: &FrontEndConfig,
    ) -> Result<Self> {
        config.validate()?;
        if sources.is_empty() {
            return Err(Error::Config("a depth problem needs at least one source frame".into()));
        }
        let dims = intrinsics.dims();
        if target.dims() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                got: target.dims(),
            });
        }
        let target_features = build_feature_pyramid(&target, &front_end.pyramid)?;
        let patches = extract_keypoints(&target, front_end.max_keypoints, &front_end.keypoints)?;
        let sources = sources
            .into_iter()
            .map(|s| {
                if s.image.dims() != dims {
                    return Err(Error::DimensionMismatch {
                        expected: dims,
                        got: s.image.dims(),
                    });
                }
                Ok(SourceFrame {
                    features: build_feature_pyramid(&s.image, &front_end.pyramid)?,
                    image: s.image,
                    supervision: s.supervision,
                    supervision_mask: s.supervision_mask,
                    visibility: s.visibility,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            intrinsics,
            target,
            target_features,
            patches,
            segments,
            sources,
            config,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.intrinsics.width * self.intrinsics.height
    }

    /// Loss breakdown at `(log_depth, poses)`, with gradients when `with_grad`.
    pub fn evaluate(&self, log_depth: &[f64], poses: &[PoseChart], with_grad: bool) -> Result<DepthEvaluation> {
        let (w, h) = self.intrinsics.dims();
        let n = w * h;
        if log_depth.len() != n {
            return Err(Error::Config(format!("log-depth has {} entries, expected {n}", log_depth.len())));
        }
        if poses.len() != self.sources.len() {
            return Err(Error::Config(format!(
                "{} poses given for {} source frames",
                poses.len(),
                self.sources.len()
            )));
        }
        if log_depth.iter().any(|l| !l.is_finite()) {
            return Err(Error::Config("log-depth must be finite".into()));
        }
        let cfg = &self.config;
        let terms = cfg.terms;
        let depth = DepthMap::new(w, h, log_depth.iter().map(|l| l.exp()).collect())?;

        let mut b = LossBreakdown::default();
        let mut grad_l = vec![0.0; n];
        let mut grad_pose = Vec::with_capacity(poses.len());

        for (s, (src, chart)) in self.sources.iter().zip(poses).enumerate() {
            let lin = linearize_rigid_flow(&depth, chart, &self.intrinsics)?;
            let visible = match &src.visibility {
                Some(v) => lin.valid.and(v),
                None => lin.valid.clone(),
            };
            // The rigid flow lives on the target grid, so the target is the
            // reference and the source is sampled at p + flow(p), i.e. warped
            // by the negated flow. Gradients of those terms flip sign.
            let reverse = lin.flow.negated();
            let mut gu = vec![0.0; n];
            let mut gv = vec![0.0; n];
            let mut add = |out: &FlowTermOutput, weight: f64| {
                if with_grad && weight != 0.0 {
                    for i in 0..n {
                        gu[i] += weight * out.grad_u[i];
                        gv[i] += weight * out.grad_v[i];
                    }
                }
            };
            if terms.photometric {
                let out = patch_photometric_loss(&src.image, &self.target, &reverse, &self.patches, Some(&visible), &cfg.census)?;
                if out.empty {
                    b.flags.push(format!("source {s}: no valid photometric patch pixels"));
                }
                b.patch_photometric += out.value;
                b.counts.patch_photometric += out.count;
                add(&out, -1.0);
            }
            if terms.flow_consistency {
                if let Some(reference) = &src.supervision {
                    let mask = match &src.supervision_mask {
                        Some(m) => lin.valid.and(m),
                        None => lin.valid.clone(),
                    };
                    let out = flow_consistency_loss(&lin.flow, reference, &mask)?;
                    if out.empty {
                        b.flags.push(format!("source {s}: empty flow supervision mask"));
                    }
                    b.flow_consistency += out.value;
                    b.counts.flow_consistency += out.count;
                    add(&out, 1.0);
                } else {
                    b.flags.push(format!("source {s}: no supervision flow"));
                }
            }
            if terms.feature {
                let out = feature_synthesis_loss(&self.target_features, &src.features, &reverse, Some(&visible))?;
                if out.empty {
                    b.flags.push(format!("source {s}: no valid feature pixels"));
                }
                b.feature_synthesis += out.value;
                b.counts.feature_synthesis += out.count;
                add(&out, -cfg.feature_weight);
            }
            if with_grad {
                let mut per_pixel: [Vec<f64>; 6] = std::array::from_fn(|_| Vec::with_capacity(n));
                for i in 0..n {
                    if !lin.valid.data[i] {
                        continue;
                    }
                    let dl = lin.d_log_depth[i];
                    grad_l[i] += gu[i] * dl[0] + gv[i] * dl[1];
                    let dp = lin.d_pose[i];
                    for (c, acc) in per_pixel.iter_mut().enumerate() {
                        acc.push(gu[i] * dp[0][c] + gv[i] * dp[1][c]);
                    }
                }
                grad_pose.push(std::array::from_fn(|c| pairwise_sum(&per_pixel[c])));
            } else {
                grad_pose.push([0.0; 6]);
            }
        }

        if terms.smoothness {
            let out = disparity_smoothness_loss(log_depth, &self.target)?;
            b.smoothness = out.value;
            b.counts.smoothness = out.count;
            if with_grad {
                for (g, o) in grad_l.iter_mut().zip(&out.grad_log_depth) {
                    *g += cfg.depth_smoothness_weight * o;
                }
            }
        }
        if terms.planar {
            match &self.segments {
                Some(seg) => {
                    let out = planar_consistency_loss(&depth, seg, &self.intrinsics)?;
                    if out.empty {
                        b.flags.push("planar: no segment could be fitted".into());
                    } else if !out.skipped.is_empty() {
                        b.flags.push(format!("planar: skipped segments {:?}", out.skipped));
                    }
                    b.planar = out.value;
                    b.counts.planar = out.count;
                    if with_grad {
                        for i in 0..n {
                            grad_l[i] += cfg.planar_weight * out.grad[i] * depth.values[i];
                        }
                    }
                }
                None => b.flags.push("planar: no segmentation".into()),
            }
        }
        b.total = depth_total(&b, cfg);
        Ok(DepthEvaluation {
            breakdown: b,
            grad_log_depth: grad_l,
            grad_pose,
        })
    }
}
