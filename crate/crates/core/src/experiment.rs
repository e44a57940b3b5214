//! Depth recovery on a rendered synthetic scene: the glue between [`synth`],
//! the depth objective, the optimizer and the metrics.
//!
//! [`synth`]: crate::synth

use serde::{Deserialize, Serialize};

use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::losses::{DepthProblem, FrontEndConfig, LossConfig, SourceInput};
use crate::optimizer::{optimize, OptimConfig, OptimResult, OptimState};
use crate::synth::{SceneRender, SceneSpec};
use crate::Result;

/// Settings of one recovery run besides the scene itself.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryConfig {
    pub loss: LossConfig,
    pub front_end: FrontEndConfig,
    pub optim: OptimConfig,
    /// Drop the oracle flow; the consistency term then has nothing to compare
    /// against and contributes zero.
    pub unsupervised: bool,
    pub eval: EvalOptions,
}

/// Builds the depth objective of a rendered scene. The rendered flow acts as
/// the external supervision and the rendered occlusion as the visibility mask.
pub fn scene_problem(spec: &SceneSpec, scene: &SceneRender, cfg: &RecoveryConfig) -> Result<DepthProblem> {
    let visible = scene.occlusion.not();
    let (supervision, supervision_mask) = if cfg.unsupervised {
        (None, None)
    } else {
        (Some(scene.flow.clone()), Some(visible.clone()))
    };
    DepthProblem::prepare(
        spec.intrinsics.clone(),
        scene.target.clone(),
        vec![SourceInput {
            image: scene.source.clone(),
            supervision,
            supervision_mask,
            visibility: Some(visible),
        }],
        Some(scene.segments.clone()),
        cfg.loss.clone(),
        &cfg.front_end,
    )
}

#[derive(Clone, Debug)]
pub struct Recovery {
    pub result: OptimResult,
    /// Median-scaled metrics of the final depth against the rendered depth.
    pub report: EvalReport,
}

/// Starts from the configured constant depth (the scene mean when unset) with
/// the pose at its true value, optimizes, and scores the result.
pub fn recover(spec: &SceneSpec, scene: &SceneRender, cfg: &RecoveryConfig) -> Result<Recovery> {
    let problem = scene_problem(spec, scene, cfg)?;
    let mut init = cfg.optim.init.clone();
    init.depth = init.depth.or(Some(scene.mean_depth()));
    let state = OptimState::initial(problem.pixel_count(), vec![spec.pose.to_chart()], &init, cfg.optim.initial_step)?;
    let result = optimize(&problem, state, &cfg.optim)?;
    let report = evaluate(&result.depth, &scene.depth, None, &cfg.eval)?;
    Ok(Recovery { result, report })
}
