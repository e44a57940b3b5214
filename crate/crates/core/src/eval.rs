//! Depth evaluation: median scaling and the standard error/accuracy metrics.

use serde::{Deserialize, Serialize};

use crate::geometry::DepthMap;
use crate::imaging::Mask;
use crate::reduce::pairwise_sum;
use crate::{Error, Result};

/// Accuracy thresholds `1.25^k`, `k = 1, 2, 3`.
pub const DELTA_THRESHOLDS: [f64; 3] = [1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub abs_rel: f64,
    pub rms: f64,
    pub mean_log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_pixels: usize,
}

/// Optional depth range applied on top of the validity mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub min_depth: Option<f64>,
    pub max_depth: Option<f64>,
}

/// Pixels where both maps are valid and positive, intersected with `mask`
/// and the optional ground-truth depth range.
pub fn evaluation_mask(pred: &DepthMap, gt: &DepthMap, mask: Option<&Mask>, opts: &EvalOptions) -> Result<Mask> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimensionMismatch {
            expected: gt.dims(),
            got: pred.dims(),
        });
    }
    if let Some(m) = mask {
        if (m.width, m.height) != gt.dims() {
            return Err(Error::DimensionMismatch {
                expected: gt.dims(),
                got: (m.width, m.height),
            });
        }
    }
    let data = (0..gt.values.len())
        .map(|i| {
            let g = gt.values[i];
            pred.valid[i]
                && gt.valid[i]
                && pred.values[i] > 0.0
                && g > 0.0
                && mask.is_none_or(|m| m.data[i])
                && opts.min_depth.is_none_or(|lo| g >= lo)
                && opts.max_depth.is_none_or(|hi| g <= hi)
        })
        .collect();
    Ok(Mask::from_vec(gt.width, gt.height, data))
}

/// Lower median: the element at index `(n - 1) / 2` after sorting.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    Some(v[(v.len() - 1) / 2])
}

fn masked(values: &[f64], mask: &Mask) -> Vec<f64> {
    values.iter().zip(&mask.data).filter(|(_, &m)| m).map(|(v, _)| *v).collect()
}

/// Rescales `pred` so that its median over `mask` equals that of `gt`.
pub fn median_scale(pred: &DepthMap, gt: &DepthMap, mask: &Mask) -> Result<DepthMap> {
    let med_pred = lower_median(&masked(&pred.values, mask)).ok_or_else(|| Error::Eval("empty evaluation mask".into()))?;
    let med_gt = lower_median(&masked(&gt.values, mask)).ok_or_else(|| Error::Eval("empty evaluation mask".into()))?;
    if med_pred == 0.0 {
        return Err(Error::Eval("median of prediction is zero".into()));
    }
    if !(med_gt > 0.0) {
        return Err(Error::Eval("ground truth must be positive on the mask".into()));
    }
    Ok(pred.scaled(med_gt / med_pred))
}

/// Error and accuracy metrics of `pred` against `gt` over `mask`.
pub fn compute_metrics(pred: &DepthMap, gt: &DepthMap, mask: &Mask) -> Result<EvalReport> {
    if pred.dims() != gt.dims() || (mask.width, mask.height) != gt.dims() {
        return Err(Error::DimensionMismatch {
            expected: gt.dims(),
            got: pred.dims(),
        });
    }
    let idx: Vec<usize> = (0..gt.values.len()).filter(|&i| mask.data[i]).collect();
    if idx.is_empty() {
        return Err(Error::Eval("empty evaluation mask".into()));
    }
    if idx.iter().any(|&i| !(pred.values[i] > 0.0 && gt.values[i] > 0.0)) {
        return Err(Error::Eval("depths must be positive on the evaluation mask".into()));
    }
    let n = idx.len() as f64;
    let mut rel = Vec::with_capacity(idx.len());
    let mut sq = Vec::with_capacity(idx.len());
    let mut lg = Vec::with_capacity(idx.len());
    let mut hits = [0usize; 3];
    for &i in &idx {
        let (d, g) = (pred.values[i], gt.values[i]);
        rel.push((d - g).abs() / g);
        sq.push((d - g) * (d - g));
        lg.push((d.log10() - g.log10()).abs());
        let ratio = (d / g).max(g / d);
        for (k, thr) in DELTA_THRESHOLDS.iter().enumerate() {
            hits[k] += (ratio < *thr) as usize;
        }
    }
    Ok(EvalReport {
        abs_rel: pairwise_sum(&rel) / n,
        rms: (pairwise_sum(&sq) / n).sqrt(),
        mean_log10: pairwise_sum(&lg) / n,
        delta1: hits[0] as f64 / n,
        delta2: hits[1] as f64 / n,
        delta3: hits[2] as f64 / n,
        n_pixels: idx.len(),
    })
}

/// Median scaling followed by [`compute_metrics`].
pub fn evaluate(pred: &DepthMap, gt: &DepthMap, mask: Option<&Mask>, opts: &EvalOptions) -> Result<EvalReport> {
    let m = evaluation_mask(pred, gt, mask, opts)?;
    if m.count() == 0 {
        return Err(Error::Eval("empty evaluation mask".into()));
    }
    let scaled = median_scale(pred, gt, &m)?;
    compute_metrics(&scaled, gt, &m)
}
