use rayon::prelude::*;

use super::{FlowTermOutput, OcclusionParams};
use crate::features::FeaturePyramid;
use crate::geometry::FlowField;
use crate::imaging::{downsample_flow, downsample_flow_adjoint, sample_with_grad, Mask};
use crate::reduce::pairwise_sum;
use crate::{Error, Result};

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean over masked pixels of `|du| + |dv|` between a rigid flow and a
/// reference flow; the gradient is taken with respect to the rigid flow.
pub fn flow_consistency_loss(rigid: &FlowField, reference: &FlowField, mask: &Mask) -> Result<FlowTermOutput> {
    let dims = rigid.dims();
    for d in [reference.dims(), (mask.width, mask.height)] {
        if d != dims {
            return Err(Error::DimensionMismatch { expected: dims, got: d });
        }
    }
    let n = rigid.len();
    let contributions: Vec<Option<f64>> = (0..n)
        .map(|i| {
            mask.data[i].then(|| (rigid.u[i] - reference.u[i]).abs() + (rigid.v[i] - reference.v[i]).abs())
        })
        .collect();
    let values: Vec<f64> = contributions.iter().flatten().copied().collect();
    if values.is_empty() {
        return Ok(FlowTermOutput::empty(n, n));
    }
    let count = values.len() as f64;
    let mut grad_u = vec![0.0; n];
    let mut grad_v = vec![0.0; n];
    for i in 0..n {
        if mask.data[i] {
            grad_u[i] = sign(rigid.u[i] - reference.u[i]) / count;
            grad_v[i] = sign(rigid.v[i] - reference.v[i]) / count;
        }
    }
    Ok(FlowTermOutput {
        value: pairwise_sum(&values) / count,
        count: values.len(),
        empty: false,
        grad_u,
        grad_v,
        contributions,
    })
}

/// Per-pixel result of comparing one level: contribution and flow gradient.
type LevelPixel = Option<(f64, f64, f64)>;

/// Multi-level feature reconstruction: at each level the target features are
/// warped by the area-downsampled flow (`target(p - flow(p))`) and compared
/// with the source features under L1, averaged over valid pixels and
/// channels. Level means are summed. `mask` (full resolution) excludes pixels;
/// it is reduced per level by requiring all four children.
pub fn feature_synthesis_loss(
    source: &FeaturePyramid,
    target: &FeaturePyramid,
    flow: &FlowField,
    mask: Option<&Mask>,
) -> Result<FlowTermOutput> {
    if !source.compatible(target) || source.is_empty() {
        return Err(Error::Config("feature pyramids do not share a level structure".into()));
    }
    let (w, h) = flow.dims();
    if let Some(m) = mask {
        if (m.width, m.height) != (w, h) {
            return Err(Error::DimensionMismatch {
                expected: (w, h),
                got: (m.width, m.height),
            });
        }
    }
    let first = source.first_level;
    let flows = downsample_flow(flow, first + source.len())?;
    let mut masks = Vec::with_capacity(flows.len());
    if let Some(m) = mask {
        masks.push(m.clone());
        for l in 1..flows.len() {
            let next = masks[l - 1].downsample();
            masks.push(next);
        }
    }

    let mut grads: Vec<(Vec<f64>, Vec<f64>)> = flows.iter().map(|f| (vec![0.0; f.len()], vec![0.0; f.len()])).collect();
    let mut value = 0.0;
    let mut count = 0;
    let mut finest = Vec::new();
    for (l, (src, tgt)) in source.levels.iter().zip(&target.levels).enumerate() {
        let r = first + l;
        let fl = &flows[r];
        if fl.dims() != src.dims() {
            return Err(Error::Config(format!(
                "feature level {l} is {:?} but the flow reduces to {:?}",
                src.dims(),
                fl.dims()
            )));
        }
        let lmask = masks.get(r);
        let (lw, c) = (src.width, src.channels);
        let per_pixel: Vec<LevelPixel> = (0..fl.len())
            .into_par_iter()
            .map(|i| {
                if lmask.is_some_and(|m| !m.data[i]) {
                    return None;
                }
                let mut val = vec![0.0; c];
                let mut gx = vec![0.0; c];
                let mut gy = vec![0.0; c];
                let qx = (i % lw) as f64 - fl.u[i];
                let qy = (i / lw) as f64 - fl.v[i];
                if !sample_with_grad(tgt, qx, qy, &mut val, &mut gx, &mut gy) {
                    return None;
                }
                let s = &src.data[i * c..(i + 1) * c];
                let (mut acc, mut du, mut dv) = (0.0, 0.0, 0.0);
                for k in 0..c {
                    let d = s[k] - val[k];
                    acc += d.abs();
                    // d|s - warped| / d flow = sign(s - warped) * grad
                    du += sign(d) * gx[k];
                    dv += sign(d) * gy[k];
                }
                Some((acc / c as f64, du / c as f64, dv / c as f64))
            })
            .collect();
        let values: Vec<f64> = per_pixel.iter().flatten().map(|p| p.0).collect();
        if l == 0 {
            finest = per_pixel.iter().map(|p| p.map(|p| p.0)).collect();
        }
        if values.is_empty() {
            continue;
        }
        let n = values.len() as f64;
        value += pairwise_sum(&values) / n;
        count += values.len();
        let (gu, gv) = &mut grads[r];
        for (i, p) in per_pixel.iter().enumerate() {
            if let Some((_, du, dv)) = p {
                gu[i] = du / n;
                gv[i] = dv / n;
            }
        }
    }
    if count == 0 {
        let mut out = FlowTermOutput::empty(w * h, finest.len());
        out.contributions = finest;
        return Ok(out);
    }
    let (grad_u, grad_v) = downsample_flow_adjoint(&grads, w, h);
    Ok(FlowTermOutput {
        value,
        count,
        empty: false,
        grad_u,
        grad_v,
        contributions: finest,
    })
}

/// Forward-backward consistency: a pixel is kept when
/// `|fw + bw(p + fw)|^2 < alpha1 (|fw|^2 + |bw(p + fw)|^2) + alpha2`, with the
/// backward flow sampled bilinearly at the clamped forward location.
pub fn occlusion_mask(forward: &FlowField, backward: &FlowField, params: &OcclusionParams) -> Result<Mask> {
    if forward.dims() != backward.dims() {
        return Err(Error::DimensionMismatch {
            expected: forward.dims(),
            got: backward.dims(),
        });
    }
    let (w, h) = forward.dims();
    let (xmax, ymax) = ((w.max(1) - 1) as f64, (h.max(1) - 1) as f64);
    let data = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (fu, fv) = (forward.u[i], forward.v[i]);
            let qx = ((i % w) as f64 + fu).clamp(0.0, xmax);
            let qy = ((i / w) as f64 + fv).clamp(0.0, ymax);
            let (bu, bv) = sample_flow(backward, qx, qy);
            let (su, sv) = (fu + bu, fv + bv);
            su * su + sv * sv < params.alpha1 * (fu * fu + fv * fv + bu * bu + bv * bv) + params.alpha2
        })
        .collect();
    Ok(Mask::from_vec(w, h, data))
}

fn sample_flow(flow: &FlowField, x: f64, y: f64) -> (f64, f64) {
    let (w, h) = flow.dims();
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (ax, ay) = (x - x0 as f64, y - y0 as f64);
    let lerp = |f: &[f64]| {
        let top = (1.0 - ax) * f[y0 * w + x0] + ax * f[y0 * w + x1];
        let bot = (1.0 - ax) * f[y1 * w + x0] + ax * f[y1 * w + x1];
        (1.0 - ay) * top + ay * bot
    };
    (lerp(&flow.u), lerp(&flow.v))
}

/// Pixels whose flow target lies outside `[0, W-1] x [0, H-1]`.
pub fn out_of_view(flow: &FlowField) -> Mask {
    let (w, h) = flow.dims();
    let data = (0..w * h)
        .map(|i| {
            let x = (i % w) as f64 + flow.u[i];
            let y = (i / w) as f64 + flow.v[i];
            !(x >= 0.0 && x <= (w - 1) as f64 && y >= 0.0 && y <= (h - 1) as f64)
        })
        .collect();
    Mask::from_vec(w, h, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{build_feature_pyramid, PyramidConfig};
    use crate::imaging::ImagePlane;
    use crate::optimizer::fd_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    fn random_flow(w: usize, h: usize, amp: f64, rng: &mut ChaCha8Rng) -> FlowField {
        FlowField::from_fn(w, h, |_, _| (rng.random_range(-amp..amp), rng.random_range(-amp..amp)))
    }

    #[test]
    fn consistency_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_flow(8, 6, 3.0, &mut rng);
        let all = Mask::new(8, 6, true);
        assert_eq!(flow_consistency_loss(&f, &f, &all).unwrap().value, 0.0);
        let g = FlowField::from_fn(8, 6, |x, y| (f.at(x, y).0 + 3.0, f.at(x, y).1 + 4.0));
        let out = flow_consistency_loss(&g, &f, &all).unwrap();
        assert!((out.value - 7.0).abs() < 1e-12);
        let none = flow_consistency_loss(&g, &f, &Mask::new(8, 6, false)).unwrap();
        assert!(none.empty && none.value == 0.0);
    }

    #[test]
    fn consistency_gradient_and_masking() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (w, h) = (9, 7);
        let a = random_flow(w, h, 3.0, &mut rng);
        let b = random_flow(w, h, 3.0, &mut rng);
        let mask = Mask::from_vec(w, h, (0..w * h).map(|i| i % 3 != 0).collect());
        let out = flow_consistency_loss(&a, &b, &mask).unwrap();
        let mut x0 = a.u.clone();
        x0.extend(&a.v);
        let f = |x: &[f64]| {
            let fl = FlowField::new(w, h, x[..w * h].to_vec(), x[w * h..].to_vec()).unwrap();
            flow_consistency_loss(&fl, &b, &mask).unwrap().value
        };
        let fd = fd_gradient(f, &x0, 1e-5, None);
        let an: Vec<f64> = out.grad_u.iter().chain(&out.grad_v).copied().collect();
        assert!(rel_err(&an, &fd) < 1e-4);

        let smaller = Mask::from_vec(w, h, (0..w * h).map(|i| i % 3 == 1).collect());
        let part = flow_consistency_loss(&a, &b, &smaller).unwrap();
        for i in 0..w * h {
            if smaller.data[i] {
                assert_eq!(part.contributions[i], out.contributions[i]);
            } else {
                assert_eq!(part.contributions[i], None);
            }
        }
    }

    fn textured(w: usize, h: usize, shift: f64) -> ImagePlane {
        ImagePlane::from_fn(w, h, |x, y| {
            let (x, y) = (x as f64 - shift, y as f64);
            0.5 + 0.2 * (0.21 * x).sin() * (0.17 * y + 0.5).cos() + 0.1 * (0.05 * x * y.sqrt()).sin()
        })
    }

    fn small_config() -> PyramidConfig {
        PyramidConfig {
            channels: vec![6, 8, 10],
            first_level: 0,
        }
    }

    #[test]
    fn feature_loss_identical_frames_zero() {
        let img = textured(32, 24, 0.0);
        let p = build_feature_pyramid(&img, &small_config()).unwrap();
        let out = feature_synthesis_loss(&p, &p, &FlowField::zeros(32, 24), None).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn feature_loss_prefers_true_shift() {
        // source(p) = target(p - 2): a flow of +2 re-aligns them
        let (w, h) = (128, 96);
        let cfg = PyramidConfig {
            channels: vec![6, 8],
            first_level: 0,
        };
        let tgt = build_feature_pyramid(&textured(w, h, 0.0), &cfg).unwrap();
        let src = build_feature_pyramid(&textured(w, h, 2.0), &cfg).unwrap();
        let zero = feature_synthesis_loss(&src, &tgt, &FlowField::zeros(w, h), None).unwrap().value;
        let right = feature_synthesis_loss(&src, &tgt, &FlowField::constant(w, h, 2.0, 0.0), None).unwrap().value;
        assert!(right < 0.1 * zero, "{right} vs {zero}");
    }

    #[test]
    fn feature_gradient_matches_finite_differences() {
        let (w, h) = (24, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tgt = build_feature_pyramid(&textured(w, h, 0.0), &small_config()).unwrap();
        let src = build_feature_pyramid(&textured(w, h, 1.3), &small_config()).unwrap();
        let flow = random_flow(w, h, 1.5, &mut rng);
        let out = feature_synthesis_loss(&src, &tgt, &flow, None).unwrap();
        let mut x0 = flow.u.clone();
        x0.extend(&flow.v);
        let f = |x: &[f64]| {
            let fl = FlowField::new(w, h, x[..w * h].to_vec(), x[w * h..].to_vec()).unwrap();
            feature_synthesis_loss(&src, &tgt, &fl, None).unwrap().value
        };
        let coords: Vec<usize> = (0..2 * w * h).step_by(5).collect();
        let fd = fd_gradient(f, &x0, 1e-5, Some(&coords));
        let an: Vec<f64> = coords.iter().map(|&c| if c < w * h { out.grad_u[c] } else { out.grad_v[c - w * h] }).collect();
        let fdv: Vec<f64> = coords.iter().map(|&c| fd[c]).collect();
        assert!(rel_err(&an, &fdv) < 1e-4, "{}", rel_err(&an, &fdv));
    }

    #[test]
    fn feature_level_mismatch_is_config_error() {
        let img = textured(32, 24, 0.0);
        let a = build_feature_pyramid(&img, &small_config()).unwrap();
        let b = build_feature_pyramid(&img, &PyramidConfig { channels: vec![6, 8], first_level: 0 }).unwrap();
        assert!(matches!(
            feature_synthesis_loss(&a, &b, &FlowField::zeros(32, 24), None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn occlusion_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = OcclusionParams::default();
        let z = FlowField::zeros(10, 8);
        assert_eq!(occlusion_mask(&z, &z, &p).unwrap().count(), 80);
        let c = FlowField::constant(10, 8, 2.5, -1.0);
        assert_eq!(occlusion_mask(&c, &c.negated(), &p).unwrap().count(), 80);
        let f = random_flow(10, 8, 4.0, &mut rng);
        let inconsistent = FlowField::constant(10, 8, 30.0, 30.0);
        assert_eq!(occlusion_mask(&f, &inconsistent, &p).unwrap().count(), 0);
    }

    #[test]
    fn out_of_view_flags_exits() {
        let f = FlowField::constant(10, 8, 2.0, 0.0);
        let m = out_of_view(&f);
        assert_eq!(m.count(), 2 * 8);
        assert!(m.get(8, 0) && m.get(9, 7) && !m.get(7, 3));
    }
}
