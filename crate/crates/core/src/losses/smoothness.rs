use super::FlowTermOutput;
use crate::geometry::FlowField;
use crate::imaging::ImagePlane;
use crate::reduce::pairwise_sum;
use crate::{Error, Result};

/// `exp(-|dI|)` for horizontal and vertical forward differences, with `|dI|`
/// the mean absolute difference over channels.
fn edge_weights(img: &ImagePlane) -> (Vec<f64>, Vec<f64>) {
    let (w, h, c) = (img.width, img.height, img.channels);
    let mut wx = vec![0.0; w * h];
    let mut wy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                let d: f64 = (0..c).map(|k| (img.get(x + 1, y, k) - img.get(x, y, k)).abs()).sum();
                wx[i] = (-d / c as f64).exp();
            }
            if y + 1 < h {
                let d: f64 = (0..c).map(|k| (img.get(x, y + 1, k) - img.get(x, y, k)).abs()).sum();
                wy[i] = (-d / c as f64).exp();
            }
        }
    }
    (wx, wy)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Edge-weighted total variation of several fields on one grid: the mean of
/// the horizontal differences plus the mean of the vertical ones, summed over
/// fields. Returns the value and one gradient per field.
fn weighted_variation(fields: &[&[f64]], w: usize, h: usize, wx: &[f64], wy: &[f64]) -> (f64, Vec<Vec<f64>>) {
    let nx = (w - 1) * h;
    let ny = w * (h - 1);
    let mut cx = Vec::with_capacity(nx * fields.len());
    let mut cy = Vec::with_capacity(ny * fields.len());
    let mut grads = vec![vec![0.0; w * h]; fields.len()];
    for (f, g) in fields.iter().zip(grads.iter_mut()) {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    let d = f[i + 1] - f[i];
                    cx.push(d.abs() * wx[i]);
                    let s = sign(d) * wx[i] / nx as f64;
                    g[i + 1] += s;
                    g[i] -= s;
                }
                if y + 1 < h {
                    let d = f[i + w] - f[i];
                    cy.push(d.abs() * wy[i]);
                    let s = sign(d) * wy[i] / ny as f64;
                    g[i + w] += s;
                    g[i] -= s;
                }
            }
        }
    }
    let mut value = 0.0;
    if nx > 0 {
        value += pairwise_sum(&cx) / nx as f64;
    }
    if ny > 0 {
        value += pairwise_sum(&cy) / ny as f64;
    }
    (value, grads)
}

/// Edge-aware smoothness of a flow field: `|dx f| exp(-|dx I|) + |dy f|
/// exp(-|dy I|)`, with `|.|` summed over the two flow components and each
/// direction averaged over the pixels where its forward difference exists.
pub fn smoothness_loss(flow: &FlowField, image: &ImagePlane) -> Result<FlowTermOutput> {
    if flow.dims() != image.dims() {
        return Err(Error::DimensionMismatch {
            expected: image.dims(),
            got: flow.dims(),
        });
    }
    let (w, h) = flow.dims();
    if w * h == 0 {
        return Ok(FlowTermOutput::empty(0, 0));
    }
    let (wx, wy) = edge_weights(image);
    let (value, mut grads) = weighted_variation(&[&flow.u, &flow.v], w, h, &wx, &wy);
    let grad_v = grads.pop().unwrap_or_default();
    let grad_u = grads.pop().unwrap_or_default();
    Ok(FlowTermOutput {
        value,
        count: w * h,
        empty: false,
        grad_u,
        grad_v,
        contributions: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthSmoothnessOutput {
    pub value: f64,
    pub count: usize,
    pub grad_log_depth: Vec<f64>,
}

/// Edge-aware smoothness of mean-normalised disparity `(1/D) / mean(1/D)`,
/// as a function of log-depth. Invariant to a global depth scale.
pub fn disparity_smoothness_loss(log_depth: &[f64], image: &ImagePlane) -> Result<DepthSmoothnessOutput> {
    let (w, h) = image.dims();
    if log_depth.len() != w * h {
        return Err(Error::Config(format!(
            "log-depth has {} entries, image has {} pixels",
            log_depth.len(),
            w * h
        )));
    }
    if w * h == 0 {
        return Ok(DepthSmoothnessOutput {
            value: 0.0,
            count: 0,
            grad_log_depth: Vec::new(),
        });
    }
    let disp: Vec<f64> = log_depth.iter().map(|l| (-l).exp()).collect();
    let n = disp.len() as f64;
    let mean = pairwise_sum(&disp) / n;
    let normalised: Vec<f64> = disp.iter().map(|d| d / mean).collect();
    let (wx, wy) = edge_weights(image);
    let (value, grads) = weighted_variation(&[&normalised], w, h, &wx, &wy);
    let g = &grads[0];
    let coupling: Vec<f64> = g.iter().zip(&disp).map(|(a, b)| a * b).collect();
    let coupling = pairwise_sum(&coupling) / (n * mean * mean);
    let grad_log_depth = g
        .iter()
        .zip(&disp)
        .map(|(gi, di)| -di * (gi / mean - coupling))
        .collect();
    Ok(DepthSmoothnessOutput {
        value,
        count: w * h,
        grad_log_depth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::fd_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_flow_is_zero() {
        let img = ImagePlane::from_fn(9, 7, |x, y| (x * y) as f64 * 0.01);
        let out = smoothness_loss(&FlowField::constant(9, 7, 1.5, -2.0), &img).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn linear_flow_on_constant_image() {
        let img = ImagePlane::filled(10, 8, 1, 0.4);
        let (a, b) = (0.3, -0.7);
        let flow = FlowField::from_fn(10, 8, |x, y| (a * x as f64 + b * y as f64, 0.0));
        let out = smoothness_loss(&flow, &img).unwrap();
        assert!((out.value - (a.abs() + b.abs())).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (w, h) = (12, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = ImagePlane::from_fn(w, h, |_, _| rng.random_range(0.0..1.0));
        let flow = FlowField::from_fn(w, h, |_, _| (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)));
        let out = smoothness_loss(&flow, &img).unwrap();
        let mut x0 = flow.u.clone();
        x0.extend(&flow.v);
        let f = |x: &[f64]| {
            let fl = FlowField::new(w, h, x[..w * h].to_vec(), x[w * h..].to_vec()).unwrap();
            smoothness_loss(&fl, &img).unwrap().value
        };
        let fd = fd_gradient(f, &x0, 1e-5, None);
        let analytic: Vec<f64> = out.grad_u.iter().chain(&out.grad_v).copied().collect();
        let num: f64 = analytic.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = fd.iter().map(|b| b * b).sum();
        assert!((num / den).sqrt() < 1e-4);
    }

    #[test]
    fn disparity_smoothness_is_scale_invariant_and_matches_fd() {
        let (w, h) = (10, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let img = ImagePlane::from_fn(w, h, |_, _| rng.random_range(0.0..1.0));
        let ld: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..1.5)).collect();
        let out = disparity_smoothness_loss(&ld, &img).unwrap();
        let shifted: Vec<f64> = ld.iter().map(|l| l + 2f64.ln()).collect();
        let out2 = disparity_smoothness_loss(&shifted, &img).unwrap();
        assert!((out.value - out2.value).abs() < 1e-12);
        // the gradient of a scale-invariant function sums to zero
        assert!(out.grad_log_depth.iter().sum::<f64>().abs() < 1e-12);
        let fd = fd_gradient(|x| disparity_smoothness_loss(x, &img).unwrap().value, &ld, 1e-5, None);
        let num: f64 = out.grad_log_depth.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = fd.iter().map(|b| b * b).sum();
        assert!((num / den).sqrt() < 1e-4);
    }
}
