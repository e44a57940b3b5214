//! Pinhole camera model, rigid poses, backprojection and rigid flow.
//!
//! Integer pixel coordinates address pixel centres. A target pixel `p` with
//! depth `d` maps to the source view at `K (R d K^-1 p + t)` after
//! homogeneous normalisation, and the rigid flow is that location minus `p`.

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::imaging::Mask;
use crate::{Error, Result};

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Deserialize)]
struct IntrinsicsRepr {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

/// Pinhole intrinsics in pixels together with the image size they apply to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IntrinsicsRepr")]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl TryFrom<IntrinsicsRepr> for CameraIntrinsics {
    type Error = Error;

    fn try_from(r: IntrinsicsRepr) -> Result<Self> {
        CameraIntrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::Config(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::Config(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Intrinsics for the same camera observing a `2^level` times smaller image.
    ///
    /// Pixel centres of a 2x2 area-downsampled image sit at `2i + 0.5` in the
    /// finer grid, so the principal point maps to `(c - 0.5) / 2`.
    pub fn downscaled(&self, level: usize) -> Result<Self> {
        let mut k = *self;
        for _ in 0..level {
            k = CameraIntrinsics::new(
                k.fx / 2.0,
                k.fy / 2.0,
                ((k.cx - 0.5) / 2.0).max(0.0),
                ((k.cy - 0.5) / 2.0).max(0.0),
                k.width / 2,
                k.height / 2,
            )?;
        }
        Ok(k)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// `K^-1 [x, y, 1]^T`, the viewing ray with unit z.
    #[inline]
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, p: Vector2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= (self.width - 1) as f64 && p.y <= (self.height - 1) as f64
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Lifts pixel `p` at depth `d` to a 3D point in the camera frame.
pub fn backproject(p: Vector2<f64>, d: f64, k: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::InvalidDepth(d));
    }
    Ok(k.ray(p.x, p.y) * d)
}

/// Projects a camera-frame point to pixel coordinates. The result may lie
/// outside the image; callers mask it.
pub fn project(x: Vector3<f64>, k: &CameraIntrinsics) -> Result<Vector2<f64>> {
    if !(x.z > 0.0) {
        return Err(Error::BehindCamera(x.z));
    }
    Ok(Vector2::new(
        k.fx * x.x / x.z + k.cx,
        k.fy * x.y / x.z + k.cy,
    ))
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    axis_angle: [f64; 3],
    t: [f64; 3],
}

/// Rigid transform `X' = R X + t` taking target-frame points to the source frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "PoseRepr", into = "PoseRepr")]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl From<PoseRepr> for PoseSE3 {
    fn from(r: PoseRepr) -> Self {
        PoseSE3::from_axis_angle(Vector3::from(r.axis_angle), Vector3::from(r.t))
    }
}

impl From<PoseSE3> for PoseRepr {
    fn from(p: PoseSE3) -> Self {
        let c = p.to_chart();
        PoseRepr {
            axis_angle: [c.0[0], c.0[1], c.0[2]],
            t: [c.0[3], c.0[4], c.0[5]],
        }
    }
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::new(axis_angle).into_inner(),
            translation,
        }
    }

    /// Builds a pose from an explicit matrix, rejecting non-rotations.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        if !pose.is_valid() {
            return Err(Error::Config("rotation is not orthonormal with det +1".into()));
        }
        Ok(pose)
    }

    pub fn is_valid(&self) -> bool {
        let r = &self.rotation;
        let gram = r.transpose() * r - Matrix3::identity();
        gram.amax() < ROTATION_TOLERANCE && (r.determinant() - 1.0).abs() < ROTATION_TOLERANCE
    }

    #[inline]
    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn with_scaled_translation(&self, s: f64) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation,
            translation: self.translation * s,
        }
    }

    pub fn to_chart(&self) -> PoseChart {
        let w = Rotation3::from_matrix_unchecked(self.rotation).scaled_axis();
        let t = self.translation;
        PoseChart([w.x, w.y, w.z, t.x, t.y, t.z])
    }
}

/// Minimal pose parameterisation: axis-angle rotation followed by translation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseChart(pub [f64; 6]);

impl PoseChart {
    pub fn axis_angle(&self) -> Vector3<f64> {
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.0[3], self.0[4], self.0[5])
    }

    pub fn to_pose(&self) -> PoseSE3 {
        PoseSE3::from_axis_angle(self.axis_angle(), self.translation())
    }

    /// Right Jacobian of the rotation exponential:
    /// `exp(w + dw) ~= exp(w) exp(J_r(w) dw)`.
    pub fn rotation_right_jacobian(&self) -> Matrix3<f64> {
        let w = self.axis_angle();
        let theta2 = w.norm_squared();
        let theta = theta2.sqrt();
        let (a, b) = if theta < 1e-4 {
            (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
        } else {
            (
                (1.0 - theta.cos()) / theta2,
                (theta - theta.sin()) / (theta2 * theta),
            )
        };
        let wx = w.cross_matrix();
        Matrix3::identity() - wx * a + wx * wx * b
    }
}

/// Per-pixel depth with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    /// Wraps depth values; a pixel is valid when its depth is positive.
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        let valid = values.iter().map(|&d| d > 0.0).collect();
        Self::with_mask(width, height, values, valid)
    }

    pub fn with_mask(width: usize, height: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != width * height || valid.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: (width, height),
                got: (values.len(), valid.len()),
            });
        }
        if let Some(bad) = values.iter().find(|d| !d.is_finite()) {
            return Err(Error::InvalidDepth(*bad));
        }
        if let Some(i) = (0..values.len()).find(|&i| valid[i] && values[i] <= 0.0) {
            return Err(Error::InvalidDepth(values[i]));
        }
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Result<Self> {
        Self::new(width, height, vec![depth; width * height])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn scaled(&self, s: f64) -> DepthMap {
        DepthMap {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|d| d * s).collect(),
            valid: self.valid.clone(),
        }
    }

    pub fn valid_mask(&self) -> Mask {
        Mask::from_vec(self.width, self.height, self.valid.clone())
    }
}

/// Dense 2D displacement field in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, 0.0, 0.0)
    }

    pub fn constant(width: usize, height: usize, u: f64, v: f64) -> Self {
        Self {
            width,
            height,
            u: vec![u; width * height],
            v: vec![v; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let mut flow = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = f(x, y);
                flow.u[y * width + x] = u;
                flow.v[y * width + x] = v;
            }
        }
        flow
    }

    pub fn new(width: usize, height: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.len() != width * height || v.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: (width, height),
                got: (u.len(), v.len()),
            });
        }
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Config("flow contains non-finite values".into()));
        }
        Ok(Self { width, height, u, v })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn negated(&self) -> FlowField {
        FlowField {
            width: self.width,
            height: self.height,
            u: self.u.iter().map(|x| -x).collect(),
            v: self.v.iter().map(|x| -x).collect(),
        }
    }
}

fn check_dims(k: &CameraIntrinsics, d: &DepthMap) -> Result<()> {
    if k.dims() != d.dims() {
        return Err(Error::DimensionMismatch {
            expected: k.dims(),
            got: d.dims(),
        });
    }
    Ok(())
}

/// Rigid flow induced by depth `d` and motion `pose`, with the mask of pixels
/// whose depth is valid and whose transformed point lies in front of the
/// source camera. Masked pixels carry zero flow.
pub fn rigid_flow(d: &DepthMap, pose: &PoseSE3, k: &CameraIntrinsics) -> Result<(FlowField, Mask)> {
    check_dims(k, d)?;
    let (w, h) = d.dims();
    let per_pixel: Vec<Option<(f64, f64)>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            if !d.valid[i] {
                return None;
            }
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let pt = k.ray(x, y) * d.values[i];
            let q = pose.transform(&pt);
            if q.z <= 0.0 {
                return None;
            }
            Some((k.fx * q.x / q.z + k.cx - x, k.fy * q.y / q.z + k.cy - y))
        })
        .collect();
    let mut flow = FlowField::zeros(w, h);
    let mut mask = Mask::new(w, h, false);
    for (i, f) in per_pixel.into_iter().enumerate() {
        if let Some((u, v)) = f {
            flow.u[i] = u;
            flow.v[i] = v;
            mask.data[i] = true;
        }
    }
    Ok((flow, mask))
}

/// Rigid flow together with its derivatives with respect to log-depth and the
/// pose chart, pixel by pixel.
#[derive(Clone, Debug)]
pub struct RigidFlowLinearization {
    pub flow: FlowField,
    pub valid: Mask,
    /// `d(u, v) / d log(depth)` at each pixel.
    pub d_log_depth: Vec<[f64; 2]>,
    /// `d(u, v) / d chart` at each pixel, rows `u` and `v`.
    pub d_pose: Vec<[[f64; 6]; 2]>,
}

pub fn linearize_rigid_flow(
    d: &DepthMap,
    chart: &PoseChart,
    k: &CameraIntrinsics,
) -> Result<RigidFlowLinearization> {
    check_dims(k, d)?;
    let (w, h) = d.dims();
    let pose = chart.to_pose();
    let jr = chart.rotation_right_jacobian();
    type PixelLin = Option<((f64, f64), [f64; 2], [[f64; 6]; 2])>;
    let per_pixel: Vec<PixelLin> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            if !d.valid[i] {
                return None;
            }
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let pt = k.ray(x, y) * d.values[i];
            let rp = pose.rotation * pt;
            let q = rp + pose.translation;
            if q.z <= 0.0 {
                return None;
            }
            let iz = 1.0 / q.z;
            // d(u, v) / dq
            let jp = [
                [k.fx * iz, 0.0, -k.fx * q.x * iz * iz],
                [0.0, k.fy * iz, -k.fy * q.y * iz * iz],
            ];
            // dq / dw = -R [pt]x J_r
            let dq_dw = -(pose.rotation * pt.cross_matrix() * jr);
            let mut dl = [0.0; 2];
            let mut dp = [[0.0; 6]; 2];
            for r in 0..2 {
                dl[r] = jp[r][0] * rp.x + jp[r][1] * rp.y + jp[r][2] * rp.z;
                for c in 0..3 {
                    dp[r][c] = jp[r][0] * dq_dw[(0, c)] + jp[r][1] * dq_dw[(1, c)] + jp[r][2] * dq_dw[(2, c)];
                    dp[r][3 + c] = jp[r][c];
                }
            }
            let flow = (k.fx * q.x * iz + k.cx - x, k.fy * q.y * iz + k.cy - y);
            Some((flow, dl, dp))
        })
        .collect();
    let mut lin = RigidFlowLinearization {
        flow: FlowField::zeros(w, h),
        valid: Mask::new(w, h, false),
        d_log_depth: vec![[0.0; 2]; w * h],
        d_pose: vec![[[0.0; 6]; 2]; w * h],
    };
    for (i, p) in per_pixel.into_iter().enumerate() {
        if let Some(((u, v), dl, dp)) = p {
            lin.flow.u[i] = u;
            lin.flow.v[i] = v;
            lin.valid.data[i] = true;
            lin.d_log_depth[i] = dl;
            lin.d_pose[i] = dp;
        }
    }
    Ok(lin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    #[test]
    fn principal_ray_is_optical_axis() {
        let k = cam();
        let x = backproject(Vector2::new(k.cx, k.cy), 2.0, &k).unwrap();
        assert_eq!(x, Vector3::new(0.0, 0.0, 2.0));
        let x = backproject(Vector2::new(k.cx + k.fx, k.cy), 1.0, &k).unwrap();
        assert_eq!(x, Vector3::new(1.0, 0.0, 1.0));
    }

    #[test]
    fn projection_examples() {
        let k = cam();
        assert_eq!(project(Vector3::new(0.0, 0.0, 5.0), &k).unwrap(), Vector2::new(50.0, 50.0));
        assert_eq!(project(Vector3::new(1.0, 0.0, 1.0), &k).unwrap(), Vector2::new(150.0, 50.0));
    }

    #[test]
    fn errors_on_bad_depth_and_behind_camera() {
        let k = cam();
        assert!(matches!(
            backproject(Vector2::new(1.0, 1.0), 0.0, &k),
            Err(Error::InvalidDepth(_))
        ));
        assert!(matches!(
            backproject(Vector2::new(1.0, 1.0), -1.0, &k),
            Err(Error::InvalidDepth(_))
        ));
        assert!(matches!(
            project(Vector3::new(0.0, 0.0, -1.0), &k),
            Err(Error::BehindCamera(_))
        ));
        assert!(project(Vector3::new(0.0, 0.0, 0.0), &k).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 3.9, 0.0, 4, 4).is_ok());
        let bad = r#"{"fx":-1,"fy":1,"cx":1,"cy":1,"width":4,"height":4}"#;
        assert!(serde_json::from_str::<CameraIntrinsics>(bad).is_err());
    }

    #[test]
    fn round_trip_random_pixels() {
        let k = CameraIntrinsics::new(120.0, 95.0, 60.3, 41.7, 128, 96).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let p = Vector2::new(rng.random_range(0.0..127.0), rng.random_range(0.0..95.0));
            let d = rng.random_range(0.1..50.0);
            let q = project(backproject(p, d, &k).unwrap(), &k).unwrap();
            assert!((q - p).norm() < 1e-9);
        }
    }

    #[test]
    fn projection_scale_invariant() {
        let k = cam();
        let x = Vector3::new(0.3, -0.7, 2.5);
        let a = project(x, &k).unwrap();
        for s in [0.01, 0.5, 3.0, 1000.0] {
            assert!((project(x * s, &k).unwrap() - a).norm() < 1e-12);
        }
    }

    #[test]
    fn pose_group_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let mut c = [0.0; 6];
            c.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            let a = PoseChart(c).to_pose();
            assert!(a.is_valid());
            let e = a.compose(&a.inverse());
            assert!((e.rotation - Matrix3::identity()).amax() < 1e-9);
            assert!(e.translation.amax() < 1e-9);
            let b = PoseChart([0.1, 0.2, -0.3, 1.0, 0.0, 2.0]).to_pose();
            let x = Vector3::new(0.5, -1.0, 3.0);
            let lhs = a.compose(&b).transform(&x);
            let rhs = a.transform(&b.transform(&x));
            assert!((lhs - rhs).amax() < 1e-9);
            let back = a.to_chart().to_pose();
            assert!((back.rotation - a.rotation).amax() < 1e-9);
        }
    }

    #[test]
    fn pose_json_shape() {
        let p = PoseSE3::from_axis_angle(Vector3::new(0.0, 0.1, 0.0), Vector3::new(1.0, 2.0, 3.0));
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("axis_angle") && s.contains("\"t\""));
        let q: PoseSE3 = serde_json::from_str(&s).unwrap();
        assert!((q.rotation - p.rotation).amax() < 1e-12);
        assert!(PoseSE3::from_parts(Matrix3::identity() * 2.0, Vector3::zeros()).is_err());
    }

    #[test]
    fn identity_pose_gives_zero_flow() {
        let k = CameraIntrinsics::new(40.0, 40.0, 15.5, 11.5, 32, 24).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = DepthMap::new(32, 24, (0..32 * 24).map(|_| rng.random_range(0.5..8.0)).collect()).unwrap();
        let (f, m) = rigid_flow(&d, &PoseSE3::identity(), &k).unwrap();
        assert!(m.data.iter().all(|&v| v));
        assert!(f.u.iter().chain(f.v.iter()).all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn forward_translation_expands_radially() {
        // Fronto-parallel plane at depth z, camera moving forward by tz:
        // flow(p) = (p - c) * tz / (z - tz).
        let k = CameraIntrinsics::new(40.0, 40.0, 16.0, 12.0, 33, 25).unwrap();
        let (z, tz) = (4.0, 0.5);
        let d = DepthMap::constant(33, 25, z).unwrap();
        let pose = PoseSE3::from_axis_angle(Vector3::zeros(), Vector3::new(0.0, 0.0, -tz));
        let (f, _) = rigid_flow(&d, &pose, &k).unwrap();
        for y in 0..25 {
            for x in 0..33 {
                let (u, v) = f.at(x, y);
                let s = tz / (z - tz);
                assert!((u - (x as f64 - 16.0) * s).abs() < 1e-9);
                assert!((v - (y as f64 - 12.0) * s).abs() < 1e-9);
                // reflection through the principal point negates the flow
                let (u2, v2) = f.at(32 - x, 24 - y);
                assert!((u + u2).abs() < 1e-9 && (v + v2).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn behind_camera_is_masked() {
        let k = CameraIntrinsics::new(10.0, 10.0, 2.0, 2.0, 5, 5).unwrap();
        let d = DepthMap::constant(5, 5, 1.0).unwrap();
        let pose = PoseSE3::from_axis_angle(Vector3::zeros(), Vector3::new(0.0, 0.0, -2.0));
        let (f, m) = rigid_flow(&d, &pose, &k).unwrap();
        assert!(m.data.iter().all(|&v| !v));
        assert!(f.u.iter().all(|&u| u == 0.0));
    }

    #[test]
    fn rigid_flow_depth_translation_homogeneity() {
        let k = CameraIntrinsics::new(50.0, 50.0, 20.0, 15.0, 40, 30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = DepthMap::new(40, 30, (0..1200).map(|_| rng.random_range(1.0..6.0)).collect()).unwrap();
        let pose = PoseChart([0.02, -0.03, 0.01, 0.2, -0.1, 0.05]).to_pose();
        let (f1, _) = rigid_flow(&d, &pose, &k).unwrap();
        for s in [0.3, 2.0, 7.5] {
            let (f2, _) = rigid_flow(&d.scaled(s), &pose.with_scaled_translation(s), &k).unwrap();
            for i in 0..1200 {
                assert!((f1.u[i] - f2.u[i]).abs() < 1e-9);
                assert!((f1.v[i] - f2.v[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn linearization_matches_finite_differences() {
        let k = CameraIntrinsics::new(50.0, 45.0, 6.0, 4.0, 12, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let log_d: Vec<f64> = (0..108).map(|_| rng.random_range(0.0..1.5)).collect();
        let chart = PoseChart([0.1, -0.2, 0.15, 0.3, -0.1, 0.2]);
        let depth = |ld: &[f64]| DepthMap::new(12, 9, ld.iter().map(|v| v.exp()).collect()).unwrap();
        let lin = linearize_rigid_flow(&depth(&log_d), &chart, &k).unwrap();
        let h = 1e-6;
        for i in [0usize, 17, 60, 107] {
            let mut a = log_d.clone();
            let mut b = log_d.clone();
            a[i] += h;
            b[i] -= h;
            let (fa, _) = rigid_flow(&depth(&a), &chart.to_pose(), &k).unwrap();
            let (fb, _) = rigid_flow(&depth(&b), &chart.to_pose(), &k).unwrap();
            let du = (fa.u[i] - fb.u[i]) / (2.0 * h);
            let dv = (fa.v[i] - fb.v[i]) / (2.0 * h);
            assert!((du - lin.d_log_depth[i][0]).abs() < 1e-6);
            assert!((dv - lin.d_log_depth[i][1]).abs() < 1e-6);
        }
        for j in 0..6 {
            let mut a = chart;
            let mut b = chart;
            a.0[j] += h;
            b.0[j] -= h;
            let (fa, _) = rigid_flow(&depth(&log_d), &a.to_pose(), &k).unwrap();
            let (fb, _) = rigid_flow(&depth(&log_d), &b.to_pose(), &k).unwrap();
            for i in [3usize, 50, 99] {
                let du = (fa.u[i] - fb.u[i]) / (2.0 * h);
                let dv = (fa.v[i] - fb.v[i]) / (2.0 * h);
                assert!((du - lin.d_pose[i][0][j]).abs() < 1e-6, "u pose {j}");
                assert!((dv - lin.d_pose[i][1][j]).abs() < 1e-6, "v pose {j}");
            }
        }
    }
}
