//! Cameras, rigid transforms and depth-based image warping.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::dual::{Dual, Scalar};
use crate::autodiff::linalg::{
    mat3_det, mat3_identity, mat3_mul, mat3_transpose, mat3_vec, vec3_add, vec3_cross, vec3_norm,
    vec3_scale, vec3_sub, Mat3, Vec3,
};
use crate::autodiff::{bilinear_sample, Tensor, Var};
use crate::projection::FeatureTriplet;
use crate::{Error, Real, Result};

/// Points closer to the camera plane than this are treated as invalid.
pub const MIN_DEPTH: Real = 1e-6;

/// Scale, rotation and translation of one primitive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub scale: Vec3,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            scale: [1.0; 3],
            rotation: mat3_identity(),
            translation: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_rotation(&self.rotation)?;
        if self.scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Invalid(format!("non-positive scale {:?}", self.scale)));
        }
        if self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::Invalid("non-finite translation".into()));
        }
        Ok(())
    }

    /// p_world = R (s ⊙ p) + t
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        let scaled = [p[0] * self.scale[0], p[1] * self.scale[1], p[2] * self.scale[2]];
        vec3_add(&mat3_vec(&self.rotation, &scaled), &self.translation)
    }
}

/// Checks RᵀR = I and det R = 1 to within 1e-6.
pub fn check_rotation(r: &Mat3) -> Result<()> {
    let rtr = mat3_mul(&mat3_transpose(r), r);
    let id = mat3_identity();
    for i in 0..3 {
        for j in 0..3 {
            if !((rtr[i][j] - id[i][j]).abs() <= 1e-6) {
                return Err(Error::Invalid(format!("rotation not orthonormal: {:?}", r)));
            }
        }
    }
    if !((mat3_det(r) - 1.0).abs() <= 1e-6) {
        return Err(Error::Invalid(format!("rotation determinant {}", mat3_det(r))));
    }
    Ok(())
}

/// Pinhole camera with world-to-camera extrinsics.
///
/// Camera space has x to the right, y down and z forward; pixel centres sit
/// at integer coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Mat3,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(intrinsics: Mat3, rotation: Mat3, translation: Vec3, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            intrinsics,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Identity extrinsics, square pixels and a centred principal point.
    pub fn simple(focal: Real, width: usize, height: usize) -> Self {
        Self {
            intrinsics: [
                [focal, 0.0, (width as Real - 1.0) / 2.0],
                [0.0, focal, (height as Real - 1.0) / 2.0],
                [0.0, 0.0, 1.0],
            ],
            rotation: mat3_identity(),
            translation: [0.0; 3],
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if k[2][2] != 1.0 || !(k[0][0] > 0.0) || !(k[1][1] > 0.0) || k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 {
            return Err(Error::Invalid(format!("malformed intrinsics {:?}", k)));
        }
        check_rotation(&self.rotation)?;
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invalid("empty image size".into()));
        }
        Ok(())
    }

    pub fn focal(&self) -> (Real, Real) {
        (self.intrinsics[0][0], self.intrinsics[1][1])
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        vec3_add(&mat3_vec(&self.rotation, p), &self.translation)
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        vec3_scale(&mat3_vec(&mat3_transpose(&self.rotation), &self.translation), -1.0)
    }

    fn k_inv(&self) -> Mat3 {
        let k = &self.intrinsics;
        let (fx, s, cx, fy, cy) = (k[0][0], k[0][1], k[0][2], k[1][1], k[1][2]);
        [
            [1.0 / fx, -s / (fx * fy), (s * cy - cx * fy) / (fx * fy)],
            [0.0, 1.0 / fy, -cy / fy],
            [0.0, 0.0, 1.0],
        ]
    }

    /// Projects a camera-space point; `None` when it is not in front of the camera.
    pub fn project_camera_point(&self, pc: &Vec3) -> Option<([Real; 2], Real)> {
        if !(pc[2] > MIN_DEPTH) {
            return None;
        }
        let k = &self.intrinsics;
        let u = (k[0][0] * pc[0] + k[0][1] * pc[1]) / pc[2] + k[0][2];
        let v = k[1][1] * pc[1] / pc[2] + k[1][2];
        Some(([u, v], pc[2]))
    }
}

/// Pixel coordinates, camera-space depths and validity flags for world points.
pub fn project(camera: &Camera, points: &[Vec3]) -> (Vec<[Real; 2]>, Vec<Real>, Vec<bool>) {
    let mut pixels = Vec::with_capacity(points.len());
    let mut depths = Vec::with_capacity(points.len());
    let mut valid = Vec::with_capacity(points.len());
    for p in points {
        let pc = camera.to_camera(p);
        match camera.project_camera_point(&pc) {
            Some((px, z)) => {
                pixels.push(px);
                depths.push(z);
                valid.push(true);
            }
            None => {
                pixels.push([0.0, 0.0]);
                depths.push(pc[2]);
                valid.push(false);
            }
        }
    }
    (pixels, depths, valid)
}

/// World point seen at `pixel` with camera-space depth `depth`.
pub fn backproject(camera: &Camera, pixel: [Real; 2], depth: Real) -> Result<Vec3> {
    if !(depth > 0.0) {
        return Err(Error::Invalid(format!("backproject depth {} must be positive", depth)));
    }
    let ray = mat3_vec(&camera.k_inv(), &[pixel[0], pixel[1], 1.0]);
    let pc = vec3_scale(&ray, depth);
    Ok(mat3_vec(&mat3_transpose(&camera.rotation), &vec3_sub(&pc, &camera.translation)))
}

/// Differentiable projection of `[n, 3]` world points to `[n, 3]` rows of
/// `(u, v, depth)`. Invalid rows (behind the camera) carry zeros and no gradient.
pub fn project_points<'t>(camera: &Camera, points: Var<'t>) -> Result<(Var<'t>, Vec<bool>)> {
    let pts = points.value();
    let &[n, 3] = pts.shape() else {
        return Err(Error::Shape(format!("project_points expects [n,3], got {:?}", pts.shape())));
    };
    let k = camera.intrinsics;
    let rc = camera.rotation;
    let mut out = vec![0.0; n * 3];
    let mut valid = vec![false; n];
    // per point: camera-space coordinates, kept for the adjoint
    let mut cam_pts = vec![[0.0; 3]; n];
    for i in 0..n {
        let p = [pts.data()[3 * i], pts.data()[3 * i + 1], pts.data()[3 * i + 2]];
        let pc = camera.to_camera(&p);
        cam_pts[i] = pc;
        if let Some((px, z)) = camera.project_camera_point(&pc) {
            out[3 * i] = px[0];
            out[3 * i + 1] = px[1];
            out[3 * i + 2] = z;
            valid[i] = true;
        }
    }
    let mask = valid.clone();
    let var = points
        .tape()
        .record(Tensor::from_parts(vec![n, 3], out), &[points], move |g| {
            let mut gp = vec![0.0; n * 3];
            for i in 0..n {
                if !valid[i] {
                    continue;
                }
                let [x, y, z] = cam_pts[i];
                let (gu, gv, gz) = (g.data()[3 * i], g.data()[3 * i + 1], g.data()[3 * i + 2]);
                // u = (fx x + s y)/z + cx, v = fy y / z + cy
                let gx = gu * k[0][0] / z;
                let gy = gu * k[0][1] / z + gv * k[1][1] / z;
                let gzz = gz - gu * (k[0][0] * x + k[0][1] * y) / (z * z) - gv * k[1][1] * y / (z * z);
                let gc = [gx, gy, gzz];
                // p_cam = R p + t  =>  dL/dp = Rᵀ dL/dp_cam
                for a in 0..3 {
                    gp[3 * i + a] = rc[0][a] * gc[0] + rc[1][a] * gc[1] + rc[2][a] * gc[2];
                }
            }
            vec![Some(Tensor::from_parts(vec![n, 3], gp))]
        });
    Ok((var, mask))
}

/// Rodrigues' formula, written as a function of θ² so that it stays smooth
/// through the zero rotation.
pub fn rodrigues<S: Scalar>(v: [S; 3]) -> [[S; 3]; 3] {
    let t2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let (a, b) = if t2.re() < 1e-8 {
        // sin θ/θ and (1 - cos θ)/θ² by Taylor expansion
        let a = S::cst(1.0) - t2.scale(1.0 / 6.0) + t2 * t2.scale(1.0 / 120.0);
        let b = S::cst(0.5) - t2.scale(1.0 / 24.0) + t2 * t2.scale(1.0 / 720.0);
        (a, b)
    } else {
        let t = t2.sqrt();
        (t.sin() / t, (S::cst(1.0) - t.cos()) / t2)
    };
    let zero = S::cst(0.0);
    let k = [[zero, -v[2], v[1]], [v[2], zero, -v[0]], [-v[1], v[0], zero]];
    let mut r = [[zero; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut kk = zero;
            for m in 0..3 {
                kk = kk + k[i][m] * k[m][j];
            }
            let id = if i == j { S::cst(1.0) } else { zero };
            r[i][j] = id + a * k[i][j] + b * kk;
        }
    }
    r
}

pub fn rotation_from_axis_angle(v: Vec3) -> Mat3 {
    rodrigues(v)
}

/// Differentiable axis-angle (`[3]`) to rotation matrix (`[3, 3]`).
pub fn rotation_var(v: Var<'_>) -> Result<Var<'_>> {
    let vv = v.value();
    if vv.numel() != 3 {
        return Err(Error::Shape(format!("axis-angle needs 3 values, got {:?}", vv.shape())));
    }
    let p = [vv.data()[0], vv.data()[1], vv.data()[2]];
    let jet = rodrigues([Dual::<3>::var(p[0], 0), Dual::var(p[1], 1), Dual::var(p[2], 2)]);
    let value: Vec<Real> = jet.iter().flatten().map(|d| d.v).collect();
    let shape = vv.shape().to_vec();
    Ok(v.tape().record(Tensor::from_parts(vec![3, 3], value), &[v], move |g| {
        let mut gv = [0.0; 3];
        for (gij, d) in g.data().iter().zip(jet.iter().flatten()) {
            for s in 0..3 {
                gv[s] += gij * d.d[s];
            }
        }
        vec![Some(Tensor::from_parts(shape.clone(), gv.to_vec()))]
    }))
}

/// Rigid world-space motion `x ↦ R x + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RelativeTransform {
    pub fn identity() -> Self {
        Self {
            rotation: mat3_identity(),
            translation: [0.0; 3],
        }
    }

    /// Exact (bitwise) identity test.
    pub fn is_identity(&self) -> bool {
        self.rotation == mat3_identity() && self.translation == [0.0; 3]
    }

    pub fn inverse(&self) -> Self {
        let rt = mat3_transpose(&self.rotation);
        Self {
            translation: vec3_scale(&mat3_vec(&rt, &self.translation), -1.0),
            rotation: rt,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        vec3_add(&mat3_vec(&self.rotation, p), &self.translation)
    }

    /// Motion of a rigid object rotated by `delta_rotation` about its own
    /// centre `center` and then shifted by `delta_translation`.
    pub fn about_center(delta_rotation: Mat3, center: Vec3, delta_translation: Vec3) -> Self {
        let rotated = mat3_vec(&delta_rotation, &center);
        Self {
            rotation: delta_rotation,
            translation: vec3_add(&vec3_sub(&center, &rotated), &delta_translation),
        }
    }

    /// The same motion expressed in the camera frame: `c ↦ M c + b`.
    fn in_camera(&self, camera: &Camera) -> (Mat3, Vec3) {
        let rc = &camera.rotation;
        let m = mat3_mul(&mat3_mul(rc, &self.rotation), &mat3_transpose(rc));
        let b = vec3_sub(
            &vec3_add(&mat3_vec(rc, &self.translation), &camera.translation),
            &mat3_vec(&m, &camera.translation),
        );
        (m, b)
    }
}

/// Inverse warp of `source` into the view where each pixel shows the point
/// `transform⁻¹(x)`; equivalently, for every target pixel we backproject with
/// `target_depth`, move the point by `transform`, and sample `source` there.
///
/// The warped depth is re-expressed in the target frame. Pixels whose
/// sample falls outside the source image, lands behind the camera, or (when
/// `occlusion_threshold` is set) disagrees with the target depth by more
/// than the threshold get mask `false`.
pub fn warp_image<'t>(
    source: &FeatureTriplet<'t>,
    target_depth: Var<'t>,
    camera: &Camera,
    transform: &RelativeTransform,
    occlusion_threshold: Option<Real>,
) -> Result<(FeatureTriplet<'t>, Vec<bool>)> {
    let (h, w) = (camera.height, camera.width);
    if target_depth.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "target depth {:?} does not match a {}x{} camera",
            target_depth.shape(),
            h,
            w
        )));
    }
    if transform.is_identity() {
        let mask = occlusion_mask(&source.depth.value(), &target_depth.value(), occlusion_threshold, None);
        return Ok((*source, mask));
    }
    let (coords, cam_valid) = warp_coordinates(target_depth, camera, transform)?;
    let (features, fmask) = bilinear_sample(source.features, coords)?;
    let (alpha, _) = bilinear_sample(source.alpha.reshape(&[1, h, w])?, coords)?;
    let (depth, _) = bilinear_sample(source.depth.reshape(&[1, h, w])?, coords)?;
    let depth = depth_to_target(depth.reshape(&[h, w])?, coords, camera, transform)?;
    let valid: Vec<bool> = fmask.iter().zip(&cam_valid).map(|(a, b)| *a && *b).collect();
    let mask = occlusion_mask(&depth.value(), &target_depth.value(), occlusion_threshold, Some(&valid));
    Ok((
        FeatureTriplet {
            features,
            alpha: alpha.reshape(&[h, w])?,
            depth,
        },
        mask,
    ))
}

fn occlusion_mask(warped: &Tensor, target: &Tensor, threshold: Option<Real>, valid: Option<&[bool]>) -> Vec<bool> {
    warped
        .data()
        .iter()
        .zip(target.data())
        .enumerate()
        .map(|(i, (a, b))| {
            let ok = valid.is_none_or(|v| v[i]);
            ok && threshold.is_none_or(|t| (a - b).abs() <= t)
        })
        .collect()
}

/// For every target pixel, the source pixel coordinates of its moved point.
fn warp_coordinates<'t>(
    target_depth: Var<'t>,
    camera: &Camera,
    transform: &RelativeTransform,
) -> Result<(Var<'t>, Vec<bool>)> {
    let depth = target_depth.value();
    let (h, w) = (camera.height, camera.width);
    let (m, b) = transform.in_camera(camera);
    let kinv = camera.k_inv();
    let k = camera.intrinsics;
    let n = h * w;
    // moved camera-space point: q = depth · a + b with a = M K⁻¹ [x, y, 1]
    let mut dirs = vec![[0.0; 3]; n];
    let mut moved = vec![[0.0; 3]; n];
    let mut valid = vec![false; n];
    let mut out = vec![0.0; n * 2];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let a = mat3_vec(&m, &mat3_vec(&kinv, &[j as Real, i as Real, 1.0]));
            let z = depth.data()[p];
            let q = vec3_add(&vec3_scale(&a, z), &b);
            dirs[p] = a;
            moved[p] = q;
            if z > 0.0 && q[2] > MIN_DEPTH {
                valid[p] = true;
                out[2 * p] = (k[0][0] * q[0] + k[0][1] * q[1]) / q[2] + k[0][2];
                out[2 * p + 1] = k[1][1] * q[1] / q[2] + k[1][2];
            } else {
                out[2 * p] = -1.0;
                out[2 * p + 1] = -1.0;
            }
        }
    }
    let mask = valid.clone();
    let var = target_depth
        .tape()
        .record(Tensor::from_parts(vec![h, w, 2], out), &[target_depth], move |g| {
            let mut gd = vec![0.0; n];
            for p in 0..n {
                if !valid[p] {
                    continue;
                }
                let q = moved[p];
                let a = dirs[p];
                let (gu, gv) = (g.data()[2 * p], g.data()[2 * p + 1]);
                let du_dq = [k[0][0] / q[2], k[0][1] / q[2], -(k[0][0] * q[0] + k[0][1] * q[1]) / (q[2] * q[2])];
                let dv_dq = [0.0, k[1][1] / q[2], -k[1][1] * q[1] / (q[2] * q[2])];
                let mut s = 0.0;
                for c in 0..3 {
                    s += (gu * du_dq[c] + gv * dv_dq[c]) * a[c];
                }
                gd[p] = s;
            }
            vec![Some(Tensor::from_parts(vec![h, w], gd))]
        });
    Ok((var, mask))
}

/// Moves sampled source depths back into the target frame:
/// z_t = [Mᵀ (d · K⁻¹ [x, y, 1] − b)]_z.
fn depth_to_target<'t>(
    sampled: Var<'t>,
    coords: Var<'t>,
    camera: &Camera,
    transform: &RelativeTransform,
) -> Result<Var<'t>> {
    let d = sampled.value();
    let c = coords.value();
    let (m, b) = transform.in_camera(camera);
    let kinv = camera.k_inv();
    // row 3 of Mᵀ is column 3 of M
    let m3 = [m[0][2], m[1][2], m[2][2]];
    let m3k = [
        m3[0] * kinv[0][0] + m3[1] * kinv[1][0] + m3[2] * kinv[2][0],
        m3[0] * kinv[0][1] + m3[1] * kinv[1][1] + m3[2] * kinv[2][1],
        m3[0] * kinv[0][2] + m3[1] * kinv[1][2] + m3[2] * kinv[2][2],
    ];
    let offset = m3[0] * b[0] + m3[1] * b[1] + m3[2] * b[2];
    let n = d.numel();
    let out: Vec<Real> = (0..n)
        .map(|p| {
            let (x, y) = (c.data()[2 * p], c.data()[2 * p + 1]);
            d.data()[p] * (m3k[0] * x + m3k[1] * y + m3k[2]) - offset
        })
        .collect();
    let shape = d.shape().to_vec();
    let cshape = c.shape().to_vec();
    let (d_req, c_req) = (sampled.requires_grad(), coords.requires_grad());
    Ok(sampled
        .tape()
        .record(Tensor::from_parts(shape.clone(), out), &[sampled, coords], move |g| {
            let gd = d_req.then(|| {
                let v = (0..n)
                    .map(|p| {
                        let (x, y) = (c.data()[2 * p], c.data()[2 * p + 1]);
                        g.data()[p] * (m3k[0] * x + m3k[1] * y + m3k[2])
                    })
                    .collect();
                Tensor::from_parts(shape.clone(), v)
            });
            let gc = c_req.then(|| {
                let mut v = vec![0.0; 2 * n];
                for p in 0..n {
                    v[2 * p] = g.data()[p] * d.data()[p] * m3k[0];
                    v[2 * p + 1] = g.data()[p] * d.data()[p] * m3k[1];
                }
                Tensor::from_parts(cshape.clone(), v)
            });
            vec![gd, gc]
        }))
}

/// Distribution of training viewpoints on the upper hemisphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraSampling {
    pub radius: Real,
    pub elevation_min_deg: Real,
    pub elevation_max_deg: Real,
    pub look_at: Vec3,
    pub focal: Real,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraSampling {
    fn default() -> Self {
        Self {
            radius: 2.5,
            elevation_min_deg: 10.0,
            elevation_max_deg: 80.0,
            look_at: [0.0; 3],
            focal: 64.0,
            width: 64,
            height: 64,
        }
    }
}

/// Scene content lies inside this radius around the origin.
pub const SCENE_RADIUS: Real = 1.0;

impl CameraSampling {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > SCENE_RADIUS) {
            return Err(Error::Invalid(format!(
                "camera radius {} must exceed the scene radius {}",
                self.radius, SCENE_RADIUS
            )));
        }
        if !(self.elevation_min_deg <= self.elevation_max_deg)
            || self.elevation_min_deg < 0.0
            || self.elevation_max_deg > 90.0
        {
            return Err(Error::Invalid("elevation range must lie in [0, 90] degrees".into()));
        }
        if !(self.focal > 0.0) {
            return Err(Error::Invalid("focal length must be positive".into()));
        }
        Ok(())
    }

    /// Camera at the given azimuth/elevation (radians) on the sampling sphere.
    pub fn camera_at(&self, azimuth: Real, elevation: Real) -> Camera {
        let r = self.radius;
        let eye = vec3_add(
            &[
                r * elevation.cos() * azimuth.cos(),
                r * elevation.cos() * azimuth.sin(),
                r * elevation.sin(),
            ],
            &self.look_at,
        );
        look_at(eye, self.look_at, self.focal, self.width, self.height)
    }
}

pub fn sample_camera<R: Rng + ?Sized>(rng: &mut R, config: &CameraSampling) -> Camera {
    let azimuth: Real = rng.gen_range(0.0..(2.0 * PI) as Real);
    let lo = config.elevation_min_deg.to_radians();
    let hi = config.elevation_max_deg.to_radians();
    let elevation = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    config.camera_at(azimuth, elevation)
}

/// Camera at `eye` looking at `target` with world up +z.
pub fn look_at(eye: Vec3, target: Vec3, focal: Real, width: usize, height: usize) -> Camera {
    let fwd = vec3_sub(&target, &eye);
    let fwd = vec3_scale(&fwd, 1.0 / vec3_norm(&fwd));
    let mut up: Vec3 = [0.0, 0.0, 1.0];
    if vec3_norm(&vec3_cross(&fwd, &up)) < 1e-9 {
        // looking straight along the up axis
        up = if fwd[1].abs() < 0.9 { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] };
    }
    let right = vec3_cross(&fwd, &up);
    let right = vec3_scale(&right, 1.0 / vec3_norm(&right));
    let down = vec3_cross(&fwd, &right);
    let rotation = [right, down, fwd];
    let translation = vec3_scale(&mat3_vec(&rotation, &eye), -1.0);
    let mut cam = Camera::simple(focal, width, height);
    cam.rotation = rotation;
    cam.translation = translation;
    cam
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[Real], b: &[Real], tol: Real) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn zero_axis_angle_is_identity() {
        assert_eq!(rotation_from_axis_angle([0.0; 3]), mat3_identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = rotation_from_axis_angle([0.0, 0.0, PI as Real / 2.0]);
        let p = mat3_vec(&r, &[1.0, 0.0, 0.0]);
        assert!(close(&p, &[0.0, 1.0, 0.0], 1e-9), "{p:?}");
    }

    #[test]
    fn rotation_gradcheck() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<Real> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let p: Vec<Real> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let err = gradcheck(
                |_, x| {
                    let r = rotation_var(x[0]).unwrap();
                    let p = x[1].reshape(&[3, 1]).unwrap();
                    (r.matmul(p).unwrap() * x[2]).sum()
                },
                &[
                    Tensor::from_vec(v),
                    Tensor::from_vec(p),
                    Tensor::new(&[3, 1], vec![0.3, -0.7, 1.1]).unwrap(),
                ],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn rotation_gradient_near_zero_is_finite() {
        let err = gradcheck(
            |_, x| rotation_var(x[0]).unwrap().square().sum(),
            &[Tensor::from_vec(vec![1e-7, -2e-7, 0.0])],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn principal_ray_projects_to_principal_point() {
        let cam = Camera::simple(50.0, 64, 48);
        let (px, d, ok) = project(&cam, &[[0.0, 0.0, 5.0], [1.0, 0.0, 5.0]]);
        assert!(ok[0] && ok[1]);
        assert_eq!(px[0], [31.5, 23.5]);
        assert_eq!(d[0], 5.0);
        assert!(close(&px[1], &[31.5 + 10.0, 23.5], 1e-12));
    }

    #[test]
    fn behind_camera_is_flagged_not_error() {
        let cam = Camera::simple(50.0, 8, 8);
        let (_, _, ok) = project(&cam, &[[0.0, 0.0, -1.0], [0.0, 0.0, 0.0]]);
        assert_eq!(ok, vec![false, false]);
    }

    #[test]
    fn backproject_principal_point() {
        let cam = Camera::simple(50.0, 64, 48);
        let p = backproject(&cam, [31.5, 23.5], 5.0).unwrap();
        assert!(close(&p, &[0.0, 0.0, 5.0], 1e-12));
        assert!(backproject(&cam, [1.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn project_backproject_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sampling = CameraSampling::default();
        for _ in 0..10 {
            let cam = sample_camera(&mut rng, &sampling);
            for _ in 0..100 {
                let px = [rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0)];
                let d = rng.gen_range(0.5..10.0);
                let p = backproject(&cam, px, d).unwrap();
                let (q, z, ok) = project(&cam, &[p]);
                assert!(ok[0]);
                assert!((q[0][0] - px[0]).abs() < 1e-9 && (q[0][1] - px[1]).abs() < 1e-9);
                assert!((z[0] - d).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn project_points_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cam = sample_camera(&mut rng, &CameraSampling::default());
        let pts: Vec<Real> = (0..12).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let wts: Vec<Real> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let err = gradcheck(
            |_, x| (project_points(&cam, x[0]).unwrap().0 * x[1]).sum(),
            &[Tensor::new(&[4, 3], pts).unwrap(), Tensor::new(&[4, 3], wts).unwrap()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn default_view_from_the_x_axis() {
        let cam = CameraSampling::default().camera_at(0.0, 0.0);
        let c = cam.center();
        assert!(close(&c, &[2.5, 0.0, 0.0], 1e-12));
        let (px, d, _) = project(&cam, &[[0.0; 3]]);
        assert!(close(&px[0], &[31.5, 31.5], 1e-12));
        assert!((d[0] - 2.5).abs() < 1e-12);
        // world up appears towards smaller row indices
        let (up, _, _) = project(&cam, &[[0.0, 0.0, 0.5]]);
        assert!(up[0][1] < 31.5);
    }

    #[test]
    fn sampled_extrinsics_are_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sampling = CameraSampling::default();
        for _ in 0..1000 {
            sample_camera(&mut rng, &sampling).validate().unwrap();
        }
        let top = CameraSampling {
            elevation_min_deg: 90.0,
            elevation_max_deg: 90.0,
            ..sampling
        };
        sample_camera(&mut rng, &top).validate().unwrap();
    }

    #[test]
    fn sampled_azimuth_and_elevation_are_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sampling = CameraSampling::default();
        let bins = 16;
        let draws = 16_000;
        let mut az_hist = vec![0usize; bins];
        let mut el_hist = vec![0usize; bins];
        let (lo, hi) = (sampling.elevation_min_deg, sampling.elevation_max_deg);
        for _ in 0..draws {
            let c = vec3_sub(&sample_camera(&mut rng, &sampling).center(), &sampling.look_at);
            let az = c[1].atan2(c[0]).rem_euclid((2.0 * PI) as Real) / (2.0 * PI) as Real;
            let el = ((c[2] / vec3_norm(&c)).asin().to_degrees() - lo) / (hi - lo);
            az_hist[((az * bins as Real) as usize).min(bins - 1)] += 1;
            el_hist[((el * bins as Real) as usize).min(bins - 1)] += 1;
        }
        let expected = draws as f64 / bins as f64;
        let chi2 = ChiSquared::new((bins - 1) as f64).unwrap();
        for hist in [az_hist, el_hist] {
            let stat: f64 = hist.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
            let p = 1.0 - chi2.cdf(stat);
            assert!(p > 1e-3, "histogram {hist:?} has p = {p:e}");
        }
    }

    #[test]
    fn identity_warp_is_exact() {
        let tape = Tape::new();
        let cam = Camera::simple(40.0, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let feat = Tensor::new(&[3, 8, 8], (0..192).map(|_| rng.gen()).collect()).unwrap();
        let src = FeatureTriplet {
            features: tape.constant(feat.clone()),
            alpha: tape.constant(Tensor::ones(&[8, 8])),
            depth: tape.constant(Tensor::full(&[8, 8], 3.0)),
        };
        let (out, mask) = warp_image(&src, src.depth, &cam, &RelativeTransform::identity(), Some(0.05)).unwrap();
        assert_eq!(out.features.value().data(), feat.data());
        assert!(mask.iter().all(|&m| m));
    }
}
