//! Warp oracles shared by the integration tests.
#![allow(dead_code)]

use primcomp::autodiff::linalg::{mat3_transpose, mat3_vec, vec3_add, vec3_dot, vec3_norm, vec3_scale, vec3_sub, Mat3, Vec3};
use primcomp::autodiff::{Tape, Tensor};
use primcomp::geometry::{backproject, look_at, rotation_from_axis_angle, warp_image, Camera, RelativeTransform};
use primcomp::projection::FeatureTriplet;
use primcomp::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain bilinear lookup with integer pixel centres; `None` off the image.
fn lookup(plane: &[Real], w: usize, h: usize, x: Real, y: Real) -> Option<Real> {
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as Real && y <= (h - 1) as Real) {
        return None;
    }
    let x0 = (x.floor() as usize).min(w - 2);
    let y0 = (y.floor() as usize).min(h - 2);
    let (fx, fy) = (x - x0 as Real, y - y0 as Real);
    let at = |r: usize, c: usize| plane[r * w + c];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
    let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
    Some(top * (1.0 - fy) + bottom * fy)
}

struct Oracle {
    features: Vec<Vec<Real>>,
    alpha: Vec<Real>,
    depth: Vec<Real>,
    valid: Vec<bool>,
}

/// Backprojects every target pixel, moves it, projects it into the source
/// view and reads the source there, one pixel at a time.
fn reproject(
    camera: &Camera,
    source: &[Vec<Real>],
    alpha: &[Real],
    depth: &[Real],
    target_depth: &[Real],
    t: &RelativeTransform,
) -> Oracle {
    let (w, h) = (camera.width, camera.height);
    let inv = t.inverse();
    let n = w * h;
    let mut o = Oracle {
        features: vec![vec![0.0; n]; source.len()],
        alpha: vec![0.0; n],
        depth: vec![0.0; n],
        valid: vec![false; n],
    };
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let world = backproject(camera, [j as Real, i as Real], target_depth[p]).unwrap();
            let moved = t.apply(&world);
            let Some((uv, _)) = camera.project_camera_point(&camera.to_camera(&moved)) else {
                continue;
            };
            let Some(d) = lookup(depth, w, h, uv[0], uv[1]) else {
                continue;
            };
            o.valid[p] = true;
            for (c, plane) in source.iter().enumerate() {
                o.features[c][p] = lookup(plane, w, h, uv[0], uv[1]).unwrap();
            }
            o.alpha[p] = lookup(alpha, w, h, uv[0], uv[1]).unwrap();
            let seen = backproject(camera, uv, d).unwrap();
            o.depth[p] = camera.to_camera(&inv.apply(&seen))[2];
        }
    }
    o
}

fn triplet<'t>(tape: &'t Tape, features: &[Vec<Real>], alpha: &[Real], depth: &[Real], h: usize, w: usize) -> FeatureTriplet<'t> {
    FeatureTriplet {
        features: tape.constant(Tensor::new(&[features.len(), h, w], features.concat()).unwrap()),
        alpha: tape.constant(Tensor::new(&[h, w], alpha.to_vec()).unwrap()),
        depth: tape.constant(Tensor::new(&[h, w], depth.to_vec()).unwrap()),
    }
}

fn random_camera(rng: &mut ChaCha8Rng, size: usize) -> Camera {
    let az: Real = rng.gen_range(0.0..std::f64::consts::TAU as Real);
    let el: Real = rng.gen_range(0.2..1.2);
    let eye = [3.0 * el.cos() * az.cos(), 3.0 * el.cos() * az.sin(), 3.0 * el.sin()];
    look_at(eye, [0.0; 3], size as Real, size, size)
}

/// Largest deviation between the warp and [`reproject`] for an in-plane
/// camera translation over random images and depths.
pub fn in_plane_translation_deviation(seed: u64) -> Result<Real, String> {
    let (w, h) = (24, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut camera = random_camera(&mut rng, w);
    camera.height = h;
    camera.intrinsics[1][2] = (h as Real - 1.0) / 2.0;
    // translation along the camera's x and y axes, expressed in world space
    let shift_cam = [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), 0.0];
    let t = RelativeTransform {
        rotation: rotation_from_axis_angle([0.0; 3]),
        translation: mat3_vec(&mat3_transpose(&camera.rotation), &shift_cam),
    };
    let n = w * h;
    let features: Vec<Vec<Real>> = (0..3).map(|_| (0..n).map(|_| rng.gen()).collect()).collect();
    let alpha: Vec<Real> = (0..n).map(|_| rng.gen()).collect();
    let depth: Vec<Real> = (0..n).map(|_| rng.gen_range(2.0..4.0)).collect();
    let target_depth: Vec<Real> = (0..n).map(|_| rng.gen_range(2.0..4.0)).collect();

    let oracle = reproject(&camera, &features, &alpha, &depth, &target_depth, &t);
    let tape = Tape::new();
    let source = triplet(&tape, &features, &alpha, &depth, h, w);
    let td = tape.constant(Tensor::new(&[h, w], target_depth.clone()).unwrap());
    let (out, mask) = warp_image(&source, td, &camera, &t, None).unwrap();

    if mask != oracle.valid {
        return Err(format!("seed {seed}: validity masks differ"));
    }
    if oracle.valid.iter().filter(|&&v| v).count() <= n / 3 {
        return Err(format!("seed {seed} keeps too few pixels"));
    }
    let f = out.features.value();
    let mut worst: Real = 0.0;
    for p in (0..n).filter(|&p| mask[p]) {
        for c in 0..3 {
            worst = worst.max((f.data()[c * n + p] - oracle.features[c][p]).abs());
        }
        worst = worst.max((out.alpha.value().data()[p] - oracle.alpha[p]).abs());
        worst = worst.max((out.depth.value().data()[p] - oracle.depth[p]).abs());
    }
    Ok(worst)
}

/// A textured plane `normal · x = offset` seen through `camera`.
struct Plane {
    normal: Vec3,
    offset: Real,
}

impl Plane {
    fn depth(&self, camera: &Camera, pixel: [Real; 2]) -> Real {
        let c = camera.center();
        let dir = vec3_sub(&backproject(camera, pixel, 1.0).unwrap(), &c);
        (self.offset - vec3_dot(&self.normal, &c)) / vec3_dot(&self.normal, &dir)
    }

    /// The plane after moving the scene by `t⁻¹`.
    fn moved_back(&self, t: &RelativeTransform) -> Plane {
        Plane {
            normal: mat3_vec(&mat3_transpose(&t.rotation), &self.normal),
            offset: self.offset - vec3_dot(&self.normal, &t.translation),
        }
    }
}

fn texture(x: &Vec3) -> [Real; 3] {
    [
        0.5 + 0.4 * (0.8 * x[1] + 0.5 * x[2]).sin(),
        0.5 + 0.3 * (0.6 * x[0] - 0.7 * x[2]).cos(),
        0.5 + 0.2 * (0.5 * (x[0] + x[1] + x[2])).sin(),
    ]
}

fn render_plane(camera: &Camera, plane: &Plane, frame: &RelativeTransform) -> (Vec<Vec<Real>>, Vec<Real>) {
    let (w, h) = (camera.width, camera.height);
    let mut features = vec![vec![0.0; w * h]; 3];
    let mut depth = vec![0.0; w * h];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let d = plane.depth(camera, [j as Real, i as Real]);
            depth[p] = d;
            // texture coordinates stay attached to the original plane
            let x = frame.apply(&backproject(camera, [j as Real, i as Real], d).unwrap());
            for (c, v) in texture(&x).into_iter().enumerate() {
                features[c][p] = v;
            }
        }
    }
    (features, depth)
}

/// Warps a textured plane by a random motion and back again; returns the
/// worst colour deviation over doubly valid pixels and their count.
pub fn round_trip_deviation(seed: u64) -> (Real, usize) {
    // residual error is bilinear resampling of the texture, so it shrinks
    // with the square of the pixel footprint; 64 is the default image size
    let size = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera = random_camera(&mut rng, size);
    let toward = vec3_scale(&camera.center(), 1.0 / vec3_norm(&camera.center()));
    let tilt = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
    let normal = vec3_add(&toward, &tilt);
    let plane = Plane {
        normal: vec3_scale(&normal, 1.0 / vec3_norm(&normal)),
        offset: rng.gen_range(-0.3..0.3),
    };
    let axis: Vec3 = [rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)];
    let rotation: Mat3 = rotation_from_axis_angle(axis);
    let t = RelativeTransform {
        rotation,
        translation: [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)],
    };
    let (w, h) = (size, size);
    let n = w * h;

    let (src, src_depth) = render_plane(&camera, &plane, &RelativeTransform::identity());
    let moved = plane.moved_back(&t);
    let (_, moved_depth) = render_plane(&camera, &moved, &t);
    let ones = vec![1.0; n];

    let tape = Tape::new();
    let a = triplet(&tape, &src, &ones, &src_depth, h, w);
    let (b, mask_b) = warp_image(&a, tape.constant(Tensor::new(&[h, w], moved_depth).unwrap()), &camera, &t, None).unwrap();
    let back = warp_image(
        &b,
        tape.constant(Tensor::new(&[h, w], src_depth).unwrap()),
        &camera,
        &t.inverse(),
        None,
    );
    let (a2, mask_a) = back.unwrap();

    // doubly valid: the round-trip sample and every tap it reads were valid
    let f = a2.features.value();
    let mut worst: Real = 0.0;
    let mut checked = 0;
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            if !mask_a[p] {
                continue;
            }
            let world = backproject(&camera, [j as Real, i as Real], a.depth.value().data()[p]).unwrap();
            let q = camera.to_camera(&t.inverse().apply(&world));
            let (uv, _) = camera.project_camera_point(&q).unwrap();
            let (x0, y0) = (uv[0].floor() as usize, uv[1].floor() as usize);
            let taps = [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)];
            if !taps.iter().all(|&(r, c)| r < h && c < w && mask_b[r * w + c]) {
                continue;
            }
            checked += 1;
            for c in 0..3 {
                worst = worst.max((f.data()[c * n + p] - src[c][p]).abs());
            }
        }
    }
    (worst, checked)
}
