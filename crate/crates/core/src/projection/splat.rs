use crate::autodiff::{Tensor, Var};
use crate::geometry::MIN_DEPTH;
use crate::{Error, Real, Result};

/// Normalizer floor added to the accumulated splat weight.
pub const SPLAT_EPS: Real = 1e-8;

/// Kernel support ends where the Gaussian weight drops below this.
/// A fixed 3σ cut would make the normalized image jump where a point
/// enters or leaves a pixel's support.
const WEIGHT_FLOOR: Real = 1e-20;

fn window(c: Real, radius: Real, n: usize) -> Option<(usize, usize)> {
    let lo = (c - radius).ceil().max(0.0);
    let hi = (c + radius).floor().min(n as Real - 1.0);
    (lo <= hi).then(|| (lo as usize, hi as usize))
}

/// Splats `[M, 3]` screen-space points (`u, v, depth`) carrying `[M, K]`
/// features into a `[K, H, W]` image with isotropic Gaussians of `sigma`
/// pixels, normalized by the accumulated weight.
pub fn splat_points<'t>(screen: Var<'t>, features: Var<'t>, width: usize, height: usize, sigma: Real) -> Result<Var<'t>> {
    if !(sigma > 0.0) {
        return Err(Error::Invalid("splat sigma must be positive".into()));
    }
    let sv = screen.value();
    let fv = features.value();
    let (&[m, 3], &[m2, k]) = (sv.shape(), fv.shape()) else {
        return Err(Error::Shape(format!(
            "splat expects [M,3] points and [M,K] features, got {:?} and {:?}",
            sv.shape(),
            fv.shape()
        )));
    };
    if m != m2 {
        return Err(Error::Shape(format!("{} points but {} feature rows", m, m2)));
    }
    let n = width * height;
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let radius = sigma * (2.0 * (1.0 / WEIGHT_FLOOR).ln()).sqrt();
    let pts = sv.clone();
    let visit = move |f: &mut dyn FnMut(usize, usize, Real, Real, Real)| {
        let sv = &pts;
        for j in 0..m {
            let (u, v, z) = (sv.data()[3 * j], sv.data()[3 * j + 1], sv.data()[3 * j + 2]);
            if !(z > MIN_DEPTH) {
                continue;
            }
            let (Some((x0, x1)), Some((y0, y1))) = (window(u, radius, width), window(v, radius, height)) else {
                continue;
            };
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let (dx, dy) = (x as Real - u, y as Real - v);
                    let w = (-(dx * dx + dy * dy) * inv2s2).exp();
                    if w >= WEIGHT_FLOOR {
                        f(j, y * width + x, w, dx, dy);
                    }
                }
            }
        }
    };
    let mut num = vec![0.0; k * n];
    let mut den = vec![0.0; n];
    visit(&mut |j, p, w, _, _| {
        den[p] += w;
        for c in 0..k {
            num[c * n + p] += w * fv.data()[j * k + c];
        }
    });
    for p in 0..n {
        let inv = 1.0 / (den[p] + SPLAT_EPS);
        for c in 0..k {
            num[c * n + p] *= inv;
        }
    }
    let out = Tensor::from_parts(vec![k, height, width], num);
    let image = out.clone();
    let (s_req, f_req) = (screen.requires_grad(), features.requires_grad());
    Ok(screen.tape().record(out, &[screen, features], move |g| {
        let gd = g.data();
        let xd = image.data();
        let mut gs = vec![0.0; 3 * m];
        let mut gf = vec![0.0; m * k];
        visit(&mut |j, p, w, dx, dy| {
            let inv = 1.0 / (den[p] + SPLAT_EPS);
            // X = Σ w f / (Σ w + ε)  =>  ∂X/∂w_j = (f_j - X) / (Σ w + ε)
            let mut gw = 0.0;
            for c in 0..k {
                let gc = gd[c * n + p] * inv;
                gw += gc * (fv.data()[j * k + c] - xd[c * n + p]);
                gf[j * k + c] += gc * w;
            }
            // ∂w/∂u = w (x - u)/σ²
            gs[3 * j] += gw * w * dx * 2.0 * inv2s2;
            gs[3 * j + 1] += gw * w * dy * 2.0 * inv2s2;
        });
        vec![
            s_req.then(|| Tensor::from_parts(vec![m, 3], gs)),
            f_req.then(|| Tensor::from_parts(vec![m, k], gf)),
        ]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_point_peaks_at_its_pixel() {
        let tape = Tape::new();
        let pts = tape.constant(Tensor::new(&[1, 3], vec![4.0, 4.0, 2.0]).unwrap());
        let f = tape.constant(Tensor::new(&[1, 1], vec![1.0]).unwrap());
        let x = splat_points(pts, f, 9, 9, 1.5).unwrap().value();
        assert!((x.at(&[0, 4, 4]) - 1.0).abs() < 1e-6);
        assert_eq!(x.at(&[0, 4, 2]), x.at(&[0, 4, 6]));
        assert_eq!(x.at(&[0, 2, 4]), x.at(&[0, 4, 2]));
    }

    #[test]
    fn coincident_points_blend() {
        let tape = Tape::new();
        let pts = tape.constant(Tensor::new(&[2, 3], vec![3.0, 3.0, 2.0, 3.0, 3.0, 2.0]).unwrap());
        let f = tape.constant(Tensor::new(&[2, 1], vec![0.2, 0.8]).unwrap());
        let x = splat_points(pts, f, 7, 7, 1.5).unwrap().value();
        assert!((x.at(&[0, 3, 3]) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn points_behind_camera_give_empty_image() {
        let tape = Tape::new();
        let pts = tape.constant(Tensor::new(&[1, 3], vec![3.0, 3.0, 0.0]).unwrap());
        let f = tape.constant(Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap());
        assert_eq!(splat_points(pts, f, 7, 7, 1.5).unwrap().value().sum(), 0.0);
    }

    #[test]
    fn splat_gradcheck() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Real> = (0..4)
                .flat_map(|_| [rng.gen_range(1.0..7.0), rng.gen_range(1.0..7.0), 2.0])
                .collect();
            let f: Vec<Real> = (0..8).map(|_| rng.gen()).collect();
            let w: Vec<Real> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let err = gradcheck(
                |_, v| (splat_points(v[0], v[1], 8, 8, 1.5).unwrap() * v[2]).sum(),
                &[
                    Tensor::new(&[4, 3], pts).unwrap(),
                    Tensor::new(&[4, 2], f).unwrap(),
                    Tensor::new(&[2, 8, 8], w).unwrap(),
                ],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
