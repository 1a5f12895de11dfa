use super::{Tensor, Var};
use crate::{Error, Real, Result};

#[derive(Clone, Copy)]
struct Tap {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    fx: Real,
    fy: Real,
}

fn axis(v: Real, n: usize) -> Option<(usize, usize, Real)> {
    if !(v >= 0.0 && v <= (n - 1) as Real) {
        return None;
    }
    if n == 1 {
        return Some((0, 0, 0.0));
    }
    let i0 = (v.floor() as usize).min(n - 2);
    Some((i0, i0 + 1, v - i0 as Real))
}

/// Bilinear sampling of a `[C, H, W]` image at continuous pixel coordinates.
///
/// `coords` has shape `[H', W', 2]` holding `(x, y)` = (column, row), with
/// pixel centres at integer positions. Samples outside `[0, W-1] × [0, H-1]`
/// are zero and flagged `false` in the returned mask. Gradients flow to both
/// the image and the coordinates.
pub fn bilinear_sample<'t>(image: Var<'t>, coords: Var<'t>) -> Result<(Var<'t>, Vec<bool>)> {
    let img = image.value();
    let crd = coords.value();
    let (&[c, h, w], &[oh, ow, 2]) = (img.shape(), crd.shape()) else {
        return Err(Error::Shape(format!(
            "bilinear_sample expects [C,H,W] and [H',W',2], got {:?} and {:?}",
            img.shape(),
            crd.shape()
        )));
    };
    let taps: Vec<Option<Tap>> = crd
        .data()
        .chunks_exact(2)
        .map(|p| {
            let (x0, x1, fx) = axis(p[0], w)?;
            let (y0, y1, fy) = axis(p[1], h)?;
            Some(Tap { x0, y0, x1, y1, fx, fy })
        })
        .collect();
    let mask: Vec<bool> = taps.iter().map(|t| t.is_some()).collect();
    let n = oh * ow;
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        let plane = img.channel(ch);
        for (p, tap) in taps.iter().enumerate() {
            if let Some(t) = tap {
                out[ch * n + p] = lerp2(plane, w, t);
            }
        }
    }
    let img_req = image.requires_grad();
    let crd_req = coords.requires_grad();
    let var = image.tape().record(
        Tensor::from_parts(vec![c, oh, ow], out),
        &[image, coords],
        move |g| {
            let gd = g.data();
            let gi = img_req.then(|| {
                let mut gi = vec![0.0; c * h * w];
                for ch in 0..c {
                    let plane = &mut gi[ch * h * w..(ch + 1) * h * w];
                    for (p, tap) in taps.iter().enumerate() {
                        let Some(t) = tap else { continue };
                        let gv = gd[ch * n + p];
                        plane[t.y0 * w + t.x0] += gv * (1.0 - t.fx) * (1.0 - t.fy);
                        plane[t.y0 * w + t.x1] += gv * t.fx * (1.0 - t.fy);
                        plane[t.y1 * w + t.x0] += gv * (1.0 - t.fx) * t.fy;
                        plane[t.y1 * w + t.x1] += gv * t.fx * t.fy;
                    }
                }
                Tensor::from_parts(vec![c, h, w], gi)
            });
            let gc = crd_req.then(|| {
                let mut gc = vec![0.0; n * 2];
                for ch in 0..c {
                    let plane = img.channel(ch);
                    for (p, tap) in taps.iter().enumerate() {
                        let Some(t) = tap else { continue };
                        let gv = gd[ch * n + p];
                        let v00 = plane[t.y0 * w + t.x0];
                        let v01 = plane[t.y0 * w + t.x1];
                        let v10 = plane[t.y1 * w + t.x0];
                        let v11 = plane[t.y1 * w + t.x1];
                        gc[2 * p] += gv * ((1.0 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
                        gc[2 * p + 1] += gv * ((1.0 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
                    }
                }
                Tensor::from_parts(vec![oh, ow, 2], gc)
            });
            vec![gi, gc]
        },
    );
    Ok((var, mask))
}

fn lerp2(plane: &[Real], w: usize, t: &Tap) -> Real {
    let v00 = plane[t.y0 * w + t.x0];
    let v01 = plane[t.y0 * w + t.x1];
    let v10 = plane[t.y1 * w + t.x0];
    let v11 = plane[t.y1 * w + t.x1];
    (1.0 - t.fy) * ((1.0 - t.fx) * v00 + t.fx * v01) + t.fy * ((1.0 - t.fx) * v10 + t.fx * v11)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(h: usize, w: usize) -> Tensor {
        let mut d = Vec::new();
        for i in 0..h {
            for j in 0..w {
                d.extend([j as Real, i as Real]);
            }
        }
        Tensor::new(&[h, w, 2], d).unwrap()
    }

    #[test]
    fn integer_grid_reproduces_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::new(&[2, 4, 5], (0..40).map(|_| rng.gen()).collect()).unwrap();
        let tape = Tape::new();
        let (out, mask) = bilinear_sample(tape.constant(img.clone()), tape.constant(grid(4, 5))).unwrap();
        assert_eq!(out.value().data(), img.data());
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn half_pixel_is_mean_of_neighbours() {
        let tape = Tape::new();
        let img = tape.constant(Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let crd = tape.constant(Tensor::new(&[1, 1, 2], vec![0.5, 0.5]).unwrap());
        let (out, _) = bilinear_sample(img, crd).unwrap();
        assert_eq!(out.item(), 1.5);
    }

    #[test]
    fn out_of_bounds_is_zero_and_masked() {
        let tape = Tape::new();
        let img = tape.constant(Tensor::ones(&[1, 3, 3]));
        let crd = tape.constant(Tensor::new(&[1, 2, 2], vec![-0.1, 1.0, 1.0, 2.5]).unwrap());
        let (out, mask) = bilinear_sample(img, crd).unwrap();
        assert_eq!(out.value().data(), &[0.0, 0.0]);
        assert_eq!(mask, vec![false, false]);
    }

    #[test]
    fn coordinate_gradcheck() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Tensor::new(&[2, 6, 6], (0..72).map(|_| rng.gen()).collect()).unwrap();
            let crd = Tensor::new(&[3, 3, 2], (0..18).map(|_| rng.gen_range(0.3..4.7)).collect()).unwrap();
            let wts = Tensor::new(&[2, 3, 3], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let err = gradcheck(
                |_, v| (bilinear_sample(v[0], v[1]).unwrap().0 * v[2]).sum(),
                &[img, crd, wts],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
