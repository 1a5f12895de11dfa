use crate::autodiff::{Tensor, Var};
use crate::{Error, Real, Result};

/// Per-output tap lists of a 1D Gaussian, renormalized where the kernel
/// hangs over the border so that constant signals stay constant.
fn taps(n: usize, radius: Real) -> Vec<Vec<(usize, Real)>> {
    let sigma = radius / 2.0;
    let reach = radius.floor() as isize;
    (0..n as isize)
        .map(|i| {
            let mut row: Vec<(usize, Real)> = (-reach..=reach)
                .filter(|d| (0..n as isize).contains(&(i + d)))
                .map(|d| ((i + d) as usize, (-((d * d) as Real) / (2.0 * sigma * sigma)).exp()))
                .collect();
            let total: Real = row.iter().map(|t| t.1).sum();
            row.iter_mut().for_each(|t| t.1 /= total);
            row
        })
        .collect()
}

fn pass(src: &[Real], h: usize, w: usize, rows: &[Vec<(usize, Real)>], cols: &[Vec<(usize, Real)>], adjoint: bool) -> Vec<Real> {
    let mut mid = vec![0.0; h * w];
    let mut out = vec![0.0; h * w];
    if !adjoint {
        for i in 0..h {
            for (j, tj) in cols.iter().enumerate() {
                mid[i * w + j] = tj.iter().map(|&(c, k)| k * src[i * w + c]).sum();
            }
        }
        for (i, ti) in rows.iter().enumerate() {
            for j in 0..w {
                out[i * w + j] = ti.iter().map(|&(r, k)| k * mid[r * w + j]).sum();
            }
        }
    } else {
        for (i, ti) in rows.iter().enumerate() {
            for j in 0..w {
                for &(r, k) in ti {
                    mid[r * w + j] += k * src[i * w + j];
                }
            }
        }
        for i in 0..h {
            for (j, tj) in cols.iter().enumerate() {
                for &(c, k) in tj {
                    out[i * w + c] += k * mid[i * w + j];
                }
            }
        }
    }
    out
}

/// Smooths an `[H, W]` silhouette with a Gaussian of σ = radius/2 truncated
/// at `radius` pixels, then clamps to [0, 1]. Radius 0 is the identity.
pub fn silhouette_to_alpha(silhouette: Var<'_>, radius: Real) -> Result<Var<'_>> {
    if !(radius >= 0.0) {
        return Err(Error::Invalid(format!("blur radius {} must be non-negative", radius)));
    }
    let v = silhouette.value();
    let &[h, w] = v.shape() else {
        return Err(Error::Shape(format!("silhouette must be [H,W], got {:?}", v.shape())));
    };
    if radius < 1.0 {
        return Ok(silhouette);
    }
    let rows = taps(h, radius);
    let cols = taps(w, radius);
    let out = pass(v.data(), h, w, &rows, &cols, false);
    let blurred = silhouette
        .tape()
        .record(Tensor::from_parts(vec![h, w], out), &[silhouette], move |g| {
            vec![Some(Tensor::from_parts(vec![h, w], pass(g.data(), h, w, &rows, &cols, true)))]
        });
    Ok(blurred.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ones_stay_ones() {
        let tape = Tape::new();
        let a = silhouette_to_alpha(tape.constant(Tensor::ones(&[9, 7])), 2.0).unwrap();
        assert!(a.value().data().iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn radius_zero_is_identity() {
        let tape = Tape::new();
        let s = Tensor::new(&[2, 2], vec![0.1, 0.9, 0.4, 0.0]).unwrap();
        let a = silhouette_to_alpha(tape.constant(s.clone()), 0.0).unwrap();
        assert_eq!(a.value().data(), s.data());
    }

    #[test]
    fn disc_mass_is_preserved() {
        let n = 32;
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let (y, x) = (i as Real - 15.5, j as Real - 15.5);
                if x * x + y * y <= 64.0 {
                    d[i * n + j] = 1.0;
                }
            }
        }
        let tape = Tape::new();
        let s = Tensor::new(&[n, n], d).unwrap();
        let a = silhouette_to_alpha(tape.constant(s.clone()), 2.0).unwrap();
        let (m0, m1) = (s.sum(), a.value().sum());
        assert!((m0 - m1).abs() / m0 < 0.01, "{m0} vs {m1}");
    }

    #[test]
    fn blur_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Tensor::new(&[6, 5], (0..30).map(|_| rng.gen_range(0.1..0.9)).collect()).unwrap();
        let w = Tensor::new(&[6, 5], (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let err = gradcheck(|_, v| (silhouette_to_alpha(v[0], 2.0).unwrap() * v[1]).sum(), &[s, w], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
