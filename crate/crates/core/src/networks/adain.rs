use crate::autodiff::{Tensor, Var};
use crate::{Error, Real, Result};

/// Variance guard of the instance normalization.
pub const ADAIN_EPS: Real = 1e-5;

/// Normalizes every channel of a `[C, H, W]` variable to zero mean and unit
/// variance over its pixels.
pub fn instance_norm(x: Var<'_>) -> Result<Var<'_>> {
    let xv = x.value();
    let &[c, h, w] = xv.shape() else {
        return Err(Error::Shape(format!("instance norm needs [C,H,W], got {:?}", xv.shape())));
    };
    let n = h * w;
    let mut y = vec![0.0; c * n];
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let src = &xv.data()[ch * n..(ch + 1) * n];
        let mean = src.iter().sum::<Real>() / n as Real;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n as Real;
        inv_std[ch] = 1.0 / (var + ADAIN_EPS).sqrt();
        for (o, v) in y[ch * n..(ch + 1) * n].iter_mut().zip(src) {
            *o = (v - mean) * inv_std[ch];
        }
    }
    let out = Tensor::from_parts(vec![c, h, w], y);
    let yv = out.clone();
    Ok(x.tape().record(out, &[x], move |g| {
        let mut gx = vec![0.0; c * n];
        for ch in 0..c {
            let gs = &g.data()[ch * n..(ch + 1) * n];
            let ys = &yv.data()[ch * n..(ch + 1) * n];
            let gm = gs.iter().sum::<Real>() / n as Real;
            let gym = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<Real>() / n as Real;
            for i in 0..n {
                gx[ch * n + i] = inv_std[ch] * (gs[i] - gm - ys[i] * gym);
            }
        }
        vec![Some(Tensor::from_parts(vec![c, h, w], gx))]
    }))
}

/// Instance norm followed by a per-channel affine map taken from `style`:
/// channel `c` is scaled by `1 + style[c]` and shifted by `style[C + c]`.
pub fn adain<'t>(x: Var<'t>, style: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let c = shape.first().copied().unwrap_or(0);
    if style.numel() != 2 * c {
        return Err(Error::Shape(format!("adain style needs {} values, got {}", 2 * c, style.numel())));
    }
    let normed = instance_norm(x)?;
    let gain = style.slice_flat(0, &[c, 1, 1])?.add_scalar(1.0);
    let shift = style.slice_flat(c, &[c, 1, 1])?;
    normed.try_mul(gain)?.try_add(shift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn zero_style_standardizes_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tape = Tape::new();
        let x = tape.constant(random(&mut rng, &[3, 5, 4]));
        let y = adain(x, tape.constant(Tensor::zeros(&[6]))).unwrap().value();
        for ch in 0..3 {
            let s = y.channel(ch);
            let m = s.iter().sum::<Real>() / 20.0;
            let v = s.iter().map(|a| (a - m) * (a - m)).sum::<Real>() / 20.0;
            assert!(m.abs() < 1e-4 && (v - 1.0).abs() < 1e-4, "{m} {v}");
        }
    }

    #[test]
    fn constant_channel_maps_to_shift() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 3], 4.2));
        let style = tape.constant(Tensor::from_vec(vec![0.5, -0.3, 0.7, -1.1]));
        let y = adain(x, style).unwrap().value();
        assert!(y.channel(0).iter().all(|&v| v == 0.7));
        assert!(y.channel(1).iter().all(|&v| v == -1.1));
    }

    #[test]
    fn wrong_style_length_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2, 2]));
        assert!(adain(x, tape.constant(Tensor::zeros(&[3]))).is_err());
    }

    #[test]
    fn gradcheck_input_and_style() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = [random(&mut rng, &[2, 4, 3]), random(&mut rng, &[4]), random(&mut rng, &[2, 4, 3])];
            let err = gradcheck(|_, v| (adain(v[0], v[1]).unwrap() * v[2]).sum(), &inputs, 1e-5).unwrap();
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }
}
