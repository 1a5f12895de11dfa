use rand::Rng;

use super::{adain, leaky_gain, Bound, Conv, Linear, NetworkConfig, ParamSet, LEAKY_SLOPE};
use crate::autodiff::{concat, ReduceKind, Var};
use crate::projection::FeatureTriplet;
use crate::{Error, Real, Result};

/// Lower bound of every refined depth.
pub const D_NEAR: Real = 0.1;

/// Alpha is clamped into `[ALPHA_CLAMP, 1 - ALPHA_CLAMP]` before its logit is taken.
const ALPHA_CLAMP: Real = 1e-4;
/// Smallest `D - D_NEAR` fed to the inverse softplus.
const DEPTH_FLOOR: Real = 1e-3;
/// Initial scale of the output head; small so that a fresh refiner passes
/// the projected alpha and depth through almost unchanged.
const HEAD_GAIN: Real = 0.1;

/// Refined colour `[3, H, W]`, alpha `[H, W]` and depth `[H, W]`.
#[derive(Debug, Clone, Copy)]
pub struct RefinedTriplet<'t> {
    pub color: Var<'t>,
    pub alpha: Var<'t>,
    pub depth: Var<'t>,
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    first: Conv,
    second: Conv,
}

/// Encoder, AdaIN residual blocks and decoder shared by every primitive.
///
/// The alpha and depth heads are residual around the projected alpha and
/// depth, so geometry passes through the refiner even before training.
#[derive(Debug, Clone)]
pub struct G2d {
    encoder: [Conv; 2],
    blocks: Vec<ResBlock>,
    decoder: [Conv; 2],
    head: Conv,
    style: Linear,
    in_channels: usize,
    inner: usize,
    d_far: Real,
}

impl G2d {
    /// `features` is the channel count of the projected feature images.
    pub fn new(params: &mut ParamSet, config: &NetworkConfig, features: usize, d_far: Real, rng: &mut impl Rng) -> Self {
        let [c1, c2] = config.g2d_channels;
        let cin = features + 2;
        let g = leaky_gain();
        let encoder = [
            Conv::new(params, "g2d.enc0", cin, c1, 3, 2, g, rng),
            Conv::new(params, "g2d.enc1", c1, c2, 3, 2, g, rng),
        ];
        let blocks = (0..config.g2d_res_blocks)
            .map(|i| ResBlock {
                first: Conv::new(params, &format!("g2d.res{i}.conv0"), c2, c2, 3, 1, g, rng),
                second: Conv::new(params, &format!("g2d.res{i}.conv1"), c2, c2, 3, 1, 1.0, rng),
            })
            .collect::<Vec<_>>();
        let decoder = [
            Conv::new(params, "g2d.dec0", c2, c1, 3, 1, g, rng),
            Conv::new(params, "g2d.dec1", c1, c1, 3, 1, g, rng),
        ];
        let head = Conv::new(params, "g2d.head", c1, 5, 3, 1, HEAD_GAIN, rng);
        let style = Linear::new(params, "g2d.style", cin, 4 * c2 * blocks.len().max(1), 1.0, rng);
        Self {
            encoder,
            blocks,
            decoder,
            head,
            style,
            in_channels: cin,
            inner: c2,
            d_far,
        }
    }

    fn check(&self, t: &FeatureTriplet<'_>) -> Result<(usize, usize)> {
        let fs = t.features.shape();
        let &[k, h, w] = fs.as_slice() else {
            return Err(Error::Shape(format!("refiner features must be [K,H,W], got {:?}", fs)));
        };
        if k + 2 != self.in_channels {
            return Err(Error::Shape(format!("refiner expects {} feature channels, got {}", self.in_channels - 2, k)));
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("refiner needs sides divisible by 4, got {}x{}", h, w)));
        }
        if t.alpha.shape() != [h, w] || t.depth.shape() != [h, w] {
            return Err(Error::Shape("alpha and depth must match the feature image".into()));
        }
        Ok((h, w))
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, triplet: &FeatureTriplet<'t>) -> Result<RefinedTriplet<'t>> {
        let (h, w) = self.check(triplet)?;
        let x = concat(&[
            triplet.features,
            triplet.alpha.reshape(&[1, h, w])?,
            triplet.depth.scale(1.0 / self.d_far).reshape(&[1, h, w])?,
        ])?;
        let style = self.style.forward(p, x.reduce(ReduceKind::Mean, &[1, 2])?)?;
        let mut y = x;
        for conv in &self.encoder {
            y = conv.forward(p, y)?.leaky_relu(LEAKY_SLOPE);
        }
        let span = 2 * self.inner;
        for (i, block) in self.blocks.iter().enumerate() {
            let s0 = style.slice_flat(2 * i * span, &[span])?;
            let s1 = style.slice_flat((2 * i + 1) * span, &[span])?;
            let r = adain(block.first.forward(p, y)?, s0)?.leaky_relu(LEAKY_SLOPE);
            let r = adain(block.second.forward(p, r)?, s1)?;
            y = y.try_add(r)?;
        }
        for conv in &self.decoder {
            y = conv.forward(p, y.upsample2x()?)?.leaky_relu(LEAKY_SLOPE);
        }
        let out = self.head.forward(p, y)?;

        let color = out.narrow(0, 3)?.sigmoid();
        let a = triplet.alpha.clamp(ALPHA_CLAMP, 1.0 - ALPHA_CLAMP);
        let logit = a.ln().try_sub(a.scale(-1.0).add_scalar(1.0).ln())?;
        let alpha = out.narrow(3, 1)?.reshape(&[h, w])?.try_add(logit)?.sigmoid();
        // inverse softplus: y + ln(1 - e^{-y})
        let excess = triplet.depth.add_scalar(-D_NEAR).clamp_min(DEPTH_FLOOR);
        let inv = excess.try_add(excess.scale(-1.0).exp().scale(-1.0).add_scalar(1.0).ln())?;
        let depth = out.narrow(4, 1)?.reshape(&[h, w])?.try_add(inv)?.softplus().add_scalar(D_NEAR);
        Ok(RefinedTriplet { color, alpha, depth })
    }

    /// Convolution kernels in the order they are applied, for inspection.
    pub fn kernels(&self) -> Vec<super::ParamId> {
        let mut out: Vec<_> = self.encoder.iter().map(|c| c.weight).collect();
        for b in &self.blocks {
            out.push(b.first.weight);
            out.push(b.second.weight);
        }
        out.extend(self.decoder.iter().map(|c| c.weight));
        out.push(self.head.weight);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck_with, GradCheckOptions, Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(features: usize) -> (ParamSet, G2d) {
        let cfg = NetworkConfig {
            g2d_channels: [4, 6],
            ..Default::default()
        };
        let mut params = ParamSet::new();
        let g = G2d::new(&mut params, &cfg, features, 15.0, &mut ChaCha8Rng::seed_from_u64(5));
        (params, g)
    }

    fn random_triplet(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> [Tensor; 3] {
        let mut r = |n: usize, lo: Real, hi: Real| (0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>();
        [
            Tensor::new(&[k, h, w], r(k * h * w, -2.0, 2.0)).unwrap(),
            Tensor::new(&[h, w], r(h * w, 0.0, 1.0)).unwrap(),
            Tensor::new(&[h, w], r(h * w, 0.05, 15.0)).unwrap(),
        ]
    }

    fn triplet<'t>(tape: &'t Tape, t: &[Tensor; 3]) -> FeatureTriplet<'t> {
        FeatureTriplet {
            features: tape.constant(t[0].clone()),
            alpha: tape.constant(t[1].clone()),
            depth: tape.constant(t[2].clone()),
        }
    }

    #[test]
    fn output_ranges_hold() {
        let (params, g) = net(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        for _ in 0..200 {
            let t = random_triplet(&mut rng, 3, 8, 8);
            let r = g.forward(&p, &triplet(&tape, &t)).unwrap();
            assert!(r.color.value().data().iter().all(|&x| x > 0.0 && x < 1.0));
            assert!(r.alpha.value().data().iter().all(|&x| x > 0.0 && x < 1.0));
            assert!(r.depth.value().data().iter().all(|&x| x > D_NEAR));
        }
    }

    #[test]
    fn deterministic_and_shape_checked() {
        let (params, g) = net(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_triplet(&mut rng, 2, 8, 12);
        let run = || {
            let tape = Tape::new();
            let r = g.forward(&params.bind(&tape, false), &triplet(&tape, &t)).unwrap();
            (*r.color.value()).clone()
        };
        assert_eq!(run().data(), run().data());
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let bad = random_triplet(&mut rng, 3, 8, 8);
        assert!(g.forward(&p, &triplet(&tape, &bad)).is_err());
        let odd = random_triplet(&mut rng, 2, 6, 8);
        assert!(g.forward(&p, &triplet(&tape, &odd)).is_err());
    }

    #[test]
    fn fresh_refiner_nearly_passes_geometry_through() {
        let (params, g) = net(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_triplet(&mut rng, 2, 8, 8);
        let tape = Tape::new();
        let r = g.forward(&params.bind(&tape, false), &triplet(&tape, &t)).unwrap();
        for (a, b) in r.alpha.value().data().iter().zip(t[1].data()) {
            assert!((a - b).abs() < 0.2, "{a} vs {b}");
        }
    }

    #[test]
    fn gradcheck_wrt_one_kernel() {
        let (params, g) = net(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_triplet(&mut rng, 2, 8, 8);
        let weights = Tensor::new(&[3, 8, 8], (0..192).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let kernel = g.kernels()[2];
        let report = gradcheck_with(
            |tape, v| {
                // substitute the probed kernel with the differentiable input
                let mut vars = params.bind(tape, false).vars().to_vec();
                vars[kernel.0] = v[0];
                let bound = Bound { vars };
                let r = g.forward(&bound, &triplet(tape, &t)).unwrap();
                (r.color * v[1]).sum() + r.alpha.sum() + r.depth.sum()
            },
            &[params.get(kernel).clone(), weights],
            GradCheckOptions {
                eps: 1e-6,
                max_probes: Some(40),
                seed: 0,
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
