//! Adversarial, gradient-penalty, compactness and geometric-consistency losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::geometry::{warp_image, Camera, RelativeTransform};
use crate::networks::{Bound, Discriminator, RefinedTriplet, SpectralWeights};
use crate::projection::FeatureTriplet;
use crate::{Error, Real, Result};

/// Added to the mask mass before normalizing the geometric loss.
pub const GEO_EPS: Real = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_com: Real,
    pub lambda_geo: Real,
    /// Coverage floor of the compactness loss.
    pub tau: Real,
    pub gamma_r1: Real,
    /// Standard deviation of the pose translation noise, scene units.
    pub sigma_t: Real,
    /// Standard deviation of the rotation noise about the vertical axis, degrees.
    pub sigma_r_deg: Real,
    /// Warped pixels whose depth disagrees by more than this are masked
    /// out; zero disables the test.
    pub occlusion_threshold: Real,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_com: 1.0,
            lambda_geo: 1.0,
            tau: 0.1,
            gamma_r1: 10.0,
            sigma_t: 0.1,
            sigma_r_deg: 10.0,
            occlusion_threshold: 0.05,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_com", self.lambda_com),
            ("lambda_geo", self.lambda_geo),
            ("tau", self.tau),
            ("gamma_r1", self.gamma_r1),
            ("sigma_t", self.sigma_t),
            ("sigma_r_deg", self.sigma_r_deg),
            ("occlusion_threshold", self.occlusion_threshold),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn occlusion(&self) -> Option<Real> {
        (self.occlusion_threshold > 0.0).then_some(self.occlusion_threshold)
    }
}

/// Per-step loss values. `total_g` and `total_d` are what the two optimizers
/// minimize.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adv_g: Real,
    pub adv_d: Real,
    pub r1: Real,
    pub com: Real,
    pub geo: Real,
    /// Compactness term of every foreground primitive.
    pub com_terms: Vec<Real>,
    pub total_g: Real,
    pub total_d: Real,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        [self.adv_g, self.adv_d, self.r1, self.com, self.geo, self.total_g, self.total_d]
            .iter()
            .chain(&self.com_terms)
            .all(|v| v.is_finite())
    }
}

/// `f(t) = -log(1 + exp(-t))`, evaluated as `min(t, 0) - log(1 + exp(-|t|))`.
pub fn f_logistic(t: Real) -> Real {
    t.min(0.0) - (-t.abs()).exp().ln_1p()
}

/// Elementwise `f` on a variable.
pub fn f_logistic_var(t: Var<'_>) -> Var<'_> {
    -((-t).softplus())
}

fn mean_of<'t>(xs: &[Var<'t>]) -> Result<Var<'t>> {
    let first = xs.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let mut acc = first.sum();
    for x in &xs[1..] {
        acc = acc + x.sum();
    }
    Ok(acc.scale(1.0 / xs.len() as Real))
}

/// `(L_G, L_D)` from discriminator logits on generated and real images:
/// `L_D = -E[f(-d_fake)] - E[f(d_real)]` and `L_G = -E[f(d_fake)]`.
pub fn adversarial_losses<'t>(fake: &[Var<'t>], real: &[Var<'t>]) -> Result<(Var<'t>, Var<'t>)> {
    let g: Vec<Var> = fake.iter().map(|&d| -f_logistic_var(d)).collect();
    let d_fake: Vec<Var> = fake.iter().map(|&d| -f_logistic_var(-d)).collect();
    let d_real: Vec<Var> = real.iter().map(|&d| -f_logistic_var(d)).collect();
    let loss_g = mean_of(&g)?;
    let loss_d = mean_of(&d_fake)? + mean_of(&d_real)?;
    Ok((loss_g, loss_d))
}

/// `(γ/2)·mean ‖g‖²` over the given input gradients.
pub fn r1_from_gradients(gradients: &[Tensor], gamma: Real) -> Real {
    if gradients.is_empty() {
        return 0.0;
    }
    let total: Real = gradients.iter().map(|g| g.data().iter().map(|v| v * v).sum::<Real>()).sum();
    0.5 * gamma * total / gradients.len() as Real
}

/// R1 penalty of `disc` on real images `(image, c)`, as a plain value.
pub fn r1_penalty(disc: &Discriminator, params: &crate::networks::ParamSet, reals: &[(Tensor, Real)], gamma: Real) -> Result<Real> {
    let grads = reals
        .iter()
        .map(|(img, c)| disc.input_gradient(params, img, *c).map(|r| r.1))
        .collect::<Result<Vec<_>>>()?;
    Ok(r1_from_gradients(&grads, gamma))
}

/// R1 penalty as a variable whose value is the penalty and whose gradient
/// wrt the discriminator weights is the penalty's exact gradient.
///
/// With `ḡ` the input gradient held constant, the weight gradient of
/// `(γ/2)‖∇_I d‖²` equals that of `γ⟨ḡ, ∇_I d⟩`, which the tangent pass
/// computes. The value is corrected by a constant to read as the penalty.
pub fn r1_penalty_var<'t>(
    disc: &Discriminator,
    p: &Bound<'t>,
    sw: &SpectralWeights<'t>,
    reals: &[(Tensor, Real)],
    gamma: Real,
) -> Result<Var<'t>> {
    let tape = p.vars()[0].tape();
    if reals.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let mut grads = Vec::with_capacity(reals.len());
    let mut surrogate = tape.scalar(0.0);
    for (img, c) in reals {
        let (_, g) = disc.input_gradient_bound(p, img, *c)?;
        surrogate = surrogate + disc.forward_tangent(p, sw, img, *c, &g)?.sum();
        grads.push(g);
    }
    let surrogate = surrogate.scale(gamma / reals.len() as Real);
    let value = r1_from_gradients(&grads, gamma);
    Ok(surrogate.add_scalar(value - surrogate.item()))
}

/// `Σ_i max(τ, mean(A_i))` and the individual terms.
pub fn compactness_loss<'t>(alphas: &[Var<'t>], tau: Real) -> Result<(Var<'t>, Vec<Real>)> {
    let first = alphas.first().ok_or_else(|| Error::Invalid("compactness needs at least one alpha map".into()))?;
    let mut total = first.tape().scalar(0.0);
    let mut terms = Vec::with_capacity(alphas.len());
    for a in alphas {
        let t = a.mean().clamp_min(tau);
        terms.push(t.item());
        total = total + t;
    }
    Ok((total, terms))
}

/// Geometric consistency term of one primitive.
///
/// `perturbed` is the refinement of the same primitive moved by `transform`;
/// it is warped back into the original view using the original depth, and
/// the masked L1 differences of colour and depth are averaged over the mask
/// `M = A' · valid`. Returns zero when the mask mass is below one pixel.
pub fn geometric_consistency_term<'t>(
    original: &RefinedTriplet<'t>,
    perturbed: &RefinedTriplet<'t>,
    camera: &Camera,
    transform: &RelativeTransform,
    occlusion_threshold: Option<Real>,
) -> Result<Var<'t>> {
    let source = FeatureTriplet {
        features: perturbed.color,
        alpha: perturbed.alpha,
        depth: perturbed.depth,
    };
    let (warped, valid) = warp_image(&source, original.depth, camera, transform, occlusion_threshold)?;
    let invalid: Vec<bool> = valid.iter().map(|v| !v).collect();
    let mask = original.alpha.fill_where(&invalid, 0.0);
    let mass = mask.sum();
    if mass.item() < 1.0 {
        return Ok(mass.tape().scalar(0.0));
    }
    let color = original.color.try_sub(warped.features)?.abs().try_mul(mask)?.sum();
    let depth = original.depth.try_sub(warped.depth)?.abs().try_mul(mask)?.sum();
    (color + depth).try_div(mass.add_scalar(GEO_EPS))
}

/// `adv + λ_com·com + λ_geo·geo`.
pub fn total_loss<'t>(adv: Var<'t>, com: Var<'t>, geo: Var<'t>, config: &LossConfig) -> Var<'t> {
    adv + com.scale(config.lambda_com) + geo.scale(config.lambda_geo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Tape};
    use crate::networks::{NetworkConfig, ParamSet};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn f_point_values() {
        assert!((f_logistic(0.0) + (2.0 as Real).ln()).abs() < 1e-12);
        assert!((f_logistic(-50.0) + 50.0).abs() < 1e-6);
        assert!(f_logistic(50.0) < 0.0 && f_logistic(50.0) > -1e-20);
        for t in [1e4, -1e4] {
            assert!(f_logistic(t).is_finite());
        }
        assert_eq!(f_logistic(-1e4), -1e4);
    }

    #[test]
    fn f_is_monotone_and_bounded() {
        let mut prev = Real::NEG_INFINITY;
        for i in -2000..=2000 {
            let v = f_logistic(i as Real * 0.01);
            assert!(v >= prev && v <= 0.0);
            prev = v;
        }
    }

    #[test]
    fn adversarial_point_values() {
        let tape = Tape::new();
        let z = [tape.scalar(0.0), tape.scalar(0.0)];
        let (g, d) = adversarial_losses(&z, &z).unwrap();
        assert!((d.item() - 2.0 * (2.0 as Real).ln()).abs() < 1e-12);
        assert!((g.item() - (2.0 as Real).ln()).abs() < 1e-12);
        let (_, d) = adversarial_losses(&[tape.scalar(-50.0)], &[tape.scalar(50.0)]).unwrap();
        assert!(d.item() < 1e-20);
        let fake = tape.leaf(Tensor::scalar(0.0));
        let (g, _) = adversarial_losses(&[fake], &[tape.scalar(0.0)]).unwrap();
        let grad = tape.backward(g).unwrap().get_or_zeros(fake).item();
        assert!((grad + 0.5).abs() < 1e-12);
    }

    #[test]
    fn r1_of_linear_discriminator() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = Tensor::new(&[3, 4, 4], (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let grad_of = |img: &Tensor| {
            let tape = Tape::new();
            let x = tape.leaf(img.clone());
            let d = (x * tape.constant(w.clone())).sum();
            tape.backward(d).unwrap().get_or_zeros(x)
        };
        let imgs: Vec<Tensor> = (0..3).map(|_| Tensor::new(&[3, 4, 4], (0..48).map(|_| rng.gen()).collect()).unwrap()).collect();
        let grads: Vec<Tensor> = imgs.iter().map(grad_of).collect();
        let norm2: Real = w.data().iter().map(|v| v * v).sum();
        assert!((r1_from_gradients(&grads, 10.0) - 5.0 * norm2).abs() < 1e-12);
        assert_eq!(r1_from_gradients(&[Tensor::zeros(&[3, 4, 4])], 10.0), 0.0);
    }

    fn small_disc(seed: u64) -> (ParamSet, Discriminator) {
        let cfg = NetworkConfig {
            disc_channels: [3, 4, 4, 5],
            ..Default::default()
        };
        let mut params = ParamSet::new();
        let d = Discriminator::new(&mut params, &cfg, 16, 16, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (params, d)
    }

    fn image(rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(&[3, 16, 16], (0..768).map(|_| rng.gen::<Real>()).collect()).unwrap()
    }

    #[test]
    fn r1_matches_finite_difference_gradient_norm() {
        let (params, disc) = small_disc(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = image(&mut rng);
        let logit = |x: &Tensor| {
            let tape = Tape::new();
            let p = params.bind(&tape, false);
            let sw = disc.spectral_weights(&p).unwrap();
            disc.forward(&p, &sw, tape.constant(x.clone()), 1.0).unwrap().item()
        };
        let eps = 1e-6;
        let mut norm2 = 0.0;
        for i in 0..img.numel() {
            let mut a = img.clone();
            let mut b = img.clone();
            a.data_mut()[i] += eps;
            b.data_mut()[i] -= eps;
            let g = (logit(&a) - logit(&b)) / (2.0 * eps);
            norm2 += g * g;
        }
        let r1 = r1_penalty(&disc, &params, &[(img, 1.0)], 10.0).unwrap();
        let fd = 5.0 * norm2;
        assert!((r1 - fd).abs() / fd < 1e-3, "{r1} vs {fd}");
    }

    #[test]
    fn r1_var_gradient_matches_finite_differences() {
        let (params, disc) = small_disc(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let reals = vec![(image(&mut rng), 1.0), (image(&mut rng), 0.0)];
        let probe = disc.weight_ids()[1];
        let err = crate::autodiff::gradcheck_with(
            |tape, v| {
                let mut vars = params.bind(tape, false).vars().to_vec();
                vars[params.names().iter().position(|n| n == "disc.conv1.weight").unwrap()] = v[0];
                let p = Bound::from_vars(vars);
                let sw = disc.spectral_weights(&p).unwrap();
                r1_penalty_var(&disc, &p, &sw, &reals, 10.0).unwrap()
            },
            &[params.get(probe).clone()],
            crate::autodiff::GradCheckOptions {
                eps: 1e-6,
                max_probes: Some(30),
                seed: 0,
            },
        )
        .unwrap();
        assert!(err.max_rel_error < 1e-4, "{err:?}");
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let sw = disc.spectral_weights(&p).unwrap();
        let v = r1_penalty_var(&disc, &p, &sw, &reals, 10.0).unwrap().item();
        let plain = r1_penalty(&disc, &params, &reals, 10.0).unwrap();
        assert!((v - plain).abs() < 1e-12 * plain.max(1.0));
    }

    #[test]
    fn compactness_point_values() {
        let tape = Tape::new();
        let zero = || tape.constant(Tensor::zeros(&[4, 4]));
        let (l, terms) = compactness_loss(&[zero(), zero(), zero()], 0.1).unwrap();
        assert_eq!(l.item(), 0.30000000000000004);
        assert_eq!(terms, vec![0.1; 3]);
        let one = tape.constant(Tensor::ones(&[4, 4]));
        let (l, _) = compactness_loss(&[one, zero(), zero()], 0.1).unwrap();
        assert!((l.item() - 1.2).abs() < 1e-12);
    }

    #[test]
    fn compactness_gradient_is_uniform_above_floor() {
        let tape = Tape::new();
        let above = tape.leaf(Tensor::full(&[2, 5], 0.5));
        let below = tape.leaf(Tensor::full(&[2, 5], 0.05));
        let (l, _) = compactness_loss(&[above, below], 0.1).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get_or_zeros(above).data().iter().all(|&v| (v - 0.1).abs() < 1e-15));
        assert!(g.get_or_zeros(below).data().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn compactness_permutation_invariant_and_monotone(
            vals in prop::collection::vec(0.0f64..1.0, 12),
            bump in 0.0f64..0.5,
            idx in 0usize..12,
        ) {
            let tape = Tape::new();
            let maps: Vec<Tensor> = vals.chunks(4).map(|c| Tensor::new(&[2, 2], c.iter().map(|&v| v as Real).collect()).unwrap()).collect();
            let vars = |m: &[Tensor]| m.iter().map(|t| tape.constant(t.clone())).collect::<Vec<_>>();
            let base = compactness_loss(&vars(&maps), 0.1).unwrap().0.item();
            let rev: Vec<Tensor> = maps.iter().rev().cloned().collect();
            let swapped = compactness_loss(&vars(&rev), 0.1).unwrap().0.item();
            prop_assert!((base - swapped).abs() < 1e-12);
            let mut bumped = maps.clone();
            let v = &mut bumped[idx / 4].data_mut()[idx % 4];
            *v = (*v + bump as Real).min(1.0);
            prop_assert!(compactness_loss(&vars(&bumped), 0.1).unwrap().0.item() >= base);
        }
    }

    #[test]
    fn compactness_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let maps: Vec<Tensor> = (0..3).map(|_| Tensor::new(&[3, 3], (0..9).map(|_| rng.gen_range(0.0..0.4)).collect()).unwrap()).collect();
        let err = gradcheck(|_, v| compactness_loss(v, 0.1).unwrap().0, &maps, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn geometric_term_is_zero_without_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::new();
        let cam = Camera::simple(8.0, 8, 8);
        let rand = |rng: &mut ChaCha8Rng, shape: &[usize], lo: Real, hi: Real| {
            let n = shape.iter().product();
            tape.leaf(Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap())
        };
        let layer = RefinedTriplet {
            color: rand(&mut rng, &[3, 8, 8], 0.0, 1.0),
            alpha: rand(&mut rng, &[8, 8], 0.2, 1.0),
            depth: rand(&mut rng, &[8, 8], 2.0, 3.0),
        };
        let l = geometric_consistency_term(&layer, &layer, &cam, &RelativeTransform::identity(), Some(0.05)).unwrap();
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn geometric_term_gradcheck_wrt_both_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cam = Camera::simple(8.0, 8, 8);
        let mut t = |shape: &[usize], lo: Real, hi: Real| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
        };
        let inputs = [
            t(&[3, 8, 8], 0.0, 1.0),
            t(&[8, 8], 0.3, 1.0),
            t(&[8, 8], 2.0, 2.2),
            t(&[3, 8, 8], 0.0, 1.0),
            t(&[8, 8], 0.3, 1.0),
            t(&[8, 8], 2.0, 2.2),
        ];
        let motion = RelativeTransform {
            rotation: crate::autodiff::linalg::mat3_identity(),
            translation: [0.013, -0.021, 0.0],
        };
        let err = gradcheck(
            |_, v| {
                let a = RefinedTriplet { color: v[0], alpha: v[1], depth: v[2] };
                let b = RefinedTriplet { color: v[3], alpha: v[4], depth: v[5] };
                geometric_consistency_term(&a, &b, &cam, &motion, None).unwrap()
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn total_loss_composes() {
        let tape = Tape::new();
        let z = [tape.scalar(0.0)];
        let (_, d) = adversarial_losses(&z, &z).unwrap();
        let zero = || tape.constant(Tensor::zeros(&[4, 4]));
        let (com, _) = compactness_loss(&[zero(), zero(), zero()], 0.1).unwrap();
        let cfg = LossConfig::default();
        let total = total_loss(d, com, tape.scalar(0.0), &cfg);
        assert!((total.item() - (2.0 * (2.0 as Real).ln() + 0.3)).abs() < 1e-12);
        let off = LossConfig {
            lambda_com: 0.0,
            lambda_geo: 0.0,
            ..cfg
        };
        assert_eq!(total_loss(d, com, tape.scalar(5.0), &off).item(), d.item());
    }
}
