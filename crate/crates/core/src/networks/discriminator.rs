use rand::Rng;
use rand_distr::StandardNormal;

use super::{leaky_gain, Bound, Conv, Linear, NetworkConfig, ParamId, ParamSet, LEAKY_SLOPE};
use crate::autodiff::{concat, Tape, Tensor, Var};
use crate::{Error, Real, Result};

/// Floor of the estimated top singular value.
const SIGMA_FLOOR: Real = 1e-12;

fn rows_cols(w: &Tensor) -> (usize, usize) {
    let rows = w.shape()[0];
    (rows, w.numel() / rows.max(1))
}

/// Scales `x` to unit length; returns false (leaving `x` alone) when it is
/// numerically zero.
fn normalize(x: &mut [Real]) -> bool {
    let n = x.iter().map(|v| v * v).sum::<Real>().sqrt();
    if !(n > 1e-30) {
        return false;
    }
    x.iter_mut().for_each(|v| *v /= n);
    true
}

/// `v = normalize(Wᵀ u)` for the `rows × cols` matrix view of `w`.
fn right_vector(w: &Tensor, u: &[Real]) -> Vec<Real> {
    let (rows, cols) = rows_cols(w);
    let mut v = vec![0.0; cols];
    for r in 0..rows {
        let row = &w.data()[r * cols..(r + 1) * cols];
        for (vj, wj) in v.iter_mut().zip(row) {
            *vj += u[r] * wj;
        }
    }
    if !normalize(&mut v) {
        v.fill(0.0);
    }
    v
}

/// One power-iteration step on the matrix view of `w`; `u` keeps unit norm.
fn power_step(w: &Tensor, u: &mut [Real]) {
    let (rows, cols) = rows_cols(w);
    let v = right_vector(w, u);
    let mut next: Vec<Real> = (0..rows)
        .map(|r| w.data()[r * cols..(r + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum())
        .collect();
    if normalize(&mut next) {
        u.copy_from_slice(&next);
    }
}

/// `W / σ̂` with `σ̂ = uᵀ W v` and `v = normalize(Wᵀ u)`; `u` is held constant.
fn normalize_with<'t>(w: Var<'t>, u: &[Real]) -> Result<(Var<'t>, Real)> {
    let wv = w.value();
    let rows = rows_cols(&wv).0;
    if u.len() != rows {
        return Err(Error::Shape(format!("power-iteration vector has {} entries for {} rows", u.len(), rows)));
    }
    let v = right_vector(&wv, u);
    let outer: Vec<Real> = (0..rows).flat_map(|r| v.iter().map(move |vj| u[r] * vj)).collect();
    let outer = Tensor::from_parts(wv.shape().to_vec(), outer);
    let sigma = w.try_mul(w.tape().constant(outer))?.sum().clamp_min(SIGMA_FLOOR);
    let s = sigma.item();
    Ok((w.try_div(sigma)?, s))
}

/// Runs one power-iteration step on `u` and returns `W / σ̂` along with `σ̂`.
/// Conv kernels are viewed as `out × (in·k·k)` matrices.
pub fn spectral_normalize<'t>(w: Var<'t>, u: &mut [Real]) -> Result<(Var<'t>, Real)> {
    let wv = w.value();
    if u.len() != rows_cols(&wv).0 {
        return Err(Error::Shape(format!("power-iteration vector has {} entries for {:?}", u.len(), wv.shape())));
    }
    power_step(&wv, u);
    normalize_with(w, u)
}

/// Spectrally normalized weights of one discriminator evaluation.
pub struct SpectralWeights<'t> {
    /// Conv kernels followed by the final linear weight.
    pub weights: Vec<Var<'t>>,
    pub sigmas: Vec<Real>,
}

/// Conditional image discriminator: the flag `c` enters as a constant
/// fourth input channel, followed by four stride-2 convolutions and a
/// linear logit. Every weight is spectrally normalized.
#[derive(Debug, Clone)]
pub struct Discriminator {
    convs: Vec<Conv>,
    fc: Linear,
    /// Power-iteration vectors, one per weight in [`Self::weight_ids`] order.
    pub u: Vec<Vec<Real>>,
    height: usize,
    width: usize,
}

impl Discriminator {
    pub fn new(params: &mut ParamSet, config: &NetworkConfig, height: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        if height % 16 != 0 || width % 16 != 0 || height == 0 || width == 0 {
            return Err(Error::Config(format!("discriminator needs sides divisible by 16, got {}x{}", height, width)));
        }
        let mut cin = 4;
        let convs: Vec<Conv> = config
            .disc_channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let c = Conv::new(params, &format!("disc.conv{i}"), cin, cout, 3, 2, leaky_gain(), rng);
                cin = cout;
                c
            })
            .collect();
        let fc = Linear::new(params, "disc.fc", cin * (height / 16) * (width / 16), 1, 1.0, rng);
        let mut u = Vec::new();
        for rows in convs.iter().map(|c| params.get(c.weight).shape()[0]).chain([1]) {
            let mut v: Vec<Real> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
            if !normalize(&mut v) {
                v[0] = 1.0;
            }
            u.push(v);
        }
        Ok(Self {
            convs,
            fc,
            u,
            height,
            width,
        })
    }

    pub fn weight_ids(&self) -> Vec<ParamId> {
        self.convs.iter().map(|c| c.weight).chain([self.fc.weight]).collect()
    }

    /// Advances every power-iteration vector by one step.
    pub fn update_spectral_state(&mut self, params: &ParamSet) {
        for (id, u) in self.weight_ids().into_iter().zip(self.u.iter_mut()) {
            power_step(params.get(id), u);
        }
    }

    /// Normalized weights for the current power-iteration state.
    pub fn spectral_weights<'t>(&self, p: &Bound<'t>) -> Result<SpectralWeights<'t>> {
        let mut weights = Vec::new();
        let mut sigmas = Vec::new();
        for (id, u) in self.weight_ids().into_iter().zip(&self.u) {
            let (w, s) = normalize_with(p.var(id), u)?;
            weights.push(w);
            sigmas.push(s);
        }
        Ok(SpectralWeights { weights, sigmas })
    }

    fn input<'t>(&self, image: Var<'t>, c: Real) -> Result<Var<'t>> {
        if image.shape() != [3, self.height, self.width] {
            return Err(Error::Shape(format!(
                "discriminator expects [3, {}, {}], got {:?}",
                self.height,
                self.width,
                image.shape()
            )));
        }
        let flag = image.tape().constant(Tensor::full(&[1, self.height, self.width], c));
        concat(&[image, flag])
    }

    /// Logit of shape `[1]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, sw: &SpectralWeights<'t>, image: Var<'t>, c: Real) -> Result<Var<'t>> {
        let mut x = self.input(image, c)?;
        for (conv, &w) in self.convs.iter().zip(&sw.weights) {
            x = x.conv2d(w, Some(p.var(conv.bias)), conv.stride, conv.kernel / 2)?.leaky_relu(LEAKY_SLOPE);
        }
        self.fc.apply(sw.weights[self.convs.len()], Some(p.var(self.fc.bias)), x)
    }

    /// Directional derivative `⟨∇_I d(I, c), tangent⟩` as a function of the
    /// weights. The network is piecewise linear, so the slopes of the
    /// activations are read off a primal pass and held fixed.
    pub fn forward_tangent<'t>(&self, p: &Bound<'t>, sw: &SpectralWeights<'t>, image: &Tensor, c: Real, tangent: &Tensor) -> Result<Var<'t>> {
        if tangent.shape() != image.shape() {
            return Err(Error::Shape("tangent must match the image".into()));
        }
        // primal pass on a scratch tape for the activation slopes
        let scratch = Tape::new();
        let mut x = self.input(scratch.constant(image.clone()), c)?;
        let mut slopes = Vec::with_capacity(self.convs.len());
        for (conv, w) in self.convs.iter().zip(&sw.weights) {
            let w = scratch.constant((*w.value()).clone());
            let b = scratch.constant((*p.var(conv.bias).value()).clone());
            let pre = x.conv2d(w, Some(b), conv.stride, conv.kernel / 2)?;
            slopes.push(pre.value().map(|v| if v > 0.0 { 1.0 } else { LEAKY_SLOPE }));
            x = pre.leaky_relu(LEAKY_SLOPE);
        }
        let tape = sw.weights[0].tape();
        let zero_flag = Tensor::zeros(&[1, self.height, self.width]);
        let mut t = concat(&[tape.constant(tangent.clone()), tape.constant(zero_flag)])?;
        for ((conv, &w), slope) in self.convs.iter().zip(&sw.weights).zip(slopes) {
            t = t.conv2d(w, None, conv.stride, conv.kernel / 2)?.try_mul(tape.constant(slope))?;
        }
        self.fc.apply(sw.weights[self.convs.len()], None, t)
    }

    /// Logit and its gradient wrt the image, with the weights held constant.
    pub fn input_gradient(&self, params: &ParamSet, image: &Tensor, c: Real) -> Result<(Real, Tensor)> {
        let tape = Tape::new();
        self.input_gradient_on(&params.bind(&tape, false), image, c)
    }

    /// As [`Self::input_gradient`], reading the weights off variables of
    /// another tape.
    pub fn input_gradient_bound(&self, p: &Bound<'_>, image: &Tensor, c: Real) -> Result<(Real, Tensor)> {
        let tape = Tape::new();
        let vars = p.vars().iter().map(|v| tape.constant((*v.value()).clone())).collect();
        self.input_gradient_on(&Bound { vars }, image, c)
    }

    fn input_gradient_on(&self, p: &Bound<'_>, image: &Tensor, c: Real) -> Result<(Real, Tensor)> {
        let tape = p.vars()[0].tape();
        let sw = self.spectral_weights(p)?;
        let x = tape.leaf(image.clone());
        let logit = self.forward(p, &sw, x, c)?;
        let grads = tape.backward(logit)?;
        Ok((logit.item(), grads.get_or_zeros(x)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck_with, GradCheckOptions};
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn top_singular(w: &Tensor) -> Real {
        let (r, c) = rows_cols(w);
        let m = DMatrix::from_row_slice(r, c, w.data());
        m.singular_values().max()
    }

    fn small(rng: &mut ChaCha8Rng) -> (ParamSet, Discriminator) {
        let cfg = NetworkConfig {
            disc_channels: [4, 6, 6, 8],
            ..Default::default()
        };
        let mut params = ParamSet::new();
        let d = Discriminator::new(&mut params, &cfg, 16, 16, rng).unwrap();
        (params, d)
    }

    fn image(rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(&[3, 16, 16], (0..768).map(|_| rng.gen::<Real>()).collect()).unwrap()
    }

    #[test]
    fn diagonal_matrix_converges_to_top_value() {
        let tape = Tape::new();
        let w = tape.constant(Tensor::new(&[2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap());
        let mut u = vec![0.6, 0.8];
        let mut out = None;
        for _ in 0..20 {
            out = Some(spectral_normalize(w, &mut u).unwrap());
        }
        let (wn, s) = out.unwrap();
        assert!((s - 3.0).abs() < 1e-6, "{s}");
        assert!((top_singular(&wn.value()) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_matrix_is_unchanged() {
        let (c, s) = (0.6, 0.8);
        let tape = Tape::new();
        let w0 = Tensor::new(&[2, 2], vec![c, -s, s, c]).unwrap();
        let mut u = vec![1.0, 0.0];
        let (wn, sigma) = spectral_normalize(tape.constant(w0.clone()), &mut u).unwrap();
        assert!((sigma - 1.0).abs() < 1e-6);
        for (a, b) in wn.value().data().iter().zip(w0.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn converged_sigma_ignores_initial_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Tensor::new(&[4, 6], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let tape = Tape::new();
        let wv = tape.constant(w.clone());
        let run = |mut u: Vec<Real>| {
            normalize(&mut u);
            let mut s = 0.0;
            for _ in 0..500 {
                s = spectral_normalize(wv, &mut u).unwrap().1;
            }
            s
        };
        let a = run(vec![1.0, 0.3, -0.2, 0.5]);
        let b = run(vec![-0.4, 1.0, 0.9, -0.1]);
        assert!((a - b).abs() < 1e-6);
        assert!((a - top_singular(&w)).abs() < 1e-6);
    }

    #[test]
    fn zero_matrix_is_guarded() {
        let tape = Tape::new();
        let mut u = vec![1.0, 0.0];
        let (wn, s) = spectral_normalize(tape.constant(Tensor::zeros(&[2, 3])), &mut u).unwrap();
        assert_eq!(s, SIGMA_FLOOR);
        assert!(wn.value().all_finite());
        assert_eq!(u, vec![1.0, 0.0]);
    }

    #[test]
    fn flag_changes_logit_and_extremes_are_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (params, d) = small(&mut rng);
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let sw = d.spectral_weights(&p).unwrap();
        let img = tape.constant(image(&mut rng));
        let a = d.forward(&p, &sw, img, 0.0).unwrap().item();
        let b = d.forward(&p, &sw, img, 1.0).unwrap().item();
        assert_ne!(a, b);
        for fill in [0.0, 1.0] {
            let x = tape.constant(Tensor::full(&[3, 16, 16], fill));
            assert!(d.forward(&p, &sw, x, 1.0).unwrap().item().is_finite());
        }
    }

    #[test]
    fn logit_gradcheck_wrt_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (params, d) = small(&mut rng);
        let report = gradcheck_with(
            |t, v| {
                let p = params.bind(t, false);
                let sw = d.spectral_weights(&p).unwrap();
                d.forward(&p, &sw, v[0], 1.0).unwrap().sum()
            },
            &[image(&mut rng)],
            GradCheckOptions {
                eps: 1e-6,
                max_probes: Some(60),
                seed: 1,
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn tangent_pass_matches_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (params, d) = small(&mut rng);
        let img = image(&mut rng);
        let dir = Tensor::new(&[3, 16, 16], (0..768).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (_, g) = d.input_gradient(&params, &img, 1.0).unwrap();
        let expect: Real = g.data().iter().zip(dir.data()).map(|(a, b)| a * b).sum();
        let tape = Tape::new();
        let p = params.bind(&tape, true);
        let sw = d.spectral_weights(&p).unwrap();
        let jvp = d.forward_tangent(&p, &sw, &img, 1.0, &dir).unwrap().item();
        assert!((jvp - expect).abs() < 1e-10 * (1.0 + expect.abs()), "{jvp} vs {expect}");
    }

    #[test]
    fn power_iteration_tracks_training_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut params, mut d) = small(&mut rng);
        for _ in 0..100 {
            d.update_spectral_state(&params);
            for v in params.values_mut() {
                for x in v.data_mut() {
                    *x += 1e-3 * rng.gen_range(-1.0..1.0);
                }
            }
        }
        let tape = Tape::new();
        let sw = d.spectral_weights(&params.bind(&tape, false)).unwrap();
        for w in &sw.weights {
            let s = top_singular(&w.value());
            assert!((0.9..=1.1).contains(&s), "{s}");
        }
    }
}
