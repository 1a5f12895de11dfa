use rand::Rng;

use super::{leaky_gain, Bound, Linear, NetworkConfig, ParamSet, LEAKY_SLOPE};
use crate::autodiff::Var;
use crate::primitives::{PrimitiveConfig, PrimitiveKind};
use crate::{Error, Result};

/// Fully connected trunk shared by all primitives, followed by one head per
/// primitive that emits that primitive's raw parameter vector.
#[derive(Debug, Clone)]
pub struct G3d {
    trunk: Vec<Linear>,
    heads: Vec<Linear>,
    pub kinds: Vec<PrimitiveKind>,
}

impl G3d {
    pub fn new(
        params: &mut ParamSet,
        config: &NetworkConfig,
        kinds: &[PrimitiveKind],
        primitives: &PrimitiveConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let mut width = config.latent_dim;
        let trunk = (0..config.g3d_layers)
            .map(|i| {
                let l = Linear::new(params, &format!("g3d.fc{i}"), width, config.g3d_width, leaky_gain(), rng);
                width = config.g3d_width;
                l
            })
            .collect();
        let heads = kinds
            .iter()
            .enumerate()
            .map(|(i, &k)| Linear::new(params, &format!("g3d.head{i}"), width, primitives.budget(k), 1.0, rng))
            .collect();
        Self {
            trunk,
            heads,
            kinds: kinds.to_vec(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.trunk.first().or(self.heads.first()).map_or(0, |l| l.inputs)
    }

    /// Raw attribute vectors, one per primitive, in `kinds` order.
    pub fn forward<'t>(&self, p: &Bound<'t>, z: Var<'t>) -> Result<Vec<Var<'t>>> {
        if z.numel() != self.latent_dim() {
            return Err(Error::Shape(format!("latent code needs {} entries, got {}", self.latent_dim(), z.numel())));
        }
        let mut h = z.reshape(&[z.numel()])?;
        for layer in &self.trunk {
            h = layer.forward(p, h)?.leaky_relu(LEAKY_SLOPE);
        }
        self.heads.iter().map(|head| head.forward(p, h)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Tape, Tensor};
    use crate::Real;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (ParamSet, G3d, PrimitiveConfig) {
        let prims = PrimitiveConfig {
            points: 4,
            features: 2,
            cuboid_texture: 2,
            background_texture: [2, 4],
            ..Default::default()
        };
        let cfg = NetworkConfig {
            latent_dim: 6,
            g3d_width: 8,
            ..Default::default()
        };
        let mut params = ParamSet::new();
        let kinds = [PrimitiveKind::Cuboid, PrimitiveKind::PointCloud, PrimitiveKind::Background];
        let g = G3d::new(&mut params, &cfg, &kinds, &prims, &mut ChaCha8Rng::seed_from_u64(0));
        (params, g, prims)
    }

    #[test]
    fn one_head_per_primitive_with_its_budget() {
        let (params, g, prims) = small();
        let tape = Tape::new();
        let out = g.forward(&params.bind(&tape, false), tape.constant(Tensor::zeros(&[6]))).unwrap();
        assert_eq!(out.len(), 3);
        for (o, k) in out.iter().zip(&g.kinds) {
            assert_eq!(o.numel(), prims.budget(*k));
        }
    }

    #[test]
    fn different_latents_differ() {
        let (params, g, _) = small();
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let a = g.forward(&p, tape.constant(Tensor::from_vec(vec![0.1; 6]))).unwrap();
        let b = g.forward(&p, tape.constant(Tensor::from_vec(vec![-0.2; 6]))).unwrap();
        assert_ne!(a[0].value().data(), b[0].value().data());
    }

    #[test]
    fn rejects_wrong_latent_size() {
        let (params, g, _) = small();
        let tape = Tape::new();
        assert!(g.forward(&params.bind(&tape, false), tape.constant(Tensor::zeros(&[5]))).is_err());
    }

    #[test]
    fn gradcheck_wrt_latent() {
        let (params, g, _) = small();
        for seed in 0..3u64 {
            let z: Vec<Real> = (0..6).map(|i| ((i as u64 + 3 * seed) as Real * 1.3).sin()).collect();
            let err = gradcheck(
                |t, v| {
                    let p = params.bind(t, false);
                    let outs = g.forward(&p, v[0]).unwrap();
                    outs.into_iter().map(|o| o.sum()).reduce(|a, b| a + b).unwrap()
                },
                &[Tensor::from_vec(z)],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }
}
