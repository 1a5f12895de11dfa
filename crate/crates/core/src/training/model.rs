use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{derive_seed, RmsProp, TrainConfig};
use crate::autodiff::linalg::{mat3_mul, vec3_add, vec3_norm, vec3_scale, Vec3};
use crate::autodiff::{Tape, Tensor, Var};
use crate::compositor::{composite, Composite, RefinedLayer};
use crate::geometry::{rotation_from_axis_angle, sample_camera, Camera, Pose};
use crate::networks::{Bound, Checkpoint, Discriminator, G2d, G3d, ParamSet, RefinedTriplet};
use crate::primitives::{decode_primitive, PrimitiveAttr, PrimitiveKind};
use crate::projection::{FeatureTriplet, Projector};
use crate::{Error, Real, Result};

/// Seed stream used for weight initialization.
const INIT_STREAM: u64 = 0;

/// Networks, optimizer state and the projector of one training run.
#[derive(Clone)]
pub struct Model {
    pub config: TrainConfig,
    pub projector: Projector,
    pub generator: ParamSet,
    pub discriminator: ParamSet,
    pub g3d: G3d,
    pub g2d: G2d,
    pub disc: Discriminator,
    pub opt_g: RmsProp,
    pub opt_d: RmsProp,
    /// Number of completed training steps.
    pub step: u64,
}

/// Everything one generator pass produced, still on its tape. Entries of
/// foreground primitives are `None` when the pass ran with c = 0.
pub struct Generated<'t> {
    pub attrs: Vec<PrimitiveAttr<'t>>,
    pub triplets: Vec<Option<FeatureTriplet<'t>>>,
    pub refined: Vec<Option<RefinedTriplet<'t>>>,
    /// Composite over the rendered primitives; its weights follow the order
    /// of the `Some` entries of `refined`.
    pub composite: Composite<'t>,
}

impl Model {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[INIT_STREAM]));
        let kinds = config.kinds();
        let mut generator = ParamSet::new();
        let g3d = G3d::new(&mut generator, &config.network, &kinds, &config.primitives, &mut rng);
        let g2d = G2d::new(&mut generator, &config.network, config.primitives.features, config.projection.d_far, &mut rng);
        let mut discriminator = ParamSet::new();
        let disc = Discriminator::new(&mut discriminator, &config.network, config.image_size, config.image_size, &mut rng)?;
        let opt = |p: &ParamSet| RmsProp::new(p.values(), config.learning_rate, config.rms_decay, config.rms_eps);
        Ok(Self {
            projector: Projector::new(config.primitives.clone(), config.projection.clone())?,
            opt_g: opt(&generator),
            opt_d: opt(&discriminator),
            generator,
            discriminator,
            g3d,
            g2d,
            disc,
            config,
            step: 0,
        })
    }

    pub fn kinds(&self) -> &[PrimitiveKind] {
        &self.g3d.kinds
    }

    pub fn num_objects(&self) -> usize {
        self.config.num_objects
    }

    /// Decoded primitives for latent `z`, background last.
    pub fn decode<'t>(&self, p: &Bound<'t>, z: Var<'t>) -> Result<Vec<PrimitiveAttr<'t>>> {
        let raws = self.g3d.forward(p, z)?;
        raws.into_iter()
            .zip(self.kinds())
            .map(|(raw, &kind)| decode_primitive(raw, kind, &self.config.primitives))
            .collect()
    }

    /// Projection and refinement of one primitive.
    pub fn refine<'t>(&self, p: &Bound<'t>, attr: &PrimitiveAttr<'t>, camera: &Camera) -> Result<(FeatureTriplet<'t>, RefinedTriplet<'t>)> {
        let triplet = self.projector.project_primitive(attr, camera)?;
        let refined = self.g2d.forward(p, &triplet)?;
        Ok((triplet, refined))
    }

    /// Projects, refines and composites `attrs`; with `composite_all` false
    /// only the background is rendered.
    pub fn render<'t>(&self, p: &Bound<'t>, attrs: Vec<PrimitiveAttr<'t>>, camera: &Camera, composite_all: bool) -> Result<Generated<'t>> {
        let mut triplets = Vec::with_capacity(attrs.len());
        let mut refined = Vec::with_capacity(attrs.len());
        let mut layers = Vec::new();
        for (id, attr) in attrs.iter().enumerate() {
            let is_background = attr.kind == PrimitiveKind::Background;
            if !is_background && !composite_all {
                triplets.push(None);
                refined.push(None);
                continue;
            }
            let (t, r) = self.refine(p, attr, camera)?;
            layers.push(RefinedLayer {
                color: r.color,
                alpha: r.alpha,
                depth: r.depth,
                id,
                is_background,
            });
            triplets.push(Some(t));
            refined.push(Some(r));
        }
        Ok(Generated {
            attrs,
            triplets,
            refined,
            composite: composite(&layers)?,
        })
    }

    /// Serializes weights, optimizer state and power-iteration vectors.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        let mut put = |prefix: &str, names: &[String], values: &[Tensor]| {
            for (n, v) in names.iter().zip(values) {
                tensors.push((format!("{prefix}/{n}"), v.clone()));
            }
        };
        put("gen", self.generator.names(), self.generator.values());
        put("disc", self.discriminator.names(), self.discriminator.values());
        put("opt_g", self.generator.names(), &self.opt_g.mean_square);
        put("opt_d", self.discriminator.names(), &self.opt_d.mean_square);
        for (i, u) in self.disc.u.iter().enumerate() {
            tensors.push((format!("sn/{i}"), Tensor::from_vec(u.clone())));
        }
        Checkpoint {
            step: self.step,
            config: self.config.to_toml(),
            tensors,
        }
    }

    /// Rebuilds a model from a checkpoint; the stored config is authoritative.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = TrainConfig::from_toml(&ckpt.config)?;
        let mut model = Self::new(config)?;
        let strip = |prefix: &str| -> Vec<(String, Tensor)> {
            let pre = format!("{prefix}/");
            ckpt.tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(&pre).map(|s| (s.to_string(), t.clone())))
                .collect()
        };
        model.generator.load(&strip("gen"))?;
        model.discriminator.load(&strip("disc"))?;
        let mut opt_g = model.generator.clone();
        opt_g.load(&strip("opt_g"))?;
        model.opt_g.mean_square = opt_g.values().to_vec();
        let mut opt_d = model.discriminator.clone();
        opt_d.load(&strip("opt_d"))?;
        model.opt_d.mean_square = opt_d.values().to_vec();
        for (i, u) in model.disc.u.iter_mut().enumerate() {
            let t = ckpt
                .get(&format!("sn/{i}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing power-iteration vector {i}")))?;
            if t.numel() != u.len() {
                return Err(Error::Checkpoint(format!("power-iteration vector {i} has the wrong length")));
            }
            u.copy_from_slice(t.data());
        }
        model.step = ckpt.step;
        Ok(model)
    }
}

/// Plain-tensor copy of a feature triplet or refined layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerImages {
    pub color: Tensor,
    pub alpha: Tensor,
    pub depth: Tensor,
}

/// A generated scene with every intermediate result, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub z: Vec<Real>,
    pub camera: Camera,
    /// Whether the foreground primitives were composited (c = 1).
    pub composite_all: bool,
    /// Pose used for every primitive, background last.
    pub poses: Vec<Pose>,
    /// Poses set by edits; they replace the decoded ones.
    pub overrides: Vec<Option<Pose>>,
    /// Projected features (first channels), alpha and depth per primitive.
    pub triplets: Vec<Option<LayerImages>>,
    pub layers: Vec<Option<LayerImages>>,
    /// Instance weight of every rendered primitive.
    pub weights: Vec<Option<Tensor>>,
    /// `[3, H, W]` composite.
    pub image: Tensor,
}

fn snapshot(features: Var<'_>, alpha: Var<'_>, depth: Var<'_>) -> LayerImages {
    LayerImages {
        color: (*features.value()).clone(),
        alpha: (*alpha.value()).clone(),
        depth: (*depth.value()).clone(),
    }
}

/// Renders a scene for `z` under `camera`, with optional per-primitive pose
/// overrides.
pub fn render_scene(model: &Model, z: &[Real], camera: &Camera, composite_all: bool, overrides: &[Option<Pose>]) -> Result<SceneSample> {
    let n = model.kinds().len();
    if overrides.len() != n {
        return Err(Error::Invalid(format!("{} pose overrides for {} primitives", overrides.len(), n)));
    }
    camera.validate()?;
    if camera.width != model.config.image_size || camera.height != model.config.image_size {
        return Err(Error::Invalid("camera size differs from the model's image size".into()));
    }
    let tape = Tape::new();
    let p = model.generator.bind(&tape, false);
    let zv = tape.constant(Tensor::from_vec(z.to_vec()));
    let mut attrs = model.decode(&p, zv)?;
    for (attr, o) in attrs.iter_mut().zip(overrides) {
        if let Some(pose) = o {
            if attr.kind == PrimitiveKind::Background {
                return Err(Error::Invalid("the background pose is fixed".into()));
            }
            pose.validate()?;
            *attr = attr.with_pose(pose);
        }
    }
    let poses = attrs.iter().map(PrimitiveAttr::pose).collect();
    let g = model.render(&p, attrs, camera, composite_all)?;
    let mut weights = g.composite.weights.clone().into_iter();
    Ok(SceneSample {
        z: z.to_vec(),
        camera: camera.clone(),
        composite_all,
        poses,
        overrides: overrides.to_vec(),
        triplets: g.triplets.iter().map(|t| t.map(|t| snapshot(t.features, t.alpha, t.depth))).collect(),
        layers: g.refined.iter().map(|r| r.map(|r| snapshot(r.color, r.alpha, r.depth))).collect(),
        weights: g.refined.iter().map(|r| r.and_then(|_| weights.next())).collect(),
        image: (*g.composite.image.value()).clone(),
    })
}

/// Samples a scene; `z` and `camera` are drawn from `rng` when not given.
pub fn sample_scene(model: &Model, z: Option<Vec<Real>>, camera: Option<Camera>, composite_all: bool, rng: &mut impl Rng) -> Result<SceneSample> {
    let z = z.unwrap_or_else(|| (0..model.config.network.latent_dim).map(|_| rng.sample(StandardNormal)).collect());
    let camera = camera.unwrap_or_else(|| sample_camera(rng, &model.config.camera));
    render_scene(model, &z, &camera, composite_all, &vec![None; model.kinds().len()])
}

/// A change to one attribute of a sampled scene.
#[derive(Debug, Clone, PartialEq)]
pub enum Edit {
    /// Shift foreground primitive `index` by `delta` (world units).
    Translate { index: usize, delta: Vec3 },
    /// Rotate foreground primitive `index` about its own centre.
    Rotate { index: usize, axis: Vec3, degrees: Real },
    /// Move the camera on its sampling sphere.
    Camera { azimuth_deg: Real, elevation_deg: Real },
}

/// Re-renders `sample` with one attribute changed and everything else kept.
pub fn edit_scene(model: &Model, sample: &SceneSample, edit: &Edit) -> Result<SceneSample> {
    let mut overrides = sample.overrides.clone();
    let mut camera = sample.camera.clone();
    let check = |index: usize| {
        if index >= model.num_objects() {
            Err(Error::Invalid(format!("primitive {} out of range 0..{}", index, model.num_objects())))
        } else {
            Ok(())
        }
    };
    match *edit {
        Edit::Translate { index, delta } => {
            check(index)?;
            let mut pose = sample.poses[index].clone();
            pose.translation = vec3_add(&pose.translation, &delta);
            overrides[index] = Some(pose);
        }
        Edit::Rotate { index, axis, degrees } => {
            check(index)?;
            let norm = vec3_norm(&axis);
            if !(norm > 0.0) || !degrees.is_finite() {
                return Err(Error::Invalid("rotation needs a non-zero axis and a finite angle".into()));
            }
            let mut pose = sample.poses[index].clone();
            let delta = rotation_from_axis_angle(vec3_scale(&axis, degrees.to_radians() / norm));
            pose.rotation = mat3_mul(&delta, &pose.rotation);
            overrides[index] = Some(pose);
        }
        Edit::Camera { azimuth_deg, elevation_deg } => {
            if !(azimuth_deg.is_finite() && (-90.0..=90.0).contains(&elevation_deg)) {
                return Err(Error::Invalid("camera elevation must lie in [-90, 90] degrees".into()));
            }
            camera = model.config.camera.camera_at(azimuth_deg.to_radians(), elevation_deg.to_radians());
        }
    }
    render_scene(model, &sample.z, &camera, sample.composite_all, &overrides)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::networks::NetworkConfig;
    use crate::primitives::PrimitiveConfig;

    pub(crate) fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig {
            image_size: 16,
            num_objects: 2,
            batch_size: 2,
            primitives: PrimitiveConfig {
                features: 3,
                cuboid_texture: 2,
                background_texture: [4, 8],
                background_mesh_resolution: 6,
                ..Default::default()
            },
            network: NetworkConfig {
                latent_dim: 8,
                g3d_width: 16,
                g2d_channels: [4, 6],
                disc_channels: [4, 4, 6, 6],
                ..Default::default()
            },
            ..Default::default()
        };
        cfg.camera.width = 16;
        cfg.camera.height = 16;
        cfg.camera.focal = 16.0;
        cfg
    }

    #[test]
    fn sampling_is_deterministic() {
        let model = Model::new(tiny_config()).unwrap();
        let a = sample_scene(&model, None, None, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_scene(&model, None, None, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn background_only_pass_equals_refined_background() {
        let model = Model::new(tiny_config()).unwrap();
        let s = sample_scene(&model, None, None, false, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(s.layers[0].is_none() && s.layers[1].is_none());
        assert_eq!(s.image.data(), s.layers[2].as_ref().unwrap().color.data());
    }

    #[test]
    fn zero_edit_is_bitwise_identity() {
        let model = Model::new(tiny_config()).unwrap();
        let s = sample_scene(&model, None, None, true, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let t = edit_scene(&model, &s, &Edit::Translate { index: 0, delta: [0.0; 3] }).unwrap();
        assert_eq!(s.image.data(), t.image.data());
        let r = edit_scene(&model, &s, &Edit::Rotate { index: 1, axis: [0.0, 0.0, 1.0], degrees: 0.0 }).unwrap();
        assert_eq!(s.image.data(), r.image.data());
    }

    #[test]
    fn edits_leave_other_layers_untouched() {
        let model = Model::new(tiny_config()).unwrap();
        let s = sample_scene(&model, None, None, true, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let t = edit_scene(&model, &s, &Edit::Translate { index: 0, delta: [0.2, -0.1, 0.05] }).unwrap();
        assert_ne!(s.layers[0], t.layers[0]);
        assert_eq!(s.layers[1], t.layers[1]);
        assert_eq!(s.layers[2], t.layers[2]);
        assert!(edit_scene(&model, &s, &Edit::Translate { index: 2, delta: [0.0; 3] }).is_err());
    }

    #[test]
    fn checkpoint_round_trip_reproduces_samples() {
        let mut model = Model::new(tiny_config()).unwrap();
        model.step = 5;
        model.opt_g.mean_square[0].data_mut()[0] = 0.25;
        let restored = Model::from_checkpoint(&Checkpoint::from_bytes(&model.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(restored.step, 5);
        assert_eq!(restored.opt_g, model.opt_g);
        assert_eq!(restored.disc.u, model.disc.u);
        let a = sample_scene(&model, None, None, true, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_scene(&restored, None, None, true, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.image.data(), b.image.data());
    }
}
