//! Differentiable projection of primitives into feature/alpha/depth maps.

mod blur;
mod reference;
mod soft;
mod splat;
mod texture;

pub use blur::silhouette_to_alpha;
pub use reference::{rasterize_reference, RefObject, ReferenceImage, TextureFilter};
pub use soft::{rasterize_mesh_soft, rasterize_screen, SoftRaster, SoftRasterSettings, NEAR_CULL};
pub use splat::{splat_points, SPLAT_EPS};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::geometry::{project_points, Camera};
use crate::primitives::{canonical_mesh, transform_to_world, Appearance, CanonicalMesh, PrimitiveAttr, PrimitiveConfig, PrimitiveKind};
use crate::{Real, Result};

/// Feature image `[F, H, W]`, alpha `[H, W]` and depth `[H, W]` of one layer.
#[derive(Debug, Clone, Copy)]
pub struct FeatureTriplet<'t> {
    pub features: Var<'t>,
    pub alpha: Var<'t>,
    pub depth: Var<'t>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    pub sigma_soft: Real,
    pub gamma_depth: Real,
    pub kernel_radius: Real,
    pub sigma_splat: Real,
    pub d_far: Real,
    pub alpha_eps: Real,
    /// Pairs fainter than `sigmoid(-cutoff)` are skipped by the soft rasterizer.
    pub soft_cutoff: Real,
    /// Background weight inside the soft rasterizer's depth softmax.
    pub soft_background_eps: Real,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            sigma_soft: 3.0,
            gamma_depth: 0.1,
            kernel_radius: 2.0,
            sigma_splat: 1.5,
            d_far: 15.0,
            alpha_eps: 1e-3,
            soft_cutoff: 60.0,
            soft_background_eps: 1e-3,
        }
    }
}

impl ProjectionConfig {
    pub fn soft_settings(&self, background: bool) -> SoftRasterSettings {
        SoftRasterSettings {
            sigma: self.sigma_soft,
            gamma: self.gamma_depth,
            cutoff: self.soft_cutoff,
            background_eps: background.then_some(self.soft_background_eps),
            d_far: self.d_far,
        }
    }
}

/// Canonical meshes plus settings; turns decoded primitives into triplets.
#[derive(Debug, Clone)]
pub struct Projector {
    pub config: ProjectionConfig,
    pub primitives: PrimitiveConfig,
    cuboid: CanonicalMesh,
    sphere: CanonicalMesh,
    background: CanonicalMesh,
}

impl Projector {
    pub fn new(primitives: PrimitiveConfig, config: ProjectionConfig) -> Result<Self> {
        primitives.validate()?;
        Ok(Self {
            cuboid: canonical_mesh(PrimitiveKind::Cuboid, primitives.cuboid_mesh_resolution)?,
            sphere: canonical_mesh(PrimitiveKind::Sphere, primitives.sphere_mesh_resolution)?,
            background: canonical_mesh(PrimitiveKind::Background, primitives.background_mesh_resolution)?,
            config,
            primitives,
        })
    }

    pub fn mesh(&self, kind: PrimitiveKind) -> &CanonicalMesh {
        match kind {
            PrimitiveKind::Sphere => &self.sphere,
            PrimitiveKind::Background => &self.background,
            _ => &self.cuboid,
        }
    }

    fn world_mesh<'t>(&self, attr: &PrimitiveAttr<'t>, kind: PrimitiveKind) -> Result<Var<'t>> {
        let tape = attr.scale.tape();
        transform_to_world(attr, tape.constant(self.mesh(kind).vertex_tensor()))
    }

    fn finish<'t>(&self, features: Var<'t>, alpha: Var<'t>, depth: Var<'t>) -> FeatureTriplet<'t> {
        let empty: Vec<bool> = alpha.value().data().iter().map(|&a| a < self.config.alpha_eps).collect();
        FeatureTriplet {
            features,
            alpha,
            depth: depth.fill_where(&empty, self.config.d_far),
        }
    }

    /// Alpha and depth of the cuboid sharing a point cloud's pose.
    pub fn bbox_alpha_depth<'t>(&self, attr: &PrimitiveAttr<'t>, camera: &Camera) -> Result<(Var<'t>, Var<'t>)> {
        let world = self.world_mesh(attr, PrimitiveKind::Cuboid)?;
        let r = rasterize_mesh_soft(world, &self.cuboid, None, camera, &self.config.soft_settings(true))?;
        let alpha = silhouette_to_alpha(r.silhouette, self.config.kernel_radius)?;
        Ok((alpha, r.depth))
    }

    pub fn project_primitive<'t>(&self, attr: &PrimitiveAttr<'t>, camera: &Camera) -> Result<FeatureTriplet<'t>> {
        let tape = attr.scale.tape();
        match (attr.kind, attr.appearance) {
            (PrimitiveKind::PointCloud, Appearance::Points(points)) => {
                let world = transform_to_world(attr, points.locations)?;
                let (screen, _) = project_points(camera, world)?;
                let x = splat_points(screen, points.features, camera.width, camera.height, self.config.sigma_splat)?;
                let (alpha, depth) = self.bbox_alpha_depth(attr, camera)?;
                Ok(self.finish(x, alpha, depth))
            }
            (kind, Appearance::Texture(texels)) if kind != PrimitiveKind::PointCloud => {
                let layout = self.primitives.texture_layout(kind).expect("textured kind");
                let world = self.world_mesh(attr, kind)?;
                let background = kind == PrimitiveKind::Background;
                let r = rasterize_mesh_soft(
                    world,
                    self.mesh(kind),
                    Some((texels, layout)),
                    camera,
                    &self.config.soft_settings(!background),
                )?;
                let features = r.features.expect("texture given");
                if background {
                    // the camera sits inside the sphere, so coverage is total
                    let alpha = tape.constant(Tensor::ones(&[camera.height, camera.width]));
                    return Ok(FeatureTriplet {
                        features,
                        alpha,
                        depth: r.depth,
                    });
                }
                let alpha = silhouette_to_alpha(r.silhouette, self.config.kernel_radius)?;
                Ok(self.finish(features, alpha, r.depth))
            }
            (kind, _) => Err(crate::Error::Invalid(format!("appearance does not match kind {:?}", kind))),
        }
    }
}
