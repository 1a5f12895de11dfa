//! Primitive representations and decoding of raw generator outputs.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::linalg::{mat3_identity, mat3_to_tensor, tensor_to_mat3, Vec3};
use crate::autodiff::{Tensor, Var};
use crate::geometry::{rotation_var, Pose};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrimitiveKind {
    PointCloud,
    Cuboid,
    Sphere,
    Background,
}

/// Number of raw values spent on scale, axis-angle rotation and translation.
pub const POSE_SLOTS: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrimitiveConfig {
    pub s_min: Real,
    pub s_max: Real,
    pub t_range: Real,
    pub s_bg: Real,
    /// Points per point cloud.
    pub points: usize,
    /// Feature channels per point or texel.
    pub features: usize,
    /// Texels per cuboid face edge.
    pub cuboid_texture: usize,
    /// Sphere texture as (rows, cols) = (latitude, longitude).
    pub sphere_texture: [usize; 2],
    pub background_texture: [usize; 2],
    pub cuboid_mesh_resolution: usize,
    pub sphere_mesh_resolution: usize,
    pub background_mesh_resolution: usize,
}

impl Default for PrimitiveConfig {
    fn default() -> Self {
        Self {
            s_min: 0.05,
            s_max: 0.5,
            t_range: 1.0,
            s_bg: 5.0,
            points: 128,
            features: 12,
            cuboid_texture: 8,
            sphere_texture: [16, 32],
            background_texture: [16, 32],
            cuboid_mesh_resolution: 2,
            sphere_mesh_resolution: 8,
            background_mesh_resolution: 12,
        }
    }
}

impl PrimitiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_min > 0.0 && self.s_min < self.s_max) {
            return Err(Error::Config(format!("need 0 < s_min < s_max, got {} and {}", self.s_min, self.s_max)));
        }
        if !(self.t_range >= 0.0) {
            return Err(Error::Config("t_range must be non-negative".into()));
        }
        if self.points == 0 || self.features == 0 || self.cuboid_texture == 0 {
            return Err(Error::Config("point count, feature count and texture size must be positive".into()));
        }
        if self.sphere_texture.contains(&0) || self.background_texture.contains(&0) {
            return Err(Error::Config("sphere textures must be non-empty".into()));
        }
        if self.cuboid_mesh_resolution == 0 || self.sphere_mesh_resolution < 2 || self.background_mesh_resolution < 2 {
            return Err(Error::Config("mesh resolutions too small".into()));
        }
        Ok(())
    }

    /// Texture grid as (faces, rows, cols) for a textured kind.
    pub fn texture_layout(&self, kind: PrimitiveKind) -> Option<TextureLayout> {
        let t = self.cuboid_texture;
        match kind {
            PrimitiveKind::PointCloud => None,
            PrimitiveKind::Cuboid => Some(TextureLayout {
                faces: 6,
                rows: t,
                cols: t,
                channels: self.features,
                wrap_u: false,
            }),
            PrimitiveKind::Sphere => Some(TextureLayout::sphere(self.sphere_texture, self.features)),
            PrimitiveKind::Background => Some(TextureLayout::sphere(self.background_texture, self.features)),
        }
    }

    /// Length of the raw vector a generator head must produce for `kind`.
    pub fn budget(&self, kind: PrimitiveKind) -> usize {
        match self.texture_layout(kind) {
            None => POSE_SLOTS + self.points * (3 + self.features),
            Some(l) => POSE_SLOTS + l.numel(),
        }
    }

    pub fn mesh_resolution(&self, kind: PrimitiveKind) -> usize {
        match kind {
            PrimitiveKind::Sphere => self.sphere_mesh_resolution,
            PrimitiveKind::Background => self.background_mesh_resolution,
            _ => self.cuboid_mesh_resolution,
        }
    }
}

/// Shape of a texel grid attached to a canonical surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextureLayout {
    pub faces: usize,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    /// Whether the column coordinate wraps around (longitude).
    pub wrap_u: bool,
}

impl TextureLayout {
    fn sphere([rows, cols]: [usize; 2], channels: usize) -> Self {
        Self {
            faces: 1,
            rows,
            cols,
            channels,
            wrap_u: true,
        }
    }

    pub fn numel(&self) -> usize {
        self.faces * self.rows * self.cols * self.channels
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.faces, self.rows, self.cols, self.channels]
    }
}

/// Point locations in the canonical cube plus per-point features.
#[derive(Debug, Clone, Copy)]
pub struct PointSet<'t> {
    pub locations: Var<'t>,
    pub features: Var<'t>,
}

#[derive(Debug, Clone, Copy)]
pub enum Appearance<'t> {
    Points(PointSet<'t>),
    /// Texels laid out as `[faces, rows, cols, channels]`.
    Texture(Var<'t>),
}

/// A decoded primitive living on a tape.
#[derive(Debug, Clone, Copy)]
pub struct PrimitiveAttr<'t> {
    pub kind: PrimitiveKind,
    pub scale: Var<'t>,
    pub rotation: Var<'t>,
    pub translation: Var<'t>,
    pub appearance: Appearance<'t>,
}

impl<'t> PrimitiveAttr<'t> {
    pub fn pose(&self) -> Pose {
        let s = self.scale.value();
        let t = self.translation.value();
        Pose {
            scale: [s.data()[0], s.data()[1], s.data()[2]],
            rotation: tensor_to_mat3(&self.rotation.value()),
            translation: [t.data()[0], t.data()[1], t.data()[2]],
        }
    }

    /// Same appearance with a constant replacement pose.
    pub fn with_pose(&self, pose: &Pose) -> Self {
        let tape = self.scale.tape();
        Self {
            scale: tape.constant(Tensor::from_vec(pose.scale.to_vec())),
            rotation: tape.constant(mat3_to_tensor(&pose.rotation)),
            translation: tape.constant(Tensor::from_vec(pose.translation.to_vec())),
            ..*self
        }
    }

    /// Rotates by `delta_rotation` about the primitive's own centre and
    /// shifts by `delta_translation`, keeping gradients to the original pose.
    pub fn perturbed(&self, delta_rotation: &[[Real; 3]; 3], delta_translation: &Vec3) -> Result<Self> {
        let tape = self.scale.tape();
        let dr = tape.constant(mat3_to_tensor(delta_rotation));
        let dt = tape.constant(Tensor::from_vec(delta_translation.to_vec()));
        Ok(Self {
            rotation: dr.matmul(self.rotation)?,
            translation: self.translation.try_add(dt)?,
            ..*self
        })
    }
}

fn check_finite(raw: &Tensor) -> Result<()> {
    match raw.data().iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            what: "raw primitive parameters".into(),
            index,
        }),
        None => Ok(()),
    }
}

/// Squashes a raw generator head into a valid primitive.
pub fn decode_primitive<'t>(raw: Var<'t>, kind: PrimitiveKind, config: &PrimitiveConfig) -> Result<PrimitiveAttr<'t>> {
    let budget = config.budget(kind);
    if raw.shape() != [budget] {
        return Err(Error::Shape(format!(
            "{:?} expects {} raw values, got shape {:?}",
            kind,
            budget,
            raw.shape()
        )));
    }
    check_finite(&raw.value())?;
    let tape = raw.tape();
    let appearance = match config.texture_layout(kind) {
        None => {
            let m = config.points;
            let loc = raw.slice_flat(POSE_SLOTS, &[m, 3])?.tanh();
            let feat = raw.slice_flat(POSE_SLOTS + 3 * m, &[m, config.features])?;
            Appearance::Points(PointSet {
                locations: loc,
                features: feat,
            })
        }
        Some(layout) => Appearance::Texture(raw.slice_flat(POSE_SLOTS, &layout.shape())?),
    };
    if kind == PrimitiveKind::Background {
        return Ok(PrimitiveAttr {
            kind,
            scale: tape.constant(Tensor::full(&[3], config.s_bg)),
            rotation: tape.constant(mat3_to_tensor(&mat3_identity())),
            translation: tape.constant(Tensor::zeros(&[3])),
            appearance,
        });
    }
    let scale = raw
        .slice_flat(0, &[3])?
        .sigmoid()
        .scale(config.s_max - config.s_min)
        .add_scalar(config.s_min);
    let rotation = rotation_var(raw.slice_flat(3, &[3])?)?;
    let translation = raw.slice_flat(6, &[3])?.tanh().scale(config.t_range);
    Ok(PrimitiveAttr {
        kind,
        scale,
        rotation,
        translation,
        appearance,
    })
}

/// `p_world = R (s ⊙ p) + t` for `[n, 3]` canonical points.
pub fn transform_to_world<'t>(attr: &PrimitiveAttr<'t>, points: Var<'t>) -> Result<Var<'t>> {
    points
        .try_mul(attr.scale)?
        .matmul(attr.rotation.transpose()?)?
        .try_add(attr.translation)
}

/// Triangulated canonical surface with texture coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    /// Per-vertex (u, v) in [0, 1]²; u selects the texture column, v the row.
    pub uv: Vec<[Real; 2]>,
    /// Texture face used by each triangle.
    pub face: Vec<usize>,
}

impl CanonicalMesh {
    pub fn vertex_tensor(&self) -> Tensor {
        let data = self.vertices.iter().flatten().copied().collect();
        Tensor::from_parts(vec![self.vertices.len(), 3], data)
    }

    pub fn triangle_area(&self, t: usize) -> Real {
        use crate::autodiff::linalg::{vec3_cross, vec3_norm, vec3_sub};
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
        0.5 * vec3_norm(&vec3_cross(&vec3_sub(&b, &a), &vec3_sub(&c, &a)))
    }
}

pub fn canonical_mesh(kind: PrimitiveKind, resolution: usize) -> Result<CanonicalMesh> {
    match kind {
        PrimitiveKind::Cuboid if resolution >= 1 => Ok(cuboid_mesh(resolution)),
        PrimitiveKind::Sphere | PrimitiveKind::Background if resolution >= 2 => {
            let mut mesh = sphere_mesh(resolution);
            if kind == PrimitiveKind::Background {
                for t in &mut mesh.triangles {
                    t.swap(1, 2);
                }
            }
            Ok(mesh)
        }
        PrimitiveKind::PointCloud => Err(Error::Invalid("point clouds have no mesh".into())),
        _ => Err(Error::Invalid(format!("mesh resolution {} too small for {:?}", resolution, kind))),
    }
}

fn cuboid_mesh(r: usize) -> CanonicalMesh {
    let mut mesh = CanonicalMesh {
        vertices: Vec::new(),
        triangles: Vec::new(),
        uv: Vec::new(),
        face: Vec::new(),
    };
    for axis in 0..3 {
        for (f, sign) in [1.0, -1.0].into_iter().enumerate() {
            let face = 2 * axis + f;
            // tangents chosen so that t1 × t2 points outwards
            let (a1, a2) = if sign > 0.0 {
                ((axis + 1) % 3, (axis + 2) % 3)
            } else {
                ((axis + 2) % 3, (axis + 1) % 3)
            };
            let base = mesh.vertices.len();
            for i in 0..=r {
                for j in 0..=r {
                    let u = j as Real / r as Real;
                    let v = i as Real / r as Real;
                    let mut p = [0.0; 3];
                    p[axis] = sign;
                    p[a1] = 2.0 * u - 1.0;
                    p[a2] = 2.0 * v - 1.0;
                    mesh.vertices.push(p);
                    mesh.uv.push([u, v]);
                }
            }
            let id = |i: usize, j: usize| base + i * (r + 1) + j;
            for i in 0..r {
                for j in 0..r {
                    // (j, i) -> u along t1, v along t2
                    mesh.triangles.push([id(i, j), id(i, j + 1), id(i + 1, j + 1)]);
                    mesh.triangles.push([id(i, j), id(i + 1, j + 1), id(i + 1, j)]);
                    mesh.face.extend([face, face]);
                }
            }
        }
    }
    mesh
}

fn sphere_mesh(r: usize) -> CanonicalMesh {
    let (rows, cols) = (r, 2 * r);
    let mut mesh = CanonicalMesh {
        vertices: Vec::new(),
        triangles: Vec::new(),
        uv: Vec::new(),
        face: Vec::new(),
    };
    for i in 0..=rows {
        let theta = PI as Real * i as Real / rows as Real;
        for j in 0..=cols {
            let phi = 2.0 * PI as Real * j as Real / cols as Real;
            let p = if i == 0 {
                [0.0, 0.0, 1.0]
            } else if i == rows {
                [0.0, 0.0, -1.0]
            } else {
                [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]
            };
            mesh.vertices.push(p);
            mesh.uv.push([j as Real / cols as Real, i as Real / rows as Real]);
        }
    }
    let id = |i: usize, j: usize| i * (cols + 1) + j;
    for i in 0..rows {
        for j in 0..cols {
            if i + 1 < rows {
                mesh.triangles.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                mesh.face.push(0);
            }
            if i > 0 {
                mesh.triangles.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
                mesh.face.push(0);
            }
        }
    }
    mesh
}
