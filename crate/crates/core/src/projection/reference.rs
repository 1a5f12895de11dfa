//! Hard z-buffer rasterizer used to render datasets and as a test oracle.

use super::soft::{pair_kernel, NEAR_CULL};
use super::texture::{bilinear_taps, nearest_texel};
use crate::autodiff::linalg::Vec3;
use crate::autodiff::Tensor;
use crate::geometry::{project, Camera};
use crate::primitives::{CanonicalMesh, TextureLayout};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureFilter {
    Nearest,
    Bilinear,
}

pub enum RefObject<'a> {
    Mesh {
        /// World-space positions of `mesh.vertices`.
        vertices: Vec<Vec3>,
        mesh: &'a CanonicalMesh,
        texels: &'a [Real],
        layout: TextureLayout,
    },
    /// Points drawn into the single nearest pixel.
    Points { positions: Vec<Vec3>, features: Vec<Vec<Real>> },
}

pub struct ReferenceImage {
    /// `[C, H, W]`, zero where nothing was drawn.
    pub features: Tensor,
    /// `[H, W]`, `empty_depth` where nothing was drawn.
    pub depth: Tensor,
    /// Index into the object list per pixel, -1 where empty.
    pub instance: Vec<i32>,
}

/// Rasterizes `objects` at pixel centres with a z-buffer; on equal depth the
/// object listed first wins.
pub fn rasterize_reference(
    objects: &[RefObject<'_>],
    camera: &Camera,
    channels: usize,
    filter: TextureFilter,
    empty_depth: Real,
) -> ReferenceImage {
    let (w, h) = (camera.width, camera.height);
    let n = w * h;
    let mut feat = vec![0.0; channels * n];
    let mut zbuf = vec![Real::INFINITY; n];
    let mut inst = vec![-1i32; n];
    let mut sample = vec![0.0; channels];
    for (id, obj) in objects.iter().enumerate() {
        match obj {
            RefObject::Mesh {
                vertices,
                mesh,
                texels,
                layout,
            } => {
                let (px, z, _) = project(camera, vertices);
                for (ti, tri) in mesh.triangles.iter().enumerate() {
                    let zt = tri.map(|i| z[i]);
                    if zt.iter().any(|&d| !(d >= NEAR_CULL)) {
                        continue;
                    }
                    let q = tri.map(|i| px[i]);
                    let area = (q[1][0] - q[0][0]) * (q[2][1] - q[0][1]) - (q[1][1] - q[0][1]) * (q[2][0] - q[0][0]);
                    if !(area.abs() >= 1e-12) {
                        continue;
                    }
                    let uv = tri.map(|i| mesh.uv[i]);
                    let x0 = q.iter().map(|c| c[0]).fold(Real::INFINITY, Real::min).ceil().max(0.0) as usize;
                    let x1 = q.iter().map(|c| c[0]).fold(Real::NEG_INFINITY, Real::max).floor().min(w as Real - 1.0);
                    let y0 = q.iter().map(|c| c[1]).fold(Real::INFINITY, Real::min).ceil().max(0.0) as usize;
                    let y1 = q.iter().map(|c| c[1]).fold(Real::NEG_INFINITY, Real::max).floor().min(h as Real - 1.0);
                    if x1 < 0.0 || y1 < 0.0 {
                        continue;
                    }
                    for i in y0..=y1 as usize {
                        for j in x0..=x1 as usize {
                            let g = pair_kernel::<Real>(&q, &zt, &uv, [j as Real, i as Real]);
                            let p = i * w + j;
                            if !g.inside || !(g.z < zbuf[p]) {
                                continue;
                            }
                            zbuf[p] = g.z;
                            inst[p] = id as i32;
                            let face = mesh.face[ti];
                            match filter {
                                TextureFilter::Nearest => {
                                    let base = nearest_texel(layout, face, g.u, g.v);
                                    sample.copy_from_slice(&texels[base..base + channels]);
                                }
                                TextureFilter::Bilinear => {
                                    bilinear_taps(layout, face, g.u, g.v).sample(texels, channels, &mut sample)
                                }
                            }
                            for c in 0..channels {
                                feat[c * n + p] = sample[c];
                            }
                        }
                    }
                }
            }
            RefObject::Points { positions, features } => {
                let (px, z, ok) = project(camera, positions);
                for k in 0..positions.len() {
                    let (j, i) = (px[k][0].round(), px[k][1].round());
                    if !ok[k] || j < 0.0 || i < 0.0 || j >= w as Real || i >= h as Real {
                        continue;
                    }
                    let p = i as usize * w + j as usize;
                    if z[k] < zbuf[p] {
                        zbuf[p] = z[k];
                        inst[p] = id as i32;
                        for c in 0..channels {
                            feat[c * n + p] = features[k][c];
                        }
                    }
                }
            }
        }
    }
    for z in &mut zbuf {
        if z.is_infinite() {
            *z = empty_depth;
        }
    }
    ReferenceImage {
        features: Tensor::from_parts(vec![channels, h, w], feat),
        depth: Tensor::from_parts(vec![h, w], zbuf),
        instance: inst,
    }
}
