//! Soft rasterization of triangle meshes.
//!
//! Every (triangle, pixel) pair gets an influence `sigmoid(±d²/σ)` from the
//! signed squared distance between the pixel centre and the projected
//! triangle. The silhouette is the probabilistic union of the influences;
//! features and depth are blended with a softmax over
//! `ln w_j - z_j/γ`, optionally against a background term.

use serde::{Deserialize, Serialize};

use super::texture::bilinear_taps;
use crate::autodiff::dual::{Dual, Scalar};
use crate::autodiff::{softplus, Tensor, Var};
use crate::geometry::{project_points, Camera};
use crate::primitives::{CanonicalMesh, TextureLayout};
use crate::{Error, Real, Result};

/// Triangles with a vertex closer than this to the camera plane are dropped.
pub const NEAR_CULL: Real = 0.05;
const MIN_AREA: Real = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftRasterSettings {
    /// Influence sharpness in squared pixels.
    pub sigma: Real,
    /// Depth temperature of the aggregation softmax.
    pub gamma: Real,
    /// Pairs with `±d²/σ` below `-cutoff` are ignored.
    pub cutoff: Real,
    /// Weight of the background term; `None` disables it.
    pub background_eps: Option<Real>,
    /// Depth reported where nothing is covered.
    pub d_far: Real,
}

impl Default for SoftRasterSettings {
    fn default() -> Self {
        Self {
            sigma: 3.0,
            gamma: 0.1,
            cutoff: 60.0,
            background_eps: Some(1e-3),
            d_far: 15.0,
        }
    }
}

pub struct SoftRaster<'t> {
    /// `[K, H, W]`, absent when no texture was given.
    pub features: Option<Var<'t>>,
    pub silhouette: Var<'t>,
    pub depth: Var<'t>,
}

pub(crate) struct PairGeom<S> {
    pub inside: bool,
    pub signed_d2: S,
    pub z: S,
    pub u: S,
    pub v: S,
}

/// Signed squared distance, perspective-correct depth and texture
/// coordinates of one pixel against one projected triangle. Exterior pixels
/// use the closest boundary point for interpolation.
pub(crate) fn pair_kernel<S: Scalar>(q: &[[S; 2]; 3], z: &[S; 3], uv: &[[Real; 2]; 3], p: [Real; 2]) -> PairGeom<S> {
    let (px, py) = (S::cst(p[0]), S::cst(p[1]));
    let cross = |a: [S; 2], b: [S; 2]| a[0] * b[1] - a[1] * b[0];
    let rel = |k: usize| [q[k][0] - px, q[k][1] - py];
    let area = cross(
        [q[1][0] - q[0][0], q[1][1] - q[0][1]],
        [q[2][0] - q[0][0], q[2][1] - q[0][1]],
    );
    let mut lam = [
        cross(rel(1), rel(2)) / area,
        cross(rel(2), rel(0)) / area,
        cross(rel(0), rel(1)) / area,
    ];
    let inside = lam.iter().all(|l| l.re() >= 0.0);

    let mut best: Option<(S, usize, S)> = None;
    for e in 0..3 {
        let (a, b) = (q[e], q[(e + 1) % 3]);
        let d = [b[0] - a[0], b[1] - a[1]];
        let pa = [px - a[0], py - a[1]];
        let mut t = (pa[0] * d[0] + pa[1] * d[1]) / (d[0] * d[0] + d[1] * d[1]);
        if t.re() < 0.0 {
            t = S::cst(0.0);
        } else if t.re() > 1.0 {
            t = S::cst(1.0);
        }
        let (cx, cy) = (pa[0] - t * d[0], pa[1] - t * d[1]);
        let d2 = cx * cx + cy * cy;
        if best.as_ref().map_or(true, |(b, _, _)| d2.re() < b.re()) {
            best = Some((d2, e, t));
        }
    }
    let (d2, edge, t) = best.expect("three edges");
    let signed_d2 = if inside {
        d2
    } else {
        lam = [S::cst(0.0); 3];
        lam[edge] = S::cst(1.0) - t;
        lam[(edge + 1) % 3] = t;
        -d2
    };
    let w = [lam[0] / z[0], lam[1] / z[1], lam[2] / z[2]];
    let depth = S::cst(1.0) / (w[0] + w[1] + w[2]);
    let mut u = S::cst(0.0);
    let mut v = S::cst(0.0);
    for k in 0..3 {
        u = u + w[k].scale(uv[k][0]);
        v = v + w[k].scale(uv[k][1]);
    }
    PairGeom {
        inside,
        signed_d2,
        z: depth,
        u: u * depth,
        v: v * depth,
    }
}

#[derive(Clone, Copy)]
struct Pair {
    pixel: u32,
    tri: u32,
    x: Real,
    z: Real,
    u: Real,
    v: Real,
}

/// Constant per-call data shared by the forward and backward passes.
struct Raster {
    width: usize,
    height: usize,
    triangles: Vec<[usize; 3]>,
    uv: Vec<[Real; 2]>,
    face: Vec<usize>,
    layout: Option<TextureLayout>,
    settings: SoftRasterSettings,
    pairs: Vec<Pair>,
    /// Start offset of each pixel's pairs; `pixel_start[H*W]` = total.
    pixel_start: Vec<usize>,
    /// Vertex supplying the background reference depth.
    z_ref: Option<(usize, Real)>,
}

fn corners(screen: &[Real], tri: &[usize; 3]) -> ([[Real; 2]; 3], [Real; 3]) {
    let q = tri.map(|i| [screen[3 * i], screen[3 * i + 1]]);
    let z = tri.map(|i| screen[3 * i + 2]);
    (q, z)
}

impl Raster {
    fn build(
        screen: &[Real],
        mesh: &CanonicalMesh,
        layout: Option<TextureLayout>,
        width: usize,
        height: usize,
        settings: SoftRasterSettings,
    ) -> Self {
        let margin = (settings.cutoff * settings.sigma).sqrt() + 1.0;
        let mut pairs = Vec::new();
        let mut z_ref: Option<(usize, Real)> = None;
        for (ti, tri) in mesh.triangles.iter().enumerate() {
            let (q, z) = corners(screen, tri);
            if z.iter().any(|&d| !(d >= NEAR_CULL)) {
                continue;
            }
            let area = (q[1][0] - q[0][0]) * (q[2][1] - q[0][1]) - (q[1][1] - q[0][1]) * (q[2][0] - q[0][0]);
            if !(area.abs() >= MIN_AREA) {
                continue;
            }
            for (k, &vi) in tri.iter().enumerate() {
                if z_ref.map_or(true, |(_, d)| z[k] > d) {
                    z_ref = Some((vi, z[k]));
                }
            }
            let lo_x = (q.iter().map(|c| c[0]).fold(Real::INFINITY, Real::min) - margin).ceil().max(0.0);
            let hi_x = (q.iter().map(|c| c[0]).fold(Real::NEG_INFINITY, Real::max) + margin)
                .floor()
                .min(width as Real - 1.0);
            let lo_y = (q.iter().map(|c| c[1]).fold(Real::INFINITY, Real::min) - margin).ceil().max(0.0);
            let hi_y = (q.iter().map(|c| c[1]).fold(Real::NEG_INFINITY, Real::max) + margin)
                .floor()
                .min(height as Real - 1.0);
            if lo_x > hi_x || lo_y > hi_y {
                continue;
            }
            let uv = tri.map(|i| mesh.uv[i]);
            for i in lo_y as usize..=hi_y as usize {
                for j in lo_x as usize..=hi_x as usize {
                    let g = pair_kernel::<Real>(&q, &z, &uv, [j as Real, i as Real]);
                    let x = g.signed_d2 / settings.sigma;
                    if x >= -settings.cutoff {
                        pairs.push(Pair {
                            pixel: (i * width + j) as u32,
                            tri: ti as u32,
                            x,
                            z: g.z,
                            u: g.u,
                            v: g.v,
                        });
                    }
                }
            }
        }
        // counting sort by pixel; pairs were generated in triangle order,
        // so each bucket stays sorted by triangle
        let n = width * height;
        let mut pixel_start = vec![0usize; n + 1];
        for p in &pairs {
            pixel_start[p.pixel as usize + 1] += 1;
        }
        for i in 0..n {
            pixel_start[i + 1] += pixel_start[i];
        }
        let mut next = pixel_start.clone();
        let mut sorted = pairs.clone();
        for p in &pairs {
            let slot = &mut next[p.pixel as usize];
            sorted[*slot] = *p;
            *slot += 1;
        }
        let pairs = sorted;
        Self {
            width,
            height,
            triangles: mesh.triangles.clone(),
            uv: mesh.uv.clone(),
            face: mesh.face.clone(),
            layout,
            settings,
            pairs,
            pixel_start,
            z_ref: if settings.background_eps.is_some() { z_ref } else { None },
        }
    }

    fn background_logit(&self) -> Option<Real> {
        let eps = self.settings.background_eps?;
        let (_, z) = self.z_ref?;
        Some(eps.ln() - z / self.settings.gamma)
    }
}

/// Per-pixel aggregation shared by forward and backward.
struct PixelState {
    /// Softmax weight of each pair, then of the background.
    omega: Vec<Real>,
    omega_bg: Real,
    /// Product of the non-zero `1 - w_j` factors and the count of zero ones.
    transmit: Real,
    zeros: usize,
}

fn aggregate(pairs: &[Pair], gamma: Real, bg_logit: Option<Real>, omega: &mut Vec<Real>) -> PixelState {
    omega.clear();
    let mut m = bg_logit.unwrap_or(Real::NEG_INFINITY);
    for p in pairs {
        let l = -softplus(-p.x) - p.z / gamma;
        omega.push(l);
        m = m.max(l);
    }
    let mut total = 0.0;
    for l in omega.iter_mut() {
        *l = (*l - m).exp();
        total += *l;
    }
    let e_bg = bg_logit.map_or(0.0, |l| (l - m).exp());
    total += e_bg;
    let (mut transmit, mut zeros) = (1.0, 0);
    for p in pairs {
        let f = crate::autodiff::sigmoid(-p.x);
        if f == 0.0 {
            zeros += 1;
        } else {
            transmit *= f;
        }
    }
    if total > 0.0 {
        omega.iter_mut().for_each(|o| *o /= total);
    }
    PixelState {
        omega: std::mem::take(omega),
        omega_bg: if total > 0.0 { e_bg / total } else { 0.0 },
        transmit,
        zeros,
    }
}

/// Soft-rasterizes a mesh whose vertices are given in world space.
pub fn rasterize_mesh_soft<'t>(
    world_vertices: Var<'t>,
    mesh: &CanonicalMesh,
    texture: Option<(Var<'t>, TextureLayout)>,
    camera: &Camera,
    settings: &SoftRasterSettings,
) -> Result<SoftRaster<'t>> {
    let (screen, _) = project_points(camera, world_vertices)?;
    rasterize_screen(screen, mesh, texture, camera.width, camera.height, settings)
}

/// Soft-rasterizes a mesh given as `[V, 3]` screen-space `(u, v, depth)` rows.
pub fn rasterize_screen<'t>(
    screen: Var<'t>,
    mesh: &CanonicalMesh,
    texture: Option<(Var<'t>, TextureLayout)>,
    width: usize,
    height: usize,
    settings: &SoftRasterSettings,
) -> Result<SoftRaster<'t>> {
    if !(settings.sigma > 0.0 && settings.gamma > 0.0) {
        return Err(Error::Invalid("soft rasterizer needs sigma > 0 and gamma > 0".into()));
    }
    if screen.shape() != [mesh.vertices.len(), 3] {
        return Err(Error::Shape(format!(
            "screen vertices {:?} do not match a mesh with {} vertices",
            screen.shape(),
            mesh.vertices.len()
        )));
    }
    let layout = texture.map(|(_, l)| l);
    if let Some((tex, l)) = texture {
        if tex.numel() != l.numel() {
            return Err(Error::Shape(format!("texture {:?} does not match layout {:?}", tex.shape(), l)));
        }
        if mesh.face.iter().any(|&f| f >= l.faces) {
            return Err(Error::Shape("mesh references a missing texture face".into()));
        }
    }
    let sv = screen.value();
    let raster = Raster::build(sv.data(), mesh, layout, width, height, *settings);
    let k = layout.map_or(0, |l| l.channels);
    let tex_val = texture.map(|(t, _)| t.value());
    let n = width * height;
    let mut out = vec![0.0; (k + 2) * n];
    let bg_logit = raster.background_logit();
    let mut scratch = Vec::new();
    let mut feat = vec![0.0; k];
    for pix in 0..n {
        let pairs = &raster.pairs[raster.pixel_start[pix]..raster.pixel_start[pix + 1]];
        let st = aggregate(pairs, settings.gamma, bg_logit, &mut scratch);
        let mut depth = st.omega_bg * settings.d_far;
        for (p, &w) in pairs.iter().zip(&st.omega) {
            depth += w * p.z;
            if let (Some(l), Some(tex)) = (&layout, &tex_val) {
                let taps = bilinear_taps(l, raster.face[p.tri as usize], p.u, p.v);
                taps.sample(tex.data(), k, &mut feat);
                for c in 0..k {
                    out[c * n + pix] += w * feat[c];
                }
            }
        }
        if pairs.is_empty() && bg_logit.is_none() {
            depth = settings.d_far;
        }
        out[k * n + pix] = if st.zeros > 0 { 1.0 } else { 1.0 - st.transmit };
        out[(k + 1) * n + pix] = depth;
        scratch = st.omega;
    }

    let mut parents = vec![screen];
    if let Some((t, _)) = texture {
        parents.push(t);
    }
    let tex_req = texture.map_or(false, |(t, _)| t.requires_grad());
    let screen_req = screen.requires_grad();
    let tex_shape = texture.map(|(t, _)| t.shape());
    let packed = screen.tape().record(
        Tensor::from_parts(vec![k + 2, height, width], out),
        &parents,
        move |g| {
            let (gs, gt) = backward(&raster, &sv, tex_val.as_deref(), g, screen_req, tex_req);
            let mut grads = vec![gs];
            if let Some(shape) = &tex_shape {
                grads.push(gt.map(|v| Tensor::from_parts(shape.clone(), v)));
            }
            grads
        },
    );
    let features = if k > 0 {
        Some(packed.slice_flat(0, &[k, height, width])?)
    } else {
        None
    };
    Ok(SoftRaster {
        features,
        silhouette: packed.slice_flat(k * n, &[height, width])?,
        depth: packed.slice_flat((k + 1) * n, &[height, width])?,
    })
}

fn backward(
    raster: &Raster,
    screen: &Tensor,
    texture: Option<&Tensor>,
    g: &Tensor,
    screen_req: bool,
    tex_req: bool,
) -> (Option<Tensor>, Option<Vec<Real>>) {
    let s = &raster.settings;
    let n = raster.width * raster.height;
    let k = raster.layout.map_or(0, |l| l.channels);
    let gd = g.data();
    let sd = screen.data();
    let mut gscreen = vec![0.0; sd.len()];
    let mut gtex = texture.map(|t| vec![0.0; t.numel()]);
    let bg_logit = raster.background_logit();
    let mut scratch = Vec::new();
    let mut feats: Vec<Real> = Vec::new();
    let mut gz_ref = 0.0;
    for pix in 0..n {
        let pairs = &raster.pairs[raster.pixel_start[pix]..raster.pixel_start[pix + 1]];
        if pairs.is_empty() {
            continue;
        }
        let g_sil = gd[k * n + pix];
        let g_depth = gd[(k + 1) * n + pix];
        let st = aggregate(pairs, s.gamma, bg_logit, &mut scratch);
        feats.clear();
        feats.resize(pairs.len() * k, 0.0);
        let mut taps = Vec::with_capacity(pairs.len());
        // a_j = <g_X, f_j> + g_D z_j; the softmax adjoint is ω_j (a_j - ā)
        let mut a = Vec::with_capacity(pairs.len());
        let mut a_bar = st.omega_bg * g_depth * s.d_far;
        for (j, p) in pairs.iter().enumerate() {
            let mut aj = g_depth * p.z;
            if let (Some(l), Some(tex)) = (&raster.layout, texture) {
                let t = bilinear_taps(l, raster.face[p.tri as usize], p.u, p.v);
                let f = &mut feats[j * k..(j + 1) * k];
                t.sample(tex.data(), k, f);
                for c in 0..k {
                    aj += gd[c * n + pix] * f[c];
                }
                taps.push(Some(t));
            } else {
                taps.push(None);
            }
            a_bar += st.omega[j] * aj;
            a.push(aj);
        }
        if bg_logit.is_some() {
            gz_ref += st.omega_bg * (g_depth * s.d_far - a_bar) * (-1.0 / s.gamma);
        }
        for (j, p) in pairs.iter().enumerate() {
            let om = st.omega[j];
            let gl = om * (a[j] - a_bar);
            let w = crate::autodiff::sigmoid(p.x);
            let one_minus = crate::autodiff::sigmoid(-p.x);
            // ∂S/∂w_j = Π_{i≠j} (1 - w_i)
            let others = match (st.zeros, one_minus == 0.0) {
                (0, _) => st.transmit / one_minus,
                (1, true) => st.transmit,
                _ => 0.0,
            };
            let gx = gl * one_minus + g_sil * others * w * one_minus;
            let gz = om * g_depth - gl / s.gamma;
            let (mut gu, mut gv) = (0.0, 0.0);
            if let Some(t) = &taps[j] {
                for tap in 0..4 {
                    let base = t.base[tap];
                    let mut dot = 0.0;
                    for c in 0..k {
                        let gf = om * gd[c * n + pix];
                        dot += gf * texture.unwrap().data()[base + c];
                        if let Some(gt) = gtex.as_mut() {
                            gt[base + c] += gf * t.weight[tap];
                        }
                    }
                    gu += dot * t.d_du[tap];
                    gv += dot * t.d_dv[tap];
                }
            }
            if !screen_req {
                continue;
            }
            let tri = raster.triangles[p.tri as usize];
            let (q, z) = corners(sd, &tri);
            let qd = [0, 1, 2].map(|c| [Dual::<9>::var(q[c][0], 2 * c), Dual::var(q[c][1], 2 * c + 1)]);
            let zd = [0, 1, 2].map(|c| Dual::<9>::var(z[c], 6 + c));
            let uv = tri.map(|i| raster.uv[i]);
            let px = [(pix % raster.width) as Real, (pix / raster.width) as Real];
            let jet = pair_kernel(&qd, &zd, &uv, px);
            for slot in 0..9 {
                let d = gx * jet.signed_d2.d[slot] / s.sigma
                    + gz * jet.z.d[slot]
                    + gu * jet.u.d[slot]
                    + gv * jet.v.d[slot];
                let (vi, comp) = if slot < 6 { (tri[slot / 2], slot % 2) } else { (tri[slot - 6], 2) };
                gscreen[3 * vi + comp] += d;
            }
        }
        scratch = st.omega;
    }
    if let Some((vi, _)) = raster.z_ref {
        gscreen[3 * vi + 2] += gz_ref;
    }
    let gs = screen_req.then(|| Tensor::from_parts(screen.shape().to_vec(), gscreen));
    (gs, if tex_req { gtex } else { None })
}
