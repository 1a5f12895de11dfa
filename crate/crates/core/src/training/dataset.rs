//! Procedural two-set dataset: scenes with a few shaded primitives (c = 1)
//! and empty backgrounds (c = 0), rendered with the reference rasterizer.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, ImageRecord, TrainConfig};
use crate::autodiff::linalg::{mat3_vec, vec3_dot, vec3_norm, vec3_sub, Vec3};
use crate::autodiff::Tensor;
use crate::geometry::{rotation_from_axis_angle, sample_camera, Camera, CameraSampling, Pose, SCENE_RADIUS};
use crate::primitives::{canonical_mesh, CanonicalMesh, PrimitiveKind, TextureLayout};
use crate::projection::{rasterize_reference, RefObject, TextureFilter};
use crate::{Error, Real, Result};

const DATA_STREAM: u64 = 3;
const BATCH_STREAM: u64 = 4;
/// Placement attempts per object before the whole scene is redrawn.
const PLACEMENT_TRIES: usize = 100;
/// Smallest allowed distance between an object colour and a background colour.
const MIN_PALETTE_DISTANCE: Real = 0.3;
const SPHERE_MESH_RESOLUTION: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundStyle {
    Flat,
    /// Linear blend between two palette colours from the top row to the bottom row.
    VerticalGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub composite_count: usize,
    pub background_count: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object kinds drawn uniformly; cuboids and spheres are supported.
    pub shapes: Vec<PrimitiveKind>,
    /// Range of the per-axis half extents.
    pub scale_range: [Real; 2],
    /// Centres are at least this fraction of the summed bounding radii apart.
    pub min_separation: Real,
    pub object_palette: Vec<[Real; 3]>,
    pub background_palette: Vec<[Real; 3]>,
    pub background_style: BackgroundStyle,
    pub camera: CameraSampling,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            composite_count: 4096,
            background_count: 2048,
            min_objects: 1,
            max_objects: 2,
            shapes: vec![PrimitiveKind::Cuboid, PrimitiveKind::Sphere],
            scale_range: [0.15, 0.35],
            min_separation: 0.7,
            object_palette: vec![
                [0.9, 0.15, 0.1],
                [0.1, 0.75, 0.2],
                [0.15, 0.3, 0.95],
                [0.95, 0.85, 0.1],
                [0.85, 0.2, 0.8],
                [0.1, 0.85, 0.85],
            ],
            background_palette: vec![[0.55, 0.55, 0.6], [0.7, 0.68, 0.62], [0.4, 0.42, 0.45], [0.8, 0.8, 0.8]],
            background_style: BackgroundStyle::VerticalGradient,
            camera: CameraSampling::default(),
        }
    }
}

fn colour_distance(a: &[Real; 3], b: &[Real; 3]) -> Real {
    vec3_norm(&vec3_sub(a, b))
}

impl DatasetSpec {
    pub fn image_size(&self) -> usize {
        self.camera.width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(m));
        if self.composite_count == 0 || self.background_count == 0 {
            return bad("both image counts must be positive".into());
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad(format!(
                "object count range {}..={} must be non-empty and start at 1 or more",
                self.min_objects, self.max_objects
            ));
        }
        if self.shapes.is_empty() || self.shapes.iter().any(|k| !matches!(k, PrimitiveKind::Cuboid | PrimitiveKind::Sphere)) {
            return bad("shapes must be a non-empty list of cuboid/sphere".into());
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi < 0.5 * SCENE_RADIUS) {
            return bad(format!("scale range [{lo}, {hi}] must be positive, ordered and below half the scene radius"));
        }
        if !(0.0..=2.0).contains(&self.min_separation) {
            return bad("min_separation must lie in [0, 2]".into());
        }
        if self.object_palette.is_empty() || self.background_palette.is_empty() {
            return bad("palettes must not be empty".into());
        }
        let in_unit = |c: &[Real; 3]| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !self.object_palette.iter().chain(&self.background_palette).all(in_unit) {
            return bad("palette colours must lie in [0, 1]".into());
        }
        for o in &self.object_palette {
            for b in &self.background_palette {
                if colour_distance(o, b) < MIN_PALETTE_DISTANCE {
                    return bad(format!("object colour {o:?} is too close to background colour {b:?}"));
                }
            }
        }
        if self.camera.width != self.camera.height || self.camera.width == 0 {
            return bad("camera must produce square images".into());
        }
        self.camera.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("dataset spec serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Dataset(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// A placed, coloured object of a generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub kind: PrimitiveKind,
    pub pose: Pose,
    pub colour: [Real; 3],
}

impl SceneObject {
    fn bounding_radius(&self) -> Real {
        vec3_norm(&self.pose.scale)
    }
}

/// Background colours of one image: top and bottom row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backdrop {
    pub top: [Real; 3],
    pub bottom: [Real; 3],
}

fn light() -> Vec3 {
    let l = [0.3, 0.5, 0.8];
    let n = vec3_norm(&l);
    [l[0] / n, l[1] / n, l[2] / n]
}

/// Lambert shading with an ambient floor, applied per face.
fn shade(colour: &[Real; 3], normal: &Vec3) -> [Real; 3] {
    let k = 0.4 + 0.6 * vec3_dot(normal, &light()).max(0.0);
    colour.map(|c| c * k)
}

struct Meshes {
    cuboid: CanonicalMesh,
    sphere: CanonicalMesh,
}

impl Meshes {
    fn new() -> Self {
        Self {
            cuboid: canonical_mesh(PrimitiveKind::Cuboid, 1).expect("cuboid mesh"),
            sphere: canonical_mesh(PrimitiveKind::Sphere, SPHERE_MESH_RESOLUTION).expect("sphere mesh"),
        }
    }
}

/// Flat-shaded texels: one per cuboid face, one per sphere facet.
fn texels(obj: &SceneObject) -> (TextureLayout, Vec<Real>) {
    let r = &obj.pose.rotation;
    match obj.kind {
        PrimitiveKind::Sphere => {
            let (rows, cols) = (SPHERE_MESH_RESOLUTION, 2 * SPHERE_MESH_RESOLUTION);
            let mut data = Vec::with_capacity(rows * cols * 3);
            for i in 0..rows {
                let theta = std::f64::consts::PI as Real * (i as Real + 0.5) / rows as Real;
                for j in 0..cols {
                    let phi = 2.0 * std::f64::consts::PI as Real * (j as Real + 0.5) / cols as Real;
                    let n = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
                    data.extend(shade(&obj.colour, &mat3_vec(r, &n)));
                }
            }
            let layout = TextureLayout {
                faces: 1,
                rows,
                cols,
                channels: 3,
                wrap_u: true,
            };
            (layout, data)
        }
        _ => {
            let mut data = Vec::with_capacity(18);
            for face in 0..6 {
                let mut n = [0.0; 3];
                n[face / 2] = if face % 2 == 0 { 1.0 } else { -1.0 };
                data.extend(shade(&obj.colour, &mat3_vec(r, &n)));
            }
            let layout = TextureLayout {
                faces: 6,
                rows: 1,
                cols: 1,
                channels: 3,
                wrap_u: false,
            };
            (layout, data)
        }
    }
}

/// The backdrop alone, `[3, H, W]`.
pub fn render_background(backdrop: &Backdrop, size: usize) -> Tensor {
    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        let t = if size > 1 { y as Real / (size - 1) as Real } else { 0.0 };
        for ch in 0..3 {
            let v = backdrop.top[ch] * (1.0 - t) + backdrop.bottom[ch] * t;
            data[(ch * size + y) * size..(ch * size + y + 1) * size].fill(v);
        }
    }
    Tensor::from_parts(vec![3, size, size], data)
}

/// Renders objects over the backdrop; also returns the per-pixel object
/// index (-1 for background).
pub fn render_scene_objects(objects: &[SceneObject], backdrop: &Backdrop, camera: &Camera) -> (Tensor, Vec<i32>) {
    let meshes = Meshes::new();
    let textured: Vec<_> = objects.iter().map(texels).collect();
    let refs: Vec<RefObject> = objects
        .iter()
        .zip(&textured)
        .map(|(o, (layout, data))| {
            let mesh = if o.kind == PrimitiveKind::Sphere { &meshes.sphere } else { &meshes.cuboid };
            RefObject::Mesh {
                vertices: mesh.vertices.iter().map(|v| o.pose.apply(v)).collect(),
                mesh,
                texels: data,
                layout: *layout,
            }
        })
        .collect();
    let size = camera.width;
    let mut image = render_background(backdrop, size);
    let drawn = rasterize_reference(&refs, camera, 3, TextureFilter::Nearest, 0.0);
    let n = size * camera.height;
    for (p, &id) in drawn.instance.iter().enumerate() {
        if id >= 0 {
            for ch in 0..3 {
                image.data_mut()[ch * n + p] = drawn.features.data()[ch * n + p];
            }
        }
    }
    (image, drawn.instance)
}

fn draw_backdrop(spec: &DatasetSpec, rng: &mut impl Rng) -> Backdrop {
    let top = *spec.background_palette.choose(rng).expect("palette");
    let bottom = match spec.background_style {
        BackgroundStyle::Flat => top,
        BackgroundStyle::VerticalGradient => *spec.background_palette.choose(rng).expect("palette"),
    };
    Backdrop { top, bottom }
}

/// Rejection-samples one object that fits inside the scene ball and keeps
/// its distance from the already placed ones.
fn place(spec: &DatasetSpec, placed: &[SceneObject], rng: &mut impl Rng) -> Option<SceneObject> {
    let [lo, hi] = spec.scale_range;
    for _ in 0..PLACEMENT_TRIES {
        let kind = *spec.shapes.choose(rng).expect("shapes");
        let scale = match kind {
            PrimitiveKind::Sphere => [rng.gen_range(lo..=hi); 3],
            _ => [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)],
        };
        let yaw: Real = rng.gen_range(0.0..(2.0 * std::f64::consts::PI) as Real);
        let t: Vec3 = [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
        let obj = SceneObject {
            kind,
            pose: Pose {
                scale,
                rotation: rotation_from_axis_angle([0.0, 0.0, yaw]),
                translation: t,
            },
            colour: *spec.object_palette.choose(rng).expect("palette"),
        };
        let r = obj.bounding_radius();
        if vec3_norm(&t) + r > SCENE_RADIUS {
            continue;
        }
        let apart = placed.iter().all(|o| {
            vec3_norm(&vec3_sub(&o.pose.translation, &t)) >= spec.min_separation * (o.bounding_radius() + r)
        });
        if apart {
            return Some(obj);
        }
    }
    None
}

/// One dataset image with everything needed to re-render it.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedImage {
    pub c: u8,
    pub index: usize,
    pub camera: Camera,
    pub backdrop: Backdrop,
    pub objects: Vec<SceneObject>,
    pub image: Tensor,
    pub instance: Vec<i32>,
}

/// Draws and renders image `index` of set `c` from its own derived seed.
pub fn generate_image(spec: &DatasetSpec, c: u8, index: usize) -> GeneratedImage {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[DATA_STREAM, c as u64, index as u64]));
    loop {
        let camera = sample_camera(&mut rng, &spec.camera);
        let backdrop = draw_backdrop(spec, &mut rng);
        let mut objects = Vec::new();
        if c == 1 {
            let count = rng.gen_range(spec.min_objects..=spec.max_objects);
            while objects.len() < count {
                match place(spec, &objects, &mut rng) {
                    Some(o) => objects.push(o),
                    None => break,
                }
            }
            if objects.len() < count {
                continue;
            }
        }
        let (image, instance) = render_scene_objects(&objects, &backdrop, &camera);
        if c == 1 && instance.iter().all(|&i| i < 0) {
            continue;
        }
        return GeneratedImage {
            c,
            index,
            camera,
            backdrop,
            objects,
            image,
            instance,
        };
    }
}

pub fn image_file_name(c: u8, index: usize) -> String {
    format!("img_{c}_{index:05}.png")
}

/// Writes a `[3, H, W]` tensor in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_rgb(image: &Tensor, path: &Path) -> Result<()> {
    let [_, h, w] = <[usize; 3]>::try_from(image.shape()).map_err(|_| Error::Shape("expected [3, H, W]".into()))?;
    let n = h * w;
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (p, px) in buf.pixels_mut().enumerate() {
        *px = image::Rgb([0, 1, 2].map(|ch| to_u8(image.data()[ch * n + p])));
    }
    buf.save(path)?;
    Ok(())
}

/// Writes an `[H, W]` tensor in `[0, 1]` as an 8-bit greyscale PNG.
pub fn save_gray(map: &Tensor, path: &Path) -> Result<()> {
    let [h, w] = <[usize; 2]>::try_from(map.shape()).map_err(|_| Error::Shape("expected [H, W]".into()))?;
    let buf = image::GrayImage::from_raw(w as u32, h as u32, map.data().iter().map(|&v| to_u8(v)).collect()).expect("buffer size");
    buf.save(path)?;
    Ok(())
}

/// Smallest and largest value of a map.
pub fn value_range(map: &Tensor) -> (Real, Real) {
    map.data().iter().fold((Real::INFINITY, Real::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Writes an `[H, W]` map as a 16-bit greyscale PNG, mapping `[lo, hi]`
/// linearly onto `[0, 65535]`. A flat map is written as zeros.
pub fn save_gray16(map: &Tensor, lo: Real, hi: Real, path: &Path) -> Result<()> {
    let [h, w] = <[usize; 2]>::try_from(map.shape()).map_err(|_| Error::Shape("expected [H, W]".into()))?;
    let span = hi - lo;
    let px: Vec<u16> = map
        .data()
        .iter()
        .map(|&v| if span > 0.0 { (((v - lo) / span).clamp(0.0, 1.0) * 65535.0).round() as u16 } else { 0 })
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, px).expect("buffer size");
    buf.save(path)?;
    Ok(())
}

pub fn to_u8(v: Real) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads an RGB PNG as `[3, H, W]` bytes, channel-major.
pub fn load_rgb8(path: &Path) -> Result<(usize, Vec<u8>)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w != h {
        return Err(Error::Dataset(format!("{} is {}x{}, expected a square image", path.display(), w, h)));
    }
    let n = w * h;
    let mut out = vec![0u8; 3 * n];
    for (p, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            out[ch * n + p] = px.0[ch];
        }
    }
    Ok((w, out))
}

/// Renders the whole dataset into `dir`: `meta`, `manifest.csv` and one PNG
/// per image. Output depends only on `spec`.
pub fn generate_dataset(spec: &DatasetSpec, dir: &Path) -> Result<()> {
    spec.validate()?;
    std::fs::create_dir_all(dir)?;
    let jobs: Vec<(u8, usize)> = (0..spec.composite_count)
        .map(|i| (1, i))
        .chain((0..spec.background_count).map(|i| (0, i)))
        .collect();
    jobs.par_iter()
        .map(|&(c, i)| save_rgb(&generate_image(spec, c, i).image, &dir.join(image_file_name(c, i))))
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = String::from("filename,c\n");
    for (c, i) in &jobs {
        manifest.push_str(&format!("{},{}\n", image_file_name(*c, *i), c));
    }
    std::fs::write(dir.join("manifest.csv"), manifest)?;
    std::fs::write(dir.join("meta"), spec.to_toml())?;
    Ok(())
}

/// Images kept as bytes; converted to tensors per batch.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub size: usize,
    pub composites: Vec<Vec<u8>>,
    pub backgrounds: Vec<Vec<u8>>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let meta = dir.join("meta");
        if !meta.exists() {
            return Err(Error::Dataset(format!("{} is not a dataset directory (no meta file)", dir.display())));
        }
        let spec = DatasetSpec::from_toml(&std::fs::read_to_string(meta)?)?;
        let manifest = std::fs::read_to_string(dir.join("manifest.csv"))?;
        let mut rows = Vec::new();
        for (n, line) in manifest.lines().enumerate().skip(1) {
            let (file, c) = line
                .split_once(',')
                .ok_or_else(|| Error::Dataset(format!("manifest line {} is malformed", n + 1)))?;
            let c: u8 = match c.trim() {
                "0" => 0,
                "1" => 1,
                other => return Err(Error::Dataset(format!("manifest line {} has c = {other}", n + 1))),
            };
            rows.push((file.to_string(), c));
        }
        let loaded = rows
            .par_iter()
            .map(|(file, c)| load_rgb8(&dir.join(file)).map(|img| (*c, img)))
            .collect::<Result<Vec<_>>>()?;
        let mut data = Self {
            size: spec.image_size(),
            composites: Vec::new(),
            backgrounds: Vec::new(),
        };
        for (c, (size, bytes)) in loaded {
            if size != data.size {
                return Err(Error::Dataset(format!("image of size {size} in a dataset of size {}", data.size)));
            }
            if c == 1 {
                data.composites.push(bytes);
            } else {
                data.backgrounds.push(bytes);
            }
        }
        Ok(data)
    }

    /// Builds an in-memory dataset from rendered tensors.
    pub fn from_images(size: usize, composites: &[Tensor], backgrounds: &[Tensor]) -> Self {
        let bytes = |t: &Tensor| t.data().iter().map(|&v| to_u8(v)).collect();
        Self {
            size,
            composites: composites.iter().map(bytes).collect(),
            backgrounds: backgrounds.iter().map(bytes).collect(),
        }
    }

    pub fn check_compatible(&self, config: &TrainConfig) -> Result<()> {
        if self.size != config.image_size {
            return Err(Error::Dataset(format!(
                "dataset images are {0}x{0} but the config expects {1}x{1}",
                self.size, config.image_size
            )));
        }
        let composites = config.composites_per_batch();
        if composites > 0 && self.composites.is_empty() {
            return Err(Error::Dataset("no c = 1 images in the dataset".into()));
        }
        if composites < config.batch_size && self.backgrounds.is_empty() {
            return Err(Error::Dataset("no c = 0 images in the dataset".into()));
        }
        Ok(())
    }

    fn tensor(&self, bytes: &[u8]) -> Tensor {
        Tensor::from_parts(vec![3, self.size, self.size], bytes.iter().map(|&b| b as Real / 255.0).collect())
    }

    /// The real batch of training step `step`: full scenes first, then
    /// backgrounds, drawn with replacement.
    pub fn sample_batch(&self, config: &TrainConfig, step: u64) -> Result<Vec<ImageRecord>> {
        self.check_compatible(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[BATCH_STREAM, step]));
        let composites = config.composites_per_batch();
        Ok((0..config.batch_size)
            .map(|i| {
                let (set, c) = if i < composites { (&self.composites, 1.0) } else { (&self.backgrounds, 0.0) };
                ImageRecord {
                    image: self.tensor(&set[rng.gen_range(0..set.len())]),
                    c,
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        let mut spec = DatasetSpec {
            composite_count: 6,
            background_count: 3,
            ..Default::default()
        };
        spec.camera.width = 32;
        spec.camera.height = 32;
        spec.camera.focal = 32.0;
        spec
    }

    #[test]
    fn default_spec_is_valid_and_round_trips() {
        let spec = DatasetSpec::default();
        spec.validate().unwrap();
        assert_eq!(DatasetSpec::from_toml(&spec.to_toml()).unwrap(), spec);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let base = DatasetSpec::default();
        let cases: Vec<Box<dyn Fn(&mut DatasetSpec)>> = vec![
            Box::new(|s| s.min_objects = 0),
            Box::new(|s| s.max_objects = 0),
            Box::new(|s| s.composite_count = 0),
            Box::new(|s| s.background_count = 0),
            Box::new(|s| s.shapes = vec![PrimitiveKind::Background]),
            Box::new(|s| s.object_palette.push([0.55, 0.55, 0.62])),
            Box::new(|s| s.scale_range = [0.3, 0.2]),
        ];
        for (i, f) in cases.iter().enumerate() {
            let mut s = base.clone();
            f(&mut s);
            assert!(s.validate().is_err(), "case {i} accepted");
        }
    }

    #[test]
    fn no_objects_renders_the_pure_background() {
        let spec = small_spec();
        let camera = spec.camera.camera_at(0.3, 0.4);
        let backdrop = Backdrop {
            top: [0.2, 0.3, 0.4],
            bottom: [0.6, 0.5, 0.4],
        };
        let (image, instance) = render_scene_objects(&[], &backdrop, &camera);
        assert_eq!(image, render_background(&backdrop, 32));
        assert!(instance.iter().all(|&i| i < 0));
        assert_eq!(image.at(&[0, 0, 5]), 0.2);
        assert_eq!(image.at(&[2, 31, 5]), 0.4);
    }

    #[test]
    fn background_images_have_no_objects_and_scenes_do() {
        let spec = small_spec();
        for i in 0..spec.background_count {
            let g = generate_image(&spec, 0, i);
            assert!(g.objects.is_empty() && g.instance.iter().all(|&p| p < 0));
        }
        for i in 0..spec.composite_count {
            let g = generate_image(&spec, 1, i);
            assert!((1..=2).contains(&g.objects.len()));
            assert!(g.instance.iter().any(|&p| p >= 0));
            for o in &g.objects {
                assert!(vec3_norm(&o.pose.translation) + o.bounding_radius() <= SCENE_RADIUS);
            }
        }
    }

    #[test]
    fn object_pixels_use_shaded_palette_colours() {
        let spec = small_spec();
        let g = generate_image(&spec, 1, 0);
        let n = 32 * 32;
        for (p, &id) in g.instance.iter().enumerate() {
            if id < 0 {
                continue;
            }
            let base = g.objects[id as usize].colour;
            let px = [0, 1, 2].map(|c| g.image.data()[c * n + p]);
            // every channel is the base colour times one common shading factor
            let k = px[0] / base[0];
            assert!((0.4 - 1e-9..=1.0 + 1e-9).contains(&k));
            for c in 0..3 {
                assert!((px[c] - base[c] * k).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn files_are_deterministic_and_load_back() {
        let spec = small_spec();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_dataset(&spec, a.path()).unwrap();
        generate_dataset(&spec, b.path()).unwrap();
        for entry in std::fs::read_dir(a.path()).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(std::fs::read(a.path().join(&name)).unwrap(), std::fs::read(b.path().join(&name)).unwrap());
        }
        let manifest = std::fs::read_to_string(a.path().join("manifest.csv")).unwrap();
        assert_eq!(manifest.lines().count(), 1 + 6 + 3);
        let data = Dataset::load(a.path()).unwrap();
        assert_eq!((data.composites.len(), data.backgrounds.len(), data.size), (6, 3, 32));
        let first = generate_image(&spec, 1, 0).image;
        let loaded = data.tensor(&data.composites[0]);
        for (x, y) in first.data().iter().zip(loaded.data()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn batches_follow_the_flag_layout() {
        let spec = small_spec();
        let comps: Vec<Tensor> = (0..3).map(|i| generate_image(&spec, 1, i).image).collect();
        let bgs: Vec<Tensor> = (0..2).map(|i| generate_image(&spec, 0, i).image).collect();
        let data = Dataset::from_images(32, &comps, &bgs);
        let config = TrainConfig {
            image_size: 32,
            batch_size: 5,
            composite_fraction: 0.6,
            ..Default::default()
        };
        let batch = data.sample_batch(&config, 3).unwrap();
        let flags: Vec<Real> = batch.iter().map(|r| r.c).collect();
        assert_eq!(flags, [1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(batch, data.sample_batch(&config, 3).unwrap());
        let wrong = TrainConfig { image_size: 64, ..config };
        assert!(data.sample_batch(&wrong, 0).is_err());
    }
}
