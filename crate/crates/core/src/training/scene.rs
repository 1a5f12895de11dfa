//! Human-editable record of a sampled scene and the edit mini-language.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{edit_scene, render_scene, Edit, Model, SceneSample};
use crate::autodiff::linalg::{vec3_norm, vec3_sub};
use crate::autodiff::Tensor;
use crate::geometry::{Camera, CameraSampling, Pose};
use crate::primitives::PrimitiveKind;
use crate::{Error, Real, Result};

/// Hex SHA-256 of an image's values as little-endian `f64`.
pub fn image_hash(image: &Tensor) -> String {
    let mut h = Sha256::new();
    for &v in image.data() {
        h.update((v as f64).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// One primitive of a scene file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePrimitive {
    pub kind: PrimitiveKind,
    pub pose: Pose,
    /// Appearance comes from this generator head applied to `z`.
    pub appearance: String,
    /// True when `pose` was set by an edit rather than decoded from `z`.
    pub edited: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    /// Model hash of the checkpoint's configuration.
    pub config_hash: String,
    pub checkpoint: PathBuf,
    /// 1 when every primitive is composited, 0 for the background alone.
    pub c: u8,
    pub image_hash: String,
    pub z: Vec<Real>,
    pub camera: Camera,
    pub primitives: Vec<ScenePrimitive>,
}

impl SceneFile {
    pub fn from_sample(sample: &SceneSample, model: &Model, checkpoint: PathBuf) -> Self {
        Self {
            config_hash: model.config.model_hash(),
            checkpoint,
            c: sample.composite_all as u8,
            image_hash: image_hash(&sample.image),
            z: sample.z.clone(),
            camera: sample.camera.clone(),
            primitives: sample
                .poses
                .iter()
                .zip(model.kinds())
                .zip(&sample.overrides)
                .enumerate()
                .map(|(i, ((pose, &kind), o))| ScenePrimitive {
                    kind,
                    pose: pose.clone(),
                    appearance: format!("head {i}"),
                    edited: o.is_some(),
                })
                .collect(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Invalid(format!("scene file: {e}")))
    }

    /// Checks that the scene belongs to `model`.
    pub fn validate(&self, model: &Model) -> Result<()> {
        let hash = model.config.model_hash();
        if self.config_hash != hash {
            return Err(Error::Invalid(format!(
                "scene was made with config {} but the checkpoint has {}",
                self.config_hash, hash
            )));
        }
        if self.c > 1 {
            return Err(Error::Invalid(format!("c must be 0 or 1, got {}", self.c)));
        }
        if self.z.len() != model.config.network.latent_dim {
            return Err(Error::Invalid(format!("latent has {} values, model expects {}", self.z.len(), model.config.network.latent_dim)));
        }
        let kinds: Vec<PrimitiveKind> = self.primitives.iter().map(|p| p.kind).collect();
        if kinds != model.kinds() {
            return Err(Error::Invalid(format!("scene primitives {:?} differ from the model's {:?}", kinds, model.kinds())));
        }
        for p in &self.primitives {
            p.pose.validate()?;
        }
        self.camera.validate()
    }

    /// Re-renders the scene; decoded poses are reused unless edited.
    pub fn render(&self, model: &Model) -> Result<SceneSample> {
        self.validate(model)?;
        let overrides: Vec<Option<Pose>> = self.primitives.iter().map(|p| p.edited.then(|| p.pose.clone())).collect();
        render_scene(model, &self.z, &self.camera, self.c == 1, &overrides)
    }

    /// Re-renders and confirms the stored image hash.
    pub fn verify(&self, model: &Model) -> Result<SceneSample> {
        let sample = self.render(model)?;
        let hash = image_hash(&sample.image);
        if hash != self.image_hash {
            return Err(Error::Invalid(format!("re-rendered image hash {hash} differs from the stored {}", self.image_hash)));
        }
        Ok(sample)
    }
}

/// Azimuth and elevation (degrees) of `camera` on the sampling sphere.
pub fn camera_angles(camera: &Camera, sampling: &CameraSampling) -> (Real, Real) {
    let d = vec3_sub(&camera.center(), &sampling.look_at);
    let r = vec3_norm(&d);
    let elevation = (d[2] / r).clamp(-1.0, 1.0).asin();
    let azimuth = d[1].atan2(d[0]);
    (azimuth.to_degrees(), elevation.to_degrees())
}

fn axis_by_name(name: &str) -> Option<[Real; 3]> {
    match name {
        "x" => Some([1.0, 0.0, 0.0]),
        "y" => Some([0.0, 1.0, 0.0]),
        "z" => Some([0.0, 0.0, 1.0]),
        _ => None,
    }
}

/// Accepted forms: `translate i dx dy dz`, `rotate i x|y|z degrees`,
/// `rotate i ax ay az degrees` and `camera azimuth elevation` (degrees).
impl FromStr for Edit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let words: Vec<&str> = s.split_whitespace().collect();
        let bad = || Error::Invalid(format!("cannot parse edit {s:?}"));
        let num = |w: &str| w.parse::<Real>().ok().filter(|v| v.is_finite()).ok_or_else(bad);
        let index = |w: &str| w.parse::<usize>().map_err(|_| bad());
        match words.as_slice() {
            ["translate", i, x, y, z] => Ok(Edit::Translate {
                index: index(i)?,
                delta: [num(x)?, num(y)?, num(z)?],
            }),
            ["rotate", i, axis, deg] => Ok(Edit::Rotate {
                index: index(i)?,
                axis: axis_by_name(axis).ok_or_else(bad)?,
                degrees: num(deg)?,
            }),
            ["rotate", i, x, y, z, deg] => Ok(Edit::Rotate {
                index: index(i)?,
                axis: [num(x)?, num(y)?, num(z)?],
                degrees: num(deg)?,
            }),
            ["camera", az, el] => Ok(Edit::Camera {
                azimuth_deg: num(az)?,
                elevation_deg: num(el)?,
            }),
            _ => Err(bad()),
        }
    }
}

impl Edit {
    /// The edit at fraction `t` of its magnitude; camera edits move from
    /// `start` (azimuth, elevation) towards the target.
    pub fn scaled(&self, t: Real, start: (Real, Real)) -> Edit {
        match *self {
            Edit::Translate { index, delta } => Edit::Translate {
                index,
                delta: delta.map(|d| d * t),
            },
            Edit::Rotate { index, axis, degrees } => Edit::Rotate {
                index,
                axis,
                degrees: degrees * t,
            },
            Edit::Camera { azimuth_deg, elevation_deg } => Edit::Camera {
                azimuth_deg: start.0 + (azimuth_deg - start.0) * t,
                elevation_deg: start.1 + (elevation_deg - start.1) * t,
            },
        }
    }
}

/// Applies `edit` to a scene file, returning the new sample and file.
pub fn edit_scene_file(model: &Model, scene: &SceneFile, edit: &Edit) -> Result<(SceneSample, SceneFile)> {
    let sample = scene.render(model)?;
    let edited = edit_scene(model, &sample, edit)?;
    let file = SceneFile::from_sample(&edited, model, scene.checkpoint.clone());
    Ok((edited, file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::model::tests::tiny_config;
    use crate::training::sample_scene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn edits_parse() {
        assert_eq!(
            "translate 1 0.5 -1 2".parse::<Edit>().unwrap(),
            Edit::Translate {
                index: 1,
                delta: [0.5, -1.0, 2.0]
            }
        );
        assert_eq!(
            "rotate 0 z 90".parse::<Edit>().unwrap(),
            Edit::Rotate {
                index: 0,
                axis: [0.0, 0.0, 1.0],
                degrees: 90.0
            }
        );
        assert!(matches!("rotate 0 1 1 0 45".parse::<Edit>().unwrap(), Edit::Rotate { .. }));
        assert!(matches!("camera 30 20".parse::<Edit>().unwrap(), Edit::Camera { .. }));
        for bad in ["", "scale 0 2", "translate x 0 0 0", "translate 0 0 0", "rotate 0 w 10", "camera nan 3"] {
            assert!(bad.parse::<Edit>().is_err(), "{bad}");
        }
    }

    #[test]
    fn camera_angles_invert_camera_at() {
        let s = CameraSampling::default();
        let (az, el) = camera_angles(&s.camera_at(0.7, 0.4), &s);
        assert!((az - 0.7f64.to_degrees() as Real).abs() < 1e-9);
        assert!((el - 0.4f64.to_degrees() as Real).abs() < 1e-9);
    }

    #[test]
    fn scene_file_round_trips_and_reproduces_hash() {
        let model = Model::new(tiny_config()).unwrap();
        let sample = sample_scene(&model, None, None, true, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let file = SceneFile::from_sample(&sample, &model, "ck".into());
        let parsed = SceneFile::from_toml(&file.to_toml()).unwrap();
        assert_eq!(parsed, file);
        assert_eq!(parsed.verify(&model).unwrap().image, sample.image);

        let (zero, zero_file) = edit_scene_file(&model, &parsed, &"translate 0 0 0 0".parse().unwrap()).unwrap();
        assert_eq!(image_hash(&zero.image), file.image_hash);
        let reparsed = SceneFile::from_toml(&zero_file.to_toml()).unwrap();
        assert!(reparsed.primitives[0].edited);
        reparsed.verify(&model).unwrap();
    }

    #[test]
    fn foreign_scene_is_rejected() {
        let model = Model::new(tiny_config()).unwrap();
        let sample = sample_scene(&model, None, None, true, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let mut file = SceneFile::from_sample(&sample, &model, "ck".into());
        file.config_hash = "00".into();
        assert!(file.render(&model).is_err());
    }
}
