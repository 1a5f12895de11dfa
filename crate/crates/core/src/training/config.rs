use serde::{Deserialize, Serialize};

use crate::geometry::CameraSampling;
use crate::losses::LossConfig;
use crate::networks::{config_hash, NetworkConfig};
use crate::primitives::{PrimitiveConfig, PrimitiveKind};
use crate::projection::ProjectionConfig;
use crate::{Error, Real, Result};

/// Everything that defines a model and its training run. Stored as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Total number of training steps of a run.
    pub steps: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub batch_size: usize,
    pub image_size: usize,
    /// Number of foreground primitives.
    pub num_objects: usize,
    pub foreground_kind: PrimitiveKind,
    /// Fraction of every batch drawn with c = 1.
    pub composite_fraction: Real,
    pub learning_rate: Real,
    pub rms_decay: Real,
    pub rms_eps: Real,
    pub primitives: PrimitiveConfig,
    pub projection: ProjectionConfig,
    pub network: NetworkConfig,
    pub losses: LossConfig,
    pub camera: CameraSampling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            checkpoint_every: 500,
            batch_size: 16,
            image_size: 64,
            num_objects: 3,
            foreground_kind: PrimitiveKind::Cuboid,
            composite_fraction: 0.5,
            learning_rate: 1e-4,
            rms_decay: 0.99,
            rms_eps: 1e-8,
            primitives: PrimitiveConfig::default(),
            projection: ProjectionConfig::default(),
            network: NetworkConfig::default(),
            losses: LossConfig::default(),
            camera: CameraSampling::default(),
        }
    }
}

impl TrainConfig {
    /// Reduced preset for a short single-core run: two objects, batch 2,
    /// narrower generator and coarser textures at the default image size.
    pub fn smoke() -> Self {
        Self {
            batch_size: 2,
            num_objects: 2,
            primitives: PrimitiveConfig {
                features: 8,
                cuboid_texture: 4,
                background_texture: [8, 16],
                background_mesh_resolution: 8,
                ..PrimitiveConfig::default()
            },
            network: NetworkConfig {
                latent_dim: 64,
                g3d_width: 64,
                ..NetworkConfig::default()
            },
            ..Self::default()
        }
    }

    /// Named preset: `default` or `smoke`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "smoke" => Ok(Self::smoke()),
            other => Err(Error::Config(format!("unknown preset {other:?}; expected default or smoke"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return Err(Error::Config(format!("image_size must be a positive multiple of 16, got {}", self.image_size)));
        }
        if self.num_objects == 0 {
            return Err(Error::Config("num_objects must be at least 1".into()));
        }
        if self.foreground_kind == PrimitiveKind::Background {
            return Err(Error::Config("foreground_kind cannot be background".into()));
        }
        if !(0.0..=1.0).contains(&self.composite_fraction) {
            return Err(Error::Config("composite_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.rms_decay) || !(self.rms_eps > 0.0) {
            return Err(Error::Config("rms_decay must lie in [0, 1) and rms_eps be positive".into()));
        }
        if self.camera.width != self.image_size || self.camera.height != self.image_size {
            return Err(Error::Config(format!(
                "camera is {}x{} but image_size is {}",
                self.camera.width, self.camera.height, self.image_size
            )));
        }
        self.primitives.validate()?;
        self.network.validate()?;
        self.losses.validate()?;
        self.camera.validate()?;
        Ok(())
    }

    /// Foreground kinds followed by the background.
    pub fn kinds(&self) -> Vec<PrimitiveKind> {
        let mut k = vec![self.foreground_kind; self.num_objects];
        k.push(PrimitiveKind::Background);
        k
    }

    /// Number of c = 1 samples in a batch.
    pub fn composites_per_batch(&self) -> usize {
        ((self.batch_size as Real * self.composite_fraction).round() as usize).min(self.batch_size)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hash of everything that shapes the model and its updates; the run
    /// length and checkpoint cadence are left out so a run can be extended.
    pub fn model_hash(&self) -> String {
        let core = Self {
            steps: 0,
            checkpoint_every: 0,
            ..self.clone()
        };
        config_hash(&core.to_toml())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn odd_values_round_trip_exactly() {
        let cfg = TrainConfig {
            learning_rate: 0.1 + 0.2,
            composite_fraction: 1.0 / 3.0,
            ..Default::default()
        };
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn invalid_values_rejected() {
        for bad in [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { image_size: 60, ..Default::default() },
            TrainConfig { foreground_kind: PrimitiveKind::Background, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert!(TrainConfig::from_toml("bogus_field = 1").is_err());
    }

    #[test]
    fn hash_ignores_run_length() {
        let a = TrainConfig::default();
        let b = TrainConfig { steps: 7, checkpoint_every: 3, ..a.clone() };
        let c = TrainConfig { seed: 1, ..a.clone() };
        assert_eq!(a.model_hash(), b.model_hash());
        assert_ne!(a.model_hash(), c.model_hash());
    }

    #[test]
    fn presets_are_valid() {
        TrainConfig::smoke().validate().unwrap();
        assert_eq!(TrainConfig::preset("default").unwrap(), TrainConfig::default());
        assert!(TrainConfig::preset("huge").is_err());
    }

    #[test]
    fn kinds_end_with_background() {
        let cfg = TrainConfig { num_objects: 2, ..Default::default() };
        assert_eq!(cfg.kinds(), vec![PrimitiveKind::Cuboid, PrimitiveKind::Cuboid, PrimitiveKind::Background]);
        assert_eq!(cfg.composites_per_batch(), 8);
    }
}
