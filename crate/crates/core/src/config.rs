//! Run configuration loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::matching::LossWeights;
use crate::pointcloud::Connectivity;
use crate::synth::{AugmentConfig, DatasetConfig};
use crate::tensor::{AdamWConfig, PolySchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Backbone feature width.
    pub feature_dim: usize,
    pub backbone_rounds: usize,
    pub connectivity: Connectivity,
    /// Query and decoder width.
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    pub scene_queries: usize,
    pub learnable_queries: usize,
    /// Fraction of voxels kept by foreground selection.
    pub alpha: f64,
    pub mask_threshold: f64,
    pub fourier_bands: usize,
    pub use_position: bool,
    pub use_scene_update: bool,
    pub use_bias_refinement: bool,
    pub superpoint_k: usize,
    pub superpoint_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            backbone_rounds: 3,
            connectivity: Connectivity::Corners,
            dim: 32,
            heads: 4,
            ffn_dim: 64,
            layers: 3,
            scene_queries: 8,
            learnable_queries: 8,
            alpha: 0.4,
            mask_threshold: 0.5,
            fourier_bands: 4,
            use_position: true,
            use_scene_update: true,
            use_bias_refinement: true,
            superpoint_k: 8,
            superpoint_threshold: 3.0,
        }
    }
}

impl ModelConfig {
    pub fn decoder(&self, num_classes: usize) -> DecoderConfig {
        DecoderConfig {
            layers: self.layers,
            dim: self.dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            num_classes,
            mask_threshold: self.mask_threshold,
            fourier_bands: self.fourier_bands,
            use_position: self.use_position,
            use_scene_update: self.use_scene_update,
        }
    }

    pub fn num_queries(&self) -> usize {
        self.scene_queries + self.learnable_queries
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("model: {msg}")));
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if self.num_queries() == 0 {
            return bad("at least one query is required");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if self.superpoint_k == 0 || !(self.superpoint_threshold >= 0.0) {
            return bad("superpoint_k must be positive and the threshold non-negative");
        }
        self.decoder(num_classes).validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub head_lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            head_lr: 3e-3,
            weight_decay: 0.05,
            poly_power: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self, total_steps: u64) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            head_lr: self.head_lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            schedule: PolySchedule {
                total_steps,
                power: self.poly_power,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Instances kept per scene, best first.
    pub top_k: usize,
    /// Masks with fewer points are dropped.
    pub min_points: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            top_k: 100,
            min_points: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    /// Scenes averaged per optimizer step.
    pub scenes_per_step: usize,
    pub augment: bool,
    pub log_every: u64,
    /// Validation interval in steps; 0 evaluates only after the last step.
    pub eval_every: u64,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            scenes_per_step: 1,
            augment: true,
            log_every: 10,
            eval_every: 0,
            checkpoint_every: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset directory holding the manifest.
    pub data_dir: PathBuf,
    /// Output directory for checkpoints, logs and reports.
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub infer: InferConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            infer: InferConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn num_classes(&self) -> usize {
        self.dataset.scene.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate(self.num_classes())?;
        self.dataset.scene.validate()?;
        self.augment.validate()?;
        if !(self.dataset.voxel_size > 0.0) {
            return Err(Error::InvalidVoxelSize(self.dataset.voxel_size));
        }
        let w = &self.loss;
        if [w.cls, w.bce, w.dice, w.aux].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        let o = &self.optim;
        if !(o.lr >= 0.0 && o.head_lr >= 0.0 && o.weight_decay >= 0.0 && o.poly_power >= 0.0) {
            return Err(Error::Config("optimizer rates, decay and power must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and eps must be positive".into()));
        }
        if self.train.scenes_per_step == 0 {
            return Err(Error::Config("scenes_per_step must be positive".into()));
        }
        Ok(())
    }

    /// Hash of everything that shapes the parameters or their meaning:
    /// the model section and the class count.
    pub fn model_hash(&self) -> u64 {
        let text = serde_json::to_vec(&(&self.model, self.num_classes())).expect("plain data serializes");
        let digest = Sha256::digest(&text);
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::from_toml("[model]\nwidth = 3").is_err());
        assert!(RunConfig::from_toml("[loss]\nmask = 1.0").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "[model]\nalpha = 0.0",
            "[model]\nmask_threshold = 1.0",
            "[model]\nlayers = 0",
            "[model]\nscene_queries = 0\nlearnable_queries = 0",
            "[model]\ndim = 30\nheads = 4",
            "[loss]\ncls = -1.0",
            "[optim]\nbeta1 = 1.0",
            "[dataset]\nvoxel_size = 0.0",
            "[augment]\nscale_range = { min = 0.0, max = 1.0 }",
        ] {
            assert!(RunConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn hash_tracks_model_but_not_training() {
        let base = RunConfig::default();
        let mut other = base.clone();
        other.train.steps = 7;
        other.optim.lr = 1.0;
        assert_eq!(base.model_hash(), other.model_hash());
        other.model.dim = 16;
        assert_ne!(base.model_hash(), other.model_hash());
        let mut classes = base.clone();
        classes.dataset.scene.num_classes = 3;
        assert_ne!(base.model_hash(), classes.model_hash());
    }

    #[test]
    fn recipe_defaults() {
        let cfg = RunConfig::default();
        assert_eq!((cfg.loss.cls, cfg.loss.bce, cfg.loss.dice, cfg.loss.aux), (0.8, 1.0, 1.0, 0.4));
        assert_eq!((cfg.optim.lr, cfg.optim.head_lr, cfg.optim.weight_decay), (3e-4, 3e-3, 0.05));
        assert_eq!(cfg.optim.poly_power, 0.9);
        assert_eq!((cfg.model.layers, cfg.model.alpha), (3, 0.4));
        assert_eq!(cfg.dataset.voxel_size, 0.02);
    }
}
