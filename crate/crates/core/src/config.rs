//! Run configuration: one JSON document drives every pipeline stage.
//!
//! Unknown keys are rejected; every section carries workable desk-scale
//! defaults, and `validate` runs before any stage does work.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::flow::SamplerConfig;
use crate::model::{FlowNetConfig, Scheme};
use crate::scenes::SceneConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Total real samples to generate; the validation fraction is carved
    /// out of these (rounded down), the rest train.
    pub samples: usize,
    pub val_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            samples: 320,
            val_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowTrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub log_every: usize,
}

impl Default for FlowTrainSection {
    fn default() -> Self {
        FlowTrainSection {
            steps: 600,
            batch: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegTrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub augment: bool,
    /// Base feature width of the segmentation net.
    pub base: usize,
}

impl Default for SegTrainSection {
    fn default() -> Self {
        SegTrainSection {
            epochs: 12,
            batch: 8,
            lr: 1e-2,
            weight_decay: 1e-4,
            augment: true,
            base: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSection {
    /// Pixel-filter tolerance multiplier on the class-conditional mean CE.
    pub phi: f64,
    /// Minimum distinct classes the class-count filter demands.
    pub min_classes: usize,
    pub class_count: bool,
    pub pixel: bool,
}

impl Default for FilterSection {
    fn default() -> Self {
        FilterSection {
            phi: 1.25,
            min_classes: 3,
            class_count: true,
            pixel: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    /// Fixed random-seed sequence length per mask.
    pub seeds_per_mask: usize,
    /// Cap on how many masks from the source container are used.
    pub max_masks: Option<usize>,
}

impl Default for SynthSection {
    fn default() -> Self {
        // 32 masks x 3 seeds tracks the x3 synthetic/real volume against
        // the default downstream_real of 32.
        SynthSection {
            seeds_per_mask: 3,
            max_masks: Some(32),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub schemes: Vec<Scheme>,
    pub steps: Vec<usize>,
    pub crfm_steps: Vec<usize>,
    pub downstream_seeds: usize,
    /// Downstream training epochs (the guidance net keeps `seg_train`).
    pub downstream_epochs: usize,
    /// Real samples entering the downstream mix. The toy scenes saturate a
    /// downstream net beyond ~100 real samples, which would leave synthetic
    /// data nothing to add; mixing stays data-limited while the flow and
    /// guidance models still train on the full split.
    pub downstream_real: Option<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            schemes: vec![Scheme::TriAttention],
            steps: vec![16],
            crfm_steps: vec![0, 2, 4, 8],
            downstream_seeds: 3,
            downstream_epochs: 12,
            downstream_real: Some(32),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub scene: SceneConfig,
    pub data: DataSection,
    pub model: FlowNetConfig,
    pub flow_train: FlowTrainSection,
    pub seg_train: SegTrainSection,
    pub sampler: SamplerConfig,
    pub filter: FilterSection,
    pub synth: SynthSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("run"),
            scene: SceneConfig::default_desk(),
            data: DataSection::default(),
            model: FlowNetConfig::default(),
            flow_train: FlowTrainSection::default(),
            seg_train: SegTrainSection::default(),
            sampler: SamplerConfig::default(),
            filter: FilterSection::default(),
            synth: SynthSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.finalize()?;
        Ok(cfg)
    }

    /// Fill derived fields and check cross-section consistency.
    pub fn finalize(&mut self) -> Result<()> {
        // The scene seed is derived from the global seed.
        self.scene.seed = crate::rng::derive_seed(self.seed, "scene", 0);
        if self.scene.base_colors.is_empty() {
            self.scene.base_colors = crate::scenes::default_colors(self.scene.classes);
        }
        if self.scene.noise_amps.is_empty() {
            self.scene.noise_amps = crate::scenes::default_amps(self.scene.classes);
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.sampler.validate()?;
        if self.model.classes != self.scene.classes
            || self.model.channels != self.scene.channels
            || self.model.image_size != self.scene.size
        {
            return Err(Error::Config(format!(
                "model ({} classes, {} channels, {} px) does not match scene ({}, {}, {})",
                self.model.classes,
                self.model.channels,
                self.model.image_size,
                self.scene.classes,
                self.scene.channels,
                self.scene.size
            )));
        }
        if self.data.samples == 0 {
            return Err(Error::Config("data.samples must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::Config("data.val_fraction must be in [0,1)".into()));
        }
        if self.data.samples - self.val_samples() == 0 {
            return Err(Error::Config("data: empty training split".into()));
        }
        if self.filter.phi <= 0.0 {
            return Err(Error::Config("filter.phi must be positive".into()));
        }
        if self.synth.seeds_per_mask == 0 {
            return Err(Error::Config("synth.seeds_per_mask must be >= 1".into()));
        }
        if self.sweep.downstream_seeds == 0 {
            return Err(Error::Config("sweep.downstream_seeds must be >= 1".into()));
        }
        for &n in &self.sweep.steps {
            if n == 0 {
                return Err(Error::Config("sweep.steps entries must be >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.data.samples
    }

    /// Exactly floor(val_fraction * samples).
    pub fn val_samples(&self) -> usize {
        (self.data.val_fraction * self.data.samples as f64).floor() as usize
    }

    pub fn train_samples(&self) -> usize {
        self.data.samples - self.val_samples()
    }

    // Canonical artifact paths.

    pub fn real_train_path(&self) -> PathBuf {
        self.out_dir.join("real_train.tods")
    }

    pub fn real_val_path(&self) -> PathBuf {
        self.out_dir.join("real_val.tods")
    }

    pub fn flow_ckpt_path(&self, scheme: Scheme) -> PathBuf {
        self.out_dir.join(format!("flow_{scheme}.todw"))
    }

    pub fn seg_ckpt_path(&self) -> PathBuf {
        self.out_dir.join("seg_guidance.todw")
    }

    pub fn synth_path(&self, scheme: Scheme, steps: usize, crfm: usize) -> PathBuf {
        self.out_dir
            .join(format!("synth_{scheme}_n{steps}_k{crfm}.tods"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let mut cfg = RunConfig::default();
        cfg.finalize().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{"seed": 1, "bogus_key": true}"#;
        let parsed: std::result::Result<RunConfig, _> = serde_json::from_str(text);
        assert!(parsed.is_err());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let text = r#"{"seed": 9, "flow_train": {"steps": 10}}"#;
        let mut cfg: RunConfig = serde_json::from_str(text).unwrap();
        cfg.finalize().unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.flow_train.steps, 10);
        assert_eq!(cfg.flow_train.batch, 8);
        assert_eq!(cfg.sampler.steps, 23);
    }

    #[test]
    fn mismatched_model_and_scene_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.model.image_size = 16; // scene stays 32
        assert!(cfg.finalize().is_err());
    }

    #[test]
    fn val_split_is_twenty_percent_rounded_down() {
        let mut cfg = RunConfig::default();
        cfg.data.samples = 320;
        cfg.data.val_fraction = 0.2;
        cfg.finalize().unwrap();
        assert_eq!(cfg.val_samples(), 64);
        assert_eq!(cfg.train_samples(), 256);
        // Rounded down, not to nearest.
        cfg.data.samples = 321;
        assert_eq!(cfg.val_samples(), 64);
    }

    #[test]
    fn scene_seed_derives_from_global_seed() {
        let mut a = RunConfig::default();
        a.seed = 5;
        a.finalize().unwrap();
        let mut b = RunConfig::default();
        b.seed = 5;
        b.finalize().unwrap();
        assert_eq!(a.scene.seed, b.scene.seed);
        let mut c = RunConfig::default();
        c.seed = 6;
        c.finalize().unwrap();
        assert_ne!(a.scene.seed, c.scene.seed);
    }
}
