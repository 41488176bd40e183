use std::collections::BTreeMap;

use crate::vocab::{NUM_BASSES, NUM_QUALITIES, NUM_ROOTS};

use super::ModelError;

/// Network hyperparameters. Serialized as flat `key = value` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Neighbor radius of the decoder's context window.
    pub context_radius: usize,
    pub dropout: f64,
    /// Condition the decoder on boundary predictions through FiLM.
    pub use_boundary: bool,
    /// Confidence-ordered iterative decoding at inference time.
    pub use_iterative: bool,
    /// Feed ground-truth boundaries to FiLM during training.
    pub teacher_forced_boundaries: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            encoder_layers: 2,
            heads: 4,
            ffn_mult: 4,
            context_radius: 2,
            dropout: 0.1,
            use_boundary: true,
            use_iterative: true,
            teacher_forced_boundaries: false,
            seed: 0,
        }
    }
}

pub const PATCH_SIZE: usize = crate::score_io::PATCH_SIZE;
pub const FRAMES_PER_BEAT: usize = crate::score_io::FRAMES_PER_BEAT;
/// Classes per element head: root, quality, bass.
pub const CLASS_COUNTS: [usize; 3] = [NUM_ROOTS, NUM_QUALITIES, NUM_BASSES];

impl ModelConfig {
    /// Full-size network: 512 wide, six encoder blocks, eight heads.
    pub fn paper_scale() -> ModelConfig {
        ModelConfig {
            d_model: 512,
            encoder_layers: 6,
            heads: 8,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.ffn_mult == 0 {
            return Err(ModelError::Config("ffn_mult must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Rows in a context window: the conditioned state plus `2r + 1` neighbors.
    pub fn context_rows(&self) -> usize {
        2 * self.context_radius + 2
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("d_model".into(), self.d_model.to_string());
        m.insert("encoder_layers".into(), self.encoder_layers.to_string());
        m.insert("heads".into(), self.heads.to_string());
        m.insert("ffn_mult".into(), self.ffn_mult.to_string());
        m.insert("context_radius".into(), self.context_radius.to_string());
        m.insert("patch_size".into(), PATCH_SIZE.to_string());
        m.insert("frames_per_beat".into(), FRAMES_PER_BEAT.to_string());
        m.insert("num_roots".into(), NUM_ROOTS.to_string());
        m.insert("num_qualities".into(), NUM_QUALITIES.to_string());
        m.insert("num_basses".into(), NUM_BASSES.to_string());
        m.insert("dropout".into(), self.dropout.to_string());
        m.insert("use_boundary".into(), self.use_boundary.to_string());
        m.insert("use_iterative".into(), self.use_iterative.to_string());
        m.insert(
            "teacher_forced_boundaries".into(),
            self.teacher_forced_boundaries.to_string(),
        );
        m.insert("model_seed".into(), self.seed.to_string());
        m
    }

    /// Reads the keys written by [`ModelConfig::to_kv`]; missing keys keep
    /// their defaults, fixed geometry keys must match this build.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<ModelConfig, ModelError> {
        let mut c = ModelConfig::default();
        for (key, value) in kv {
            c.set(key, value)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Sets one field from its textual value. Unknown keys are ignored so a
    /// run config can carry training keys too; returns whether the key was used.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, ModelError> {
        let bad = || ModelError::Config(format!("bad value {value:?} for {key}"));
        let fixed = |expected: usize| -> Result<bool, ModelError> {
            if value.parse::<usize>().map_err(|_| bad())? != expected {
                return Err(ModelError::Mismatch {
                    field: key.to_string(),
                    expected: expected.to_string(),
                    found: value.to_string(),
                });
            }
            Ok(true)
        };
        match key {
            "d_model" => self.d_model = value.parse().map_err(|_| bad())?,
            "encoder_layers" => self.encoder_layers = value.parse().map_err(|_| bad())?,
            "heads" => self.heads = value.parse().map_err(|_| bad())?,
            "ffn_mult" => self.ffn_mult = value.parse().map_err(|_| bad())?,
            "context_radius" => self.context_radius = value.parse().map_err(|_| bad())?,
            "dropout" => self.dropout = value.parse().map_err(|_| bad())?,
            "use_boundary" => self.use_boundary = value.parse().map_err(|_| bad())?,
            "use_iterative" => self.use_iterative = value.parse().map_err(|_| bad())?,
            "teacher_forced_boundaries" => {
                self.teacher_forced_boundaries = value.parse().map_err(|_| bad())?
            }
            "model_seed" => self.seed = value.parse().map_err(|_| bad())?,
            "patch_size" => return fixed(PATCH_SIZE),
            "frames_per_beat" => return fixed(FRAMES_PER_BEAT),
            "num_roots" => return fixed(NUM_ROOTS),
            "num_qualities" => return fixed(NUM_QUALITIES),
            "num_basses" => return fixed(NUM_BASSES),
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Keys that determine the parameter layout.
    pub const STRUCTURAL_KEYS: [&'static str; 5] =
        ["d_model", "encoder_layers", "heads", "ffn_mult", "context_radius"];
}
