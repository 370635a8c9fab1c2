//! Model and training configuration.

use crate::error::{Error, Result};
use crate::schedule::LrSchedule;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Every dimension and hyperparameter of the network and its training run.
/// Serialized as TOML; unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width shared by text and visual features.
    pub d: usize,
    /// Attention heads; must divide `d`.
    pub heads: usize,
    /// Relation graph count. Fixed at 3 (implicit, semantic, spatial).
    pub graph_count: usize,
    /// Transformer layers in the question encoder.
    pub encoder_layers: usize,
    /// Neighbors kept per object in each relation graph.
    pub adjacency_k: usize,
    /// Objects kept by the filtering stage.
    pub retained_objects: usize,
    /// Dropout after every linear map outside the classifier.
    pub dropout: f64,
    /// Dropout inside the classifier head.
    pub classifier_dropout: f64,
    /// Question-guided fusion on/off. Off replaces the graph weights with
    /// a uniform 1/3 and skips the question-to-vision injection.
    pub enable_gfm: bool,
    /// Object filtering on/off. Off keeps every object with uniform
    /// aggregation weights.
    pub enable_of: bool,
    /// Row-renormalize the kept-object relation matrix before the second
    /// priority pass. The alternative keeps the raw jointly-normalized
    /// matrix.
    pub renorm_kept_rows: bool,
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: u32,
    pub schedule: LrSchedule,
}

impl ModelConfig {
    /// Desk-scale defaults: small enough to train on a laptop CPU in
    /// minutes while keeping every architectural piece in place.
    pub fn desk() -> Self {
        ModelConfig {
            d: 64,
            heads: 4,
            graph_count: 3,
            encoder_layers: 2,
            adjacency_k: 4,
            retained_objects: 6,
            dropout: 0.2,
            classifier_dropout: 0.5,
            enable_gfm: true,
            enable_of: true,
            renorm_kept_rows: true,
            seed: 7,
            batch_size: 32,
            epochs: 30,
            schedule: LrSchedule::desk_scale(),
        }
    }

    /// Full-scale hyperparameters, kept as a documented reference point.
    /// Training at this size is far outside desk budgets.
    pub fn paper() -> Self {
        ModelConfig {
            d: 768,
            heads: 12,
            graph_count: 3,
            encoder_layers: 3,
            adjacency_k: 15,
            retained_objects: 20,
            dropout: 0.2,
            classifier_dropout: 0.5,
            enable_gfm: true,
            enable_of: true,
            renorm_kept_rows: true,
            seed: 7,
            batch_size: 192,
            epochs: 16,
            schedule: LrSchedule::paper_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of {} heads",
                self.d, self.heads
            )));
        }
        if self.graph_count != 3 {
            return Err(Error::Config(format!(
                "graph_count is fixed at 3, got {}",
                self.graph_count
            )));
        }
        if self.encoder_layers == 0 {
            return Err(Error::Config("encoder_layers must be at least 1".into()));
        }
        if self.adjacency_k == 0 {
            return Err(Error::Config("adjacency_k must be at least 1".into()));
        }
        if self.retained_objects == 0 {
            return Err(Error::Config("retained_objects must be at least 1".into()));
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("classifier_dropout", self.classifier_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.epochs > self.schedule.final_epoch + 1 {
            return Err(Error::Config(format!(
                "{} epochs exceed the schedule end {}",
                self.epochs, self.schedule.final_epoch
            )));
        }
        self.schedule.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// SHA-256 of the canonical TOML form, used to pair checkpoints with
    /// the exact configuration that produced them.
    pub fn fingerprint(&self) -> Result<[u8; 32]> {
        let canon = self.to_toml()?;
        let mut hasher = Sha256::new();
        hasher.update(canon.as_bytes());
        Ok(hasher.finalize().into())
    }

    pub fn fingerprint_hex(&self) -> Result<String> {
        let fp = self.fingerprint()?;
        Ok(fp.iter().map(|b| format!("{b:02x}")).collect())
    }
}
