//! Training configuration, loaded from JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentConfig;
use crate::error::{Error, Result};
use crate::model::{Architecture, InitScales};
use crate::objectives::LossConfig;
use crate::optim::{AdamWConfig, StepSchedule};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    pub no_diversity: bool,
    pub no_alignment: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(rename = "K")]
    pub num_prototypes: usize,
    #[serde(rename = "M")]
    pub components: usize,
    pub n_gram: usize,
    #[serde(rename = "d")]
    pub embed_dim: usize,
    pub hash_dim: usize,
    #[serde(rename = "T_max")]
    pub t_max: usize,
    #[serde(rename = "R")]
    pub span_smoothness: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub alignment: AlignmentConfig,
    pub loss: LossConfig,
    pub ablations: Ablations,
    /// Hidden width of the span MLP.
    pub mlp_hidden: usize,
    pub init: InitScales,
    /// Build the span mask from every component instead of the dominant one.
    pub span_union: bool,
    /// Optional precomputed sentence embeddings, consulted for prototype
    /// initialization and alignment.
    pub embedding_cache: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_prototypes: 10,
            components: 4,
            n_gram: 5,
            embed_dim: 32,
            hash_dim: 2048,
            t_max: 128,
            span_smoothness: 2.0,
            batch_size: 16,
            epochs: 25,
            learning_rate: 1e-4,
            lr_decay_every: 10,
            lr_decay_factor: 0.9,
            weight_decay: 0.01,
            seed: 0,
            alignment: AlignmentConfig::default(),
            loss: LossConfig::default(),
            ablations: Ablations::default(),
            mlp_hidden: 64,
            init: InitScales::default(),
            span_union: false,
            embedding_cache: None,
        }
    }
}

impl TrainConfig {
    /// The small configuration used for gradient checking.
    pub fn gradcheck() -> Self {
        Self {
            num_prototypes: 3,
            components: 4,
            n_gram: 2,
            embed_dim: 16,
            hash_dim: 64,
            t_max: 16,
            batch_size: 4,
            mlp_hidden: 8,
            init: InitScales {
                encoder_std: 0.3,
                sigma_bias: 0.0,
                ..InitScales::default()
            },
            seed: 7,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("K", self.num_prototypes),
            ("M", self.components),
            ("n_gram", self.n_gram),
            ("d", self.embed_dim),
            ("T_max", self.t_max),
            ("batch_size", self.batch_size),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.num_prototypes < 2 {
            return Err(Error::Config("K must be at least 2".into()));
        }
        if self.hash_dim < self.embed_dim {
            return Err(Error::Config(format!(
                "hash_dim ({}) must be at least d ({})",
                self.hash_dim, self.embed_dim
            )));
        }
        if !(self.span_smoothness > 0.0) {
            return Err(Error::Config("R must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay_factor > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "learning_rate and lr_decay_factor must be positive, weight_decay non-negative".into(),
            ));
        }
        if !(self.init.encoder_std > 0.0) || !(self.init.head_std >= 0.0) || !self.init.sigma_bias.is_finite() {
            return Err(Error::Config("init scales must be finite, encoder_std positive".into()));
        }
        self.alignment.validate()?;
        self.loss.validate()
    }

    pub fn architecture(&self, num_classes: usize) -> Architecture {
        Architecture {
            num_prototypes: self.num_prototypes,
            num_classes,
            embed_dim: self.embed_dim,
            hash_dim: self.hash_dim,
            n_gram: self.n_gram,
            t_max: self.t_max,
            mlp_hidden: self.mlp_hidden,
            components: self.components,
            span_smoothness: self.span_smoothness,
            union_mask: self.span_union,
        }
    }

    pub fn schedule(&self) -> StepSchedule {
        StepSchedule {
            initial: self.learning_rate,
            every: self.lr_decay_every,
            factor: self.lr_decay_factor,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Loss settings after ablations are applied.
    pub fn effective_loss(&self) -> LossConfig {
        let mut loss = self.loss.clone();
        if self.ablations.no_diversity {
            loss.beta = 0.0;
        }
        loss
    }
}
