use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::captioner::RewardWeights;
use crate::error::{Error, Result};

/// Every setting of a run, as one flat key-value document.
///
/// Defaults follow the reference configuration (thresholds 2 and 0.7, reward
/// weights 1 / 0.5 / 1, learning rate 1e-5, batch 256, width 512). [`RunConfig::toy`]
/// scales the captioning stage down to something a single core trains in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Existing training split; empty means generate one from the `data_*` settings.
    pub train_dir: String,
    /// Existing evaluation split; empty means generate one.
    pub test_dir: String,
    pub data_seed: u64,
    pub categories: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub corpus_size: usize,
    pub vocab_min_count: usize,

    pub wsor_seed: u64,
    pub wsor_channels: [usize; 4],
    pub wsor_pointwise_from: usize,
    pub wsor_epochs: usize,
    pub wsor_lr: f64,
    pub wsor_batch_size: usize,
    pub object_threshold: f64,
    pub mask_threshold: f64,
    pub min_area_fraction: f64,

    pub gnn_seed: u64,
    pub gnn_node_dim: usize,
    pub gnn_edge_dim: usize,
    pub gnn_hidden: usize,
    pub gnn_blocks: usize,
    pub gnn_batch_norm: bool,
    pub gnn_residual: bool,
    pub gnn_epochs: usize,
    pub gnn_lr: f64,
    pub gnn_batch_size: usize,
    pub relation_threshold: f64,

    pub uic_seed: u64,
    pub latent: usize,
    pub embed: usize,
    pub hidden: usize,
    pub grid: usize,
    pub freeze_encoder: bool,
    pub disc_embed: usize,
    pub disc_hidden: usize,
    pub uic_epochs: usize,
    pub uic_lr: f64,
    pub uic_batch_size: usize,
    pub max_len: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub disc_lr: f64,
    pub adversarial_weight: f64,
    pub baseline_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub probe_size: usize,

    pub pseudo_seed: u64,
    pub pseudo_epochs: usize,
    pub pseudo_lr: f64,
    pub pseudo_batch_size: usize,
    /// Train the pseudo-caption model from a fresh initialisation rather than the unpaired weights.
    pub pseudo_reinit: bool,

    pub use_rel: bool,
    pub use_uno: bool,
    pub use_pseudo: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train_dir: String::new(),
            test_dir: String::new(),
            data_seed: 1,
            categories: 4,
            train_size: 1000,
            test_size: 200,
            corpus_size: 2000,
            vocab_min_count: 4,

            wsor_seed: 0,
            wsor_channels: [8, 16, 24, 32],
            wsor_pointwise_from: 2,
            wsor_epochs: 20,
            wsor_lr: 3e-3,
            wsor_batch_size: 16,
            object_threshold: 2.0,
            mask_threshold: 0.4,
            min_area_fraction: 0.01,

            gnn_seed: 0,
            gnn_node_dim: 32,
            gnn_edge_dim: 32,
            gnn_hidden: 128,
            gnn_blocks: 3,
            gnn_batch_norm: true,
            gnn_residual: true,
            gnn_epochs: 30,
            gnn_lr: 1e-3,
            gnn_batch_size: 256,
            relation_threshold: 0.7,

            uic_seed: 0,
            latent: 512,
            embed: 512,
            hidden: 512,
            grid: 2,
            freeze_encoder: true,
            disc_embed: 512,
            disc_hidden: 512,
            uic_epochs: 30,
            uic_lr: 1e-5,
            uic_batch_size: 256,
            max_len: 16,
            pretrain_epochs: 3,
            pretrain_lr: 1e-3,
            disc_lr: 1e-5,
            adversarial_weight: 1.0,
            baseline_decay: 0.9,
            alpha: 1.0,
            beta: 0.5,
            lambda: 1.0,
            probe_size: 64,

            pseudo_seed: 0,
            pseudo_epochs: 10,
            pseudo_lr: 1e-5,
            pseudo_batch_size: 256,
            pseudo_reinit: true,

            use_rel: true,
            use_uno: true,
            use_pseudo: true,
        }
    }
}

impl RunConfig {
    /// Small captioner with faster learning rates and a 10-token cap, for the synthetic corpus.
    pub fn toy() -> Self {
        RunConfig {
            latent: 32,
            embed: 32,
            hidden: 64,
            disc_embed: 16,
            disc_hidden: 32,
            uic_lr: 3e-4,
            uic_batch_size: 32,
            max_len: 10,
            pretrain_lr: 3e-3,
            disc_lr: 3e-3,
            pseudo_lr: 3e-3,
            pseudo_batch_size: 32,
            ..RunConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.categories == 0 {
            return fail("categories must be positive");
        }
        if self.train_dir.is_empty() && (self.train_size == 0 || self.corpus_size == 0) {
            return fail("generated training split needs images and corpus sentences");
        }
        if self.test_dir.is_empty() && self.test_size == 0 {
            return fail("generated test split needs images");
        }
        if self.max_len < 2 {
            return fail("max_len must be at least 2");
        }
        if !self.reward_weights().is_valid() {
            return fail("reward weights must be finite and non-negative");
        }
        for (name, lr) in [
            ("wsor_lr", self.wsor_lr),
            ("gnn_lr", self.gnn_lr),
            ("uic_lr", self.uic_lr),
            ("pretrain_lr", self.pretrain_lr),
            ("disc_lr", self.disc_lr),
            ("pseudo_lr", self.pseudo_lr),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return fail("baseline_decay must lie in [0, 1)");
        }
        Ok(())
    }

    /// Reward weights after the ablation switches: no relation reward without
    /// `use_rel`, no unrecognised-object penalty without `use_uno`.
    pub fn reward_weights(&self) -> RewardWeights {
        RewardWeights {
            alpha: self.alpha,
            beta: if self.use_rel { self.beta } else { 0.0 },
            lambda: if self.use_uno { self.lambda } else { 0.0 },
        }
    }

    /// Apply one `key=value` override, e.g. `uno=off` or `uic_epochs=5`.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let switch = match value {
            "on" | "true" => Some(true),
            "off" | "false" => Some(false),
            _ => None,
        };
        match (key, switch) {
            ("rel", Some(b)) => self.use_rel = b,
            ("uno", Some(b)) => self.use_uno = b,
            ("pseudo", Some(b)) => self.use_pseudo = b,
            _ => {
                let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("own output parses");
                let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
                    .map(|mut t| t.remove("v").expect("key present"))
                    .unwrap_or_else(|_| toml::Value::String(value.to_string()));
                if !table.contains_key(key) {
                    return Err(Error::Config(format!("unknown setting {key:?}")));
                }
                table.insert(key.to_string(), parsed);
                *self = RunConfig::from_toml(&toml::to_string(&table).expect("table serializes"))?;
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        digest(&crate::json::to_sorted_string(self))
    }
}

pub(crate) fn digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// The five rows of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Obj,
    ObjRel,
    ObjUno,
    ObjUnoRel,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Obj, Variant::ObjRel, Variant::ObjUno, Variant::ObjUnoRel, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Obj => "Obj",
            Variant::ObjRel => "Obj+Rel",
            Variant::ObjUno => "Obj+UnO",
            Variant::ObjUnoRel => "Obj+UnO+Rel",
            Variant::Full => "WS-UIC",
        }
    }

    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let (rel, uno, pseudo) = match self {
            Variant::Obj => (false, false, false),
            Variant::ObjRel => (true, false, false),
            Variant::ObjUno => (false, true, false),
            Variant::ObjUnoRel => (true, true, false),
            Variant::Full => (true, true, true),
        };
        RunConfig {
            use_rel: rel,
            use_uno: uno,
            use_pseudo: pseudo,
            ..base.clone()
        }
    }
}
