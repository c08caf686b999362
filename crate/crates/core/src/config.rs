//! Flat TOML run configuration.
//!
//! Every key is optional; missing keys take the defaults below and unknown
//! keys are rejected. Command-line flags are applied on top of the file.

use serde::{Deserialize, Serialize};

use crate::adapter::Activation;
use crate::backbone::{BackboneConfig, PretrainConfig};
use crate::data::{parse_order, Benchmark, SyntheticSpec};
use crate::error::{Error, Result};
use crate::trainer::{ModelConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    // data
    pub data_seed: u64,
    pub image_size: usize,
    pub channels: usize,
    pub samples_per_class: usize,
    pub rank: usize,
    pub prototype_scale: f64,
    pub noise: f64,
    pub base_classes: usize,
    pub tasks: usize,
    pub classes_per_task: usize,

    // backbone
    pub patch: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,
    pub pretrain_seed: u64,

    // adapters and weight generator
    pub bottleneck: usize,
    pub activation: Activation,
    pub embed_dim: usize,
    pub mlp_hidden: Vec<usize>,

    // continual training
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub fisher_samples: usize,

    // run fan-out
    pub seeds: Vec<u64>,
    /// Task orders; empty runs the identity order only.
    pub orders: Vec<String>,
    /// Extra λ values; empty uses `lambda` only.
    pub lambdas: Vec<f64>,
    /// Adds a run with every lateral weight fixed to this value.
    pub constant_k: Option<f64>,
}

impl Default for Config {
    fn default() -> Self {
        let bench = Benchmark::synth_10_5(0);
        let bb = BackboneConfig::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let pre = PretrainConfig::default();
        Config {
            data_seed: 0,
            image_size: bb.image_h,
            channels: bb.channels,
            samples_per_class: bench.synthetic.samples_per_class,
            rank: bench.synthetic.rank,
            prototype_scale: bench.synthetic.prototype_scale,
            noise: bench.synthetic.noise,
            base_classes: bench.base_classes,
            tasks: bench.tasks,
            classes_per_task: bench.classes_per_task,
            patch: bb.patch,
            d_model: bb.d_model,
            n_heads: bb.n_heads,
            d_ff: bb.d_ff,
            layers: bb.layers,
            pretrain_epochs: pre.epochs,
            pretrain_lr: pre.lr,
            pretrain_batch_size: pre.batch_size,
            pretrain_seed: pre.seed,
            bottleneck: model.bottleneck,
            activation: model.activation,
            embed_dim: model.embed_dim,
            mlp_hidden: model.mlp_hidden,
            lr: train.lr,
            epochs: train.epochs,
            batch_size: train.batch_size,
            lambda: train.lambda,
            gamma: train.gamma,
            fisher_samples: train.fisher_samples,
            seeds: vec![0, 1, 2, 3, 4],
            orders: Vec::new(),
            lambdas: Vec::new(),
            constant_k: None,
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            image_h: self.image_size,
            image_w: self.image_size,
            channels: self.channels,
            patch: self.patch,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            layers: self.layers,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone(),
            bottleneck: self.bottleneck,
            activation: self.activation,
            embed_dim: self.embed_dim,
            mlp_hidden: self.mlp_hidden.clone(),
        }
    }

    pub fn train(&self, seed: u64, lambda: f64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lambda,
            gamma: self.gamma,
            seed,
            fisher_samples: self.fisher_samples,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            batch_size: self.pretrain_batch_size,
            seed: self.pretrain_seed,
        }
    }

    pub fn benchmark(&self) -> Benchmark {
        Benchmark {
            base_classes: self.base_classes,
            tasks: self.tasks,
            classes_per_task: self.classes_per_task,
            synthetic: SyntheticSpec {
                n_classes: self.base_classes + self.tasks * self.classes_per_task,
                samples_per_class: self.samples_per_class,
                height: self.image_size,
                width: self.image_size,
                channels: self.channels,
                rank: self.rank,
                prototype_scale: self.prototype_scale,
                noise: self.noise,
                seed: self.data_seed,
            },
        }
    }

    /// λ values to run, in order.
    pub fn lambda_values(&self) -> Vec<f64> {
        if self.lambdas.is_empty() {
            vec![self.lambda]
        } else {
            self.lambdas.clone()
        }
    }

    /// Parsed task orders; the identity order when none is given.
    pub fn task_orders(&self) -> Result<Vec<Vec<usize>>> {
        if self.orders.is_empty() {
            return Ok(vec![(0..self.tasks).collect()]);
        }
        self.orders.iter().map(|o| parse_order(o)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let key = |k: &str, msg: String| Error::Config(format!("{k}: {msg}"));
        self.model().validate()?;
        self.train(0, self.lambda).validate()?;
        self.benchmark().validate()?;
        if self.pretrain_batch_size == 0 {
            return Err(key("pretrain_batch_size", "must be at least 1".into()));
        }
        if !(self.pretrain_lr > 0.0) {
            return Err(key("pretrain_lr", format!("must be positive, got {}", self.pretrain_lr)));
        }
        if self.seeds.is_empty() {
            return Err(key("seeds", "at least one seed is required".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(key("seeds", format!("duplicate seeds in {:?}", self.seeds)));
        }
        if let Some(bad) = self.lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(key("lambdas", format!("{bad} is not a valid weight")));
        }
        if let Some(k) = self.constant_k {
            if !k.is_finite() {
                return Err(key("constant_k", format!("{k} is not finite")));
            }
        }
        for order in self.task_orders()? {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            if sorted != (0..self.tasks).collect::<Vec<_>>() {
                return Err(key("orders", format!("{order:?} is not a permutation of {} tasks", self.tasks)));
            }
        }
        Ok(())
    }
}
