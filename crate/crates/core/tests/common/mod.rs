#![allow(dead_code)]

use linklearn::backbone::{pretrain_backbone, Backbone};
use linklearn::config::Config;
use linklearn::data::TaskSplit;

/// A configuration small enough to train end to end in well under a second.
pub fn tiny_config() -> Config {
    Config {
        image_size: 8,
        patch: 4,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        layers: 2,
        bottleneck: 2,
        embed_dim: 4,
        mlp_hidden: vec![8],
        base_classes: 2,
        tasks: 3,
        classes_per_task: 2,
        samples_per_class: 30,
        prototype_scale: 0.3,
        pretrain_epochs: 2,
        pretrain_lr: 0.01,
        epochs: 2,
        batch_size: 8,
        seeds: vec![0],
        ..Config::default()
    }
}

pub struct Setup {
    pub cfg: Config,
    pub backbone: Backbone,
    pub split: TaskSplit,
}

pub fn setup(cfg: Config) -> Setup {
    let bench = cfg.benchmark();
    let (base, continual) = bench.generate().unwrap();
    let (backbone, _) = pretrain_backbone(cfg.backbone(), &base, &cfg.pretrain()).unwrap();
    let split = bench.split(&continual).unwrap();
    Setup { cfg, backbone, split }
}

pub fn tiny() -> Setup {
    setup(tiny_config())
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
