//! Per-task bottleneck adapters `h̃ = U(act(D(h̄)))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamSet, Parameter, Tensor};

pub const ADAPTER_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub d_model: usize,
    pub bottleneck: usize,
    pub layers: usize,
    pub activation: Activation,
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bottleneck == 0 || self.bottleneck >= self.d_model {
            return Err(Error::Config(format!(
                "adapter bottleneck must satisfy 0 < {} < d_model {}",
                self.bottleneck, self.d_model
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("adapter layers must be at least 1".into()));
        }
        Ok(())
    }

    /// Parameters of one layer's adapter.
    pub fn per_layer_params(&self) -> usize {
        let (d, b) = (self.d_model, self.bottleneck);
        d * b + b + b * d + d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub down_w: Parameter,
    pub down_b: Parameter,
    pub up_w: Parameter,
    pub up_b: Parameter,
    pub activation: Activation,
}

impl Adapter {
    /// Gaussian down projection, zero up projection: the initial output is exactly zero.
    pub fn init(cfg: &AdapterConfig, task: usize, layer: usize, seed: u64) -> Self {
        let (d, b) = (cfg.d_model, cfg.bottleneck);
        let mut r = rng::stream(seed, "adapter", &[task as u64, layer as u64]);
        let name = |s: &str| format!("adapter.t{task}.l{layer}.{s}");
        Adapter {
            down_w: Parameter::new(name("down.w"), Tensor::randn(&[d, b], ADAPTER_INIT_STD, &mut r)),
            down_b: Parameter::new(name("down.b"), Tensor::zeros(&[b])),
            up_w: Parameter::new(name("up.w"), Tensor::zeros(&[b, d])),
            up_b: Parameter::new(name("up.b"), Tensor::zeros(&[d])),
            activation: cfg.activation,
        }
    }

    /// Token-wise `up(act(down(h_bar)))` on `[rows × d_model]`.
    pub fn forward(&self, tape: &mut Tape, h_bar: Var) -> Result<Var> {
        let (_, d) = tape.value(h_bar).dims2();
        let expect = self.down_w.value.shape()[0];
        if d != expect {
            return Err(Error::dim("adapter_forward", tape.shape(h_bar), self.down_w.value.shape()));
        }
        let dw = tape.param(&self.down_w);
        let db = tape.param(&self.down_b);
        let z = tape.matmul(h_bar, dw)?;
        let z = tape.add_row(z, db)?;
        let z = match self.activation {
            Activation::Identity => z,
            Activation::Relu => tape.relu(z),
        };
        let uw = tape.param(&self.up_w);
        let ub = tape.param(&self.up_b);
        let y = tape.matmul(z, uw)?;
        tape.add_row(y, ub)
    }
}

impl ParamSet for Adapter {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.down_w, &self.down_b, &self.up_w, &self.up_b]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.down_w, &mut self.down_b, &mut self.up_w, &mut self.up_b]
    }
}

/// `adapters[task][layer]`, frozen task by task.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBank {
    pub config: AdapterConfig,
    pub adapters: Vec<Vec<Adapter>>,
    /// Number of leading tasks whose adapters are frozen.
    pub frozen_tasks: usize,
}

impl AdapterBank {
    pub fn new(config: AdapterConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdapterBank {
            config,
            adapters: Vec::new(),
            frozen_tasks: 0,
        })
    }

    pub fn tasks(&self) -> usize {
        self.adapters.len()
    }

    pub fn get(&self, task: usize, layer: usize) -> Result<&Adapter> {
        self.adapters
            .get(task)
            .and_then(|a| a.get(layer))
            .ok_or_else(|| Error::State(format!("no adapter for task {task} at layer {layer}")))
    }

    /// Adds one adapter per layer for `task`, which must be the next task in sequence.
    pub fn add_task(&mut self, task: usize, seed: u64) -> Result<()> {
        if task != self.frozen_tasks || task != self.adapters.len() {
            return Err(Error::Protocol(format!(
                "cannot add adapters for task {task}: {} tasks frozen, {} present",
                self.frozen_tasks,
                self.adapters.len()
            )));
        }
        let layer_adapters = (0..self.config.layers)
            .map(|k| Adapter::init(&self.config, task, k, seed))
            .collect();
        self.adapters.push(layer_adapters);
        Ok(())
    }

    pub fn freeze_task(&mut self, task: usize) -> Result<()> {
        if task != self.frozen_tasks || task >= self.adapters.len() {
            return Err(Error::Protocol(format!(
                "cannot freeze task {task}: {} tasks frozen, {} present",
                self.frozen_tasks,
                self.adapters.len()
            )));
        }
        for a in &mut self.adapters[task] {
            a.freeze_all();
        }
        self.frozen_tasks += 1;
        Ok(())
    }

    pub fn task_params_mut(&mut self, task: usize) -> Vec<&mut Parameter> {
        self.adapters
            .get_mut(task)
            .map(|layers| layers.iter_mut().flat_map(|a| a.params_mut()).collect())
            .unwrap_or_default()
    }
}

impl ParamSet for AdapterBank {
    fn params(&self) -> Vec<&Parameter> {
        self.adapters.iter().flatten().flat_map(|a| a.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.adapters
            .iter_mut()
            .flatten()
            .flat_map(|a| a.params_mut())
            .collect()
    }
}

/// Parameters added per task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub adapters: usize,
    pub head: usize,
    pub embedding: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.adapters + self.head + self.embedding
    }
}

/// Per-task growth: `L` adapters, a linear head over `head_classes`, and one task embedding.
pub fn added_param_count(cfg: &AdapterConfig, head_classes: usize, embed_dim: usize) -> Result<ParamCount> {
    cfg.validate()?;
    Ok(ParamCount {
        adapters: cfg.layers * cfg.per_layer_params(),
        head: cfg.d_model * head_classes + head_classes,
        embedding: embed_dim,
    })
}
