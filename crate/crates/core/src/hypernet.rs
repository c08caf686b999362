//! Task embeddings and the weight MLP that turns an embedding pair into one
//! lateral-connection weight per transformer layer.
//!
//! The pair is always ordered chronologically: `β(p→t) = f([e_p ‖ e_t])` with
//! `p ≤ t`, both for forward weights during training and for backward weights
//! `β(t→s) = f([e_t ‖ e_s])`, `s > t`, at inference.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamSet, Parameter, Tensor};

pub const EMBEDDING_INIT_STD: f64 = 0.1;
/// Output bias at initialization, so every generated weight starts near 1.
pub const BETA_INIT_BIAS: f64 = 1.0;
const OUTPUT_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypernetConfig {
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    /// Output width; equals the backbone's layer count.
    pub layers: usize,
}

impl HypernetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.layers == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("hypernet widths must be at least 1".into()));
        }
        Ok(())
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![2 * self.embed_dim];
        w.extend_from_slice(&self.hidden);
        w.push(self.layers);
        w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Parameter,
    pub b: Parameter,
}

/// Fully connected stack with ReLU between layers and an identity output.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMlp {
    pub config: HypernetConfig,
    pub layers: Vec<Dense>,
}

impl WeightMlp {
    /// He-scaled hidden layers; small output weights with bias [`BETA_INIT_BIAS`].
    pub fn init(config: HypernetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        let mut r = rng::stream(seed, "weight-mlp", &[]);
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (widths[i], widths[i + 1]);
                let last = i + 1 == n;
                let std = if last { OUTPUT_INIT_STD } else { (2.0 / fan_in as f64).sqrt() };
                let bias = if last { BETA_INIT_BIAS } else { 0.0 };
                Dense {
                    w: Parameter::new(format!("mlp.l{i}.w"), Tensor::randn(&[fan_in, fan_out], std, &mut r)),
                    b: Parameter::new(format!("mlp.l{i}.b"), Tensor::full(&[fan_out], bias)),
                }
            })
            .collect();
        Ok(WeightMlp { config, layers })
    }

    /// `x` is `[1 × 2·embed_dim]`; returns `[1 × layers]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.param(&layer.w);
            let b = tape.param(&layer.b);
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if i + 1 < n {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Named snapshot of the current values.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.params()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }
}

impl ParamSet for WeightMlp {
    fn params(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskEmbedding {
    pub task: usize,
    /// `[1 × embed_dim]`.
    pub vec: Parameter,
}

impl TaskEmbedding {
    pub fn init(task: usize, embed_dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "task-embedding", &[task as u64]);
        TaskEmbedding {
            task,
            vec: Parameter::new(
                format!("embedding.t{task}"),
                Tensor::randn(&[1, embed_dim], EMBEDDING_INIT_STD, &mut r),
            ),
        }
    }
}

/// `f([e_early ‖ e_late])`, one weight per layer, shape `[1 × L]`.
pub fn gen_beta(tape: &mut Tape, mlp: &WeightMlp, e_early: Var, e_late: Var) -> Result<Var> {
    let d = mlp.config.embed_dim;
    for e in [e_early, e_late] {
        if tape.value(e).numel() != d {
            return Err(Error::dim("gen_beta", tape.shape(e), &[1, d]));
        }
    }
    let x = tape.concat(e_early, e_late)?;
    mlp.forward(tape, x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BetaRole {
    Train,
    Infer,
}

/// Generated weights keyed by chronologically ordered task pair `(early, late)`.
#[derive(Clone, Debug)]
pub struct BetaSet {
    pub role: BetaRole,
    pub target: usize,
    pub betas: BTreeMap<(usize, usize), Var>,
}

impl BetaSet {
    pub fn get(&self, early: usize, late: usize) -> Result<Var> {
        self.betas
            .get(&(early, late))
            .copied()
            .ok_or_else(|| Error::State(format!("missing beta for pair ({early}, {late})")))
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.betas.keys().copied().collect()
    }

    /// Values `β[(early, late)][layer]` read back from the tape.
    pub fn values(&self, tape: &Tape) -> BTreeMap<(usize, usize), Vec<f64>> {
        self.betas
            .iter()
            .map(|(k, v)| (*k, tape.value(*v).data().to_vec()))
            .collect()
    }
}

fn embedding(embeddings: &[TaskEmbedding], task: usize) -> Result<&TaskEmbedding> {
    embeddings
        .get(task)
        .filter(|e| e.task == task)
        .ok_or_else(|| Error::State(format!("missing embedding for task {task}")))
}

/// Forward weights for training task `t`: pairs `(p, t)` for every `p ≤ t`.
pub fn train_betas(tape: &mut Tape, t: usize, embeddings: &[TaskEmbedding], mlp: &WeightMlp) -> Result<BetaSet> {
    let et = embedding(embeddings, t)?;
    let vt = tape.param(&et.vec);
    let mut betas = BTreeMap::new();
    for p in 0..=t {
        let vp = if p == t { vt } else { tape.param(&embedding(embeddings, p)?.vec) };
        betas.insert((p, t), gen_beta(tape, mlp, vp, vt)?);
    }
    Ok(BetaSet {
        role: BetaRole::Train,
        target: t,
        betas,
    })
}

/// Forward and backward weights for evaluating task `t` after `m` tasks:
/// pairs `(p, t)` for `p ≤ t` and `(t, s)` for `t < s < m`.
pub fn infer_betas(tape: &mut Tape, t: usize, m: usize, embeddings: &[TaskEmbedding], mlp: &WeightMlp) -> Result<BetaSet> {
    if t >= m {
        return Err(Error::Index(format!("task {t} out of range for {m} tasks")));
    }
    if embeddings.len() < m {
        return Err(Error::State(format!("{} embeddings stored, {m} required", embeddings.len())));
    }
    let mut set = train_betas(tape, t, embeddings, mlp)?;
    let vt = tape.param(&embedding(embeddings, t)?.vec);
    for s in t + 1..m {
        let vs = tape.param(&embedding(embeddings, s)?.vec);
        set.betas.insert((t, s), gen_beta(tape, mlp, vt, vs)?);
    }
    set.role = BetaRole::Infer;
    Ok(set)
}
