//! Sequential task training, freezing, and prediction in every composition mode.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::adapter::{Activation, AdapterBank, AdapterConfig};
use crate::backbone::{image_batch, Backbone, BackboneConfig, INIT_STD};
use crate::compose::{self, ComposeMode, Direction};
use crate::data::{Dataset, TaskSplit};
use crate::error::{Error, Result};
use crate::ewc::{ewc_penalty, mean_squared_grads, penalty_step, FisherState};
use crate::hypernet::{infer_betas, train_betas, BetaRole, BetaSet, HypernetConfig, TaskEmbedding, WeightMlp};
use crate::metrics::{eval_accuracy, AccuracyMatrix};
use crate::optim::sgd_step;
use crate::rng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{ParamSet, Parameter, Tensor};

/// Architecture of everything trained on top of the frozen backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub bottleneck: usize,
    pub activation: Activation,
    pub embed_dim: usize,
    pub mlp_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            bottleneck: 8,
            activation: Activation::Relu,
            embed_dim: 8,
            mlp_hidden: vec![16, 8],
        }
    }
}

impl ModelConfig {
    pub fn adapter(&self) -> AdapterConfig {
        AdapterConfig {
            d_model: self.backbone.d_model,
            bottleneck: self.bottleneck,
            layers: self.backbone.layers,
            activation: self.activation,
        }
    }

    pub fn hypernet(&self) -> HypernetConfig {
        HypernetConfig {
            embed_dim: self.embed_dim,
            hidden: self.mlp_hidden.clone(),
            layers: self.backbone.layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.adapter().validate()?;
        self.hypernet().validate()
    }
}

/// How task adapters are connected while training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Scheme {
    /// Independent adapters, no lateral connections.
    Standalone,
    /// Weights generated by the MLP from task embeddings, EWC on the MLP.
    Linked,
    /// Lateral connections with every weight fixed to `k`.
    Constant { k: f64 },
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Standalone => "adapters",
            Scheme::Linked => "linked",
            Scheme::Constant { .. } => "constant",
        }
    }

    pub fn train_mode(&self) -> ComposeMode {
        match *self {
            Scheme::Standalone => ComposeMode::Standalone,
            Scheme::Linked => ComposeMode::TrainForward,
            Scheme::Constant { k } => ComposeMode::Constant {
                k,
                direction: Direction::Forward,
            },
        }
    }

    /// Mode used to score a task right after it is trained.
    pub fn during_mode(&self) -> ComposeMode {
        match self.train_mode() {
            ComposeMode::TrainForward => ComposeMode::InferForward,
            m => m,
        }
    }

    /// Modes evaluated once the whole sequence is trained.
    pub fn end_modes(&self) -> Vec<ComposeMode> {
        match *self {
            Scheme::Standalone => vec![ComposeMode::Standalone],
            Scheme::Linked => vec![ComposeMode::InferForward, ComposeMode::InferBidirectional],
            Scheme::Constant { k } => vec![
                ComposeMode::Constant {
                    k,
                    direction: Direction::Forward,
                },
                ComposeMode::Constant {
                    k,
                    direction: Direction::Bidirectional,
                },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub seed: u64,
    /// Samples used for the Fisher estimate; 0 uses the whole training set.
    pub fisher_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            epochs: 3,
            batch_size: 32,
            lambda: 100.0,
            gamma: 1.0,
            seed: 0,
            fisher_samples: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must be in [0, 1], got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Task classifier head `d_model → classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub w: Parameter,
    pub b: Parameter,
}

impl Head {
    pub fn init(task: usize, d_model: usize, classes: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "head", &[task as u64]);
        Head {
            w: Parameter::new(format!("head.t{task}.w"), Tensor::randn(&[d_model, classes], INIT_STD, &mut r)),
            b: Parameter::new(format!("head.t{task}.b"), Tensor::zeros(&[classes])),
        }
    }

    pub fn classes(&self) -> usize {
        self.b.value.numel()
    }
}

impl ParamSet for Head {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w, &mut self.b]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub task_loss: f64,
    pub penalty: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    /// Parameter names that received gradients at any step.
    pub touched: BTreeSet<String>,
}

/// Everything a continual run owns.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinualState {
    pub model: ModelConfig,
    pub scheme: Scheme,
    pub seed: u64,
    pub backbone: Backbone,
    pub bank: AdapterBank,
    pub heads: Vec<Head>,
    pub embeddings: Vec<TaskEmbedding>,
    pub mlp: WeightMlp,
    pub fisher: FisherState,
}

/// Per-layer weight values keyed by `(early, late)` task pair.
pub type BetaValues = BTreeMap<(usize, usize), Vec<f64>>;

/// Weights `self_w` on `(t, t)` and `cross_w` on every other pair touching `t`.
pub fn forced_betas(t: usize, m: usize, layers: usize, self_w: f64, cross_w: f64) -> BetaValues {
    let mut out = BTreeMap::new();
    for p in 0..t {
        out.insert((p, t), vec![cross_w; layers]);
    }
    out.insert((t, t), vec![self_w; layers]);
    for s in t + 1..m {
        out.insert((t, s), vec![cross_w; layers]);
    }
    out
}

impl ContinualState {
    /// Fresh state on a frozen backbone; the weight MLP is seeded from `seed`.
    pub fn new(model: ModelConfig, scheme: Scheme, backbone: Backbone, seed: u64) -> Result<Self> {
        model.validate()?;
        if backbone.config != model.backbone {
            return Err(Error::Config("backbone config does not match model config".into()));
        }
        if !backbone.is_frozen() {
            return Err(Error::Protocol("backbone must be frozen before continual training".into()));
        }
        Ok(ContinualState {
            bank: AdapterBank::new(model.adapter())?,
            mlp: WeightMlp::init(model.hypernet(), seed)?,
            model,
            scheme,
            seed,
            backbone,
            heads: Vec::new(),
            embeddings: Vec::new(),
            fisher: FisherState::default(),
        })
    }

    pub fn tasks_trained(&self) -> usize {
        self.bank.frozen_tasks
    }

    fn check_task(&self, t: usize) -> Result<()> {
        if t >= self.heads.len() {
            return Err(Error::Index(format!("task {t} has not been trained ({} tasks)", self.heads.len())));
        }
        Ok(())
    }

    fn betas_for(&self, tape: &mut Tape, mode: ComposeMode, t: usize) -> Result<Option<BetaSet>> {
        Ok(match mode {
            ComposeMode::TrainForward | ComposeMode::InferForward => {
                Some(train_betas(tape, t, &self.embeddings, &self.mlp)?)
            }
            ComposeMode::InferBidirectional => {
                Some(infer_betas(tape, t, self.bank.tasks(), &self.embeddings, &self.mlp)?)
            }
            _ => None,
        })
    }

    fn logits_with(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        t: usize,
        mode: ComposeMode,
        betas: Option<&BetaSet>,
    ) -> Result<Var> {
        let head = self
            .heads
            .get(t)
            .ok_or_else(|| Error::Index(format!("no head for task {t}")))?;
        let m = self.bank.tasks();
        let mut hooks = compose::hooks(mode, t, m, &self.bank, betas)?;
        let rep = self.backbone.forward(tape, images, &mut hooks)?;
        let w = tape.param(&head.w);
        let b = tape.param(&head.b);
        let z = tape.matmul(rep, w)?;
        tape.add_row(z, b)
    }

    /// Builds the logits `[batch × classes_t]` for task `t` on `tape`.
    pub fn logits(&self, tape: &mut Tape, images: &Tensor, t: usize, mode: ComposeMode) -> Result<Var> {
        let betas = self.betas_for(tape, mode, t)?;
        self.logits_with(tape, images, t, mode, betas.as_ref())
    }

    /// Cross-entropy of task `t`'s head under `mode`.
    pub fn task_loss(&self, tape: &mut Tape, images: &Tensor, labels: &[usize], t: usize, mode: ComposeMode) -> Result<Var> {
        let logits = self.logits(tape, images, t, mode)?;
        tape.softmax_cross_entropy(logits, labels)
    }

    /// Task loss plus the EWC penalty on the weight MLP.
    pub fn total_loss(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        labels: &[usize],
        t: usize,
        lambda: f64,
    ) -> Result<(Var, Var, Var)> {
        let task = self.task_loss(tape, images, labels, t, self.scheme.train_mode())?;
        let penalty = match self.scheme {
            Scheme::Linked => ewc_penalty(tape, &self.mlp, &self.fisher, lambda)?,
            _ => tape.leaf(Tensor::scalar(0.0)),
        };
        let total = tape.add(task, penalty)?;
        Ok((total, task, penalty))
    }

    fn check_mode(&self, t: usize, mode: ComposeMode) -> Result<()> {
        self.check_task(t)?;
        if mode.direction() == Direction::Bidirectional && self.tasks_trained() < self.bank.tasks() {
            return Err(Error::Protocol("bidirectional prediction needs every task trained".into()));
        }
        Ok(())
    }

    /// Logits for task `t`; never mutates the state.
    pub fn predict(&self, images: &Tensor, t: usize, mode: ComposeMode) -> Result<Tensor> {
        self.check_mode(t, mode)?;
        let mut tape = Tape::no_grad();
        let out = self.logits(&mut tape, images, t, mode)?;
        Ok(tape.value(out).clone())
    }

    /// Logits with explicitly supplied lateral weights instead of generated ones.
    pub fn predict_with_betas(&self, images: &Tensor, t: usize, direction: Direction, betas: &BetaValues) -> Result<Tensor> {
        let mode = match direction {
            Direction::Forward => ComposeMode::InferForward,
            Direction::Bidirectional => ComposeMode::InferBidirectional,
        };
        self.check_mode(t, mode)?;
        let mut tape = Tape::no_grad();
        let mut set = BetaSet {
            role: BetaRole::Infer,
            target: t,
            betas: BTreeMap::new(),
        };
        for (&pair, vals) in betas {
            if vals.len() != self.model.backbone.layers {
                return Err(Error::dim("predict_with_betas", &[vals.len()], &[self.model.backbone.layers]));
            }
            set.betas.insert(pair, tape.leaf(Tensor::vector(vals.clone())));
        }
        let out = self.logits_with(&mut tape, images, t, mode, Some(&set))?;
        Ok(tape.value(out).clone())
    }

    /// Generated lateral weights for evaluating task `t` (all pairs, no training).
    pub fn beta_values(&self, t: usize) -> Result<BetaValues> {
        let mut tape = Tape::no_grad();
        let set = infer_betas(&mut tape, t, self.tasks_trained(), &self.embeddings, &self.mlp)?;
        Ok(set.values(&tape))
    }

    fn trainable_names(&self, t: usize) -> BTreeSet<String> {
        let mut names: BTreeSet<String> = self.bank.adapters[t]
            .iter()
            .flat_map(|a| a.params())
            .chain(self.heads[t].params())
            .map(|p| p.name.clone())
            .collect();
        if self.scheme == Scheme::Linked {
            names.insert(self.embeddings[t].vec.name.clone());
            names.extend(self.mlp.params().iter().map(|p| p.name.clone()));
        }
        names
    }

    fn step(&mut self, t: usize, grads: &Gradients, lr: f64) -> Result<()> {
        let linked = self.scheme == Scheme::Linked;
        let mut params: Vec<&mut Parameter> = self.bank.task_params_mut(t);
        params.extend(self.heads[t].params_mut());
        if linked {
            params.push(&mut self.embeddings[t].vec);
            params.extend(self.mlp.params_mut());
        }
        sgd_step(params, grads, lr)
    }

    /// Trains task `t` on `data`, then stores and freezes its adapters, head and embedding.
    ///
    /// Each batch takes an SGD step on the task loss, then linked runs apply the
    /// EWC penalty to the weight MLP with [`penalty_step`]. Afterwards linked
    /// runs fold the task's Fisher information into the EWC state and move the
    /// anchor to the current MLP weights.
    pub fn train_task(&mut self, t: usize, data: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
        cfg.validate()?;
        if t != self.tasks_trained() || self.bank.tasks() != t {
            return Err(Error::Protocol(format!(
                "task {t} arrived but {} tasks are trained",
                self.tasks_trained()
            )));
        }
        if data.is_empty() {
            return Err(Error::Data(format!("task {t} has no training data")));
        }
        let bb = &self.model.backbone;
        if (data.height, data.width, data.channels) != (bb.image_h, bb.image_w, bb.channels) {
            return Err(Error::Data(format!(
                "task {t} images are {}x{}x{}, backbone expects {}x{}x{}",
                data.height, data.width, data.channels, bb.image_h, bb.image_w, bb.channels
            )));
        }

        self.bank.add_task(t, self.seed)?;
        self.heads.push(Head::init(t, bb.d_model, data.n_classes, self.seed));
        if self.scheme == Scheme::Linked {
            self.embeddings.push(TaskEmbedding::init(t, self.model.embed_dim, self.seed));
        }
        let allowed = self.trainable_names(t);

        let mut log = TrainLog::default();
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..cfg.epochs {
            let mut r = rng::stream(self.seed, "shuffle", &[t as u64, epoch as u64]);
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
            for chunk in order.chunks(cfg.batch_size) {
                let images = image_batch(data, chunk);
                let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
                let mut tape = Tape::new();
                let (total, task, penalty) = self.total_loss(&mut tape, &images, &labels, t, cfg.lambda)?;
                if !tape.value(total).all_finite() {
                    return Err(Error::Numeric(format!("loss of task {t}")));
                }
                let grads = tape.backward(task)?;
                if let Some(stray) = grads.names().find(|n| !allowed.contains(*n)) {
                    return Err(Error::State(format!("gradient reached non-trainable parameter {stray}")));
                }
                log.touched.extend(grads.names().map(str::to_string));
                log.steps.push(StepLog {
                    task_loss: tape.value(task).item(),
                    penalty: tape.value(penalty).item(),
                });
                self.step(t, &grads, cfg.lr)?;
                if self.scheme == Scheme::Linked {
                    penalty_step(&mut self.mlp, &self.fisher, cfg.lambda, cfg.lr)?;
                }
            }
        }

        self.bank.freeze_task(t)?;
        self.heads[t].freeze_all();
        if let Some(e) = self.embeddings.get_mut(t) {
            e.vec.frozen = true;
        }
        if self.scheme == Scheme::Linked {
            let fi = estimate_fisher(self, t, data, cfg.fisher_samples)?;
            let mlp = self.mlp.clone();
            self.fisher.consolidate(t, fi, cfg.gamma, &mlp)?;
        }
        Ok(log)
    }
}

/// Mean squared per-sample gradient of task `t`'s loss with respect to the
/// weight MLP only, using the true labels.
///
/// `cap` limits the number of samples (0 = all); samples are drawn by a
/// seeded shuffle so a cap does not bias toward the first classes.
pub fn estimate_fisher(state: &ContinualState, t: usize, data: &Dataset, cap: usize) -> Result<BTreeMap<String, Tensor>> {
    if data.is_empty() {
        return Err(Error::Data("fisher estimate needs at least one sample".into()));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let mut r = rng::stream(state.seed, "fisher", &[t as u64]);
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut r);
    if cap > 0 {
        idx.truncate(cap);
    }
    let mlp_names: Vec<(String, Vec<usize>)> = state
        .mlp
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec()))
        .collect();
    let mode = ComposeMode::TrainForward;
    let samples = idx.iter().map(|&i| {
        let images = image_batch(data, &[i]);
        let mut tape = Tape::new();
        let loss = state.task_loss(&mut tape, &images, &[data.labels[i]], t, mode)?;
        let grads = tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, shape) in &mlp_names {
            let g = grads.get(name).cloned().unwrap_or_else(|| Tensor::zeros(shape));
            out.insert(name.clone(), g);
        }
        Ok(out)
    });
    mean_squared_grads(samples)
}

impl ParamSet for ContinualState {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = self.backbone.params();
        out.extend(self.bank.params());
        out.extend(self.heads.iter().flat_map(|h| h.params()));
        out.extend(self.embeddings.iter().map(|e| &e.vec));
        out.extend(self.mlp.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.backbone.params_mut();
        out.extend(self.bank.params_mut());
        out.extend(self.heads.iter_mut().flat_map(|h| h.params_mut()));
        out.extend(self.embeddings.iter_mut().map(|e| &mut e.vec));
        out.extend(self.mlp.params_mut());
        out
    }
}

/// Trains every task of `split` in order and records accuracies.
///
/// Each task is scored on its test set right after training (the "during"
/// column), and every task is scored again in each of the scheme's end modes
/// once the sequence is complete.
pub fn run_sequence(state: &mut ContinualState, split: &TaskSplit, cfg: &TrainConfig) -> Result<AccuracyMatrix> {
    let during_mode = state.scheme.during_mode();
    let mut during = Vec::with_capacity(split.len());
    for (t, task) in split.tasks.iter().enumerate() {
        state.train_task(t, &task.train, cfg)?;
        during.push(eval_accuracy(state, t, &task.test, during_mode)?);
    }
    let mut end = BTreeMap::new();
    for mode in state.scheme.end_modes() {
        let accs = split
            .tasks
            .iter()
            .enumerate()
            .map(|(t, task)| eval_accuracy(state, t, &task.test, mode))
            .collect::<Result<Vec<_>>>()?;
        end.insert(mode.label().to_string(), accs);
    }
    Ok(AccuracyMatrix {
        run: state.scheme.name().to_string(),
        during_mode: during_mode.label().to_string(),
        during,
        end,
    })
}

/// Re-scores the end modes of a trained state (used to verify checkpoints).
pub fn end_accuracies(state: &ContinualState, split: &TaskSplit) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut end = BTreeMap::new();
    for mode in state.scheme.end_modes() {
        let accs = split
            .tasks
            .iter()
            .enumerate()
            .map(|(t, task)| eval_accuracy(state, t, &task.test, mode))
            .collect::<Result<Vec<_>>>()?;
        end.insert(mode.label().to_string(), accs);
    }
    Ok(end)
}
