//! The finite-difference suite run by `linklearn gradcheck`: every tape op,
//! a full backbone pass with adapters, lateral composition, weight
//! generation, and the complete training loss on a tiny model.

use std::collections::BTreeMap;

use crate::adapter::{Activation, AdapterBank};
use crate::backbone::{Backbone, BackboneConfig, LAYERNORM_EPS};
use crate::compose::{self, ComposeMode};
use crate::data::{gen_synthetic, SyntheticSpec};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::hypernet::{infer_betas, BetaRole, BetaSet, TaskEmbedding, WeightMlp};
use crate::rng::{self, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamSet, Parameter, Tensor};
use crate::trainer::{ContinualState, Head, ModelConfig, Scheme, TrainConfig};

pub const SUITE_EPS: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteCheck {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub checks: Vec<SuiteCheck>,
}

impl SuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error() <= tol && self.checks.iter().all(|c| c.report.checked > 0)
    }
}

/// Two layers, `d_model` 8, on 8×8 single-channel images.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            image_h: 8,
            image_w: 8,
            channels: 1,
            patch: 4,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            layers: 2,
        },
        bottleneck: 2,
        activation: Activation::Relu,
        embed_dim: 4,
        mlp_hidden: vec![8],
    }
}

fn randn(r: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

/// Values bounded away from zero so kinked ops are not probed at the kink.
fn away_from_zero(r: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = randn(r, shape);
    for v in t.data_mut() {
        *v += 0.2 * v.signum();
    }
    t
}

/// `Σ r ⊙ x` with a fixed random `r`, so every output element matters.
fn project(tape: &mut Tape, x: Var, r: &Tensor) -> Result<Var> {
    let w = tape.leaf(r.clone());
    let y = tape.mul(x, w)?;
    Ok(tape.sum_all(y))
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

fn op_checks(r: &mut Rng) -> Result<Vec<SuiteCheck>> {
    let cases: Vec<(&str, Vec<Tensor>, OpFn)> = vec![
        ("matmul", vec![randn(r, &[3, 4]), randn(r, &[4, 2])], |t, v| t.matmul(v[0], v[1])),
        ("add", vec![randn(r, &[3, 4]), randn(r, &[3, 4])], |t, v| t.add(v[0], v[1])),
        ("sub", vec![randn(r, &[3, 4]), randn(r, &[3, 4])], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![randn(r, &[3, 4]), randn(r, &[3, 4])], |t, v| t.mul(v[0], v[1])),
        ("add_row", vec![randn(r, &[3, 4]), randn(r, &[4])], |t, v| t.add_row(v[0], v[1])),
        ("add_tiled", vec![randn(r, &[6, 4]), randn(r, &[3, 4])], |t, v| t.add_tiled(v[0], v[1])),
        ("scale", vec![randn(r, &[3, 4])], |t, v| Ok(t.scale(v[0], 0.7))),
        ("scale_by", vec![randn(r, &[3, 4]), Tensor::scalar(1.3)], |t, v| t.scale_by(v[0], v[1])),
        ("pick", vec![randn(r, &[1, 5])], |t, v| {
            let a = t.pick(v[0], 2)?;
            t.mul(a, a)
        }),
        ("concat", vec![randn(r, &[1, 3]), randn(r, &[1, 2])], |t, v| t.concat(v[0], v[1])),
        ("relu", vec![away_from_zero(r, &[3, 4])], |t, v| Ok(t.relu(v[0]))),
        ("gelu", vec![randn(r, &[3, 4])], |t, v| Ok(t.gelu(v[0]))),
        ("sum_all", vec![randn(r, &[3, 4])], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum_all(sq))
        }),
        ("layernorm", vec![randn(r, &[3, 4]), randn(r, &[4]), randn(r, &[4])], |t, v| {
            t.layernorm(v[0], v[1], v[2], LAYERNORM_EPS)
        }),
        ("attention", vec![randn(r, &[6, 4]), randn(r, &[6, 4]), randn(r, &[6, 4])], |t, v| {
            t.attention(v[0], v[1], v[2], 2, 2)
        }),
        ("prepend_cls", vec![randn(r, &[4, 3]), randn(r, &[1, 3])], |t, v| t.prepend_cls(v[0], v[1], 2)),
        ("select_rows", vec![randn(r, &[4, 3])], |t, v| t.select_rows(v[0], &[2, 0, 2])),
        ("softmax_cross_entropy", vec![randn(r, &[3, 4])], |t, v| {
            t.softmax_cross_entropy(v[0], &[1, 3, 0])
        }),
    ];
    let mut out = Vec::new();
    for (name, inputs, op) in cases {
        let mut params: Vec<Parameter> = inputs
            .into_iter()
            .enumerate()
            .map(|(i, t)| Parameter::new(format!("{name}.in{i}"), t))
            .collect();
        // output shape, to draw the projection
        let shape = {
            let mut tape = Tape::no_grad();
            let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
            let y = op(&mut tape, &vars)?;
            tape.shape(y).to_vec()
        };
        let proj = randn(r, &shape);
        let report = grad_check(&mut params, SUITE_EPS, |ps, tape| {
            let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
            let y = op(tape, &vars)?;
            project(tape, y, &proj)
        })?;
        out.push(SuiteCheck {
            name: format!("op/{name}"),
            report,
        });
    }
    Ok(out)
}

/// Adapters with random (nonzero) up projections.
fn live_bank(model: &ModelConfig, tasks: usize, seed: u64) -> Result<AdapterBank> {
    let mut bank = AdapterBank::new(model.adapter())?;
    let mut r = rng::stream(seed, "suite-bank", &[]);
    for t in 0..tasks {
        bank.add_task(t, seed)?;
        for a in &mut bank.adapters[t] {
            a.up_w.value = Tensor::randn(a.up_w.value.shape(), 0.5, &mut r);
            a.up_b.value = Tensor::randn(a.up_b.value.shape(), 0.1, &mut r);
            a.down_b.value = Tensor::randn(a.down_b.value.shape(), 0.3, &mut r);
        }
        if t + 1 < tasks {
            bank.freeze_task(t)?;
        }
    }
    Ok(bank)
}

struct BlockState {
    backbone: Backbone,
    bank: AdapterBank,
    head: Vec<Parameter>,
}

impl ParamSet for BlockState {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = self.backbone.params();
        out.extend(self.bank.params());
        out.extend(self.head.iter());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.backbone.params_mut();
        out.extend(self.bank.params_mut());
        out.extend(self.head.iter_mut());
        out
    }
}

fn block_check(model: &ModelConfig, seed: u64) -> Result<SuiteCheck> {
    let mut r = rng::stream(seed, "suite-block", &[]);
    let mut backbone = Backbone::init(model.backbone.clone(), seed)?;
    // larger weights than the default init so every path carries signal
    for p in backbone.params_mut() {
        let last = p.name.rsplit('.').next().unwrap_or_default();
        if last.starts_with('w') || last == "cls" || last == "pos" {
            p.value = Tensor::randn(p.value.shape(), 0.4, &mut r);
        }
    }
    let d = model.backbone.d_model;
    let mut state = BlockState {
        backbone,
        bank: live_bank(model, 1, seed)?,
        head: vec![
            Parameter::new("suite.head.w", Tensor::randn(&[d, 3], 0.5, &mut r)),
            Parameter::new("suite.head.b", Tensor::zeros(&[3])),
        ],
    };
    let images = Tensor::randn(&[2, model.backbone.pixels()], 1.0, &mut r);
    let report = grad_check(&mut state, SUITE_EPS, |s, tape| {
        let mut hooks = compose::hooks(ComposeMode::Standalone, 0, 1, &s.bank, None)?;
        let rep = s.backbone.forward(tape, &images, &mut hooks)?;
        let w = tape.param(&s.head[0]);
        let b = tape.param(&s.head[1]);
        let z = tape.matmul(rep, w)?;
        let z = tape.add_row(z, b)?;
        tape.softmax_cross_entropy(z, &[2, 0])
    })?;
    Ok(SuiteCheck {
        name: "block/backbone-with-adapters".into(),
        report,
    })
}

struct ComposeState {
    bank: AdapterBank,
    betas: BTreeMap<(usize, usize), Parameter>,
    h_bar: Parameter,
}

impl ParamSet for ComposeState {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = self.bank.params();
        out.extend(self.betas.values());
        out.push(&self.h_bar);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.bank.params_mut();
        out.extend(self.betas.values_mut());
        out.push(&mut self.h_bar);
        out
    }
}

fn compose_check(model: &ModelConfig, seed: u64) -> Result<SuiteCheck> {
    let mut r = rng::stream(seed, "suite-compose", &[]);
    let (t, m, layers) = (1, 3, model.backbone.layers);
    let mut bank = live_bank(model, m, seed)?;
    // unfreeze everything: gradients flow to every source adapter as well
    for p in bank.params_mut() {
        p.frozen = false;
    }
    let pairs = [(0, 1), (1, 1), (1, 2)];
    let betas = pairs
        .iter()
        .map(|&(a, b)| {
            let p = Parameter::new(format!("suite.beta.{a}.{b}"), Tensor::randn(&[1, layers], 1.0, &mut r));
            ((a, b), p)
        })
        .collect();
    let d = model.backbone.d_model;
    let mut state = ComposeState {
        bank,
        betas,
        h_bar: Parameter::new("suite.h_bar", Tensor::randn(&[5, d], 1.0, &mut r)),
    };
    let proj_train = randn(&mut r, &[5, d]);
    let proj_infer = randn(&mut r, &[5, d]);
    let report = grad_check(&mut state, SUITE_EPS, |s, tape| {
        let set = BetaSet {
            role: BetaRole::Infer,
            target: t,
            betas: s.betas.iter().map(|(k, p)| (*k, tape.param(p))).collect(),
        };
        let h = tape.param(&s.h_bar);
        let mut total: Option<Var> = None;
        for layer in 0..layers {
            let a = compose::compose_train(tape, t, layer, h, &s.bank, &set)?;
            let b = compose::compose_infer(tape, t, m, layer, h, &s.bank, &set)?;
            let la = project(tape, a, &proj_train)?;
            let lb = project(tape, b, &proj_infer)?;
            let sum = tape.add(la, lb)?;
            total = Some(match total {
                None => sum,
                Some(acc) => tape.add(acc, sum)?,
            });
        }
        Ok(total.expect("at least one layer"))
    })?;
    Ok(SuiteCheck {
        name: "compose/train-and-infer".into(),
        report,
    })
}

struct BetaState {
    mlp: WeightMlp,
    embeddings: Vec<TaskEmbedding>,
}

impl ParamSet for BetaState {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = self.mlp.params();
        out.extend(self.embeddings.iter().map(|e| &e.vec));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.mlp.params_mut();
        out.extend(self.embeddings.iter_mut().map(|e| &mut e.vec));
        out
    }
}

fn beta_check(model: &ModelConfig, seed: u64) -> Result<SuiteCheck> {
    let mut r = rng::stream(seed, "suite-beta", &[]);
    let mut mlp = WeightMlp::init(model.hypernet(), seed)?;
    for p in mlp.params_mut() {
        p.value = Tensor::randn(p.value.shape(), 0.7, &mut r);
    }
    let embeddings = (0..3)
        .map(|t| {
            let mut e = TaskEmbedding::init(t, model.embed_dim, seed);
            e.vec.value = Tensor::randn(e.vec.value.shape(), 1.0, &mut r);
            e
        })
        .collect();
    let mut state = BetaState { mlp, embeddings };
    let projections: Vec<Tensor> = (0..3).map(|_| randn(&mut r, &[1, model.backbone.layers])).collect();
    let report = grad_check(&mut state, SUITE_EPS, |s, tape| {
        let set = infer_betas(tape, 1, 3, &s.embeddings, &s.mlp)?;
        let mut total: Option<Var> = None;
        for (v, proj) in set.betas.values().zip(&projections) {
            let l = project(tape, *v, proj)?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        Ok(total.expect("pairs"))
    })?;
    Ok(SuiteCheck {
        name: "hypernet/beta-generation".into(),
        report,
    })
}

fn total_loss_check(model: &ModelConfig, seed: u64) -> Result<SuiteCheck> {
    let spec = SyntheticSpec {
        n_classes: 2,
        samples_per_class: 6,
        height: model.backbone.image_h,
        width: model.backbone.image_w,
        channels: model.backbone.channels,
        rank: 2,
        prototype_scale: 1.0,
        noise: 0.3,
        seed,
    };
    let data = gen_synthetic(&spec)?;
    let mut backbone = Backbone::init(model.backbone.clone(), seed)?;
    backbone.freeze_all();
    let mut state = ContinualState::new(model.clone(), Scheme::Linked, backbone, seed)?;
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 4,
        seed,
        ..TrainConfig::default()
    };
    state.train_task(0, &data, &cfg)?;

    // task 1 mid-training, with every trainable tensor away from its init
    let t = 1;
    let mut r = rng::stream(seed, "suite-total", &[]);
    state.bank.add_task(t, seed)?;
    for a in &mut state.bank.adapters[t] {
        a.up_w.value = Tensor::randn(a.up_w.value.shape(), 0.5, &mut r);
    }
    let mut head = Head::init(t, model.backbone.d_model, 2, seed);
    head.w.value = Tensor::randn(head.w.value.shape(), 0.5, &mut r);
    state.heads.push(head);
    state.embeddings.push(TaskEmbedding::init(t, model.embed_dim, seed));
    for p in state.mlp.params_mut() {
        for v in p.value.data_mut() {
            *v += 0.05 * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut r);
        }
    }
    // importances large enough that the penalty gradient is comparable to the task gradient
    for fi in state.fisher.fi.values_mut() {
        for v in fi.data_mut() {
            *v += 0.1;
        }
    }

    let idx: Vec<usize> = (0..4).collect();
    let images = crate::backbone::image_batch(&data, &idx);
    let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
    let report = grad_check(&mut state, SUITE_EPS, |s, tape| {
        Ok(s.total_loss(tape, &images, &labels, t, 5.0)?.0)
    })?;
    Ok(SuiteCheck {
        name: "loss/task-plus-ewc".into(),
        report,
    })
}

/// Runs every check on the tiny model.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let model = tiny_model();
    let mut r = rng::stream(seed, "suite-ops", &[]);
    let mut checks = op_checks(&mut r)?;
    checks.push(block_check(&model, seed)?);
    checks.push(compose_check(&model, seed)?);
    checks.push(beta_check(&model, seed)?);
    checks.push(total_loss_check(&model, seed)?);
    Ok(SuiteReport { checks })
}
