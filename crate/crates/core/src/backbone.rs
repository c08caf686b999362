//! Small ViT-style transformer with a per-layer adapter hook.
//!
//! Each block runs, in order:
//!
//! ```text
//! h'  = h_in + MHSA(Norm₁(h_in))
//! h̄   = Norm₂(h')
//! h̃   = hook(h̄)
//! ĥ   = h̄ + h̃
//! h   = h̄ + FFN(ĥ)
//! ```
//!
//! The output residual is taken from `h̄`, not from `ĥ`.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::optim::sgd_step;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamSet, Parameter, Tensor};

pub const LAYERNORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Std for a `[fan_in, fan_out]` projection: `1/sqrt(fan_in)`.
pub fn fan_in_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub layers: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_h: 16,
            image_w: 16,
            channels: 1,
            patch: 4,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            layers: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_h", self.image_h),
            ("image_w", self.image_w),
            ("channels", self.channels),
            ("patch", self.patch),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("layers", self.layers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.image_h % self.patch != 0 || self.image_w % self.patch != 0 {
            return Err(Error::Config(format!(
                "patch {} must divide image {}x{}",
                self.patch, self.image_h, self.image_w
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        (self.image_h / self.patch) * (self.image_w / self.patch)
    }

    /// Patches plus the classification token.
    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn pixels(&self) -> usize {
        self.image_h * self.image_w * self.channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_gain: Parameter,
    pub ln1_bias: Parameter,
    pub wq: Parameter,
    pub bq: Parameter,
    pub wk: Parameter,
    pub bk: Parameter,
    pub wv: Parameter,
    pub bv: Parameter,
    pub wo: Parameter,
    pub bo: Parameter,
    pub ln2_gain: Parameter,
    pub ln2_bias: Parameter,
    pub ff1_w: Parameter,
    pub ff1_b: Parameter,
    pub ff2_w: Parameter,
    pub ff2_b: Parameter,
}

impl Block {
    fn init(cfg: &BackboneConfig, k: usize, rng: &mut rng::Rng) -> Self {
        let d = cfg.d_model;
        let name = |s: &str| format!("backbone.block{k}.{s}");
        let w = |s: &str, shape: &[usize], rng: &mut rng::Rng| {
            Parameter::new(name(s), Tensor::randn(shape, fan_in_std(shape[0]), rng))
        };
        let z = |s: &str, n: usize| Parameter::new(name(s), Tensor::zeros(&[n]));
        let one = |s: &str, n: usize| Parameter::new(name(s), Tensor::full(&[n], 1.0));
        Block {
            ln1_gain: one("ln1.gain", d),
            ln1_bias: z("ln1.bias", d),
            wq: w("attn.wq", &[d, d], rng),
            bq: z("attn.bq", d),
            wk: w("attn.wk", &[d, d], rng),
            bk: z("attn.bk", d),
            wv: w("attn.wv", &[d, d], rng),
            bv: z("attn.bv", d),
            wo: w("attn.wo", &[d, d], rng),
            bo: z("attn.bo", d),
            ln2_gain: one("ln2.gain", d),
            ln2_bias: z("ln2.bias", d),
            ff1_w: w("ffn.w1", &[d, cfg.d_ff], rng),
            ff1_b: z("ffn.b1", cfg.d_ff),
            ff2_w: w("ffn.w2", &[cfg.d_ff, d], rng),
            ff2_b: z("ffn.b2", d),
        }
    }
}

impl ParamSet for Block {
    fn params(&self) -> Vec<&Parameter> {
        vec![
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.ff1_w,
            &self.ff1_b,
            &self.ff2_w,
            &self.ff2_b,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.ff1_w,
            &mut self.ff1_b,
            &mut self.ff2_w,
            &mut self.ff2_b,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub patch_w: Parameter,
    pub patch_b: Parameter,
    pub cls: Parameter,
    pub pos: Parameter,
    pub blocks: Vec<Block>,
}

/// Tape handles of every intermediate of one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockActivations {
    pub h_in: Var,
    pub h_prime: Var,
    pub h_bar: Var,
    pub h_tilde: Var,
    pub h_hat: Var,
    pub h_out: Var,
}

/// Per-layer adapter hook: receives `h̄` and returns `h̃` of the same shape.
pub type Hook<'a> = Box<dyn FnMut(&mut Tape, Var) -> Result<Var> + 'a>;

/// Hooks that contribute nothing (`h̃ = 0`).
pub fn zero_hooks<'a>(layers: usize) -> Vec<Hook<'a>> {
    (0..layers)
        .map(|_| -> Hook<'a> {
            Box::new(|tape: &mut Tape, h_bar: Var| {
                let z = Tensor::zeros(tape.shape(h_bar));
                Ok(tape.leaf(z))
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Classification-token representations `[batch × d_model]`.
    pub cls: Var,
    pub tokens: Var,
    pub blocks: Vec<BlockActivations>,
}

/// Cuts `[batch × pixels]` row-major `h×w×c` images into `[(batch·patches) × patch_dim]`.
pub fn patchify(cfg: &BackboneConfig, images: &Tensor) -> Result<Tensor> {
    let (batch, pixels) = images.dims2();
    if pixels != cfg.pixels() || batch == 0 {
        return Err(Error::Config(format!(
            "image batch {:?} does not match {}x{}x{}",
            images.shape(),
            cfg.image_h,
            cfg.image_w,
            cfg.channels
        )));
    }
    let (p, c, w) = (cfg.patch, cfg.channels, cfg.image_w);
    let (gh, gw) = (cfg.image_h / p, cfg.image_w / p);
    let mut out = Vec::with_capacity(batch * cfg.patches() * cfg.patch_dim());
    for b in 0..batch {
        let img = images.row(b);
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..p {
                    let y = py * p + dy;
                    let start = (y * w + px * p) * c;
                    out.extend_from_slice(&img[start..start + p * c]);
                }
            }
        }
    }
    Tensor::new(vec![batch * cfg.patches(), cfg.patch_dim()], out)
}

impl Backbone {
    /// Fan-in scaled Gaussian projections, Gaussian(0, 0.02) class token and
    /// positions, zero biases, unit norm gains.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "backbone", &[]);
        let d = config.d_model;
        let patch_w = Parameter::new(
            "backbone.patch.w",
            Tensor::randn(&[config.patch_dim(), d], fan_in_std(config.patch_dim()), &mut rng),
        );
        let patch_b = Parameter::new("backbone.patch.b", Tensor::zeros(&[d]));
        let cls = Parameter::new("backbone.cls", Tensor::randn(&[1, d], INIT_STD, &mut rng));
        let pos = Parameter::new(
            "backbone.pos",
            Tensor::randn(&[config.tokens(), d], INIT_STD, &mut rng),
        );
        let blocks = (0..config.layers)
            .map(|k| Block::init(&config, k, &mut rng))
            .collect();
        Ok(Backbone {
            config,
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|p| p.frozen)
    }

    /// Patch projection, classification token, positional embeddings.
    /// Returns `[(batch·tokens) × d_model]`.
    pub fn patch_embed(&self, tape: &mut Tape, images: &Tensor) -> Result<Var> {
        let batch = images.dims2().0;
        let patches = tape.leaf(patchify(&self.config, images)?);
        let w = tape.param(&self.patch_w);
        let b = tape.param(&self.patch_b);
        let proj = tape.matmul(patches, w)?;
        let proj = tape.add_row(proj, b)?;
        let cls = tape.param(&self.cls);
        let tokens = tape.prepend_cls(proj, cls, batch)?;
        let pos = tape.param(&self.pos);
        tape.add_tiled(tokens, pos)
    }

    fn linear(tape: &mut Tape, x: Var, w: &Parameter, b: &Parameter) -> Result<Var> {
        let vw = tape.param(w);
        let vb = tape.param(b);
        let y = tape.matmul(x, vw)?;
        tape.add_row(y, vb)
    }

    /// Runs block `k` (0-based) on `[(batch·tokens) × d_model]` input.
    pub fn block_forward(
        &self,
        tape: &mut Tape,
        k: usize,
        h_in: Var,
        batch: usize,
        hook: &mut Hook<'_>,
    ) -> Result<BlockActivations> {
        let blk = self.blocks.get(k).ok_or_else(|| {
            Error::Index(format!("layer {k} of {}", self.blocks.len()))
        })?;
        let g1 = tape.param(&blk.ln1_gain);
        let b1 = tape.param(&blk.ln1_bias);
        let normed = tape.layernorm(h_in, g1, b1, LAYERNORM_EPS)?;
        let q = Self::linear(tape, normed, &blk.wq, &blk.bq)?;
        let kk = Self::linear(tape, normed, &blk.wk, &blk.bk)?;
        let v = Self::linear(tape, normed, &blk.wv, &blk.bv)?;
        let att = tape.attention(q, kk, v, batch, self.config.n_heads)?;
        let mhsa = Self::linear(tape, att, &blk.wo, &blk.bo)?;
        let h_prime = tape.add(h_in, mhsa)?;

        let g2 = tape.param(&blk.ln2_gain);
        let b2 = tape.param(&blk.ln2_bias);
        let h_bar = tape.layernorm(h_prime, g2, b2, LAYERNORM_EPS)?;

        let h_tilde = hook(tape, h_bar)?;
        if tape.shape(h_tilde) != tape.shape(h_bar) {
            return Err(Error::Composition {
                expected: tape.shape(h_bar).to_vec(),
                got: tape.shape(h_tilde).to_vec(),
            });
        }
        let h_hat = tape.add(h_bar, h_tilde)?;

        let f1 = Self::linear(tape, h_hat, &blk.ff1_w, &blk.ff1_b)?;
        let act = tape.gelu(f1);
        let ffn = Self::linear(tape, act, &blk.ff2_w, &blk.ff2_b)?;
        let h_out = tape.add(h_bar, ffn)?;
        Ok(BlockActivations {
            h_in,
            h_prime,
            h_bar,
            h_tilde,
            h_hat,
            h_out,
        })
    }

    /// Full pass over a `[batch × pixels]` image batch with one hook per layer.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        hooks: &mut [Hook<'_>],
    ) -> Result<ForwardTrace> {
        if hooks.len() != self.config.layers {
            return Err(Error::Config(format!(
                "expected {} adapter hooks, got {}",
                self.config.layers,
                hooks.len()
            )));
        }
        let batch = images.dims2().0;
        let tokens = self.patch_embed(tape, images)?;
        let mut h = tokens;
        let mut blocks = Vec::with_capacity(hooks.len());
        for (k, hook) in hooks.iter_mut().enumerate() {
            let acts = self.block_forward(tape, k, h, batch, hook)?;
            h = acts.h_out;
            blocks.push(acts);
        }
        let t = self.config.tokens();
        let rows: Vec<usize> = (0..batch).map(|b| b * t).collect();
        let cls = tape.select_rows(h, &rows)?;
        Ok(ForwardTrace {
            cls,
            tokens,
            blocks,
        })
    }

    /// Classification-token representation `[batch × d_model]` after the last block.
    pub fn forward(&self, tape: &mut Tape, images: &Tensor, hooks: &mut [Hook<'_>]) -> Result<Var> {
        Ok(self.forward_traced(tape, images, hooks)?.cls)
    }
}

impl ParamSet for Backbone {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.patch_w, &self.patch_b, &self.cls, &self.pos];
        for b in &self.blocks {
            out.extend(b.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.cls,
            &mut self.pos,
        ];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            lr: 0.01,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    /// Mean training loss at initialization, then after each epoch.
    pub losses: Vec<f64>,
}

/// Batched image tensor for the given sample indices.
pub(crate) fn image_batch(data: &Dataset, idx: &[usize]) -> Tensor {
    let px = data.pixels();
    let mut out = Vec::with_capacity(idx.len() * px);
    for &i in idx {
        out.extend(data.image(i).iter().map(|&v| v as f64));
    }
    Tensor::new(vec![idx.len(), px], out).expect("batch shape")
}

fn full_loss(bb: &Backbone, head: &[Parameter; 2], data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(128) {
        let mut tape = Tape::no_grad();
        let x = image_batch(data, chunk);
        let mut hooks = zero_hooks(bb.config.layers);
        let rep = bb.forward(&mut tape, &x, &mut hooks)?;
        let w = tape.param(&head[0]);
        let b = tape.param(&head[1]);
        let logits = tape.matmul(rep, w)?;
        let logits = tape.add_row(logits, b)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let loss = tape.softmax_cross_entropy(logits, &labels)?;
        total += tape.value(loss).item() * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Trains a freshly initialized backbone plus a throwaway linear head on the
/// base task, then freezes every backbone parameter.
pub fn pretrain_backbone(
    config: BackboneConfig,
    data: &Dataset,
    opts: &PretrainConfig,
) -> Result<(Backbone, PretrainReport)> {
    if data.is_empty() {
        return Err(Error::Data("pretraining dataset is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if data.height != config.image_h || data.width != config.image_w || data.channels != config.channels {
        return Err(Error::Config(format!(
            "dataset images {}x{}x{} do not match backbone config",
            data.height, data.width, data.channels
        )));
    }
    let mut bb = Backbone::init(config, opts.seed)?;
    let mut hrng = rng::stream(opts.seed, "pretrain-head", &[]);
    let mut head = [
        Parameter::new(
            "pretrain.head.w",
            Tensor::randn(&[bb.config.d_model, data.n_classes], INIT_STD, &mut hrng),
        ),
        Parameter::new("pretrain.head.b", Tensor::zeros(&[data.n_classes])),
    ];
    let mut losses = vec![full_loss(&bb, &head, data)?];
    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut srng = rng::stream(opts.seed, "pretrain-shuffle", &[epoch as u64]);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut srng);
        for chunk in order.chunks(opts.batch_size) {
            let mut tape = Tape::new();
            let x = image_batch(data, chunk);
            let mut hooks = zero_hooks(bb.config.layers);
            let rep = bb.forward(&mut tape, &x, &mut hooks)?;
            let w = tape.param(&head[0]);
            let b = tape.param(&head[1]);
            let logits = tape.matmul(rep, w)?;
            let logits = tape.add_row(logits, b)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            if !tape.value(loss).all_finite() {
                return Err(Error::Numeric("pretraining loss".into()));
            }
            let grads = tape.backward(loss)?;
            sgd_step(bb.params_mut(), &grads, opts.lr)?;
            sgd_step(head.iter_mut(), &grads, opts.lr)?;
        }
        losses.push(full_loss(&bb, &head, data)?);
    }
    bb.freeze_all();
    Ok((bb, PretrainReport { losses }))
}
