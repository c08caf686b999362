//! Weighted lateral composition of task adapters.
//!
//! For target task `t` at layer `k`:
//!
//! ```text
//! training:   h̃ = Σ_{p<t} β(p,t)_k · A_p(h̄) + β(t,t)_k · A_t(h̄)
//! inference:  h̃ = (training sum) + Σ_{t<s<m} β(t,s)_k · A_s(h̄)
//! ```
//!
//! Terms are summed in ascending task order, so the inference sum with no
//! later tasks is bitwise identical to the training sum.

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterBank;
use crate::backbone::Hook;
use crate::error::{Error, Result};
use crate::hypernet::BetaSet;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Bidirectional,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ComposeMode {
    /// Only task `t`'s adapter, unweighted.
    Standalone,
    TrainForward,
    InferForward,
    InferBidirectional,
    /// Every weight replaced by `k`.
    Constant { k: f64, direction: Direction },
}

impl ComposeMode {
    /// Report label.
    pub fn label(&self) -> &'static str {
        match self {
            ComposeMode::Standalone => "adapters",
            ComposeMode::TrainForward | ComposeMode::InferForward => "forward",
            ComposeMode::InferBidirectional => "bidirectional",
            ComposeMode::Constant {
                direction: Direction::Forward,
                ..
            } => "forward-k",
            ComposeMode::Constant {
                direction: Direction::Bidirectional,
                ..
            } => "bidirectional-k",
        }
    }

    pub fn needs_betas(&self) -> bool {
        matches!(
            self,
            ComposeMode::TrainForward | ComposeMode::InferForward | ComposeMode::InferBidirectional
        )
    }

    pub fn direction(&self) -> Direction {
        match self {
            ComposeMode::InferBidirectional => Direction::Bidirectional,
            ComposeMode::Constant { direction, .. } => *direction,
            _ => Direction::Forward,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Weight {
    Beta(Var),
    Const(f64),
}

fn weighted_sum(
    tape: &mut Tape,
    layer: usize,
    h_bar: Var,
    bank: &AdapterBank,
    terms: &[(usize, Weight)],
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(task, w) in terms {
        let out = bank.get(task, layer)?.forward(tape, h_bar)?;
        let term = match w {
            Weight::Beta(beta) => {
                let b = tape.pick(beta, layer)?;
                tape.scale_by(out, b)?
            }
            Weight::Const(k) => tape.scale(out, k),
        };
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::State("empty composition".into()))
}

fn sources(t: usize, m: usize, direction: Direction) -> Vec<(usize, (usize, usize))> {
    let mut out: Vec<(usize, (usize, usize))> = (0..=t).map(|p| (p, (p, t))).collect();
    if direction == Direction::Bidirectional {
        out.extend((t + 1..m).map(|s| (s, (t, s))));
    }
    out
}

/// Training-time composition over tasks `0..=t`.
pub fn compose_train(tape: &mut Tape, t: usize, layer: usize, h_bar: Var, bank: &AdapterBank, betas: &BetaSet) -> Result<Var> {
    let terms = sources(t, t + 1, Direction::Forward)
        .into_iter()
        .map(|(task, (a, b))| Ok((task, Weight::Beta(betas.get(a, b)?))))
        .collect::<Result<Vec<_>>>()?;
    weighted_sum(tape, layer, h_bar, bank, &terms)
}

/// Inference-time composition over all `m` tasks.
pub fn compose_infer(
    tape: &mut Tape,
    t: usize,
    m: usize,
    layer: usize,
    h_bar: Var,
    bank: &AdapterBank,
    betas: &BetaSet,
) -> Result<Var> {
    if t >= m {
        return Err(Error::Index(format!("task {t} out of range for {m} tasks")));
    }
    let terms = sources(t, m, Direction::Bidirectional)
        .into_iter()
        .map(|(task, (a, b))| Ok((task, Weight::Beta(betas.get(a, b)?))))
        .collect::<Result<Vec<_>>>()?;
    weighted_sum(tape, layer, h_bar, bank, &terms)
}

/// Either sum with every weight fixed to `k`.
pub fn compose_constant(
    tape: &mut Tape,
    t: usize,
    m: usize,
    layer: usize,
    h_bar: Var,
    bank: &AdapterBank,
    k: f64,
    direction: Direction,
) -> Result<Var> {
    if t >= m {
        return Err(Error::Index(format!("task {t} out of range for {m} tasks")));
    }
    let terms: Vec<_> = sources(t, m, direction)
        .into_iter()
        .map(|(task, _)| (task, Weight::Const(k)))
        .collect();
    weighted_sum(tape, layer, h_bar, bank, &terms)
}

/// One hook per layer realizing `mode` for target task `t` among `m` tasks.
///
/// `betas` must be present for the modes that use generated weights; for
/// forced-weight experiments any `BetaSet` of constant leaves works.
pub fn hooks<'a>(
    mode: ComposeMode,
    t: usize,
    m: usize,
    bank: &'a AdapterBank,
    betas: Option<&'a BetaSet>,
) -> Result<Vec<Hook<'a>>> {
    if mode.needs_betas() && betas.is_none() {
        return Err(Error::State(format!("mode {} needs generated weights", mode.label())));
    }
    let layers = bank.config.layers;
    Ok((0..layers)
        .map(|layer| -> Hook<'a> {
            Box::new(move |tape: &mut Tape, h_bar: Var| match mode {
                ComposeMode::Standalone => bank.get(t, layer)?.forward(tape, h_bar),
                ComposeMode::TrainForward | ComposeMode::InferForward => {
                    compose_train(tape, t, layer, h_bar, bank, betas.expect("checked"))
                }
                ComposeMode::InferBidirectional => {
                    compose_infer(tape, t, m, layer, h_bar, bank, betas.expect("checked"))
                }
                ComposeMode::Constant { k, direction } => {
                    compose_constant(tape, t, m, layer, h_bar, bank, k, direction)
                }
            })
        })
        .collect())
}
