//! Online elastic weight consolidation for the weight MLP.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::hypernet::WeightMlp;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamSet, Tensor};

/// Diagonal Fisher importances and the anchor they protect.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FisherState {
    pub fi: BTreeMap<String, Tensor>,
    pub anchor: BTreeMap<String, Tensor>,
    /// Last task folded into `fi`, if any.
    pub last_task: Option<usize>,
}

impl FisherState {
    pub fn is_empty(&self) -> bool {
        self.fi.is_empty()
    }

    /// Adds task importances with decay `gamma` and moves the anchor to `mlp`.
    pub fn consolidate(&mut self, task: usize, new_fi: BTreeMap<String, Tensor>, gamma: f64, mlp: &WeightMlp) -> Result<()> {
        self.fi = if self.fi.is_empty() {
            new_fi
        } else {
            accumulate_fisher(&self.fi, &new_fi, gamma)?
        };
        self.anchor = mlp.snapshot();
        self.last_task = Some(task);
        Ok(())
    }
}

/// Mean of element-wise squared per-sample gradients.
pub fn mean_squared_grads<I>(samples: I) -> Result<BTreeMap<String, Tensor>>
where
    I: IntoIterator<Item = Result<BTreeMap<String, Tensor>>>,
{
    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut n = 0usize;
    for g in samples {
        let g = g?;
        for (name, t) in g {
            let entry = acc.entry(name).or_insert_with(|| Tensor::zeros(t.shape()));
            if entry.shape() != t.shape() {
                return Err(Error::dim("fisher", entry.shape(), t.shape()));
            }
            for (a, v) in entry.data_mut().iter_mut().zip(t.data()) {
                *a += v * v;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("fisher estimate needs at least one sample".into()));
    }
    for t in acc.values_mut() {
        for v in t.data_mut() {
            *v /= n as f64;
        }
    }
    Ok(acc)
}

/// `gamma · prev + new`, element-wise.
pub fn accumulate_fisher(
    prev: &BTreeMap<String, Tensor>,
    new: &BTreeMap<String, Tensor>,
    gamma: f64,
) -> Result<BTreeMap<String, Tensor>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("fisher decay gamma must be in [0, 1], got {gamma}")));
    }
    let mut out = BTreeMap::new();
    for (name, n) in new {
        let merged = match prev.get(name) {
            Some(p) => {
                if p.shape() != n.shape() {
                    return Err(Error::dim("accumulate_fisher", p.shape(), n.shape()));
                }
                let data = p.data().iter().zip(n.data()).map(|(a, b)| gamma * a + b).collect();
                Tensor::new(n.shape().to_vec(), data)?
            }
            None => n.clone(),
        };
        out.insert(name.clone(), merged);
    }
    for (name, p) in prev {
        if !out.contains_key(name) {
            let data = p.data().iter().map(|a| gamma * a).collect();
            out.insert(name.clone(), Tensor::new(p.shape().to_vec(), data)?);
        }
    }
    Ok(out)
}

/// `λ · Σ_j fi_j · (anchor_j − θ_j)²` over the MLP parameters; zero before any task is consolidated.
pub fn ewc_penalty(tape: &mut Tape, mlp: &WeightMlp, fisher: &FisherState, lambda: f64) -> Result<Var> {
    if fisher.is_empty() {
        return Ok(tape.leaf(Tensor::scalar(0.0)));
    }
    let params = mlp.params();
    if params.len() != fisher.fi.len() || params.len() != fisher.anchor.len() {
        return Err(Error::State(format!(
            "fisher state covers {} tensors, weight MLP has {}",
            fisher.fi.len(),
            params.len()
        )));
    }
    let mut total: Option<Var> = None;
    for p in params {
        let (fi, anchor) = match (fisher.fi.get(&p.name), fisher.anchor.get(&p.name)) {
            (Some(f), Some(a)) if f.shape() == p.value.shape() && a.shape() == p.value.shape() => (f, a),
            _ => {
                return Err(Error::State(format!(
                    "fisher/anchor entry for {} is missing or has drifted shape",
                    p.name
                )))
            }
        };
        let theta = tape.param(p);
        let anchor = tape.leaf(anchor.clone());
        let fi = tape.leaf(fi.clone());
        let diff = tape.sub(anchor, theta)?;
        let sq = tape.mul(diff, diff)?;
        let weighted = tape.mul(fi, sq)?;
        let s = tape.sum_all(weighted);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    let total = total.expect("non-empty");
    Ok(tape.scale(total, lambda))
}

/// Applies the penalty part of one step of size `lr` exactly:
/// `θ ← (θ + 2·lr·λ·fi·anchor) / (1 + 2·lr·λ·fi)`.
///
/// This is the implicit update for `λ · fi · (anchor − θ)²`, so it never
/// overshoots the anchor however stiff the penalty is. An explicit step on the
/// same term diverges once `lr·λ·fi > 1`.
pub fn penalty_step(mlp: &mut WeightMlp, fisher: &FisherState, lambda: f64, lr: f64) -> Result<()> {
    if fisher.is_empty() || lambda == 0.0 {
        return Ok(());
    }
    for p in mlp.params_mut() {
        if p.frozen {
            continue;
        }
        let (fi, anchor) = match (fisher.fi.get(&p.name), fisher.anchor.get(&p.name)) {
            (Some(f), Some(a)) if f.shape() == p.value.shape() && a.shape() == p.value.shape() => (f, a),
            _ => {
                return Err(Error::State(format!(
                    "fisher/anchor entry for {} is missing or has drifted shape",
                    p.name
                )))
            }
        };
        for ((w, f), a) in p.value.data_mut().iter_mut().zip(fi.data()).zip(anchor.data()) {
            let k = 2.0 * lr * lambda * f;
            *w = (*w + k * a) / (1.0 + k);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypernet::{Dense, HypernetConfig};
    use crate::tensor::Parameter;

    fn map(pairs: &[(&str, Vec<f64>)]) -> BTreeMap<String, Tensor> {
        pairs
            .iter()
            .map(|(n, v)| (n.to_string(), Tensor::vector(v.clone())))
            .collect()
    }

    fn two_param_mlp(w: [f64; 2]) -> WeightMlp {
        WeightMlp {
            config: HypernetConfig {
                embed_dim: 1,
                hidden: vec![],
                layers: 1,
            },
            layers: vec![Dense {
                w: Parameter::new("w", Tensor::new(vec![2, 1], w.to_vec()).unwrap()),
                b: Parameter::new("b", Tensor::zeros(&[1])),
            }],
        }
    }

    #[test]
    fn accumulate_rules() {
        let prev = map(&[("a", vec![1.0])]);
        let new = map(&[("a", vec![2.0])]);
        assert_eq!(accumulate_fisher(&prev, &new, 1.0).unwrap()["a"].data(), &[3.0]);
        assert_eq!(accumulate_fisher(&prev, &new, 0.0).unwrap()["a"].data(), &[2.0]);
        assert_eq!(accumulate_fisher(&prev, &new, 0.5).unwrap()["a"].data(), &[2.5]);
        let bad = map(&[("a", vec![2.0, 1.0])]);
        assert!(matches!(accumulate_fisher(&prev, &bad, 1.0), Err(Error::Dimension { .. })));
        assert!(accumulate_fisher(&prev, &new, 1.5).is_err());
    }

    #[test]
    fn single_sample_squared_gradient() {
        let fi = mean_squared_grads([Ok(map(&[("theta", vec![2.0])]))]).unwrap();
        assert_eq!(fi["theta"].data(), &[4.0]);
    }

    #[test]
    fn mean_is_order_invariant() {
        let a = map(&[("x", vec![1.0, -3.0])]);
        let b = map(&[("x", vec![0.5, 2.0])]);
        let f1 = mean_squared_grads([Ok(a.clone()), Ok(b.clone())]).unwrap();
        let f2 = mean_squared_grads([Ok(b), Ok(a)]).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1["x"].data(), &[0.625, 6.5]);
    }

    #[test]
    fn empty_sample_is_data_error() {
        let none: Vec<Result<BTreeMap<String, Tensor>>> = vec![];
        assert!(matches!(mean_squared_grads(none), Err(Error::Data(_))));
    }

    fn state_for(mlp: &WeightMlp, fi_w: [f64; 2], anchor_w: [f64; 2]) -> FisherState {
        let mut fi = BTreeMap::new();
        fi.insert("w".to_string(), Tensor::new(vec![2, 1], fi_w.to_vec()).unwrap());
        fi.insert("b".to_string(), Tensor::zeros(&[1]));
        let mut anchor = mlp.snapshot();
        anchor.insert("w".to_string(), Tensor::new(vec![2, 1], anchor_w.to_vec()).unwrap());
        FisherState {
            fi,
            anchor,
            last_task: Some(0),
        }
    }

    fn penalty(mlp: &WeightMlp, fs: &FisherState, lambda: f64) -> f64 {
        let mut tape = Tape::new();
        let v = ewc_penalty(&mut tape, mlp, fs, lambda).unwrap();
        tape.value(v).item()
    }

    #[test]
    fn penalty_hand_value() {
        let mlp = two_param_mlp([1.0, 1.0]);
        let fs = state_for(&mlp, [1.0, 2.0], [0.0, 0.0]);
        assert_eq!(penalty(&mlp, &fs, 0.5), 1.5);
        assert_eq!(penalty(&mlp, &fs, 0.0), 0.0);
    }

    #[test]
    fn penalty_zero_at_anchor_and_before_first_task() {
        let mlp = two_param_mlp([0.3, -0.8]);
        let fs = state_for(&mlp, [5.0, 2.0], [0.3, -0.8]);
        assert_eq!(penalty(&mlp, &fs, 100.0), 0.0);
        assert_eq!(penalty(&mlp, &FisherState::default(), 100.0), 0.0);
    }

    #[test]
    fn shape_drift_is_state_error() {
        let mlp = two_param_mlp([0.3, -0.8]);
        let mut fs = state_for(&mlp, [5.0, 2.0], [0.3, -0.8]);
        fs.anchor.insert("w".into(), Tensor::zeros(&[3, 1]));
        let mut tape = Tape::new();
        assert!(matches!(ewc_penalty(&mut tape, &mlp, &fs, 1.0), Err(Error::State(_))));
    }

    #[test]
    fn penalty_step_hand_value() {
        let mut mlp = two_param_mlp([1.0, 1.0]);
        let fs = state_for(&mlp, [1.0, 0.0], [0.0, 0.0]);
        penalty_step(&mut mlp, &fs, 2.0, 0.25).unwrap();
        // k = 2·0.25·2·1 = 1, so (1 + 0) / 2; the zero-importance weight stays put.
        assert_eq!(mlp.layers[0].w.value.data(), &[0.5, 1.0]);
    }

    #[test]
    fn penalty_step_never_crosses_anchor() {
        let mut mlp = two_param_mlp([1.0, -1.0]);
        let fs = state_for(&mlp, [1e6, 3.0], [0.0, 0.0]);
        for _ in 0..50 {
            penalty_step(&mut mlp, &fs, 100.0, 0.1).unwrap();
            let w = mlp.layers[0].w.value.data();
            assert!(w[0] >= 0.0 && w[0] < 1.0 && w[1] <= 0.0 && w[1] > -1.0, "{w:?}");
        }
    }

    #[test]
    fn penalty_step_matches_explicit_step_when_soft() {
        let mlp = two_param_mlp([0.7, -0.2]);
        let fs = state_for(&mlp, [0.3, 1.1], [0.1, 0.4]);
        let (lambda, lr) = (1.0, 1e-4);
        let mut implicit = mlp.clone();
        penalty_step(&mut implicit, &fs, lambda, lr).unwrap();
        let mut tape = Tape::new();
        let v = ewc_penalty(&mut tape, &mlp, &fs, lambda).unwrap();
        let g = tape.backward(v).unwrap();
        let gw = g.get("w").unwrap().data();
        for (i, w) in mlp.layers[0].w.value.data().iter().enumerate() {
            let explicit = w - lr * gw[i];
            assert!((implicit.layers[0].w.value.data()[i] - explicit).abs() < 1e-7);
        }
    }
}
