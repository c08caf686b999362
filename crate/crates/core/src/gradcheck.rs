//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::ParamSet;

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Worst element per parameter, in registration order.
    pub per_param: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.per_param
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn eval<S, F>(state: &S, f: &mut F) -> Result<f64>
where
    F: FnMut(&S, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::no_grad();
    let out = f(state, &mut tape)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::Rank(v.shape().to_vec()));
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::Numeric("grad_check objective".into()));
    }
    Ok(x)
}

/// Compares tape gradients of `f` against central differences for every
/// element of every non-frozen parameter in `state`.
///
/// `f` must build the same scalar expression each time it is called; the
/// state is restored bitwise after each perturbation.
pub fn grad_check<S, F>(state: &mut S, eps: f64, mut f: F) -> Result<GradCheckReport>
where
    S: ParamSet,
    F: FnMut(&S, &mut Tape) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Config(format!("grad_check eps must be positive, got {eps}")));
    }
    let targets: Vec<(usize, String, usize)> = state
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.frozen)
        .map(|(i, p)| (i, p.name.clone(), p.value.numel()))
        .collect();
    if targets.is_empty() {
        return Ok(GradCheckReport::default());
    }

    let mut tape = Tape::new();
    let loss = f(state, &mut tape)?;
    if !tape.value(loss).all_finite() {
        return Err(Error::Numeric("grad_check objective".into()));
    }
    let grads = tape.backward(loss)?;
    drop(tape);

    let mut report = GradCheckReport::default();
    for (pi, name, numel) in targets {
        let analytic = grads.get(&name).map(|g| g.data().to_vec());
        let mut worst: Option<GradCheckEntry> = None;
        for idx in 0..numel {
            let orig = state.params()[pi].value.data()[idx];
            state.params_mut()[pi].value.data_mut()[idx] = orig + eps;
            let plus = eval(state, &mut f);
            state.params_mut()[pi].value.data_mut()[idx] = orig - eps;
            let minus = eval(state, &mut f);
            state.params_mut()[pi].value.data_mut()[idx] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic.as_ref().map_or(0.0, |g| g[idx]);
            if !a.is_finite() {
                return Err(Error::Numeric(format!("gradient of {name}[{idx}]")));
            }
            let err = rel_error(a, numeric);
            report.checked += 1;
            if worst.as_ref().map_or(true, |w| err > w.rel_error) {
                worst = Some(GradCheckEntry {
                    name: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error: err,
                });
            }
        }
        if let Some(w) = worst {
            report.max_rel_error = report.max_rel_error.max(w.rel_error);
            report.per_param.push(w);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Parameter, Tensor};
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    #[test]
    fn linear_model_is_exact() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
        let x = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let y = Tensor::randn(&[5, 2], 1.0, &mut rng);
        let mut params = vec![
            Parameter::new("w", Tensor::randn(&[3, 2], 1.0, &mut rng)),
            Parameter::new("b", Tensor::randn(&[2], 1.0, &mut rng)),
        ];
        let report = grad_check(&mut params, 1e-5, |ps, tape| {
            let vx = tape.leaf(x.clone());
            let vy = tape.leaf(y.clone());
            let w = tape.param(&ps[0]);
            let b = tape.param(&ps[1]);
            let xw = tape.matmul(vx, w)?;
            let pred = tape.add_row(xw, b)?;
            let r = tape.sub(pred, vy)?;
            let sq = tape.mul(r, r)?;
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        assert_eq!(report.checked, 8);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn no_parameters_reports_zero() {
        let mut params: Vec<Parameter> = Vec::new();
        let report = grad_check(&mut params, 1e-5, |_, tape| Ok(tape.leaf(Tensor::scalar(1.0))))
            .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert!(report.per_param.is_empty());
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut params = vec![Parameter::new("p", Tensor::scalar(0.0))];
        let res = grad_check(&mut params, 1e-5, |ps, tape| {
            let p = tape.param(&ps[0]);
            Ok(tape.scale(p, f64::INFINITY))
        });
        assert!(matches!(res, Err(Error::Numeric(_))));
    }

    #[test]
    fn state_is_restored() {
        let mut params = vec![Parameter::new("p", Tensor::vector(vec![0.1, 0.2, 0.3]))];
        let before = params[0].value.to_bits();
        grad_check(&mut params, 1e-5, |ps, tape| {
            let p = tape.param(&ps[0]);
            let sq = tape.mul(p, p)?;
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        assert_eq!(params[0].value.to_bits(), before);
    }
}
