use super::params::{ParamId, ParamStore};
use super::{Graph, Tensor, Var};
use crate::error::{Result, SemfError};

pub const FD_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Relative error per input tensor, per element.
    pub per_input: Vec<Vec<f64>>,
    pub max_rel_error: f64,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares reverse-mode gradients of a scalar function against central differences.
///
/// `f` receives a fresh evaluation-mode graph and one differentiable leaf per input.
pub fn gradcheck<F>(f: F, inputs: &[Tensor]) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = xs
            .iter()
            .map(|x| g.constant(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        scalar_value(&g, out)
    };

    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|x| g.input(x.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    scalar_value(&g, out)?;
    g.backward(out)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut max_rel_error: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = g
            .grad(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut errs = Vec::with_capacity(analytic.len());
        for (i, &a) in analytic.iter().enumerate() {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + FD_STEP;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - FD_STEP;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let e = relative_error(a, numeric);
            max_rel_error = max_rel_error.max(e);
            errs.push(e);
        }
        per_input.push(errs);
    }
    Ok(GradcheckReport {
        per_input,
        max_rel_error,
    })
}

fn scalar_value(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(SemfError::contract(format!(
            "gradcheck requires a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

/// Central-difference check over every scalar of every stored parameter.
pub fn gradcheck_params<F>(store: &ParamStore, f: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grads();
    let mut g = Graph::new();
    let out = f(&mut g, &work)?;
    scalar_value(&g, out)?;
    g.backward(out)?;
    g.accumulate_param_grads(&mut work);
    let analytic: Vec<Vec<f64>> = work.iter().map(|(_, p)| p.grad.clone()).collect();

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        scalar_value(&g, out)
    };

    let mut per_input = Vec::with_capacity(analytic.len());
    let mut max_rel_error: f64 = 0.0;
    for (k, grads) in analytic.iter().enumerate() {
        let id = ParamId(k);
        let mut errs = Vec::with_capacity(grads.len());
        for (i, &a) in grads.iter().enumerate() {
            let orig = work.get(id).value.data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + FD_STEP;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig - FD_STEP;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            let e = relative_error(a, (plus - minus) / (2.0 * FD_STEP));
            max_rel_error = max_rel_error.max(e);
            errs.push(e);
        }
        per_input.push(errs);
    }
    Ok(GradcheckReport {
        per_input,
        max_rel_error,
    })
}
