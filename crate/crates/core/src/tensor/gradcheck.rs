//! Central finite-difference checking of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::nn::Ctx;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Relative error `|a - n| / max(|a|, |n|)` in the L2 norm; zero when both
/// vectors vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Compare the tape gradient of `f` against central differences.
///
/// The output of `f` is contracted with fixed pseudo-random weights so the
/// whole Jacobian is exercised, not just its column sums. Returns the worst
/// relative error over the inputs.
pub fn check<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check_with_step(inputs, DEFAULT_STEP, f)
}

pub fn check_with_step<F>(inputs: &[Tensor], step: f64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let out_shape = out.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let weights = Tensor::from_fn(out_shape, |_| rng.random_range(-1.0..1.0));
    let loss = out.mul(tape.constant(weights.clone()))?.sum_all();
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value();
        Ok(v.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient").data().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Like [`check`], but differentiates with respect to stored parameters as
/// well as free inputs. At most `max_elems` entries of each tensor are probed
/// (evenly strided), which keeps checks on wide layers affordable.
pub fn check_params<F>(
    store: &ParamStore,
    params: &[ParamId],
    inputs: &[Tensor],
    max_elems: usize,
    f: F,
) -> Result<f64>
where
    F: for<'t> Fn(&Ctx<'t>, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store);
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&ctx, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let weights = Tensor::from_fn(out.shape(), |_| rng.random_range(-1.0..1.0));
    let loss = out.mul(tape.constant(weights.clone()))?.sum_all();
    let grads = tape.backward(loss)?;
    let param_grads = grads.param_grads();

    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store);
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&ctx, &vars)?;
        let v = out.value();
        Ok(v.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };
    let probe = |n: usize| -> Vec<usize> {
        let stride = n.div_ceil(max_elems.max(1)).max(1);
        (0..n).step_by(stride).collect()
    };

    let mut worst: f64 = 0.0;
    let mut work_store = store.clone();
    let mut work_inputs = inputs.to_vec();
    for &pid in params {
        let full = param_grads
            .iter()
            .find(|(p, _)| *p == pid)
            .map(|(_, g)| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; store.value(pid).numel()]);
        let idx = probe(full.len());
        let analytic: Vec<f64> = idx.iter().map(|&i| full[i]).collect();
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = work_store.value(pid).data()[i];
            work_store.value_mut(pid).data_mut()[i] = orig + DEFAULT_STEP;
            let plus = eval(&work_store, &work_inputs)?;
            work_store.value_mut(pid).data_mut()[i] = orig - DEFAULT_STEP;
            let minus = eval(&work_store, &work_inputs)?;
            work_store.value_mut(pid).data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * DEFAULT_STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    for (k, var) in vars.iter().enumerate() {
        let full = grads.get(*var).expect("leaf gradient").data().to_vec();
        let idx = probe(full.len());
        let analytic: Vec<f64> = idx.iter().map(|&i| full[i]).collect();
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = work_inputs[k].data()[i];
            work_inputs[k].data_mut()[i] = orig + DEFAULT_STEP;
            let plus = eval(&work_store, &work_inputs)?;
            work_inputs[k].data_mut()[i] = orig - DEFAULT_STEP;
            let minus = eval(&work_store, &work_inputs)?;
            work_inputs[k].data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * DEFAULT_STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor::new([3], vec![0.3, -0.2, 0.9]).unwrap();
        // exp with a deliberately wrong derivative
        let err = check(&[x], |tape, v| {
            let out = v[0].value().map(f64::exp);
            Ok(tape.custom(&[v[0]], out, Box::new(|ctx| vec![Some(ctx.grad.clone())])))
        })
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn relative_error_of_equal_vectors_is_zero() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }
}
