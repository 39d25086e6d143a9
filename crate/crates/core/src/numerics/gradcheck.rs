//! Central finite differences, used to validate the tape's backward rules.
//!
//! Only forward evaluations are involved here, so the numbers this module
//! produces are independent of every vector-Jacobian product on the tape.

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use std::rc::Rc;

use crate::error::Result;
use crate::rng;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Step for checks through a whole network, where many gradients are small
/// relative to the loss and round-off dominates at [`DEFAULT_STEP`].
pub const NETWORK_STEP: f64 = 1e-4;

/// Below this magnitude an entry is compared in absolute rather than relative
/// terms, since central differences carry roughly `1e-11 * |loss|` of
/// round-off regardless of the true derivative.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Numeric gradient of `loss` with respect to `inputs[which]`, perturbing
/// entries listed in `entries` (all entries when `None`).
pub fn numeric_gradient<F>(
    loss: &mut F,
    inputs: &mut [Tensor],
    which: usize,
    entries: Option<&[usize]>,
    step: f64,
) -> Result<Vec<(usize, f64)>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let all: Vec<usize>;
    let entries = match entries {
        Some(e) => e,
        None => {
            all = (0..inputs[which].numel()).collect();
            &all
        }
    };
    let mut out = Vec::with_capacity(entries.len());
    for &j in entries {
        let orig = inputs[which].data()[j];
        inputs[which].data_mut()[j] = orig + step;
        let plus = loss(inputs)?;
        inputs[which].data_mut()[j] = orig - step;
        let minus = loss(inputs)?;
        inputs[which].data_mut()[j] = orig;
        out.push((j, (plus - minus) / (2.0 * step)));
    }
    Ok(out)
}

/// Largest relative error between `analytic` and the numeric gradient over
/// `entries`.
pub fn max_relative_error<F>(
    loss: &mut F,
    inputs: &mut [Tensor],
    which: usize,
    analytic: &Tensor,
    entries: Option<&[usize]>,
    step: f64,
) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let numeric = numeric_gradient(loss, inputs, which, entries, step)?;
    Ok(numeric
        .iter()
        .map(|&(j, n)| relative_error(analytic.data()[j], n))
        .fold(0.0, f64::max))
}

/// Worst relative error found for one named parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub entries_checked: usize,
    pub max_relative_error: f64,
}

/// Compares tape gradients of `loss` against central differences for every
/// parameter in `store`. With `max_entries`, at most that many evenly spaced
/// entries of each tensor are perturbed.
pub fn check_params<F>(
    store: &ParamStore,
    loss: F,
    max_entries: Option<usize>,
    step: f64,
) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let out = loss(&mut tape, &bound)?;
    let grads = tape.backward(out)?;
    let analytic = bound.collect(&grads, store);

    let mut inputs: Vec<Tensor> = store.tensors().to_vec();
    let mut eval = |params: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let bound = Bound::from_vars(vars);
        let out = loss(&mut tape, &bound)?;
        Ok(tape.value(out).data()[0])
    };

    let mut report = Vec::with_capacity(store.len());
    for (i, (_, name, tensor)) in store.iter().enumerate() {
        let n = tensor.numel();
        let entries: Vec<usize> = match max_entries {
            Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
            _ => (0..n).collect(),
        };
        let err = max_relative_error(&mut eval, &mut inputs, i, &analytic[i], Some(&entries), step)?;
        report.push(ParamCheck {
            name: name.to_string(),
            entries_checked: entries.len(),
            max_relative_error: err,
        });
    }
    Ok(report)
}

/// Worst relative error of the tape gradient of `build` with respect to every
/// input. The output is contracted with fixed random weights into a scalar so
/// that every output entry contributes.
pub fn op_error<F>(inputs: Vec<Tensor>, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.shape(out).to_vec()
    };
    let weights = rng::normal_tensor(&mut rng::stream(99, 0), &out_shape, 1.0);

    let eval = |tape: &mut Tape, xs: &[Tensor]| -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = build(tape, &vars)?;
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w)?;
        Ok((tape.sum_all(prod), vars))
    };

    let mut tape = Tape::new();
    let (loss, vars) = eval(&mut tape, &inputs)?;
    let grads = tape.backward(loss)?;

    let mut inputs = inputs;
    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v, inputs[i].shape());
        let mut f = |xs: &[Tensor]| {
            let mut tape = Tape::new();
            let (loss, _) = eval(&mut tape, xs)?;
            Ok(tape.value(loss).data()[0])
        };
        worst = worst.max(max_relative_error(&mut f, &mut inputs, i, &analytic, None, DEFAULT_STEP)?);
    }
    Ok(worst)
}

type OpBuild = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Finite-difference check of every differentiable tape operation on small
/// random inputs; returns `(operation, worst relative error)`.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let r = |i: u64, shape: &[usize]| rng::normal_tensor(&mut rng::stream(seed, i), shape, 1.0);
    let cases: Vec<(&'static str, Vec<Tensor>, OpBuild)> = vec![
        ("matmul", vec![r(1, &[3, 4]), r(2, &[4, 2])], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_batched", vec![r(3, &[2, 3, 4]), r(4, &[2, 4, 2])], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_nt", vec![r(5, &[3, 4]), r(6, &[2, 4])], Box::new(|t, v| t.matmul_nt(v[0], v[1]))),
        ("add", vec![r(7, &[2, 3, 4]), r(8, &[4])], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![r(9, &[3, 4]), r(10, &[3, 1])], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![r(11, &[2, 3, 4]), r(12, &[2, 1, 4])], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![r(13, &[3, 4])], Box::new(|t, v| Ok(t.scale(v[0], -2.5)))),
        ("add_scalar", vec![r(14, &[3, 4])], Box::new(|t, v| Ok(t.add_scalar(v[0], 0.7)))),
        ("gelu", vec![r(15, &[3, 4])], Box::new(|t, v| Ok(t.gelu(v[0])))),
        ("sigmoid", vec![r(16, &[3, 4])], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        ("softmax_last", vec![r(17, &[2, 3, 5])], Box::new(|t, v| t.softmax(v[0], 2))),
        ("softmax_inner", vec![r(18, &[2, 3, 5])], Box::new(|t, v| t.softmax(v[0], 1))),
        (
            "layer_norm",
            vec![r(19, &[3, 4, 6]), r(20, &[6]), r(21, &[6])],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])),
        ),
        ("sum_all", vec![r(22, &[3, 4])], Box::new(|t, v| Ok(t.sum_all(v[0])))),
        ("mean_all", vec![r(23, &[3, 4])], Box::new(|t, v| Ok(t.mean_all(v[0])))),
        ("mean_axis", vec![r(24, &[3, 4, 2])], Box::new(|t, v| t.mean_axis(v[0], 1))),
        ("mse", vec![r(25, &[3, 4]), r(26, &[3, 4])], Box::new(|t, v| t.mse(v[0], v[1]))),
        ("reshape", vec![r(27, &[3, 4])], Box::new(|t, v| t.reshape(v[0], &[2, 6]))),
        (
            "gather",
            vec![r(28, &[4])],
            Box::new(|t, v| t.gather(v[0], Rc::new(vec![0, 0, 3, 1, 3, 3]), &[2, 3])),
        ),
        ("permute", vec![r(29, &[2, 3, 4])], Box::new(|t, v| t.permute(v[0], &[2, 0, 1]))),
        ("narrow", vec![r(30, &[2, 3, 4])], Box::new(|t, v| t.narrow(v[0], 2, 1, 2))),
        ("concat", vec![r(31, &[2, 3]), r(32, &[2, 2])], Box::new(|t, v| t.concat(&[v[0], v[1]], 1))),
        (
            "conv2d",
            vec![r(33, &[4, 5, 2]), r(34, &[3, 3, 2, 3]), r(35, &[3])],
            Box::new(|t, v| t.conv2d(v[0], v[1], v[2])),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, build)| Ok((name, op_error(inputs, build)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_polynomial_derivative() {
        let mut inputs = vec![Tensor::new([2], vec![1.5, -0.5]).unwrap()];
        let mut f = |t: &[Tensor]| Ok(t[0].data()[0].powi(3) + 2.0 * t[0].data()[1]);
        let g = numeric_gradient(&mut f, &mut inputs, 0, None, DEFAULT_STEP).unwrap();
        assert!((g[0].1 - 3.0 * 1.5 * 1.5).abs() < 1e-8);
        assert!((g[1].1 - 2.0).abs() < 1e-8);
        // inputs are restored
        assert_eq!(inputs[0].data(), &[1.5, -0.5]);
    }

    #[test]
    fn floor_switches_to_absolute_comparison() {
        assert!(relative_error(1e-9, 2e-9) < 1e-2);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-12);
    }

    #[test]
    fn every_operation_passes() {
        for (op, err) in op_suite(1).unwrap() {
            assert!(err < 1e-4, "{op}: {err}");
        }
    }
}
