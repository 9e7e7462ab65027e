//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::model::{Inputs, Network};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Perturbation used for every central difference.
pub const FD_EPS: f64 = 1e-4;

/// Relative error between an analytic and a numeric gradient:
/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute difference norm when both
/// are below `1e-12`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences `(f(x + ε·e_i) − f(x − ε·e_i)) / 2ε` at the given
/// coordinates of `x`.
pub fn numeric_gradient(
    x: &[f64],
    coords: &[usize],
    eps: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let plus = f(&probe);
            probe[i] = orig - eps;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Up to `max` evenly spread coordinates of a length-`n` vector.
pub fn sample_coords(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max)
        .map(|i| i * n / max + (i * 7919) % (n / max).max(1))
        .collect()
}

/// Checks the backward rule of a tape computation against central finite
/// differences.
///
/// `f` maps input nodes to an output node of any shape; the check reduces it
/// to the scalar `Σ out ⊙ r` with a fixed random `r`. Returns the relative
/// error per input, probing at most `max_coords` entries of each.
pub fn check_tape_fn<F>(inputs: &[Tensor], max_coords: usize, seed: u64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    check_tape_fn_with(&ParamStore::new(), inputs, max_coords, seed, f)
}

/// [`check_tape_fn`] on tapes that can read the (fixed) parameters in
/// `store`.
pub fn check_tape_fn_with<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    max_coords: usize,
    seed: u64,
    f: F,
) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut projection: Option<Tensor> = None;

    let mut forward = |values: &[Tensor], grad: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut tape = Tape::with_params(store);
        let vars: Vec<Var> = values
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(grad)))
            .collect();
        let out = f(&mut tape, &vars)?;
        let shape = tape.shape(out).to_vec();
        let r = projection.get_or_insert_with(|| {
            let n = shape.iter().product();
            Tensor::new(
                &shape,
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        });
        let r = tape.constant(r.clone());
        let prod = tape.mul(out, r)?;
        let loss = tape.sum(prod);
        let value = tape.value(loss).item().unwrap();
        if !grad {
            return Ok((value, None));
        }
        let grads = tape.backward(loss)?;
        let per_input = vars
            .iter()
            .zip(values)
            .map(|(&v, t)| {
                grads
                    .wrt(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect();
        Ok((value, Some(per_input)))
    };

    let (_, analytic) = forward(inputs, true)?;
    let analytic = analytic.unwrap();
    let mut errors = Vec::with_capacity(inputs.len());
    for (idx, input) in inputs.iter().enumerate() {
        let coords = sample_coords(input.numel(), max_coords);
        let mut failure = None;
        let numeric = numeric_gradient(input.data(), &coords, FD_EPS, |probe| {
            let mut values = inputs.to_vec();
            values[idx].data_mut().copy_from_slice(probe);
            match forward(&values, false) {
                Ok((v, _)) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        let picked: Vec<f64> = coords.iter().map(|&i| analytic[idx][i]).collect();
        errors.push(relative_error(&picked, &numeric));
    }
    Ok(errors)
}

/// Checks every trainable tensor of `net` against central differences of
/// the training-mode cross-entropy on one batch. Returns `(name, relative
/// error)` per tensor, probing at most `max_coords` entries of each.
pub fn check_network(
    net: &mut Network,
    inputs: &Inputs,
    labels: &[usize],
    max_coords: usize,
) -> Result<Vec<(String, f64)>> {
    let step = net.train_step(inputs, labels)?;
    let ids: Vec<_> = net.params().trainable_ids().collect();
    let mut report = Vec::with_capacity(ids.len());
    for id in ids {
        let original = net.params().get(id).data().to_vec();
        let coords = sample_coords(original.len(), max_coords);
        let mut failure = None;
        let numeric = numeric_gradient(&original, &coords, FD_EPS, |probe| {
            net.params_mut().set_data(id, probe).unwrap();
            match net.train_step(inputs, labels) {
                Ok(s) => s.loss,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        });
        net.params_mut().set_data(id, &original)?;
        if let Some(e) = failure {
            return Err(e);
        }
        let analytic = step.grads.param(id).unwrap_or(&[]);
        let picked: Vec<f64> = coords
            .iter()
            .map(|&i| analytic.get(i).copied().unwrap_or(0.0))
            .collect();
        report.push((
            net.params().name(id).to_string(),
            relative_error(&picked, &numeric),
        ));
    }
    Ok(report)
}
