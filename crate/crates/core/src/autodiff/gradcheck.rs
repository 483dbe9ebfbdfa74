//! Finite-difference verification of reverse-mode gradients.
//!
//! The oracle never touches the backward pass: it re-runs the forward
//! computation at perturbed parameter values and compares central differences
//! against the taped gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::nn::Parameter;
use crate::tensor::{Scalar, Tensor};

pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub pass: bool,
    pub tol: f64,
}

/// A closure that rebuilds the scalar loss from the current parameter values.
pub type LossFn<'a, T> = &'a dyn Fn(&Tape<T>, &[Parameter<T>]) -> Result<Var>;

/// Gradients of `loss_fn` w.r.t. every parameter, via the tape.
pub fn tape_grads<T: Scalar>(
    params: &[Parameter<T>],
    loss_fn: LossFn<T>,
) -> Result<Vec<Tensor<T>>> {
    let tape = Tape::new();
    let loss = loss_fn(&tape, params)?;
    let mut grads = tape.backward(loss)?;
    Ok(params
        .iter()
        .map(|p| {
            grads
                .take(p.id())
                .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()))
        })
        .collect())
}

fn loss_value<T: Scalar>(params: &[Parameter<T>], loss_fn: LossFn<T>) -> Result<f64> {
    let tape = Tape::new();
    let loss = loss_fn(&tape, params)?;
    Ok(tape.value(loss).item().to_f64_lossy())
}

/// Compare supplied gradients against central finite differences on up to
/// `samples` randomly chosen parameter elements. Step is 1e-3 * scale with
/// scale = max(1, |theta|).
pub fn fd_check<T: Scalar>(
    params: &mut [Parameter<T>],
    loss_fn: LossFn<T>,
    grads: &[Tensor<T>],
    tol: f64,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport> {
    let total: usize = params.iter().map(|p| p.numel()).sum();
    let picks: Vec<usize> = if total <= samples {
        (0..total).collect()
    } else {
        (0..samples).map(|_| rng.random_range(0..total)).collect()
    };

    let mut max_rel_err = 0.0f64;
    for flat in picks.iter().copied() {
        let (pi, j) = locate(params, flat);
        let orig = params[pi].value.data()[j];
        let scale = orig.to_f64_lossy().abs().max(1.0);
        let h = 1e-3 * scale;

        params[pi].value.data_mut()[j] = orig + T::from_f64(h);
        let plus = loss_value(params, loss_fn)?;
        params[pi].value.data_mut()[j] = orig - T::from_f64(h);
        let minus = loss_value(params, loss_fn)?;
        params[pi].value.data_mut()[j] = orig;

        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads[pi].data()[j].to_f64_lossy();
        let denom = numeric.abs().max(analytic.abs());
        // Both gradients at noise level: nothing meaningful to compare.
        if denom < 1e-7 {
            continue;
        }
        let rel = (numeric - analytic).abs() / denom;
        if rel > max_rel_err {
            max_rel_err = rel;
        }
    }

    Ok(GradCheckReport {
        max_rel_err,
        checked: picks.len(),
        pass: max_rel_err <= tol,
        tol,
    })
}

/// Full check: tape gradients vs the finite-difference oracle.
pub fn grad_check<T: Scalar>(
    params: &mut [Parameter<T>],
    loss_fn: LossFn<T>,
    tol: f64,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport> {
    let grads = tape_grads(params, loss_fn)?;
    fd_check(params, loss_fn, &grads, tol, samples, rng)
}

fn locate<T: Scalar>(params: &[Parameter<T>], mut flat: usize) -> (usize, usize) {
    for (i, p) in params.iter().enumerate() {
        if flat < p.numel() {
            return (i, flat);
        }
        flat -= p.numel();
    }
    unreachable!("flat index within total parameter count")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_loss_gradient_is_input() {
        // loss = sum(w * x) with fixed x => dloss/dw = x.
        let x = Tensor::<f64>::from_vec(vec![4], vec![0.5, -1.25, 2.0, 3.5]).unwrap();
        let params = vec![Parameter::new("w", Tensor::<f64>::full(vec![4], 0.7))];
        let xc = x.clone();
        let loss_fn = move |tape: &Tape<f64>, ps: &[Parameter<f64>]| {
            let w = ps[0].on(tape)?;
            let xi = tape.input(xc.clone())?;
            let prod = tape.mul(w, xi)?;
            tape.sum_all(prod)
        };
        let grads = tape_grads(&params, &loss_fn).unwrap();
        assert_eq!(grads[0].data(), x.data());
    }

    #[test]
    fn softmax_ce_gradient_matches_closed_form() {
        // Single column, one-hot target: dloss/dlogits = softmax - onehot.
        let params = vec![Parameter::new(
            "logits",
            Tensor::<f64>::from_vec(vec![3, 1], vec![0.2, -0.4, 1.1]).unwrap(),
        )];
        let loss_fn = |tape: &Tape<f64>, ps: &[Parameter<f64>]| {
            let l = ps[0].on(tape)?;
            tape.cross_entropy_mean(l, &[2])
        };
        let grads = tape_grads(&params, &loss_fn).unwrap();
        let logits = params[0].value.data();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (k, &g) in grads[0].data().iter().enumerate() {
            let expected = exps[k] / z - if k == 2 { 1.0 } else { 0.0 };
            assert!((g - expected).abs() < 1e-12, "class {k}: {g} vs {expected}");
        }
    }

    #[test]
    fn corrupted_gradients_are_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = vec![Parameter::new(
            "w",
            crate::nn::gaussian::<f64>(vec![6], 0.0, 1.0, &mut rng),
        )];
        let loss_fn = |tape: &Tape<f64>, ps: &[Parameter<f64>]| {
            let w = ps[0].on(tape)?;
            let s = tape.sin(w)?;
            tape.sum_all(s)
        };
        let mut grads = tape_grads(&params, &loss_fn).unwrap();
        {
            let d = grads[0].data_mut();
            d[3] *= 1.5;
        }
        let report = fd_check(&mut params, &loss_fn, &grads, 1e-6, 64, &mut rng).unwrap();
        assert!(!report.pass);
    }
}
