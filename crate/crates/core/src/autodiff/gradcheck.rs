//! Finite-difference verification of analytic gradients.

use rand::Rng;

use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::Result;
use crate::rng::{child_seed, rng_from_seed};

/// Central-difference step on 64-bit reals.
pub const GRAD_CHECK_H: f64 = 1e-4;

/// Coordinates closer than this to a relu/argmax kink are skipped.
pub const KINK_TOL: f64 = 1e-3;

/// Compares the analytic gradient of `build` with central finite
/// differences at the given inputs and returns the maximum relative error
/// `|g_a - g_n| / max(|g_a|, |g_n|, 1e-6)` over all unskipped coordinates.
///
/// `build` may return a tensor of any shape; non-scalar outputs are reduced
/// with a seeded random weighting so every output coordinate contributes.
/// Two kinds of coordinates are skipped: those the caller's
/// `skip(input_index, coordinate)` masks (e.g. relu inputs within
/// [`KINK_TOL`] of zero), and those whose `x + h` / `x - h` evaluations
/// take different discrete decisions (relu sign or pooling argmax flips) —
/// the central difference does not estimate a derivative across a kink.
pub fn grad_check<F>(
    build: &F,
    inputs: &[Tensor],
    seed: u64,
    skip: &dyn Fn(usize, usize) -> bool,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let out = build(&mut tape, &vars)?;
        let loss = if tape.values(out).len() == 1 {
            out
        } else {
            let mut rng = rng_from_seed(child_seed(seed, "grad-check-scalarize", 0));
            let w = (0..tape.values(out).len()).map(|_| rng.random_range(0.5..1.5)).collect();
            tape.weighted_sum(out, w)?
        };
        Ok((tape, vars, loss))
    };

    // Analytic gradients at the base point.
    let (mut tape, leaf_vars, loss) = eval(inputs)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaf_vars.iter().map(|v| tape.grad(*v).to_vec()).collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for c in 0..input.numel() {
            if skip(i, c) {
                continue;
            }
            let base = input.values()[c];
            work[i].values_mut()[c] = base + GRAD_CHECK_H;
            let (tp, _, lp) = eval(&work)?;
            work[i].values_mut()[c] = base - GRAD_CHECK_H;
            let (tm, _, lm) = eval(&work)?;
            work[i].values_mut()[c] = base;
            if tp.decision_digest() != tm.decision_digest() {
                continue;
            }
            let f_plus = tp.value_scalar(lp);
            let f_minus = tm.value_scalar(lm);

            let numeric = (f_plus - f_minus) / (2.0 * GRAD_CHECK_H);
            let g = analytic[i][c];
            let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// No-op skip mask.
pub fn no_skip(_: usize, _: usize) -> bool {
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_gradient_matches_finite_differences() {
        let x = Tensor::new(vec![3], vec![0.4, -0.7, 1.2]).unwrap();
        let w = Tensor::new(vec![2, 3], vec![0.1, 0.5, -0.3, 0.8, -0.2, 0.6]).unwrap();
        let b = Tensor::new(vec![2], vec![0.05, -0.4]).unwrap();
        let err = grad_check(
            &|tape: &mut Tape, vars: &[Var]| tape.dense(vars[0], vars[1], vars[2]),
            &[x, w, b],
            7,
            &no_skip,
        )
        .unwrap();
        assert!(err < 1e-4, "dense grad check failed: {err}");
    }

    #[test]
    fn smooth_l1_smooth_at_origin() {
        let p = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let t = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let err = grad_check(
            &|tape: &mut Tape, vars: &[Var]| tape.smooth_l1(vars[0], vars[1]),
            &[p, t],
            7,
            &no_skip,
        )
        .unwrap();
        assert!(err < 1e-4, "smooth_l1 at origin failed: {err}");
    }
}
