//! Central finite-difference verification of reverse-mode gradients.

use super::{backward, Element, Tensor};
use crate::error::Result;
use crate::rng::Frng;

/// Relative error between an analytic and a numeric derivative:
/// `|a - b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

/// Checks the gradient of a scalar-valued function at the given leaves.
///
/// `f` must rebuild its graph on every call (define-by-run) and be
/// deterministic. Every coordinate of every grad-requiring input is probed
/// with a central difference of step `h`; the maximum relative error over
/// all coordinates is returned.
pub fn grad_check<E, F>(f: F, inputs: &[Tensor<E>], h: f64) -> Result<f64>
where
    E: Element,
    F: Fn(&[Tensor<E>]) -> Result<Tensor<E>>,
{
    grad_check_sampled(f, inputs, h, usize::MAX, &mut Frng::from_seed(0))
}

/// Like [`grad_check`] but probes at most `max_coords` randomly chosen
/// coordinates per input, for use on large parameter tensors.
pub fn grad_check_sampled<E, F>(
    f: F,
    inputs: &[Tensor<E>],
    h: f64,
    max_coords: usize,
    rng: &mut Frng,
) -> Result<f64>
where
    E: Element,
    F: Fn(&[Tensor<E>]) -> Result<Tensor<E>>,
{
    for t in inputs {
        t.zero_grad();
    }
    let loss = f(inputs)?;
    backward(&loss)?;

    let mut max_err = 0.0_f64;
    for input in inputs {
        if !input.requires_grad() {
            continue;
        }
        let analytic = input
            .grad()
            .unwrap_or_else(|| vec![E::zero(); input.numel()]);
        let n = input.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| rng.index(n)).collect()
        };
        let original = input.data().clone();
        for &i in &coords {
            let mut bumped = original.clone();
            bumped[i] = original[i] + E::from_f64(h);
            input.set_data(bumped)?;
            let up = f(inputs)?.item_f64();

            let mut bumped = original.clone();
            bumped[i] = original[i] - E::from_f64(h);
            input.set_data(bumped)?;
            let down = f(inputs)?.item_f64();

            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic[i].into_f64(), numeric);
            if err > max_err {
                max_err = err;
            }
        }
        input.set_data(original)?;
    }
    Ok(max_err)
}
