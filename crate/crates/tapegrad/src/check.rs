//! Central finite-difference helpers for gradient verification.

use crate::Scalar;
use ndarray::ArrayD;

/// Central difference of `f` at one flat coordinate of `at`.
pub fn central_difference<S: Scalar>(
    f: &mut dyn FnMut(&ArrayD<S>) -> S,
    at: &ArrayD<S>,
    flat_index: usize,
    step: S,
) -> S {
    let mut hi = at.clone();
    let mut lo = at.clone();
    {
        let h = hi.as_slice_mut().expect("standard layout");
        let l = lo.as_slice_mut().expect("standard layout");
        h[flat_index] += step;
        l[flat_index] -= step;
    }
    (f(&hi) - f(&lo)) / (step + step)
}

/// Relative error between an analytic derivative and its numeric estimate,
/// with an absolute floor so near-zero pairs compare cleanly.
pub fn relative_error<S: Scalar>(analytic: S, numeric: S, floor: S) -> S {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}
