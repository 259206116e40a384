//! Central finite-difference helpers used by the gradient test suites.

use crate::scalar::Scalar;

/// Central difference df/dx[i] of a scalar-valued function at `x`.
pub fn central_diff<T: Scalar>(f: &mut dyn FnMut(&[T]) -> T, x: &[T], i: usize, h: T) -> T {
    let mut xp = x.to_vec();
    xp[i] = xp[i] + h;
    let fp = f(&xp);
    xp[i] = x[i] - h;
    let fm = f(&xp);
    (fp - fm) / (T::from_f64_c(2.0) * h)
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Checks analytic gradients of `f` against central differences at the given
/// coordinates; returns the max relative error observed.
pub fn check_grad<T: Scalar>(
    f: &mut dyn FnMut(&[T]) -> T,
    x: &[T],
    analytic: &[T],
    coords: &[usize],
    h: T,
) -> f64 {
    let mut worst = 0.0f64;
    for &i in coords {
        let num = central_diff(f, x, i, h).to_f64_c();
        let e = rel_err(analytic[i].to_f64_c(), num);
        if e > worst {
            worst = e;
        }
    }
    worst
}
