//! Dense channel-major tensors and the small matmul kernels the conv layers
//! are built on.
//!
//! Layout is `[c][h][w]` in one contiguous buffer. Images are tensors with
//! `c = 3`, score maps and rendered heatmaps are tensors with `c = K`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// A 2D point in normalized coordinates, `x` along columns, `y` along rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Point<T> {
    pub fn new(x: T, y: T) -> Self {
        Point { x, y }
    }

    pub fn dist(self, other: Self) -> T {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Normalized coordinate of cell center `i` on an axis with `n` cells.
///
/// Cell centers span `[-1, 1]` linearly: the first center maps to -1, the
/// last to +1. Requires `n >= 2`.
pub fn norm_coord<T: Scalar>(i: usize, n: usize) -> T {
    debug_assert!(n >= 2);
    -T::one() + T::from_usize_c(2 * i) / T::from_usize_c(n - 1)
}

/// Inverse of [`norm_coord`]: fractional cell index of a normalized coordinate.
pub fn cell_coord<T: Scalar>(u: T, n: usize) -> T {
    debug_assert!(n >= 2);
    (u + T::one()) * T::from_usize_c(n - 1) / T::from_f64_c(2.0)
}

/// Channel-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::invalid_input(format!(
                "tensor data length {} does not match shape {}x{}x{}",
                data.len(),
                c,
                h,
                w
            )));
        }
        Ok(Tensor { c, h, w, data })
    }

    pub fn from_fn(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ch, y, x));
                }
            }
        }
        Tensor { c, h, w, data }
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut T {
        &mut self.data[(c * self.h + y) * self.w + x]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let plane = self.h * self.w;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let plane = self.h * self.w;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale_inplace(&mut self, s: T) {
        for v in self.data.iter_mut() {
            *v *= s;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Stack along the channel dimension; spatial sizes must match.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        if a.h != b.h || a.w != b.w {
            return Err(Error::invalid_input(format!(
                "channel concat: spatial mismatch {}x{} vs {}x{}",
                a.h, a.w, b.h, b.w
            )));
        }
        let mut data = Vec::with_capacity((a.c + b.c) * a.h * a.w);
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Ok(Tensor {
            c: a.c + b.c,
            h: a.h,
            w: a.w,
            data,
        })
    }

    pub fn min_value(&self) -> T {
        self.data.iter().fold(T::infinity(), |m, &v| m.min(v))
    }

    pub fn max_value(&self) -> T {
        self.data.iter().fold(T::neg_infinity(), |m, &v| m.max(v))
    }

    /// Cast element type, used to move data between f32 and f64 paths.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| U::from_f64_c(v.to_f64_c())).collect(),
        }
    }
}

/// `c += a * b` for row-major `a: m x k`, `b: k x n`, `c: m x n`.
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c += a * b^T` for row-major `a: m x k`, `b: n x k`, `c: m x n`.
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            crow[j] += dot(arow, brow);
        }
    }
}

/// `c += a^T * b` for row-major `a: k x m`, `b: k x n`, `c: m x n`.
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += api * bv;
            }
        }
    }
}

/// Dot product with split accumulators so the optimizer can vectorize.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let a4 = &a[i * 4..i * 4 + 4];
        let b4 = &b[i * 4..i * 4 + 4];
        acc[0] += a4[0] * b4[0];
        acc[1] += a4[1] * b4[1];
        acc[2] += a4[2] * b4[2];
        acc[3] += a4[3] * b4[3];
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// `y += alpha * x`.
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, &xv) in y.iter_mut().zip(x.iter()) {
        *yv += alpha * xv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (5, 7, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let want = naive_mm(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        for (x, y) in c.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // b^T stored as n x k
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &bt, &mut c);
        for (x, y) in c.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // a^T stored as k x m
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c = vec![0.0; m * n];
        gemm_tn(m, k, n, &at, &b, &mut c);
        for (x, y) in c.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn norm_coord_endpoints() {
        assert_eq!(norm_coord::<f64>(0, 16), -1.0);
        assert_eq!(norm_coord::<f64>(15, 16), 1.0);
        assert!((cell_coord::<f64>(norm_coord(7, 16), 16) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn concat_validates_shapes() {
        let a = Tensor::<f32>::zeros(2, 4, 4);
        let b = Tensor::<f32>::zeros(3, 4, 4);
        assert_eq!(Tensor::concat_channels(&a, &b).unwrap().shape(), (5, 4, 4));
        let c = Tensor::<f32>::zeros(1, 3, 4);
        assert!(Tensor::concat_channels(&a, &c).is_err());
    }
}
