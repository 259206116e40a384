//! Differentiable geometry bottleneck: score maps -> soft-argmax coordinates
//! -> rendered Gaussian heatmaps.
//!
//! The separable variant marginalizes raw scores per axis before the softmax
//! expectation and is the default used in training; the full 2D variant is
//! kept behind a config switch. Every path here is differentiable, there is
//! no discrete argmax anywhere.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{norm_coord, Point, Tensor};

/// Raw K-channel detector output on a small grid.
#[derive(Clone, Debug)]
pub struct ScoreMaps<T> {
    maps: Tensor<T>,
}

impl<T: Scalar> ScoreMaps<T> {
    /// Validates finiteness and minimum grid size.
    pub fn new(maps: Tensor<T>) -> Result<Self> {
        if maps.channels() < 1 {
            return Err(Error::invalid_input("score maps need at least one channel"));
        }
        if maps.height() < 2 || maps.width() < 2 {
            return Err(Error::invalid_input("score map grid must be at least 2x2"));
        }
        if !maps.all_finite() {
            return Err(Error::invalid_input("score maps contain non-finite values"));
        }
        Ok(ScoreMaps { maps })
    }

    pub fn k(&self) -> usize {
        self.maps.channels()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.maps.height(), self.maps.width())
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.maps
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.maps
    }
}

/// K keypoints in normalized coordinates, each strictly inside [-1, 1]^2.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet<T> {
    points: Vec<Point<T>>,
}

impl<T: Scalar> KeypointSet<T> {
    pub fn new(points: Vec<Point<T>>) -> Self {
        KeypointSet { points }
    }

    pub fn k(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[Point<T>] {
        &self.points
    }

    /// Flattened `[x0, y0, x1, y1, ...]` view used by the linear probe.
    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.points.len() * 2);
        for p in &self.points {
            out.push(p.x);
            out.push(p.y);
        }
        out
    }
}

/// Rendered Gaussian heatmaps, values in (0, 1].
#[derive(Clone, Debug)]
pub struct GaussianMaps<T> {
    maps: Tensor<T>,
    sigma: T,
}

impl<T: Scalar> GaussianMaps<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.maps
    }

    pub fn sigma(&self) -> T {
        self.sigma
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.maps
    }
}

fn softmax_inplace<T: Scalar>(v: &mut [T]) {
    let max = v.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Per-channel state cached by the separable soft-argmax for its backward.
#[derive(Clone, Debug)]
pub struct SeparableTrace<T> {
    // per channel: softmax over column marginals (len w) and row marginals (len h)
    px: Vec<Vec<T>>,
    py: Vec<Vec<T>>,
    points: Vec<Point<T>>,
    h: usize,
    w: usize,
}

/// Soft-argmax over the full 2D softmax of each channel.
pub fn softargmax_full<T: Scalar>(s: &ScoreMaps<T>) -> KeypointSet<T> {
    let (h, w) = s.grid();
    let mut points = Vec::with_capacity(s.k());
    for k in 0..s.k() {
        let mut p = s.tensor().channel(k).to_vec();
        softmax_inplace(&mut p);
        let mut ux = T::zero();
        let mut uy = T::zero();
        for y in 0..h {
            let cy = norm_coord::<T>(y, h);
            for x in 0..w {
                let pv = p[y * w + x];
                ux += norm_coord::<T>(x, w) * pv;
                uy += cy * pv;
            }
        }
        points.push(Point::new(ux, uy));
    }
    KeypointSet::new(points)
}

/// Gradient of [`softargmax_full`]: `d_points` holds dL/d(x,y) per channel.
pub fn softargmax_full_backward<T: Scalar>(s: &ScoreMaps<T>, d_points: &[Point<T>]) -> Tensor<T> {
    let (h, w) = s.grid();
    let pts = softargmax_full(s);
    let mut grad = Tensor::zeros(s.k(), h, w);
    for k in 0..s.k() {
        let mut p = s.tensor().channel(k).to_vec();
        softmax_inplace(&mut p);
        let u = pts.points()[k];
        let d = d_points[k];
        let gch = grad.channel_mut(k);
        for y in 0..h {
            let cy = norm_coord::<T>(y, h);
            for x in 0..w {
                let pv = p[y * w + x];
                gch[y * w + x] =
                    pv * (d.x * (norm_coord::<T>(x, w) - u.x) + d.y * (cy - u.y));
            }
        }
    }
    grad
}

/// Separable soft-argmax: marginalize raw scores per axis, then take the
/// softmax expectation of each marginal. Default bottleneck for training.
pub fn softargmax_separable<T: Scalar>(s: &ScoreMaps<T>) -> KeypointSet<T> {
    softargmax_separable_traced(s).0
}

pub fn softargmax_separable_traced<T: Scalar>(
    s: &ScoreMaps<T>,
) -> (KeypointSet<T>, SeparableTrace<T>) {
    let (h, w) = s.grid();
    let mut points = Vec::with_capacity(s.k());
    let mut pxs = Vec::with_capacity(s.k());
    let mut pys = Vec::with_capacity(s.k());
    for k in 0..s.k() {
        let ch = s.tensor().channel(k);
        let mut mx = vec![T::zero(); w];
        let mut my = vec![T::zero(); h];
        for y in 0..h {
            let row = &ch[y * w..(y + 1) * w];
            let mut rowsum = T::zero();
            for (x, &v) in row.iter().enumerate() {
                mx[x] += v;
                rowsum += v;
            }
            my[y] = rowsum;
        }
        softmax_inplace(&mut mx);
        softmax_inplace(&mut my);
        let mut ux = T::zero();
        for (x, &p) in mx.iter().enumerate() {
            ux += norm_coord::<T>(x, w) * p;
        }
        let mut uy = T::zero();
        for (y, &p) in my.iter().enumerate() {
            uy += norm_coord::<T>(y, h) * p;
        }
        points.push(Point::new(ux, uy));
        pxs.push(mx);
        pys.push(my);
    }
    (
        KeypointSet::new(points.clone()),
        SeparableTrace {
            px: pxs,
            py: pys,
            points,
            h,
            w,
        },
    )
}

/// Gradient of the separable soft-argmax w.r.t. the raw scores.
pub fn softargmax_separable_backward<T: Scalar>(
    trace: &SeparableTrace<T>,
    d_points: &[Point<T>],
) -> Tensor<T> {
    let (h, w) = (trace.h, trace.w);
    let k = trace.points.len();
    let mut grad = Tensor::zeros(k, h, w);
    for ki in 0..k {
        let u = trace.points[ki];
        let d = d_points[ki];
        // dL/d marginal_x[j] = d.x * px[j] * (c(j) - ux), broadcast over rows
        let dx: Vec<T> = trace.px[ki]
            .iter()
            .enumerate()
            .map(|(j, &p)| d.x * p * (norm_coord::<T>(j, w) - u.x))
            .collect();
        let dy: Vec<T> = trace.py[ki]
            .iter()
            .enumerate()
            .map(|(i, &p)| d.y * p * (norm_coord::<T>(i, h) - u.y))
            .collect();
        let gch = grad.channel_mut(ki);
        for y in 0..h {
            let row = &mut gch[y * w..(y + 1) * w];
            for (x, g) in row.iter_mut().enumerate() {
                *g = dx[x] + dy[y];
            }
        }
    }
    grad
}

/// Renders each keypoint as `exp(-||u - u*||^2 / (2 sigma^2))` over the grid.
pub fn render_gaussians<T: Scalar>(
    kps: &KeypointSet<T>,
    grid: (usize, usize),
    sigma: T,
) -> Result<GaussianMaps<T>> {
    if sigma <= T::zero() {
        return Err(Error::invalid_config("gaussian sigma must be positive"));
    }
    let (h, w) = grid;
    let inv = T::one() / (T::from_f64_c(2.0) * sigma * sigma);
    let mut maps = Tensor::zeros(kps.k(), h, w);
    for (k, u) in kps.points().iter().enumerate() {
        let ch = maps.channel_mut(k);
        for y in 0..h {
            let dy = norm_coord::<T>(y, h) - u.y;
            let dy2 = dy * dy;
            let row = &mut ch[y * w..(y + 1) * w];
            for (x, v) in row.iter_mut().enumerate() {
                let dx = norm_coord::<T>(x, w) - u.x;
                *v = (-(dx * dx + dy2) * inv).exp();
            }
        }
    }
    Ok(GaussianMaps { maps, sigma })
}

/// Gradient of [`render_gaussians`] w.r.t. the keypoint coordinates.
pub fn render_gaussians_backward<T: Scalar>(
    rendered: &GaussianMaps<T>,
    kps: &KeypointSet<T>,
    d_maps: &Tensor<T>,
) -> Vec<Point<T>> {
    let (k, h, w) = rendered.maps.shape();
    let inv_s2 = T::one() / (rendered.sigma * rendered.sigma);
    let mut out = Vec::with_capacity(k);
    for ki in 0..k {
        let u = kps.points()[ki];
        let ych = rendered.maps.channel(ki);
        let dch = d_maps.channel(ki);
        let mut gx = T::zero();
        let mut gy = T::zero();
        for y in 0..h {
            let dy = norm_coord::<T>(y, h) - u.y;
            for x in 0..w {
                let idx = y * w + x;
                let common = dch[idx] * ych[idx] * inv_s2;
                gx += common * (norm_coord::<T>(x, w) - u.x);
                gy += common * dy;
            }
        }
        out.push(Point::new(gx, gy));
    }
    out
}

/// Fully-connected ablation bottleneck: flatten scores -> d values -> back to
/// a spatial tensor of the score-map shape. Replaces the keypoint path
/// end-to-end when enabled.
#[derive(Clone, Debug)]
pub struct FcBottleneck<T> {
    pub w1: Vec<T>, // d x (h*w*k)
    pub b1: Vec<T>, // d
    pub w2: Vec<T>, // (h*w*k) x d
    pub b2: Vec<T>, // h*w*k
    pub d: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
}

/// Cached state for the fc bottleneck backward pass.
pub struct FcTrace<T> {
    input: Vec<T>,
    hidden_pre: Vec<T>,
    hidden: Vec<T>,
}

/// Parameter gradients produced by [`FcBottleneck::backward`].
pub struct FcGrads<T> {
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

impl<T: Scalar> FcBottleneck<T> {
    pub fn new(d: usize, k: usize, grid: (usize, usize)) -> Result<Self> {
        if d < 1 {
            return Err(Error::invalid_config("fc bottleneck width must be >= 1"));
        }
        let (h, w) = grid;
        let n = h * w * k;
        Ok(FcBottleneck {
            w1: vec![T::zero(); d * n],
            b1: vec![T::zero(); d],
            w2: vec![T::zero(); n * d],
            b2: vec![T::zero(); n],
            d,
            k,
            h,
            w,
        })
    }

    /// Identity-like initialization used in tests: both dense maps embed the
    /// identity (requires `d == h*w*k`).
    pub fn init_identity(&mut self) {
        let n = self.h * self.w * self.k;
        assert_eq!(self.d, n);
        for i in 0..n {
            self.w1[i * n + i] = T::one();
            self.w2[i * n + i] = T::one();
        }
    }

    pub fn forward(&self, s: &ScoreMaps<T>) -> Tensor<T> {
        self.forward_traced(s).0
    }

    pub fn forward_traced(&self, s: &ScoreMaps<T>) -> (Tensor<T>, FcTrace<T>) {
        let n = self.h * self.w * self.k;
        let input = s.tensor().as_slice().to_vec();
        assert_eq!(input.len(), n);
        let mut hidden_pre = self.b1.clone();
        crate::tensor::gemm_nn(self.d, n, 1, &self.w1, &input, &mut hidden_pre);
        let hidden: Vec<T> = hidden_pre.iter().map(|&v| v.max(T::zero())).collect();
        let mut out = self.b2.clone();
        crate::tensor::gemm_nn(n, self.d, 1, &self.w2, &hidden, &mut out);
        let tensor = Tensor::from_vec(self.k, self.h, self.w, out).expect("shape by construction");
        (
            tensor,
            FcTrace {
                input,
                hidden_pre,
                hidden,
            },
        )
    }

    /// Backprop through both dense maps; returns (d_scores, parameter grads).
    pub fn backward(&self, trace: &FcTrace<T>, d_out: &Tensor<T>) -> (Tensor<T>, FcGrads<T>) {
        let n = self.h * self.w * self.k;
        let dout = d_out.as_slice();

        // w2: n x d, out = w2 * hidden + b2
        let mut g_w2 = vec![T::zero(); n * self.d];
        crate::tensor::gemm_nt(n, 1, self.d, dout, &trace.hidden, &mut g_w2);
        let g_b2 = dout.to_vec();
        let mut d_hidden = vec![T::zero(); self.d];
        crate::tensor::gemm_tn(self.d, n, 1, &self.w2, dout, &mut d_hidden);

        for (dh, &pre) in d_hidden.iter_mut().zip(trace.hidden_pre.iter()) {
            if pre <= T::zero() {
                *dh = T::zero();
            }
        }

        let mut g_w1 = vec![T::zero(); self.d * n];
        crate::tensor::gemm_nt(self.d, 1, n, &d_hidden, &trace.input, &mut g_w1);
        let g_b1 = d_hidden.clone();
        let mut d_in = vec![T::zero(); n];
        crate::tensor::gemm_tn(n, self.d, 1, &self.w1, &d_hidden, &mut d_in);

        (
            Tensor::from_vec(self.k, self.h, self.w, d_in).expect("shape by construction"),
            FcGrads {
                w1: g_w1,
                b1: g_b1,
                w2: g_w2,
                b2: g_b2,
            },
        )
    }
}
