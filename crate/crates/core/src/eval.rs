//! Evaluation protocol: linear keypoint probe, inter-ocular normalized
//! error, PCK@d, bipartite keypoint assignment, sample-efficiency sweep,
//! stability analysis over a factor grid, and style/geometry swaps.

use crate::bottleneck::{render_gaussians, KeypointSet};
use crate::error::{Error, Result};
use crate::nets::LandmarkModel;
use crate::scalar::Scalar;
use crate::tensor::{cell_coord, Point, Tensor};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Ridge strengths tried during model selection.
    pub lambda_grid: Vec<f64>,
    /// Include an intercept column in the probe.
    pub use_bias: bool,
    /// Fraction of the fit set held out for lambda selection.
    pub val_fraction: f64,
    /// Indices of the two reference keypoints for error normalization.
    pub eye_idx: (usize, usize),
    /// Report squared distances instead of Euclidean ones.
    pub squared_error: bool,
    /// Regress in pixel rather than normalized coordinates.
    pub regress_in_pixels: bool,
    /// Sweep sizes and repeats.
    pub ns: Vec<usize>,
    pub repeats: usize,
    /// PCK threshold in pixels.
    pub pck_d: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            lambda_grid: vec![0.0, 1e-6, 1e-4, 1e-2],
            use_bias: false,
            val_fraction: 0.1,
            eye_idx: (0, 1),
            squared_error: false,
            regress_in_pixels: false,
            ns: vec![1, 5, 10, 100, 500],
            repeats: 5,
            pck_d: 6.0,
            seed: 0,
        }
    }
}

/// Linear regressor from unsupervised features to annotated coordinates.
/// Bias-free by default.
#[derive(Clone, Debug)]
pub struct Probe {
    /// `(features [+1]) x outputs` weight matrix.
    pub weights: DMatrix<f64>,
    pub use_bias: bool,
    pub lambda: f64,
}

impl Probe {
    pub fn predict(&self, features: &[f64]) -> Vec<f64> {
        let f = self.weights.nrows() - usize::from(self.use_bias);
        assert_eq!(features.len(), f);
        let mut out = vec![0.0; self.weights.ncols()];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, &x) in features.iter().enumerate() {
                acc += self.weights[(i, j)] * x;
            }
            if self.use_bias {
                acc += self.weights[(f, j)];
            }
            *o = acc;
        }
        out
    }

    pub fn predict_points(&self, features: &[f64]) -> Vec<Point<f64>> {
        self.predict(features)
            .chunks(2)
            .map(|c| Point::new(c[0], c[1]))
            .collect()
    }
}

fn design_matrix(features: &[Vec<f64>], use_bias: bool) -> DMatrix<f64> {
    let n = features.len();
    let f = features[0].len() + usize::from(use_bias);
    DMatrix::from_fn(n, f, |i, j| {
        if j < features[0].len() {
            features[i][j]
        } else {
            1.0
        }
    })
}

/// Ridge least squares through the SVD. `lambda = 0` gives the minimum-norm
/// pseudo-inverse solution; rank-deficient systems fall back to it with a
/// warning either way.
fn ridge_solve(u: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let svd = u.clone().svd(true, true);
    let a = svd.u.as_ref().ok_or_else(|| Error::numeric("svd failed"))?;
    let bt = svd.v_t.as_ref().ok_or_else(|| Error::numeric("svd failed"))?;
    let s = &svd.singular_values;
    let smax = s.iter().cloned().fold(0.0f64, f64::max);
    let tol = smax * (u.nrows().max(u.ncols()) as f64) * f64::EPSILON;
    let mut dropped = 0usize;
    let filt: Vec<f64> = s
        .iter()
        .map(|&sv| {
            if sv <= tol {
                dropped += 1;
                0.0
            } else {
                sv / (sv * sv + lambda)
            }
        })
        .collect();
    if dropped > 0 && lambda == 0.0 {
        log::warn!(
            "degenerate design matrix (rank deficit {dropped}); using the pseudo-inverse solution"
        );
    }
    // W = V * diag(filt) * A^T * Y
    let aty = a.transpose() * y; // r x outputs
    let mut scaled = aty;
    for (i, f) in filt.iter().enumerate() {
        for j in 0..scaled.ncols() {
            scaled[(i, j)] *= f;
        }
    }
    Ok(bt.transpose() * scaled)
}

/// Fits the linear probe with lambda selected on a validation split of the
/// fit set (refit on everything afterwards).
pub fn fit_probe(features: &[Vec<f64>], targets: &[Vec<f64>], cfg: &EvalConfig) -> Result<Probe> {
    if features.is_empty() || features.len() != targets.len() {
        return Err(Error::invalid_input(
            "probe needs equally many feature and target rows, at least one",
        ));
    }
    let u = design_matrix(features, cfg.use_bias);
    let y = DMatrix::from_fn(targets.len(), targets[0].len(), |i, j| targets[i][j]);

    let n = features.len();
    let n_val = ((n as f64) * cfg.val_fraction).ceil() as usize;
    let lambda = if cfg.lambda_grid.len() <= 1 || n_val == 0 || n - n_val < 1 || n < 4 {
        cfg.lambda_grid.first().copied().unwrap_or(0.0)
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(crate::warp::mix_seed(cfg.seed, 31));
        order.shuffle(&mut rng);
        let (val_idx, fit_idx) = order.split_at(n_val);
        let uf = DMatrix::from_fn(fit_idx.len(), u.ncols(), |i, j| u[(fit_idx[i], j)]);
        let yf = DMatrix::from_fn(fit_idx.len(), y.ncols(), |i, j| y[(fit_idx[i], j)]);
        let uv = DMatrix::from_fn(val_idx.len(), u.ncols(), |i, j| u[(val_idx[i], j)]);
        let yv = DMatrix::from_fn(val_idx.len(), y.ncols(), |i, j| y[(val_idx[i], j)]);
        let mut best = (f64::INFINITY, cfg.lambda_grid[0]);
        for &lam in &cfg.lambda_grid {
            let w = ridge_solve(&uf, &yf, lam)?;
            let resid = &uv * &w - &yv;
            let mse = resid.iter().map(|v| v * v).sum::<f64>() / resid.len() as f64;
            if mse < best.0 {
                best = (mse, lam);
            }
        }
        best.1
    };

    let weights = ridge_solve(&u, &y, lambda)?;
    Ok(Probe {
        weights,
        use_bias: cfg.use_bias,
        lambda,
    })
}

/// Converts normalized coordinates to pixels of an `size x size` image.
pub fn to_pixels(points: &[Point<f64>], size: usize) -> Vec<Point<f64>> {
    points
        .iter()
        .map(|p| Point::new(cell_coord(p.x, size), cell_coord(p.y, size)))
        .collect()
}

/// Mean keypoint error divided by the reference ("inter-ocular") distance,
/// in percent. Distances are Euclidean unless `squared` is set.
pub fn interocular_error(
    pred: &[Point<f64>],
    gt: &[Point<f64>],
    eyes: (usize, usize),
    squared: bool,
) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::invalid_input("prediction/annotation length mismatch"));
    }
    if eyes.0 >= gt.len() || eyes.1 >= gt.len() {
        return Err(Error::invalid_input("eye index out of range"));
    }
    let iod = gt[eyes.0].dist(gt[eyes.1]);
    if iod <= 0.0 {
        return Err(Error::invalid_input(
            "coincident eye annotations: inter-ocular distance is zero",
        ));
    }
    let mean: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let d = p.dist(*g);
            if squared {
                d * d / (iod * iod)
            } else {
                d / iod
            }
        })
        .sum::<f64>()
        / pred.len() as f64;
    Ok(mean * 100.0)
}

/// Percentage of keypoints within distance `d` (inclusive) of ground truth.
pub fn pck_at_d(pred: &[Point<f64>], gt: &[Point<f64>], d: f64) -> Result<f64> {
    if d <= 0.0 {
        return Err(Error::invalid_config("pck threshold must be positive"));
    }
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::invalid_input("prediction/annotation length mismatch"));
    }
    let hits = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| p.dist(**g) <= d)
        .count();
    Ok(hits as f64 / pred.len() as f64 * 100.0)
}

/// Minimum-cost assignment of `rows` (annotated points) to `cols`
/// (discovered points), `rows <= cols`. Shortest augmenting path algorithm
/// with potentials. Returns (assignment row -> col, total cost).
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> (Vec<usize>, f64) {
    assert!(rows <= cols);
    assert_eq!(cost.len(), rows * cols);
    const INF: f64 = f64::INFINITY;
    // 1-based potentials over rows (u) and columns (v); p[j] = row matched to column j
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![usize::MAX; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    let total = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * cols + j])
        .sum();
    (assignment, total)
}

/// Matches each annotated track to a discovered keypoint channel by solving
/// the bipartite assignment with mean track distance as the cost.
pub fn assign_keypoints(
    unsup_tracks: &[Vec<Point<f64>>],
    gt_tracks: &[Vec<Point<f64>>],
) -> Result<(Vec<usize>, f64)> {
    let k = unsup_tracks.len();
    let l = gt_tracks.len();
    if k < l {
        return Err(Error::invalid_input(format!(
            "need at least as many discovered keypoints ({k}) as annotated ones ({l})"
        )));
    }
    let t = gt_tracks
        .first()
        .map(|t| t.len())
        .ok_or_else(|| Error::invalid_input("no annotated tracks"))?;
    if t == 0
        || gt_tracks.iter().any(|tr| tr.len() != t)
        || unsup_tracks.iter().any(|tr| tr.len() != t)
    {
        return Err(Error::invalid_input("tracks must be time-aligned and non-empty"));
    }
    let mut cost = vec![0.0; l * k];
    for (li, gt) in gt_tracks.iter().enumerate() {
        for (ki, us) in unsup_tracks.iter().enumerate() {
            let mean: f64 = gt.iter().zip(us).map(|(a, b)| a.dist(*b)).sum::<f64>() / t as f64;
            cost[li * k + ki] = mean;
        }
    }
    Ok(hungarian(&cost, l, k))
}

/// One row of the sample-efficiency table.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub mean: f64,
    /// `None` when only one distinct subset exists (reported as N/A).
    pub std: Option<f64>,
}

/// Fits probes on `repeats` random size-`n` subsets of the fit pool and
/// reports mean +- std of the normalized error on the fixed test set.
#[allow(clippy::too_many_arguments)]
pub fn sample_efficiency_sweep(
    fit_features: &[Vec<f64>],
    fit_targets: &[Vec<f64>],
    test_features: &[Vec<f64>],
    test_gt: &[Vec<Point<f64>>],
    cfg: &EvalConfig,
) -> Result<Vec<SweepRow>> {
    let pool = fit_features.len();
    let mut rows = Vec::with_capacity(cfg.ns.len());
    for &n in &cfg.ns {
        if n == 0 || n > pool {
            return Err(Error::invalid_input(format!(
                "sweep size {n} exceeds the labeled pool ({pool})"
            )));
        }
        let repeats = if n == pool { 1 } else { cfg.repeats.max(1) };
        let mut errors = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let mut idx: Vec<usize> = (0..pool).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(crate::warp::mix_seed(
                cfg.seed,
                0xE0_0000 + (n as u64) * 1000 + r as u64,
            ));
            idx.shuffle(&mut rng);
            idx.truncate(n);
            let f: Vec<Vec<f64>> = idx.iter().map(|&i| fit_features[i].clone()).collect();
            let t: Vec<Vec<f64>> = idx.iter().map(|&i| fit_targets[i].clone()).collect();
            let probe = fit_probe(&f, &t, cfg)?;
            errors.push(probe_test_error(&probe, test_features, test_gt, cfg)?);
        }
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        let std = if errors.len() > 1 {
            let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>()
                / (errors.len() - 1) as f64;
            Some(var.sqrt())
        } else {
            None
        };
        rows.push(SweepRow { n, mean, std });
    }
    Ok(rows)
}

/// Mean normalized error of a probe over a test set.
pub fn probe_test_error(
    probe: &Probe,
    test_features: &[Vec<f64>],
    test_gt: &[Vec<Point<f64>>],
    cfg: &EvalConfig,
) -> Result<f64> {
    if test_features.len() != test_gt.len() || test_features.is_empty() {
        return Err(Error::invalid_input("test features/annotations mismatch"));
    }
    let mut total = 0.0;
    for (f, gt) in test_features.iter().zip(test_gt) {
        let pred = probe.predict_points(f);
        total += interocular_error(&pred, gt, cfg.eye_idx, cfg.squared_error)?;
    }
    Ok(total / test_features.len() as f64)
}

/// Per-keypoint coordinate variance along each nuisance axis of a factor
/// grid, plus a most-stable-first ranking.
#[derive(Clone, Debug, Serialize)]
pub struct StabilityReport {
    /// `[keypoint][axis]` mean per-coordinate variance; axes are
    /// (pose, shape, illum).
    pub variance: Vec<[f64; 3]>,
    /// Keypoint indices ordered most stable first (ascending total variance).
    pub ranking: Vec<usize>,
}

/// `detections[i] = ((pose, shape, illum), keypoints)` over a full grid of
/// the given dimensions.
pub fn stability_report(
    detections: &[((usize, usize, usize), Vec<Point<f64>>)],
    dims: (usize, usize, usize),
) -> Result<StabilityReport> {
    let (np, ns, ni) = dims;
    if detections.len() != np * ns * ni || detections.is_empty() {
        return Err(Error::invalid_input("detections do not cover the factor grid"));
    }
    let k = detections[0].1.len();
    let lookup = |p: usize, s: usize, i: usize| -> &Vec<Point<f64>> {
        let idx = detections
            .iter()
            .position(|(f, _)| *f == (p, s, i))
            .expect("grid covers all factor combinations");
        &detections[idx].1
    };
    // mean of unbiased per-coordinate variances along one axis, over all
    // settings of the other two axes
    let axis_var = |axis: usize, kp: usize| -> f64 {
        let mut total = 0.0;
        let mut lines = 0usize;
        let (a_len, b_len, c_len) = match axis {
            0 => (ns, ni, np),
            1 => (np, ni, ns),
            _ => (np, ns, ni),
        };
        if c_len < 2 {
            return 0.0;
        }
        for a in 0..a_len {
            for b in 0..b_len {
                let pts: Vec<Point<f64>> = (0..c_len)
                    .map(|c| {
                        let (p, s, i) = match axis {
                            0 => (c, a, b),
                            1 => (a, c, b),
                            _ => (a, b, c),
                        };
                        lookup(p, s, i)[kp]
                    })
                    .collect();
                let mx = pts.iter().map(|p| p.x).sum::<f64>() / c_len as f64;
                let my = pts.iter().map(|p| p.y).sum::<f64>() / c_len as f64;
                let vx = pts.iter().map(|p| (p.x - mx).powi(2)).sum::<f64>() / (c_len - 1) as f64;
                let vy = pts.iter().map(|p| (p.y - my).powi(2)).sum::<f64>() / (c_len - 1) as f64;
                total += (vx + vy) / 2.0;
                lines += 1;
            }
        }
        total / lines as f64
    };
    let variance: Vec<[f64; 3]> = (0..k)
        .map(|kp| [axis_var(0, kp), axis_var(1, kp), axis_var(2, kp)])
        .collect();
    let mut ranking: Vec<usize> = (0..k).collect();
    ranking.sort_by(|&a, &b| {
        let ta: f64 = variance[a].iter().sum();
        let tb: f64 = variance[b].iter().sum();
        ta.partial_cmp(&tb).unwrap().then(a.cmp(&b))
    });
    Ok(StabilityReport { variance, ranking })
}

/// Probe inputs extracted from a dataset split: per-sample feature vectors
/// (flattened keypoints, or the fc code for the ablation model), flattened
/// annotation targets, and the annotations as points.
pub struct ProbeData {
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub gt_points: Vec<Vec<Point<f64>>>,
}

/// Runs the detector over the items of one dataset range and pairs the
/// outputs with ground-truth landmarks.
pub fn extract_probe_data<T: Scalar>(
    model: &LandmarkModel<T>,
    dataset: &crate::data::Dataset<T>,
    range: std::ops::Range<usize>,
) -> Result<ProbeData> {
    let mut features = Vec::with_capacity(range.len());
    let mut targets = Vec::with_capacity(range.len());
    let mut gt_points = Vec::with_capacity(range.len());
    for idx in range {
        let gt = dataset.landmarks(idx).ok_or_else(|| {
            Error::invalid_input("probe evaluation needs ground-truth landmarks")
        })?;
        let img = dataset.base_image(idx)?;
        let feat: Vec<f64> = if model.fc.is_some() {
            model.detect_code(&img)?.iter().map(|v| v.to_f64_c()).collect()
        } else {
            model.detect(&img)?.flat().iter().map(|v| v.to_f64_c()).collect()
        };
        features.push(feat);
        targets.push(
            gt.iter()
                .flat_map(|p| [p.x.to_f64_c(), p.y.to_f64_c()])
                .collect(),
        );
        gt_points.push(
            gt.iter()
                .map(|p| Point::new(p.x.to_f64_c(), p.y.to_f64_c()))
                .collect(),
        );
    }
    if features.is_empty() {
        return Err(Error::invalid_input("empty dataset range for probe data"));
    }
    Ok(ProbeData {
        features,
        targets,
        gt_points,
    })
}

/// Generates one style/geometry swap: appearance from `style`, keypoints
/// from `geom`.
pub fn swap_generate<T: Scalar>(
    model: &LandmarkModel<T>,
    style: &Tensor<T>,
    geom: &Tensor<T>,
) -> Result<(Tensor<T>, KeypointSet<T>)> {
    let kps = model.detect(geom)?;
    let maps = render_gaussians(
        &kps,
        (model.cfg.heatmap_size, model.cfg.heatmap_size),
        T::from_f64_c(model.cfg.sigma),
    )?;
    let z = model.encode_appearance(style)?;
    let out = model.decode(&z, &maps)?;
    Ok((out, kps))
}

/// Swap grid tiles: geometry images across the top, style images down the
/// left, generated combinations in the body.
pub fn swap_grid<T: Scalar>(
    model: &LandmarkModel<T>,
    styles: &[Tensor<T>],
    geoms: &[Tensor<T>],
) -> Result<Vec<Vec<Option<Tensor<T>>>>> {
    let mut rows = Vec::with_capacity(styles.len() + 1);
    let mut header: Vec<Option<Tensor<T>>> = vec![None];
    header.extend(geoms.iter().cloned().map(Some));
    rows.push(header);
    for s in styles {
        let mut row = Vec::with_capacity(geoms.len() + 1);
        row.push(Some(s.clone()));
        for g in geoms {
            row.push(Some(swap_generate(model, s, g)?.0));
        }
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_assignment(cost: &[f64], rows: usize, cols: usize) -> (Vec<usize>, f64) {
        fn rec(
            cost: &[f64],
            rows: usize,
            cols: usize,
            row: usize,
            used: &mut Vec<bool>,
            cur: f64,
            pick: &mut Vec<usize>,
            best: &mut (f64, Vec<usize>),
        ) {
            if row == rows {
                if cur < best.0 {
                    *best = (cur, pick.clone());
                }
                return;
            }
            for j in 0..cols {
                if !used[j] {
                    used[j] = true;
                    pick.push(j);
                    rec(cost, rows, cols, row + 1, used, cur + cost[row * cols + j], pick, best);
                    pick.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = (f64::INFINITY, Vec::new());
        rec(
            cost,
            rows,
            cols,
            0,
            &mut vec![false; cols],
            0.0,
            &mut Vec::new(),
            &mut best,
        );
        (best.1, best.0)
    }

    #[test]
    fn hungarian_small_example() {
        let cost = [1.0, 9.0, 9.0, 1.0];
        let (assign, total) = hungarian(&cost, 2, 2);
        assert_eq!(assign, vec![0, 1]);
        assert!((total - 2.0).abs() < 1e-12);
        let (bf, bft) = brute_force_assignment(&cost, 2, 2);
        assert_eq!(assign, bf);
        assert!((total - bft).abs() < 1e-12);
    }

    #[test]
    fn hungarian_matches_brute_force_on_random_rectangles() {
        let mut s = 42u64;
        let mut rnd = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 33) as f64 / (1u64 << 31) as f64 * 10.0
        };
        for case in 0..60 {
            let rows = 1 + case % 5;
            let cols = rows + case % 3;
            let cost: Vec<f64> = (0..rows * cols).map(|_| rnd()).collect();
            let (_, total) = hungarian(&cost, rows, cols);
            let (_, bf_total) = brute_force_assignment(&cost, rows, cols);
            assert!(
                (total - bf_total).abs() < 1e-9,
                "rows {rows} cols {cols}: {total} vs {bf_total}"
            );
        }
    }

    #[test]
    fn assign_keypoints_contracts() {
        // identical tracks -> identity assignment, zero cost
        let tracks: Vec<Vec<Point<f64>>> = (0..3)
            .map(|i| (0..4).map(|t| Point::new(i as f64, t as f64)).collect())
            .collect();
        let (assign, total) = assign_keypoints(&tracks, &tracks).unwrap();
        assert_eq!(assign, vec![0, 1, 2]);
        assert!(total.abs() < 1e-12);

        // permuting discovered channels permutes the assignment
        let permuted = vec![tracks[2].clone(), tracks[0].clone(), tracks[1].clone()];
        let (assign_p, _) = assign_keypoints(&permuted, &tracks).unwrap();
        assert_eq!(assign_p, vec![1, 2, 0]);

        // K < L rejected
        assert!(assign_keypoints(&tracks[..2].to_vec(), &tracks).is_err());
    }

    #[test]
    fn probe_exact_recovery_and_normal_equation_oracle() {
        let mut s = 7u64;
        let mut rnd = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 33) as f64 / (1u64 << 31) as f64 - 0.5
        };
        let n = 40;
        let f = 6;
        let o = 4;
        let w_true: Vec<f64> = (0..f * o).map(|_| rnd()).collect();
        let features: Vec<Vec<f64>> = (0..n).map(|_| (0..f).map(|_| rnd()).collect()).collect();
        let targets: Vec<Vec<f64>> = features
            .iter()
            .map(|x| {
                (0..o)
                    .map(|j| (0..f).map(|i| x[i] * w_true[i * o + j]).sum())
                    .collect()
            })
            .collect();
        let cfg = EvalConfig {
            lambda_grid: vec![0.0],
            ..EvalConfig::default()
        };
        let probe = fit_probe(&features, &targets, &cfg).unwrap();
        // exact recovery: zero training error
        for (x, t) in features.iter().zip(&targets) {
            let pred = probe.predict(x);
            for (p, tt) in pred.iter().zip(t) {
                assert!((p - tt).abs() < 1e-8);
            }
        }

        // ridge solution matches the normal-equations oracle
        let lam = 1e-3;
        let cfg_r = EvalConfig {
            lambda_grid: vec![lam],
            ..EvalConfig::default()
        };
        let probe_r = fit_probe(&features, &targets, &cfg_r).unwrap();
        let u = design_matrix(&features, false);
        let y = DMatrix::from_fn(n, o, |i, j| targets[i][j]);
        let gram = u.transpose() * &u + DMatrix::identity(f, f) * lam;
        let oracle = gram.lu().solve(&(u.transpose() * y)).unwrap();
        for i in 0..f {
            for j in 0..o {
                assert!(
                    (probe_r.weights[(i, j)] - oracle[(i, j)]).abs() < 1e-8,
                    "({i},{j}): {} vs {}",
                    probe_r.weights[(i, j)],
                    oracle[(i, j)]
                );
            }
        }
    }

    #[test]
    fn probe_single_sample_minimum_norm() {
        let features = vec![vec![1.0, 2.0]];
        let targets = vec![vec![3.0]];
        let cfg = EvalConfig {
            lambda_grid: vec![0.0],
            ..EvalConfig::default()
        };
        let probe = fit_probe(&features, &targets, &cfg).unwrap();
        let pred = probe.predict(&features[0]);
        assert!((pred[0] - 3.0).abs() < 1e-9);
        // minimum-norm: w proportional to x
        assert!((probe.weights[(0, 0)] * 2.0 - probe.weights[(1, 0)]).abs() < 1e-9);
    }

    #[test]
    fn probe_duplicated_rows_unchanged() {
        let features = vec![vec![1.0, 0.3], vec![0.2, -1.0], vec![0.5, 0.9]];
        let targets = vec![vec![0.7], vec![-0.2], vec![1.1]];
        let cfg = EvalConfig {
            lambda_grid: vec![0.0],
            ..EvalConfig::default()
        };
        let w1 = fit_probe(&features, &targets, &cfg).unwrap().weights;
        let mut f2 = features.clone();
        f2.extend(features.clone());
        let mut t2 = targets.clone();
        t2.extend(targets.clone());
        let w2 = fit_probe(&f2, &t2, &cfg).unwrap().weights;
        for i in 0..w1.nrows() {
            assert!((w1[(i, 0)] - w2[(i, 0)]).abs() < 1e-9);
        }
    }

    #[test]
    fn probe_without_bias_maps_zero_to_zero() {
        let features = vec![vec![1.0, 0.5], vec![-0.5, 0.25], vec![0.1, 0.9]];
        let targets = vec![vec![0.3, 0.1], vec![0.2, -0.4], vec![0.0, 0.6]];
        let cfg = EvalConfig {
            lambda_grid: vec![1e-4],
            ..EvalConfig::default()
        };
        let probe = fit_probe(&features, &targets, &cfg).unwrap();
        let pred = probe.predict(&[0.0, 0.0]);
        assert!(pred.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn interocular_analytic_values() {
        let gt = vec![
            Point::new(0.0, 0.0),
            Point::new(3.0, 4.0),
            Point::new(1.0, 1.0),
        ];
        assert_eq!(interocular_error(&gt, &gt, (0, 1), false).unwrap(), 0.0);
        // every prediction off by 0.5 with eye distance 5 -> 10%
        let pred: Vec<Point<f64>> = gt.iter().map(|p| Point::new(p.x + 0.5, p.y)).collect();
        let e = interocular_error(&pred, &gt, (0, 1), false).unwrap();
        assert!((e - 10.0).abs() < 1e-9);
        // doubling all coordinates leaves the score unchanged
        let scale = |pts: &[Point<f64>]| -> Vec<Point<f64>> {
            pts.iter().map(|p| Point::new(2.0 * p.x, 2.0 * p.y)).collect()
        };
        let e2 = interocular_error(&scale(&pred), &scale(&gt), (0, 1), false).unwrap();
        assert!((e - e2).abs() < 1e-9);
        // coincident eyes rejected
        let bad = vec![Point::new(1.0, 1.0), Point::new(1.0, 1.0)];
        assert!(interocular_error(&bad, &bad, (0, 1), false).is_err());
    }

    #[test]
    fn pck_boundary_and_counts() {
        let gt = vec![Point::new(0.0, 0.0), Point::new(10.0, 0.0)];
        assert_eq!(pck_at_d(&gt, &gt, 6.0).unwrap(), 100.0);
        // one of two points at distance exactly d counts (inclusive)
        let pred = vec![Point::new(6.0, 0.0), Point::new(10.0, 0.0)];
        assert_eq!(pck_at_d(&pred, &gt, 6.0).unwrap(), 100.0);
        // errors {1, 3, 7} at d = 6 -> 2/3
        let gt3 = vec![Point::new(0.0, 0.0), Point::new(0.0, 0.0), Point::new(0.0, 0.0)];
        let pred3 = vec![Point::new(1.0, 0.0), Point::new(3.0, 0.0), Point::new(7.0, 0.0)];
        let p = pck_at_d(&pred3, &gt3, 6.0).unwrap();
        assert!((p - 200.0 / 3.0).abs() < 1e-9);
        assert!(pck_at_d(&gt, &gt, 0.0).is_err());
    }

    #[test]
    fn metrics_invariant_to_rigid_motion() {
        let gt = vec![
            Point::new(0.0, 0.0),
            Point::new(3.0, 4.0),
            Point::new(-2.0, 1.0),
        ];
        let pred = vec![
            Point::new(0.3, -0.1),
            Point::new(3.2, 4.4),
            Point::new(-1.8, 0.6),
        ];
        let (st, ct) = (0.37f64.sin(), 0.37f64.cos());
        let rot = |pts: &[Point<f64>]| -> Vec<Point<f64>> {
            pts.iter()
                .map(|p| Point::new(ct * p.x - st * p.y + 5.0, st * p.x + ct * p.y - 2.0))
                .collect()
        };
        let e1 = interocular_error(&pred, &gt, (0, 1), false).unwrap();
        let e2 = interocular_error(&rot(&pred), &rot(&gt), (0, 1), false).unwrap();
        assert!((e1 - e2).abs() < 1e-9);
        let p1 = pck_at_d(&pred, &gt, 0.5).unwrap();
        let p2 = pck_at_d(&rot(&pred), &rot(&gt), 0.5).unwrap();
        assert!((p1 - p2).abs() < 1e-9);
    }

    #[test]
    fn sweep_reports_na_for_full_pool_and_is_deterministic() {
        let mut s = 3u64;
        let mut rnd = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 33) as f64 / (1u64 << 31) as f64 - 0.5
        };
        let pool = 30;
        let features: Vec<Vec<f64>> = (0..pool).map(|_| (0..4).map(|_| rnd()).collect()).collect();
        let targets: Vec<Vec<f64>> = features
            .iter()
            .map(|f| vec![f[0] + 0.5 * f[1], f[2] - f[3], f[1] * 0.2, f[0] - f[2]])
            .collect();
        let test_features = features[..10].to_vec();
        let test_gt: Vec<Vec<Point<f64>>> = targets[..10]
            .iter()
            .map(|t| vec![Point::new(t[0], t[1]), Point::new(t[2], t[3])])
            .collect();
        let cfg = EvalConfig {
            ns: vec![5, 30],
            repeats: 3,
            lambda_grid: vec![1e-6],
            ..EvalConfig::default()
        };
        let rows = sample_efficiency_sweep(&features, &targets, &test_features, &test_gt, &cfg)
            .unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].std.is_some());
        assert!(rows[1].std.is_none(), "n == pool must report sigma as N/A");
        let rows2 = sample_efficiency_sweep(&features, &targets, &test_features, &test_gt, &cfg)
            .unwrap();
        assert_eq!(
            serde_json::to_string(&rows).unwrap(),
            serde_json::to_string(&rows2).unwrap()
        );
    }

    #[test]
    fn stability_zero_variance_for_constant_detector() {
        let dims = (3, 2, 2);
        let mut detections = Vec::new();
        for p in 0..dims.0 {
            for s in 0..dims.1 {
                for i in 0..dims.2 {
                    detections.push(((p, s, i), vec![Point::new(0.3, -0.2), Point::new(0.1, 0.9)]));
                }
            }
        }
        let rep = stability_report(&detections, dims).unwrap();
        for v in &rep.variance {
            assert!(v.iter().all(|&x| x.abs() < 1e-30), "variance {v:?}");
        }
    }

    #[test]
    fn stability_recovers_injected_noise_variance() {
        let dims = (40, 5, 5);
        let sigma = 0.05f64;
        let mut rng_state = 9u64;
        let mut gauss = || {
            // Box-Muller from the LCG
            rng_state = rng_state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let u1 = ((rng_state >> 33) as f64 / (1u64 << 31) as f64).max(1e-12);
            rng_state = rng_state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let u2 = (rng_state >> 33) as f64 / (1u64 << 31) as f64;
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        let mut detections = Vec::new();
        for p in 0..dims.0 {
            for s in 0..dims.1 {
                for i in 0..dims.2 {
                    // keypoint 0: pure noise on both coordinates along every axis
                    detections.push((
                        (p, s, i),
                        vec![Point::new(sigma * gauss(), sigma * gauss())],
                    ));
                }
            }
        }
        let rep = stability_report(&detections, dims).unwrap();
        // pose axis has 40 samples per line x 25 lines = plenty for 10%
        let measured = rep.variance[0][0];
        assert!(
            (measured - sigma * sigma).abs() < 0.1 * sigma * sigma,
            "measured {measured}, want ~{}",
            sigma * sigma
        );
    }

    #[test]
    fn stability_ranking_is_permutation_equivariant() {
        let dims = (4, 2, 2);
        let noise = [0.02, 0.3, 0.1];
        let build = |perm: &[usize]| {
            let mut out = Vec::new();
            for p in 0..dims.0 {
                for s in 0..dims.1 {
                    for i in 0..dims.2 {
                        let pts: Vec<Point<f64>> = perm
                            .iter()
                            .map(|&kp| {
                                let wig = noise[kp] * ((p * 31 + s * 7 + i * 3 + kp) as f64).sin();
                                Point::new(wig, -wig)
                            })
                            .collect();
                        out.push(((p, s, i), pts));
                    }
                }
            }
            out
        };
        let r1 = stability_report(&build(&[0, 1, 2]), dims).unwrap();
        let r2 = stability_report(&build(&[2, 0, 1]), dims).unwrap();
        // keypoint 0 is the most stable either way, and the ranking follows
        // the permutation: in build([2,0,1]) slot 1 holds old keypoint 0
        assert_eq!(r1.ranking[0], 0);
        assert_eq!(r2.ranking[0], 1);
    }
}
