//! Command implementations: all orchestration, no math.

use locus_core::config::RunConfig;
use locus_core::data::{DataConfig, DataKind, Dataset, Split};
use locus_core::error::{Error, Result};
use locus_core::eval::{
    assign_keypoints, extract_probe_data, fit_probe, pck_at_d, probe_test_error,
    sample_efficiency_sweep, stability_report, swap_grid, to_pixels,
};
use locus_core::figures::{keypoint_overlay, quadruplet_strip};
use locus_core::imgio;
use locus_core::loss::LossNet;
use locus_core::nets::LandmarkModel;
use locus_core::tensor::{Point, Tensor};
use locus_core::trainer::{self, PairSource};
use locus_core::warp::mix_seed;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

type F = locus_core::F;

static STOP: AtomicBool = AtomicBool::new(false);

extern "C" fn on_sigint(_: libc::c_int) {
    STOP.store(true, Ordering::Relaxed);
}

fn install_sigint_handler() {
    unsafe {
        libc::signal(
            libc::SIGINT,
            on_sigint as extern "C" fn(libc::c_int) as usize as libc::sighandler_t,
        );
    }
}

fn persist_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = cfg.to_pretty_json();
    std::fs::write(dir.join("config.json"), &json)?;
    log::info!("resolved config:\n{json}");
    Ok(())
}

/// Builds the dataset described by the config, optionally redirected to a
/// folder given on the command line. A folder written by `synth-data` is
/// picked up with its landmark manifest.
fn open_dataset(cfg: &RunConfig, data_dir: Option<&Path>) -> Result<Dataset<F>> {
    let eff = cfg.effective();
    let mut dc: DataConfig = eff.data.clone();
    if let Some(dir) = data_dir {
        dc.path = Some(dir.to_path_buf());
        if dc.kind == DataKind::Sprites {
            dc.kind = DataKind::Images;
            let manifest = dir.join("landmarks.csv");
            if manifest.exists() {
                dc.manifest = Some(manifest);
            }
        }
    }
    match dc.kind {
        DataKind::Sprites => Dataset::sprites(&dc, &eff.warp),
        _ => Dataset::ingest_folder(&dc, &eff.warp),
    }
}

pub fn synth_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let eff = cfg.effective();
    let ds = Dataset::<F>::sprites(&eff.data, &eff.warp)?;
    std::fs::create_dir_all(out)?;
    locus_core::data::write_sprite_dataset(&ds, out)?;
    persist_config(cfg, out)?;
    println!(
        "wrote {} sprites ({} train / {} val / {} test) to {}",
        ds.len(),
        ds.split_range(Split::Train).len(),
        ds.split_range(Split::Val).len(),
        ds.split_range(Split::Test).len(),
        out.display()
    );
    Ok(())
}

fn build_lossnet(cfg: &RunConfig) -> Result<LossNet<F>> {
    let eff = cfg.effective();
    match &eff.loss.lossnet_path {
        Some(p) => LossNet::load(p),
        None => LossNet::from_seed(&eff.loss.lossnet_channels, eff.loss.lossnet_seed),
    }
}

pub fn train(cfg: &RunConfig, out: &Path, data_dir: Option<&Path>, resume: bool) -> Result<()> {
    install_sigint_handler();
    std::fs::create_dir_all(out)?;

    let latest = out.join("checkpoints").join("latest.ckpt");
    let (mut model, mut state, train_cfg, loss_cfg, run_cfg) = if resume && latest.exists() {
        // a resumed run continues under its persisted configuration
        let persisted = out.join("config.json");
        let run_cfg = if persisted.exists() {
            RunConfig::load(Some(&persisted), &[])?
        } else {
            cfg.clone()
        };
        let (model, state, tc, lc) = trainer::load_train_checkpoint::<F>(&latest)?;
        log::info!("resuming from step {}", state.step);
        (model, state, tc, lc, run_cfg)
    } else {
        persist_config(cfg, out)?;
        let eff = cfg.effective();
        let model = LandmarkModel::new(&eff.model, &eff.bottleneck, eff.train.seed)?;
        let state = trainer::TrainState::new(&model, &eff.train, &eff.loss);
        (model, state, eff.train.clone(), eff.loss.clone(), cfg.clone())
    };

    let dataset = open_dataset(&run_cfg, data_dir)?;
    let lossnet = build_lossnet(&run_cfg)?;

    trainer::fit(
        &mut model,
        &lossnet,
        &dataset,
        &train_cfg,
        &loss_cfg,
        &mut state,
        Some(out),
        Some(&STOP),
    )?;

    // a reconstruction strip for quick visual inspection
    let strip_pairs: Result<Vec<(Tensor<F>, Tensor<F>)>> = (0..4u64)
        .map(|i| {
            dataset
                .training_pair(mix_seed(0xF16, i))
                .map(|(s, t, _)| (s, t))
        })
        .collect();
    if let Ok(pairs) = strip_pairs {
        let strip = quadruplet_strip(&model, &pairs)?;
        imgio::save_png(&out.join("figures").join("reconstructions.png"), &strip)?;
    }

    println!(
        "trained to step {} (loss EMA {:.5}); checkpoints in {}",
        state.step,
        state.ema_loss,
        out.join("checkpoints").display()
    );
    Ok(())
}

pub enum EvalProtocol {
    Probe,
    Pck,
    Assign,
    Sweep,
    Stability,
}

pub fn eval(
    cfg: &RunConfig,
    ckpt: &Path,
    data_dir: Option<&Path>,
    protocol: EvalProtocol,
    out: &Path,
    ns_override: Option<&str>,
    d_override: Option<f64>,
) -> Result<()> {
    if !ckpt.exists() {
        return Err(Error::invalid_input(format!(
            "checkpoint {} does not exist",
            ckpt.display()
        )));
    }
    let model = trainer::load_model::<F>(ckpt)?;
    let mut eval_cfg = cfg.effective().eval.clone();
    if let Some(ns) = ns_override {
        eval_cfg.ns = ns
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid_config(format!("bad --ns entry '{s}'")))
            })
            .collect::<Result<_>>()?;
    }
    if let Some(d) = d_override {
        eval_cfg.pck_d = d;
    }
    std::fs::create_dir_all(out)?;
    persist_config(cfg, out)?;
    let reports = out.join("reports");
    std::fs::create_dir_all(&reports)?;

    match protocol {
        EvalProtocol::Probe | EvalProtocol::Pck => {
            let dataset = open_dataset(cfg, data_dir)?;
            let fit_range = dataset.split_range(Split::Train);
            let test_range = dataset.split_range(Split::Test);
            let fit = extract_probe_data(&model, &dataset, fit_range)?;
            let test = extract_probe_data(&model, &dataset, test_range.clone())?;
            let probe = fit_probe(&fit.features, &fit.targets, &eval_cfg)?;
            let err = probe_test_error(&probe, &test.features, &test.gt_points, &eval_cfg)?;

            let size = dataset.config().image_size;
            let mut per_image_pck = Vec::new();
            let mut per_kp_err = vec![0.0f64; test.gt_points[0].len()];
            for (f, gt) in test.features.iter().zip(&test.gt_points) {
                let pred = probe.predict_points(f);
                let pred_px = to_pixels(&pred, size);
                let gt_px = to_pixels(gt, size);
                per_image_pck.push(pck_at_d(&pred_px, &gt_px, eval_cfg.pck_d)?);
                for (i, (p, g)) in pred_px.iter().zip(&gt_px).enumerate() {
                    per_kp_err[i] += p.dist(*g) / test.features.len() as f64;
                }
            }
            let pck = per_image_pck.iter().sum::<f64>() / per_image_pck.len() as f64;

            // PCK curve over a threshold sweep
            let curve: Vec<(f64, f64)> = (1..=12)
                .map(|d| {
                    let d = d as f64;
                    let mut total = 0.0;
                    for (f, gt) in test.features.iter().zip(&test.gt_points) {
                        let pred_px = to_pixels(&probe.predict_points(f), size);
                        let gt_px = to_pixels(gt, size);
                        total += pck_at_d(&pred_px, &gt_px, d).unwrap_or(0.0);
                    }
                    (d, total / test.features.len() as f64)
                })
                .collect();

            let report = serde_json::json!({
                "protocol": if matches!(protocol, EvalProtocol::Probe) { "probe" } else { "pck" },
                "normalized_error_percent": err,
                "pck_at_d": { "d": eval_cfg.pck_d, "percent": pck },
                "pck_curve": curve,
                "per_keypoint_pixel_error": per_kp_err,
                "lambda": probe.lambda,
                "n_fit": fit.features.len(),
                "n_test": test.features.len(),
                "seed": eval_cfg.seed,
            });
            write_report(&reports, "probe", &report)?;
            let mut csv = String::from("d,pck_percent\n");
            for (d, p) in &curve {
                csv.push_str(&format!("{d},{p:.4}\n"));
            }
            std::fs::write(reports.join("pck_curve.csv"), csv)?;

            // overlays: ground truth hollow, regressed predictions solid
            let figs = out.join("figures");
            for (i, idx) in test_range.take(6).enumerate() {
                let img = dataset.base_image(idx)?;
                let pred = probe.predict_points(&test.features[i]);
                let pred_t: Vec<Point<F>> = pred
                    .iter()
                    .map(|p| Point::new(p.x as F, p.y as F))
                    .collect();
                let gt_t: Vec<Point<F>> = test.gt_points[i]
                    .iter()
                    .map(|p| Point::new(p.x as F, p.y as F))
                    .collect();
                let overlay = keypoint_overlay(&img, &pred_t, Some(&gt_t));
                imgio::save_png(&figs.join(format!("overlay_{i:02}.png")), &overlay)?;
            }
            println!("normalized error: {err:.3}%  PCK@{}px: {pck:.2}%", eval_cfg.pck_d);
        }
        EvalProtocol::Sweep => {
            let dataset = open_dataset(cfg, data_dir)?;
            let fit = extract_probe_data(&model, &dataset, dataset.split_range(Split::Train))?;
            let test = extract_probe_data(&model, &dataset, dataset.split_range(Split::Test))?;
            let rows = sample_efficiency_sweep(
                &fit.features,
                &fit.targets,
                &test.features,
                &test.gt_points,
                &eval_cfg,
            )?;
            let mut csv = String::from("n,mean_error_percent,std\n");
            for r in &rows {
                match r.std {
                    Some(s) => csv.push_str(&format!("{},{:.4},{:.4}\n", r.n, r.mean, s)),
                    None => csv.push_str(&format!("{},{:.4},N/A\n", r.n, r.mean)),
                }
            }
            std::fs::write(reports.join("sweep.csv"), &csv)?;
            write_report(&reports, "sweep", &serde_json::json!({ "rows": rows }))?;
            println!("{csv}");
        }
        EvalProtocol::Assign => {
            // tracks: one sprite identity articulating over "time"
            let eff = cfg.effective();
            let sprite = eff.data.sprite.clone();
            let t_len = 24usize;
            let shape = locus_core::data::SpriteShape::sample(&sprite, mix_seed(sprite.seed, 901));
            let mut gt_tracks: Vec<Vec<Point<f64>>> = vec![Vec::new(); sprite.n_parts];
            let mut unsup_tracks: Vec<Vec<Point<f64>>> = vec![Vec::new(); model.cfg.k];
            for t in 0..t_len {
                let pose = locus_core::data::SpritePose::sample(&sprite, mix_seed(sprite.seed, 1000 + t as u64));
                let sample = locus_core::data::render_sprite::<F>(
                    &sprite,
                    &shape,
                    &pose,
                    locus_core::data::SpriteIllum::NEUTRAL,
                );
                let kps = model.detect(&sample.image)?;
                for (k, p) in kps.points().iter().enumerate() {
                    unsup_tracks[k].push(Point::new(p.x as f64, p.y as f64));
                }
                for (l, p) in sample.landmarks.iter().enumerate() {
                    gt_tracks[l].push(Point::new(p.x as f64, p.y as f64));
                }
            }
            let (assignment, total) = assign_keypoints(&unsup_tracks, &gt_tracks)?;
            let report = serde_json::json!({
                "protocol": "assign",
                "assignment": assignment,
                "total_mean_distance": total,
                "frames": t_len,
            });
            write_report(&reports, "assign", &report)?;
            println!("assignment: {assignment:?} (total mean distance {total:.4})");
        }
        EvalProtocol::Stability => {
            let eff = cfg.effective();
            let dims = (7usize, 3usize, 3usize);
            let grid = locus_core::data::gen_factor_grid::<F>(&eff.data.sprite, dims.0, dims.1, dims.2)?;
            let mut detections = Vec::with_capacity(grid.len());
            for s in &grid {
                let kps = model.detect(&s.image)?;
                let pts: Vec<Point<f64>> = kps
                    .points()
                    .iter()
                    .map(|p| Point::new(p.x as f64, p.y as f64))
                    .collect();
                detections.push((s.factors.expect("factor grid sample"), pts));
            }
            let rep = stability_report(&detections, dims)?;
            let mut csv = String::from("keypoint,var_pose,var_shape,var_illum\n");
            for (k, v) in rep.variance.iter().enumerate() {
                csv.push_str(&format!("{k},{:.6e},{:.6e},{:.6e}\n", v[0], v[1], v[2]));
            }
            std::fs::write(reports.join("stability.csv"), &csv)?;
            write_report(
                &reports,
                "stability",
                &serde_json::json!({ "variance": rep.variance, "ranking": rep.ranking }),
            )?;
            println!("most stable keypoints: {:?}", rep.ranking);
        }
    }
    Ok(())
}

fn write_report(dir: &Path, name: &str, value: &serde_json::Value) -> Result<()> {
    let mut f = std::fs::File::create(dir.join(format!("{name}.json")))?;
    writeln!(f, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn load_image_folder(dir: &Path, size: usize) -> Result<Vec<Tensor<F>>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid_input(format!(
            "no PNG images in {}",
            dir.display()
        )));
    }
    files
        .iter()
        .map(|f| Ok(imgio::center_crop_resize(&imgio::load_png::<F>(f)?, size)))
        .collect()
}

pub fn swap(ckpt: &Path, style: &Path, geom: &Path, out: &Path, strip: bool) -> Result<()> {
    let model = trainer::load_model::<F>(ckpt)?;
    let size = model.cfg.input_size;
    let styles = load_image_folder(style, size)?;
    let geoms = load_image_folder(geom, size)?;
    std::fs::create_dir_all(out)?;

    let tiles = swap_grid(&model, &styles, &geoms)?;
    let clamped: Vec<Vec<Option<Tensor<F>>>> = tiles
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|t| t.map(|t| t.map(|v| v.clamp(0.0, 1.0))))
                .collect()
        })
        .collect();
    let grid = imgio::tile_grid(&clamped)?;
    imgio::save_png(&out.join("swap_grid.png"), &grid)?;
    println!(
        "swap grid: {} styles x {} geometries -> {}",
        styles.len(),
        geoms.len(),
        out.join("swap_grid.png").display()
    );

    if strip {
        let pairs: Vec<(Tensor<F>, Tensor<F>)> = styles
            .iter()
            .cloned()
            .zip(geoms.iter().cloned())
            .collect();
        if pairs.is_empty() {
            return Err(Error::invalid_input("strip mode needs at least one pair"));
        }
        let strip_img = quadruplet_strip(&model, &pairs)?;
        imgio::save_png(&out.join("quadruplets.png"), &strip_img)?;
    }
    Ok(())
}
