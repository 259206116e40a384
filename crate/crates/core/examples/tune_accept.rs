//! Trains one sprite-benchmark variant and prints the probe numbers the
//! acceptance suite asserts. Used to pick the frozen benchmark config.
//!
//! cargo run --release -p locus-core --example tune_accept -- \
//!     [steps] [base] [dec] [loss: perceptual|l1|l2] [bneck: keypoint|fc]

use locus_core::config::RunConfig;
use locus_core::data::Dataset;
use locus_core::eval::{extract_probe_data, fit_probe, probe_test_error};
use locus_core::loss::{LossKind, LossNet};
use locus_core::nets::{BottleneckKind, LandmarkModel};
use locus_core::trainer::{fit, TrainState};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let base: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let dec: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(24);
    let loss_kind = match args.get(4).map(|s| s.as_str()) {
        Some("l1") => LossKind::L1,
        Some("l2") => LossKind::L2,
        _ => LossKind::Perceptual,
    };
    let bneck = match args.get(5).map(|s| s.as_str()) {
        Some("fc") => BottleneckKind::Fc,
        _ => BottleneckKind::Keypoint,
    };
    let sigma: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let lr: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(1e-2);

    let mut cfg = RunConfig::load(None, &[]).unwrap();
    cfg.model.k = 10;
    cfg.model.base_channels = base;
    cfg.model.decoder_start_channels = dec;
    cfg.model.decoder_min_channels = (dec / 2).max(8);
    cfg.bottleneck.kind = bneck;
    cfg.bottleneck.d = 20;
    cfg.loss.kind = loss_kind;
    cfg.loss.lossnet_channels = vec![4, 6, 8, 8, 8];
    cfg.model.init = locus_core::nets::InitScheme::He;
    cfg.model.sigma = sigma;
    cfg.train.lr = lr;
    cfg.train.max_steps = steps;
    cfg.train.batch_size = 32;
    cfg.data.n_train = 2000;
    cfg.data.n_val = 50;
    cfg.data.n_test = 200;
    let eff = cfg.effective();

    let dataset = Dataset::<f32>::sprites(&eff.data, &eff.warp).unwrap();
    let lossnet = LossNet::from_seed(&eff.loss.lossnet_channels, eff.loss.lossnet_seed).unwrap();

    let mut model = LandmarkModel::<f32>::new(&eff.model, &eff.bottleneck, eff.train.seed).unwrap();
    let untrained = model.clone();

    let mut state = TrainState::new(&model, &eff.train, &eff.loss);
    let t0 = std::time::Instant::now();
    fit(
        &mut model, &lossnet, &dataset, &eff.train, &eff.loss, &mut state, None, None,
    )
    .unwrap();
    let train_time = t0.elapsed().as_secs_f64();

    let probe_error = |m: &LandmarkModel<f32>| -> f64 {
        let fit_data = extract_probe_data(m, &dataset, 0..500).unwrap();
        let test_data = extract_probe_data(m, &dataset, dataset.split_range(locus_core::data::Split::Test)).unwrap();
        let probe = fit_probe(&fit_data.features, &fit_data.targets, &eff.eval).unwrap();
        probe_test_error(&probe, &test_data.features, &test_data.gt_points, &eff.eval).unwrap()
    };

    let trained_err = probe_error(&model);
    let untrained_err = probe_error(&untrained);

    // how much the detected keypoints actually move across test images
    let spread = |m: &LandmarkModel<f32>| -> f64 {
        let test = extract_probe_data(m, &dataset, 2050..2150).unwrap();
        let k = test.features[0].len();
        let mut total = 0.0;
        for j in 0..k {
            let vals: Vec<f64> = test.features.iter().map(|f| f[j]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            total += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        }
        (total / k as f64).sqrt()
    };
    println!(
        "keypoint spread trained {:.4}, untrained {:.4}",
        spread(&model),
        spread(&untrained)
    );
    println!(
        "steps={steps} base={base} dec={dec} loss={loss_kind:?} bneck={bneck:?}\n\
         train time: {train_time:.1} s ({:.2} s/step)\n\
         final loss EMA: {:.5}\n\
         probe error trained:   {trained_err:.3}%\n\
         probe error untrained: {untrained_err:.3}%\n\
         ratio: {:.3}",
        train_time / steps as f64,
        state.ema_loss,
        trained_err / untrained_err
    );
}
