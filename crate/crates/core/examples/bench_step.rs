//! Times training steps at a given config; used to size desk-scale runs.
//! Run: cargo run --release -p locus-core --example bench_step [base] [dec] [threads]

use locus_core::loss::{LossConfig, LossNet};
use locus_core::nets::{BottleneckConfig, LandmarkModel, ModelConfig};
use locus_core::tensor::Tensor;
use locus_core::trainer::{batch_for_step, train_step, PairSource, TrainConfig, TrainState};
use locus_core::warp::{make_pair, DiscountMask, WarpConfig};

struct SynthSource {
    base_images: Vec<Tensor<f32>>,
    warp: WarpConfig,
}

impl PairSource<f32> for SynthSource {
    fn training_pair(
        &self,
        seed: u64,
    ) -> locus_core::Result<(Tensor<f32>, Tensor<f32>, DiscountMask<f32>)> {
        let img = &self.base_images[(seed % self.base_images.len() as u64) as usize];
        make_pair(img, seed, &self.warp)
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let base: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let dec: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(32);
    let threads: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);

    let cfg = ModelConfig {
        input_size: 64,
        k: 10,
        base_channels: base,
        decoder_start_channels: dec,
        decoder_min_channels: dec.min(16),
        ..ModelConfig::default()
    };
    let mut model = LandmarkModel::<f32>::new(&cfg, &BottleneckConfig::default(), 0).unwrap();
    println!("params: {}", model.param_count());

    let loss_cfg = LossConfig {
        lossnet_channels: vec![4, 6, 8, 8, 8],
        ..LossConfig::default()
    };
    let lossnet = LossNet::from_seed(&loss_cfg.lossnet_channels, 0).unwrap();

    let images: Vec<Tensor<f32>> = (0..16)
        .map(|i| {
            Tensor::from_fn(3, 64, 64, |c, y, x| {
                0.5 + 0.4 * (((c + i) as f32 * 0.7 + y as f32 * 0.2 + x as f32 * 0.13).sin())
            })
        })
        .collect();
    let source = SynthSource {
        base_images: images,
        warp: WarpConfig::default(),
    };

    let tcfg = TrainConfig {
        batch_size: 32,
        threads,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&model, &tcfg, &loss_cfg);

    // warm-up step
    let batch = batch_for_step(&source, &tcfg, 0).unwrap();
    train_step(&mut model, &lossnet, &batch, &mut state, &tcfg, &loss_cfg).unwrap();

    let t0 = std::time::Instant::now();
    let n_steps = 5;
    for step in 1..=n_steps {
        let tb = std::time::Instant::now();
        let batch = batch_for_step(&source, &tcfg, step).unwrap();
        let t_batch = tb.elapsed();
        let ts = std::time::Instant::now();
        let stats = train_step(&mut model, &lossnet, &batch, &mut state, &tcfg, &loss_cfg).unwrap();
        println!(
            "step {step}: batch {:.0} ms, step {:.0} ms, loss {:.5}",
            t_batch.as_secs_f64() * 1e3,
            ts.elapsed().as_secs_f64() * 1e3,
            stats.loss
        );
    }
    let per = t0.elapsed().as_secs_f64() / n_steps as f64;
    println!("avg {:.2} s/step -> {:.0} steps in 5 min", per, 300.0 / per);
}
