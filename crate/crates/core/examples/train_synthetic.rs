//! Overfits the default network on a handful of synthetic images.
//!
//! cargo run --release --example train_synthetic -- [samples] [size] [epochs] [classes]
//!
//! `classes` is 2 (binary ellipses, sigmoid head) or 4 (cardiac-like slices).

use std::ops::ControlFlow;
use std::time::Instant;

use ucyclemlp::dataio::synth_generate;
use ucyclemlp::trainer::{default_loss, fit, OptimConfig};
use ucyclemlp::{ModelConfig, UCycleMLP};

fn main() -> ucyclemlp::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let samples = args.first().copied().unwrap_or(8);
    let size = args.get(1).copied().unwrap_or(64);
    let epochs = args.get(2).copied().unwrap_or(20);
    let classes = args.get(3).copied().unwrap_or(2);

    let config = ModelConfig {
        input_size: (size, size),
        num_classes: if classes == 2 { 1 } else { classes },
        ..ModelConfig::default()
    };
    let data = synth_generate(samples, size, classes, 1)?;
    let mut model = UCycleMLP::<f32>::new(&config, 1)?;
    println!("{} parameters", model.count_params());

    let optim = OptimConfig {
        epochs,
        seed: 1,
        ..OptimConfig::default()
    };
    let start = Instant::now();
    let report = fit(
        &mut model,
        &data,
        &Default::default(),
        &default_loss(config.num_classes),
        &optim,
        None,
        |log| {
            println!("{log}  ({:.1}s)", start.elapsed().as_secs_f64());
            ControlFlow::Continue(())
        },
    )?;
    println!("best training Dice {:.4}", report.best_dice);
    Ok(())
}
