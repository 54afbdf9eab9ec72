//! Trains a compact model for a few epochs with Dice-gated checkpointing,
//! reloads the best checkpoint and checks that it predicts identically.

use std::ops::ControlFlow;

use ucyclemlp::dataio::{synth_generate, Dataset};
use ucyclemlp::trainer::{default_loss, evaluate, fit, load_checkpoint, OptimConfig};
use ucyclemlp::{ModelConfig, UCycleMLP};

fn main() -> ucyclemlp::Result<()> {
    let config = ModelConfig::compact(32);
    let data = synth_generate(8, 32, 2, 3)?;
    let (train, val) = data.samples.split_at(6);
    let train = Dataset {
        samples: train.to_vec(),
        num_classes: 2,
    };
    let val = Dataset {
        samples: val.to_vec(),
        num_classes: 2,
    };

    let path = std::env::temp_dir().join("ucyclemlp-example.ckpt");
    let mut model = UCycleMLP::<f32>::new(&config, 3)?;
    let optim = OptimConfig {
        epochs: 6,
        batch_size: 2,
        lr: 1e-3,
        seed: 3,
        ..OptimConfig::default()
    };
    let report = fit(&mut model, &train, &val, &default_loss(1), &optim, Some(&path), |log| {
        println!("{log}");
        ControlFlow::Continue(())
    })?;

    let (mut restored, best) = load_checkpoint::<f32>(&path)?;
    println!("checkpoint {} stores best Dice {best:.4}", path.display());
    assert_eq!(best, report.best_dice);
    println!("restored model val Dice {:.4}", evaluate(&mut restored, &val, 4)?.mean_dice);
    Ok(())
}
