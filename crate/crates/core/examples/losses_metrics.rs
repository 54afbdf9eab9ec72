//! Both training objectives and the evaluation metrics on toy inputs.

use ucyclemlp::objectives::{bce_focal, confusion, dsc, f1, hybrid_loss, iou, mean_dice, LossConfig, LossMode};
use ucyclemlp::{Graph, Tensor};

fn main() -> ucyclemlp::Result<()> {
    // 1×4×2×2 logits that mostly agree with the labels
    let labels = [0u8, 1, 2, 3];
    let logits = Tensor::from_fn(&[1, 4, 2, 2], |i| if i / 4 == labels[i % 4] as usize { 2.0 } else { -1.0 });
    let mut g = Graph::<f64>::new();
    let x = g.constant(logits);
    let cfg = LossConfig {
        mode: LossMode::HybridCeDice,
        ..LossConfig::default()
    };
    let l = hybrid_loss(&mut g, x, &labels, &cfg)?;
    println!("hybrid CE+Dice (alpha {}) = {:.5}", cfg.alpha, g.value(l).data()[0]);

    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![3.0, -2.0, 0.5, -0.5])?);
    let l = bce_focal(&mut g, x, &[1, 0, 0, 1], &LossConfig::default())?;
    println!("BCE+Focal (gamma 2) = {:.5}", g.value(l).data()[0]);

    let pred = [0u8, 1, 1, 0, 1, 1, 0, 0];
    let gt = [0u8, 1, 0, 0, 1, 1, 1, 0];
    let c = confusion(&pred, &gt, 2)?.classes[1];
    println!("tp {} fp {} fn {} tn {}", c.tp, c.fp, c.fn_, c.tn);
    println!("DSC {:.4}  IoU {:.4}  F1 {:.4}", dsc(&c), iou(&c), f1(&c));
    println!("mean foreground Dice {:.4}", mean_dice(&pred, &gt, 2, true)?);
    Ok(())
}
