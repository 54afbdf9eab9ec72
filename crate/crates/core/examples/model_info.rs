//! Parameter and FLOP accounting for the default network and its ablations.

use ucyclemlp::blocks::UpsamplerKind;
use ucyclemlp::{ModelConfig, UCycleMLP};

fn main() -> ucyclemlp::Result<()> {
    let base = ModelConfig::default();
    let model = UCycleMLP::<f32>::new(&base, 0)?;
    let flops = model.count_flops(224, 224);
    println!("parameters        {}", model.count_params());
    println!("GFLOPs at 224²    {:.1}", flops.total as f64 / 1e9);
    println!("attention share   {:.1}%", 100.0 * flops.attention_share());
    for (s, c, h, w) in model.arch.shape_ladder(224, 224) {
        println!("  F{s}: {c}×{h}×{w}");
    }

    let no_ccm = UCycleMLP::<f32>::new(&ModelConfig { use_ccm: false, ..base.clone() }, 0)?;
    println!(
        "without CCM       {} (-{})",
        no_ccm.count_params(),
        model.count_params() - no_ccm.count_params()
    );
    let bilinear = UCycleMLP::<f32>::new(
        &ModelConfig {
            upsampler: UpsamplerKind::Bilinear,
            ..base
        },
        0,
    )?;
    println!("bilinear decoder  {}", bilinear.count_params());
    Ok(())
}
