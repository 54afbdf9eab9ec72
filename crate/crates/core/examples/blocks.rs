//! Runs each building block on a small feature map and prints its output
//! shape and parameter count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ucyclemlp::blocks::{
    Block, Buffers, Cawe, ChannelCycleMlp, CycleFc, CycleMlp, DenseAtrous, Forward, Init, Pawe, Stepsize, Upsampler,
    UpsamplerKind, WeightExcitation, CYCLE_MLP_STEPSIZES,
};
use ucyclemlp::tensor::ParamStore;
use ucyclemlp::Tensor;

fn show<B: Block>(name: &str, block: &B, x: &Tensor<f32>) -> ucyclemlp::Result<()> {
    let mut params = ParamStore::new();
    let mut buffers = Buffers::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    block.init(&mut Init {
        params: &mut params,
        buffers: &mut buffers,
        rng: &mut rng,
    })?;
    let mut f = Forward::new(&params, &mut buffers, false, 0);
    let xv = f.input(x.clone(), false);
    let y = block.forward(&mut f, xv)?;
    println!(
        "{name:<14} {:?} -> {:?}  {} params",
        x.shape(),
        f.graph.shape(y),
        params.numel()
    );
    Ok(())
}

fn main() -> ucyclemlp::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(&[1, 16, 16, 16], |_| rng.gen_range(-1.0f32..1.0));

    show("pawe", &Pawe::new("pawe", 16, 4, 0.1)?, &x)?;
    show("excitation", &WeightExcitation::new("we", 16, 4)?, &x)?;
    show("dense_atrous", &DenseAtrous::new("da", 16, 32, 3, 8, 2)?, &x)?;
    show("cawe", &Cawe::new("cawe", 16, 4)?, &x)?;
    show("cycle_fc 1x7", &CycleFc::new("fc", 16, 16, Stepsize::new(1, 7)?), &x)?;
    show("cycle_mlp", &CycleMlp::new("mlp", 16, &CYCLE_MLP_STEPSIZES)?, &x)?;
    show("ccm", &ChannelCycleMlp::new("ccm", 16, 4, &CYCLE_MLP_STEPSIZES)?, &x)?;
    show("up transposed", &Upsampler::new("up", UpsamplerKind::Transposed, 16, 8), &x)?;
    show("up bilinear", &Upsampler::new("up", UpsamplerKind::Bilinear, 16, 8), &x)?;
    Ok(())
}
