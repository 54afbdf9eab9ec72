//! Compares engine kernels with the naive reference loops on one input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ucyclemlp::oracle::{naive_channel_attention, naive_conv2d, naive_upsample_bilinear};
use ucyclemlp::blocks::{channel_attention, upsample_bilinear};
use ucyclemlp::tensor::Conv2dOpts;
use ucyclemlp::{Graph, Tensor};

fn main() -> ucyclemlp::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut random = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let x = random(&[2, 3, 9, 9]);
    let w = random(&[4, 3, 3, 3]);

    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let opts = Conv2dOpts { stride: 2, padding: 2, dilation: 2 };
    let y = g.conv2d(xv, wv, None, opts)?;
    println!("conv2d            {:.2e}", g.value(y).max_abs_diff(&naive_conv2d(&x, &w, None, 2, 2, 2)));

    let beta = g.constant(Tensor::full(&[1], 0.7));
    let y = channel_attention(&mut g, xv, beta)?;
    println!("channel attention {:.2e}", g.value(y).max_abs_diff(&naive_channel_attention(&x, 0.7)));

    let y = upsample_bilinear(&mut g, xv, 2)?;
    println!("bilinear x2       {:.2e}", g.value(y).max_abs_diff(&naive_upsample_bilinear(&x, 2)));
    Ok(())
}
