//! Reverse-mode autodiff on a two-layer perceptron, checked against a
//! central difference.

use ucyclemlp::{Graph, Tensor};

fn loss(w1: &Tensor<f64>, w2: &Tensor<f64>, x: &Tensor<f64>) -> ucyclemlp::Result<(f64, Tensor<f64>)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let a = g.leaf(w1.clone(), true);
    let b = g.leaf(w2.clone(), false);
    let h = g.matmul(xv, a)?;
    let h = g.silu(h)?;
    let y = g.matmul(h, b)?;
    let y = g.sigmoid(y)?;
    let l = g.mean_all(y)?;
    let value = g.value(l).data()[0];
    let grads = g.backward(l)?;
    Ok((value, grads.get(a).expect("leaf requires grad").clone()))
}

fn main() -> ucyclemlp::Result<()> {
    let x = Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.37).sin());
    let w1 = Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.91).cos() * 0.5);
    let w2 = Tensor::from_fn(&[5, 2], |i| 0.3 - i as f64 * 0.07);

    let (value, grad) = loss(&w1, &w2, &x)?;
    println!("loss {value:.6}");

    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..w1.len() {
        let mut up = w1.clone();
        up.data_mut()[i] += h;
        let mut down = w1.clone();
        down.data_mut()[i] -= h;
        let numeric = (loss(&up, &w2, &x)?.0 - loss(&down, &w2, &x)?.0) / (2.0 * h);
        worst = worst.max((numeric - grad.data()[i]).abs());
    }
    println!("dL/dW1 {:?}", grad.shape());
    println!("max |analytic - numeric| {worst:.2e}");
    Ok(())
}
