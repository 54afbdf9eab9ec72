use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// `α·CE + (1−α)·Dice` over softmax probabilities.
    HybridCeDice,
    /// `BCE + Focal` over a single sigmoid logit.
    BceFocal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub mode: LossMode,
    pub alpha: f64,
    pub gamma: f64,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mode: LossMode::BceFocal,
            alpha: 0.4,
            gamma: 2.0,
            dice_smooth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("loss alpha {} outside [0, 1]", self.alpha)));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config(format!("focal gamma {} is negative", self.gamma)));
        }
        if self.dice_smooth <= 0.0 {
            return Err(Error::Config(format!("dice_smooth {} must be positive", self.dice_smooth)));
        }
        Ok(())
    }
}

/// Checks `target` against `N×K×H×W` logits and returns `(n, k, hw)`.
fn label_dims<T: Element>(g: &Graph<T>, logits: Var, target: &[u8], op: &'static str) -> Result<(usize, usize, usize)> {
    let s = g.shape(logits);
    if s.len() != 4 {
        return Err(Error::dim(op, format!("logits {s:?}")));
    }
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    if target.len() != n * hw {
        return Err(Error::dim(op, format!("{} labels for logits {s:?}", target.len())));
    }
    let classes = k.max(2);
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= classes) {
        return Err(Error::dim(op, format!("label {bad} with {classes} classes")));
    }
    Ok((n, k, hw))
}

/// One-hot `N×K×H×W` encoding of integer labels.
pub fn one_hot<T: Element>(target: &[u8], n: usize, k: usize, h: usize, w: usize) -> Tensor<T> {
    let hw = h * w;
    let mut t = Tensor::zeros(&[n, k, h, w]);
    let d = t.data_mut();
    for i in 0..n {
        for p in 0..hw {
            let c = target[i * hw + p] as usize;
            d[(i * k + c) * hw + p] = T::one();
        }
    }
    t
}

/// Mean over pixels of `−ln softmax(logits)[target]`.
pub fn cross_entropy<T: Element>(g: &mut Graph<T>, logits: Var, target: &[u8]) -> Result<Var> {
    let (n, k, hw) = label_dims(g, logits, target, "cross_entropy")?;
    if k < 2 {
        return Err(Error::dim("cross_entropy", "needs at least two class logits"));
    }
    let s = g.shape(logits).to_vec();
    let logp = g.log_softmax(logits, 1)?;
    let oh = g.constant(one_hot(target, n, k, s[2], s[3]));
    let picked = g.mul(logp, oh)?;
    let total = g.sum_all(picked)?;
    g.mul_scalar(total, T::from_f64(-1.0 / (n * hw) as f64))
}

/// Soft Dice over probabilities: `1 − mean_k (2Σpg + ε)/(Σp + Σg + ε)`,
/// sums taken over the whole batch. `probs` and `onehot` are `N×K×H×W`.
pub fn soft_dice<T: Element>(g: &mut Graph<T>, probs: Var, onehot: Var, smooth: f64) -> Result<Var> {
    if g.shape(probs) != g.shape(onehot) {
        return Err(Error::dim(
            "dice_loss",
            format!("{:?} vs {:?}", g.shape(probs), g.shape(onehot)),
        ));
    }
    let eps = T::from_f64(smooth);
    let pg = g.mul(probs, onehot)?;
    let inter = g.channel_sum(pg)?;
    let psum = g.channel_sum(probs)?;
    let gsum = g.channel_sum(onehot)?;
    let num = g.mul_scalar(inter, T::from_f64(2.0))?;
    let num = g.add_scalar(num, eps)?;
    let den = g.add(psum, gsum)?;
    let den = g.add_scalar(den, eps)?;
    let ratio = g.div(num, den)?;
    let mean = g.mean_all(ratio)?;
    let neg = g.neg(mean)?;
    g.add_scalar(neg, T::one())
}

/// Soft Dice on logits: softmax over classes for `K ≥ 2`, sigmoid of the
/// single foreground logit for `K = 1`.
pub fn dice_loss<T: Element>(g: &mut Graph<T>, logits: Var, target: &[u8], smooth: f64) -> Result<Var> {
    let (n, k, _) = label_dims(g, logits, target, "dice_loss")?;
    let s = g.shape(logits).to_vec();
    let probs = if k == 1 {
        g.sigmoid(logits)?
    } else {
        g.softmax(logits, 1)?
    };
    let oh = if k == 1 {
        Tensor::from_fn(&s, |i| T::from_f64(target[i] as f64))
    } else {
        one_hot(target, n, k, s[2], s[3])
    };
    let oh = g.constant(oh);
    soft_dice(g, probs, oh, smooth)
}

pub fn hybrid_loss<T: Element>(g: &mut Graph<T>, logits: Var, target: &[u8], cfg: &LossConfig) -> Result<Var> {
    let ce = cross_entropy(g, logits, target)?;
    let dice = dice_loss(g, logits, target, cfg.dice_smooth)?;
    let a = g.mul_scalar(ce, T::from_f64(cfg.alpha))?;
    let b = g.mul_scalar(dice, T::from_f64(1.0 - cfg.alpha))?;
    g.add(a, b)
}

/// `−ln p_t` per pixel, computed as `softplus(−z)` with `z = x·(2y−1)`,
/// together with `z` itself.
fn neg_log_pt<T: Element>(g: &mut Graph<T>, logits: Var, target: &[u8], op: &'static str) -> Result<(Var, Var)> {
    let (_, k, _) = label_dims(g, logits, target, op)?;
    if k != 1 {
        return Err(Error::dim(op, format!("expects one logit channel, got {k}")));
    }
    let sign = Tensor::from_fn(g.shape(logits), |i| T::from_f64(2.0 * target[i] as f64 - 1.0));
    let sign = g.constant(sign);
    let z = g.mul(logits, sign)?;
    let mz = g.neg(z)?;
    Ok((g.softplus(mz)?, z))
}

/// Binary cross-entropy on logits, mean over pixels.
pub fn bce<T: Element>(g: &mut Graph<T>, logits: Var, target: &[u8]) -> Result<Var> {
    let (nll, _) = neg_log_pt(g, logits, target, "bce")?;
    g.mean_all(nll)
}

/// Focal loss `(1−p_t)^γ·(−ln p_t)`, mean over pixels.
pub fn focal<T: Element>(g: &mut Graph<T>, logits: Var, target: &[u8], gamma: f64) -> Result<Var> {
    let (nll, z) = neg_log_pt(g, logits, target, "focal")?;
    let pt = g.sigmoid(z)?;
    let miss = g.neg(pt)?;
    let miss = g.add_scalar(miss, T::one())?;
    let modulate = g.pow_scalar(miss, T::from_f64(gamma))?;
    let weighted = g.mul(modulate, nll)?;
    g.mean_all(weighted)
}

pub fn bce_focal<T: Element>(g: &mut Graph<T>, logits: Var, target: &[u8], cfg: &LossConfig) -> Result<Var> {
    let b = bce(g, logits, target)?;
    let f = focal(g, logits, target, cfg.gamma)?;
    g.add(b, f)
}

/// Dispatches on `cfg.mode`.
pub fn loss<T: Element>(g: &mut Graph<T>, logits: Var, target: &[u8], cfg: &LossConfig) -> Result<Var> {
    match cfg.mode {
        LossMode::HybridCeDice => hybrid_loss(g, logits, target, cfg),
        LossMode::BceFocal => bce_focal(g, logits, target, cfg),
    }
}
