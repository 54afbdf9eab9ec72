use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fd_step;
use crate::blocks::{
    AtrousConv, Block, Buffers, Cawe, ChannelCycleMlp, CycleFc, CycleMlp, DenseAtrous, DenseConv, Forward, Init, Pawe,
    Stepsize, Upsampler, UpsamplerKind, WeightExcitation, CYCLE_MLP_STEPSIZES,
};
use crate::error::Result;
use crate::network::{Architecture, ModelConfig};
use crate::objectives::{bce_focal, hybrid_loss, LossConfig, LossMode};
use crate::tensor::{Element, Graph, ParamStore, Tensor, Var};

/// Acceptance bound on the worst relative error in 64-bit mode.
pub const BLOCK_TOLERANCE: f64 = 1e-5;
/// Bound for single-precision analytic gradients against the 64-bit reference.
pub const SINGLE_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    /// Largest per-coordinate relative error.
    pub worst: f64,
    pub coords: usize,
}

impl GradReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.worst < tol
    }
}

/// Per-coordinate `|a−n| / max(|a|, |n|, floor)` maximised over all
/// coordinates, where `floor = 1e-3·max|n|` keeps near-zero entries from
/// dominating.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn random_tensor<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], amp: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-amp..amp)))
}

/// Indices to probe: all of them, or an even stride capped at `max`.
fn probe_set(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => (0..m).map(|i| i * len / m).collect(),
        _ => (0..len).collect(),
    }
}

/// `Σ w ⊙ block(x)` evaluated in 64-bit arithmetic.
fn shadow_value<B: Block>(
    block: &B,
    params: &ParamStore<f64>,
    buffers: &Buffers<f64>,
    x: &Tensor<f64>,
    weights: &Tensor<f64>,
    dropout_seed: u64,
) -> Result<f64> {
    let mut buffers = buffers.clone();
    let mut f = Forward::new(params, &mut buffers, true, dropout_seed);
    let xv = f.input(x.clone(), false);
    let y = block.forward(&mut f, xv)?;
    Ok(f.graph.value(y).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
}

fn cast_store<T: Element>(store: &ParamStore<T>) -> Result<ParamStore<f64>> {
    let mut out = ParamStore::new();
    for (name, p) in store.iter() {
        out.insert(name, p.value.cast())?;
    }
    Ok(out)
}

/// Checks input and parameter gradients of one block in training mode.
///
/// The analytic gradient is taken at precision `T`; the central-difference
/// reference always runs in 64 bits with step [`fd_step::<T>`]. All
/// parameters are jittered away from their initial values so gates that
/// start at zero still carry signal. `max_coords` caps probes per tensor.
pub fn check_module<T: Element, B: Block>(
    name: &str,
    input_shape: &[usize],
    block: &B,
    seed: u64,
    max_coords: Option<usize>,
) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::<T>::new();
    let mut buffers = Buffers::new();
    block.init(&mut Init {
        params: &mut params,
        buffers: &mut buffers,
        rng: &mut rng,
    })?;
    for (_, p) in params.iter_mut() {
        for v in p.value.data_mut() {
            *v += T::from_f64(rng.gen_range(-0.3..0.3));
        }
    }
    let x = random_tensor::<T>(&mut rng, input_shape, 1.0);

    let (analytic_x, analytic_p, weights) = {
        let mut scratch = buffers.clone();
        let mut f = Forward::new(&params, &mut scratch, true, seed);
        let xv = f.input(x.clone(), true);
        let y = block.forward(&mut f, xv)?;
        let out_shape = f.graph.shape(y).to_vec();
        let weights = random_tensor::<T>(&mut rng, &out_shape, 1.0);
        let wv = f.graph.constant(weights.clone());
        let prod = f.graph.mul(y, wv)?;
        let loss = f.graph.sum_all(prod)?;
        let back = f.backward(loss)?;
        let gx = back.leaves.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(input_shape));
        (gx, back.params, weights)
    };

    let shadow_params = cast_store(&params)?;
    let shadow_buffers: Buffers<f64> = buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
    let shadow_x: Tensor<f64> = x.cast();
    let shadow_w: Tensor<f64> = weights.cast();
    let eval = |p: &ParamStore<f64>, x: &Tensor<f64>| shadow_value(block, p, &shadow_buffers, x, &shadow_w, seed);
    let h = fd_step::<T>();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();

    let mut probe = shadow_x.clone();
    for i in probe_set(x.len(), max_coords) {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&shadow_params, &probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&shadow_params, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * h));
        analytic.push(analytic_x.data()[i].to_f64_lossy());
    }

    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut perturbed = shadow_params.clone();
    for pname in names {
        let len = params.get(&pname).map_or(0, Tensor::len);
        for i in probe_set(len, max_coords) {
            let orig = shadow_params.get(&pname).expect("listed").data()[i];
            perturbed.get_mut(&pname).expect("listed").data_mut()[i] = orig + h;
            let up = eval(&perturbed, &shadow_x)?;
            perturbed.get_mut(&pname).expect("listed").data_mut()[i] = orig - h;
            let down = eval(&perturbed, &shadow_x)?;
            perturbed.get_mut(&pname).expect("listed").data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * h));
            analytic.push(analytic_p.get(&pname).map_or(0.0, |g| g.data()[i].to_f64_lossy()));
        }
    }

    Ok(GradReport {
        name: name.to_string(),
        worst: relative_error(&analytic, &numeric),
        coords: numeric.len(),
    })
}

/// Checks the gradient of a scalar loss with respect to `N×K×H×W` logits.
/// `loss` and `loss_f64` must be the same function at the two precisions.
pub fn check_loss<T: Element>(
    name: &str,
    logits_shape: &[usize],
    num_labels: usize,
    loss: impl Fn(&mut Graph<T>, Var, &[u8]) -> Result<Var>,
    loss_f64: impl Fn(&mut Graph<f64>, Var, &[u8]) -> Result<Var>,
    seed: u64,
) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor::<T>(&mut rng, logits_shape, 2.0);
    let pixels = logits_shape[0] * logits_shape[2] * logits_shape[3];
    let target: Vec<u8> = (0..pixels).map(|_| rng.gen_range(0..num_labels) as u8).collect();
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t.clone(), false);
        let l = loss_f64(&mut g, v, &target)?;
        Ok(g.value(l).data()[0])
    };
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let l = loss(&mut g, xv, &target)?;
    let grads = g.backward(l)?;
    let analytic: Vec<f64> = grads
        .get(xv)
        .map(|t| t.data().iter().map(|v| v.to_f64_lossy()).collect())
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let h = fd_step::<T>();
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe: Tensor<f64> = x.cast();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * h));
    }
    Ok(GradReport {
        name: name.to_string(),
        worst: relative_error(&analytic, &numeric),
        coords: numeric.len(),
    })
}

const SHAPE: [usize; 4] = [1, 4, 8, 8];

macro_rules! module_case {
    ($name:expr, $block:expr, $shape:expr, $seed:expr) => {
        check_module::<T, _>($name, &$shape, &$block, $seed, None)
    };
}

/// Every block on a `1×4×8×8` input.
pub fn block_suite<T: Element>(seed: u64) -> Result<Vec<GradReport>> {
    let c = SHAPE[1];
    Ok(vec![
        module_case!("pawe", Pawe::new("pawe", c, 2, 0.1)?, SHAPE, seed)?,
        module_case!("weight_excitation", WeightExcitation::new("we", c, 2)?, SHAPE, seed + 1)?,
        module_case!("dense_conv", DenseConv::new("dense", c, 6, 2, 2)?, SHAPE, seed + 2)?,
        module_case!("atrous_conv", AtrousConv::new("atrous", c, 6, 2)?, SHAPE, seed + 3)?,
        module_case!("dense_atrous", DenseAtrous::new("da", c, 6, 2, 2, 2)?, SHAPE, seed + 4)?,
        module_case!("cawe", Cawe::new("cawe", c, 2)?, SHAPE, seed + 5)?,
        module_case!("cycle_fc", CycleFc::new("cfc", c, 5, Stepsize::new(1, 3)?), SHAPE, seed + 6)?,
        module_case!("cycle_mlp", CycleMlp::new("cmlp", c, &CYCLE_MLP_STEPSIZES)?, SHAPE, seed + 7)?,
        module_case!("ccm", ChannelCycleMlp::new("ccm", c, 2, &CYCLE_MLP_STEPSIZES)?, SHAPE, seed + 8)?,
        module_case!(
            "upsample_transposed",
            Upsampler::new("up", UpsamplerKind::Transposed, c, 2),
            [1, 4, 4, 4],
            seed + 9
        )?,
        module_case!(
            "upsample_bilinear",
            Upsampler::new("up", UpsamplerKind::Bilinear, c, 2),
            [1, 4, 4, 4],
            seed + 10
        )?,
    ])
}

/// Both training objectives on `1×K×8×8` logits.
pub fn loss_suite<T: Element>(seed: u64) -> Result<Vec<GradReport>> {
    let hybrid = LossConfig {
        mode: LossMode::HybridCeDice,
        ..LossConfig::default()
    };
    let binary = LossConfig::default();
    Ok(vec![
        check_loss::<T>(
            "hybrid_ce_dice",
            &[1, 4, 8, 8],
            4,
            |g, x, t| hybrid_loss(g, x, t, &hybrid),
            |g, x, t| hybrid_loss(g, x, t, &hybrid),
            seed,
        )?,
        check_loss::<T>(
            "bce_focal",
            &[1, 1, 8, 8],
            2,
            |g, x, t| bce_focal(g, x, t, &binary),
            |g, x, t| bce_focal(g, x, t, &binary),
            seed + 1,
        )?,
    ])
}

/// Reduced end-to-end network on a `1×3×32×32` input, probing at most
/// `max_coords` entries per tensor.
pub fn model_suite<T: Element>(seed: u64, max_coords: usize) -> Result<Vec<GradReport>> {
    let config = ModelConfig::compact(32);
    let arch = Architecture::new(&config)?;
    Ok(vec![check_module::<T, _>("model", &[1, 3, 32, 32], &arch, seed, Some(max_coords))?])
}
