//! Differentiable building blocks of the network.
//!
//! Each block is a small descriptor (parameter-name prefix plus dimensions).
//! `init` registers its tensors in a [`ParamStore`]; `forward` records its
//! computation on the [`Forward`] session's tape.

mod attention;
mod dense_atrous;
mod excitation;
mod fusion;
mod cycle;
mod upsample;

pub use attention::{channel_attention, position_attention, PositionAttention};
pub use cycle::{ChannelCycleMlp, CycleFc, CycleMlp, Stepsize, CYCLE_MLP_STEPSIZES};
pub use dense_atrous::{AtrousConv, DenseAtrous, DenseConv};
pub use excitation::WeightExcitation;
pub use fusion::{Cawe, Pawe};
pub use upsample::{upsample_bilinear, Upsampler, UpsamplerKind};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Conv2dOpts, Element, Grads, Graph, ParamStore, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Default cap on the bytes position attention may spend on its
/// `(H·W)×(H·W)` score and probability maps.
pub const DEFAULT_ATTENTION_BUDGET: usize = 1 << 30;

/// Non-learnable state (batch-norm running statistics).
pub type Buffers<T> = BTreeMap<String, Tensor<T>>;

/// Parameter initialisation context.
pub struct Init<'a, T: Element> {
    pub params: &'a mut ParamStore<T>,
    pub buffers: &'a mut Buffers<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Element> Init<'_, T> {
    /// Uniform in `±sqrt(6 / fan_in)`.
    pub fn kaiming(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<()> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| T::from_f64(self.rng.gen_range(-bound..bound)));
        self.params.insert(name, t)
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> Result<()> {
        self.params.insert(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: String, shape: &[usize]) -> Result<()> {
        self.params.insert(name, Tensor::ones(shape))
    }

    pub fn buffer(&mut self, name: String, value: Tensor<T>) {
        self.buffers.insert(name, value);
    }
}

/// Gradients returned by [`Forward::backward`].
pub struct Backward<T> {
    /// Per-parameter gradients, keyed by parameter name.
    pub params: BTreeMap<String, Tensor<T>>,
    /// Gradients of non-parameter leaves (e.g. inputs created with
    /// `requires_grad`).
    pub leaves: Grads<T>,
}

/// One forward pass: the tape plus everything blocks need while recording.
pub struct Forward<'a, T: Element> {
    pub graph: Graph<T>,
    params: &'a ParamStore<T>,
    buffers: &'a mut Buffers<T>,
    bound: BTreeMap<String, Var>,
    training: bool,
    rng: ChaCha8Rng,
    pub attention_budget: usize,
}

impl<'a, T: Element> Forward<'a, T> {
    pub fn new(params: &'a ParamStore<T>, buffers: &'a mut Buffers<T>, training: bool, seed: u64) -> Self {
        Forward {
            graph: Graph::new(),
            params,
            buffers,
            bound: BTreeMap::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            attention_budget: DEFAULT_ATTENTION_BUDGET,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// Binds a parameter onto the tape (once per pass).
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
        let v = self.graph.leaf(t.clone(), true);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.graph.leaf(t, requires_grad)
    }

    /// Inverted dropout; identity outside training or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let n = self.graph.value(x).len();
        let keep: Vec<bool> = (0..n).map(|_| self.rng.gen::<f64>() >= p).collect();
        self.graph.dropout(x, &keep, T::from_f64(p))
    }

    /// Batch norm with `<prefix>.gamma/.beta` and running statistics in the
    /// buffers. Training mode normalises with batch statistics and folds them
    /// into the running averages (unbiased variance).
    pub fn batchnorm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let mean_key = format!("{prefix}.running_mean");
        let var_key = format!("{prefix}.running_var");
        let missing = || Error::Contract(format!("missing running stats for {prefix}"));
        let rm = self.buffers.get(&mean_key).ok_or_else(missing)?;
        let rv = self.buffers.get(&var_key).ok_or_else(missing)?;
        let (y, stats) = self.graph.batchnorm2d(
            x,
            gamma,
            beta,
            (rm.data(), rv.data()),
            self.training,
            T::from_f64(BN_EPS),
        )?;
        if let Some((mean, var)) = stats {
            let shape = self.graph.shape(x);
            let count = shape[0] * shape[2] * shape[3];
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            let m = T::from_f64(BN_MOMENTUM);
            let keep = T::one() - m;
            let rm = self.buffers.get_mut(&mean_key).expect("checked above");
            for (r, &b) in rm.data_mut().iter_mut().zip(&mean) {
                *r = keep * *r + m * b;
            }
            let rv = self.buffers.get_mut(&var_key).expect("checked above");
            for (r, &b) in rv.data_mut().iter_mut().zip(&var) {
                *r = keep * *r + m * b * T::from_f64(unbias);
            }
        }
        Ok(y)
    }

    /// Runs the reverse sweep and splits the gradients into named parameter
    /// gradients and other leaves.
    pub fn backward(self, loss: Var) -> Result<Backward<T>> {
        let mut leaves = self.graph.backward(loss)?;
        let mut params = BTreeMap::new();
        for (name, v) in self.bound {
            if let Some(g) = leaves.take(v) {
                params.insert(name, g);
            }
        }
        Ok(Backward { params, leaves })
    }
}

impl<T: Element> Backward<T> {
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (name, g) in &self.params {
            store.accumulate_grad(name, g)?;
        }
        Ok(())
    }
}

/// 2-D convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub prefix: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub opts: Conv2dOpts,
    pub bias: bool,
}

impl Conv {
    pub fn new(prefix: impl Into<String>, cin: usize, cout: usize, kernel: usize, opts: Conv2dOpts) -> Self {
        Conv {
            prefix: prefix.into(),
            cin,
            cout,
            kernel,
            opts,
            bias: true,
        }
    }

    pub fn init<T: Element>(&self, init: &mut Init<T>) -> Result<()> {
        let k = self.kernel;
        init.kaiming(
            format!("{}.weight", self.prefix),
            &[self.cout, self.cin, k, k],
            self.cin * k * k,
        )?;
        if self.bias {
            init.zeros(format!("{}.bias", self.prefix), &[self.cout])?;
        }
        Ok(())
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let w = f.param(&format!("{}.weight", self.prefix))?;
        let b = if self.bias {
            Some(f.param(&format!("{}.bias", self.prefix))?)
        } else {
            None
        };
        f.graph.conv2d(x, w, b, self.opts)
    }

    /// Multiply-adds ×2 at an output resolution of `h×w`.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        2 * (self.kernel * self.kernel * self.cin * self.cout * h * w) as u64
    }
}

/// Batch-norm parameters and running statistics for `channels` channels.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub prefix: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        BatchNorm {
            prefix: prefix.into(),
            channels,
        }
    }

    pub fn init<T: Element>(&self, init: &mut Init<T>) -> Result<()> {
        let c = self.channels;
        init.ones(format!("{}.gamma", self.prefix), &[c])?;
        init.zeros(format!("{}.beta", self.prefix), &[c])?;
        init.buffer(format!("{}.running_mean", self.prefix), Tensor::zeros(&[c]));
        init.buffer(format!("{}.running_var", self.prefix), Tensor::ones(&[c]));
        Ok(())
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        f.batchnorm(&self.prefix, x)
    }
}

/// Convolution → batch norm → SiLU.
#[derive(Clone, Debug)]
pub struct ConvBnSilu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnSilu {
    pub fn new(prefix: &str, cin: usize, cout: usize, kernel: usize, opts: Conv2dOpts) -> Self {
        ConvBnSilu {
            conv: Conv::new(format!("{prefix}.conv"), cin, cout, kernel, opts),
            bn: BatchNorm::new(format!("{prefix}.bn"), cout),
        }
    }

    pub fn init<T: Element>(&self, init: &mut Init<T>) -> Result<()> {
        self.conv.init(init)?;
        self.bn.init(init)
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, x)?;
        let y = self.bn.forward(f, y)?;
        f.graph.silu(y)
    }
}

/// Fully connected layer on `N×in` rows: `x·Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub prefix: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            prefix: prefix.into(),
            fan_in,
            fan_out,
        }
    }

    pub fn init<T: Element>(&self, init: &mut Init<T>) -> Result<()> {
        init.kaiming(
            format!("{}.weight", self.prefix),
            &[self.fan_out, self.fan_in],
            self.fan_in,
        )?;
        init.zeros(format!("{}.bias", self.prefix), &[self.fan_out])
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let rows = f.graph.shape(x)[0];
        let w = f.param(&format!("{}.weight", self.prefix))?;
        let b = f.param(&format!("{}.bias", self.prefix))?;
        let x3 = f.graph.reshape(x, &[1, rows, self.fan_in])?;
        let w3 = f.graph.reshape(w, &[1, self.fan_out, self.fan_in])?;
        let y = f.graph.bmm(x3, w3, false, true)?;
        let y = f.graph.reshape(y, &[rows, self.fan_out])?;
        f.graph.add_bias(y, b, 1)
    }

    pub fn flops(&self) -> u64 {
        2 * (self.fan_in * self.fan_out) as u64
    }
}

/// Scalar gate parameter named `name`, initialised to zero.
pub(crate) fn init_gate<T: Element>(init: &mut Init<T>, name: String) -> Result<()> {
    init.zeros(name, &[1])
}

/// Common interface of the layer descriptors, so generic harnesses can drive
/// any of them at either precision.
pub trait Block {
    fn init<T: Element>(&self, init: &mut Init<T>) -> Result<()>;
    fn forward<T: Element>(&self, f: &mut Forward<T>, x: Var) -> Result<Var>;
}

macro_rules! impl_block {
    ($($ty:ty),* $(,)?) => {$(
        impl Block for $ty {
            fn init<T: Element>(&self, init: &mut Init<T>) -> Result<()> {
                <$ty>::init(self, init)
            }
            fn forward<T: Element>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
                <$ty>::forward(self, f, x)
            }
        }
    )*};
}

impl_block!(
    Conv,
    BatchNorm,
    ConvBnSilu,
    PositionAttention,
    WeightExcitation,
    Pawe,
    Cawe,
    DenseConv,
    AtrousConv,
    DenseAtrous,
    CycleFc,
    CycleMlp,
    ChannelCycleMlp,
    Upsampler,
    crate::network::Architecture,
);
