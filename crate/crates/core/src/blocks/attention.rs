use super::{init_gate, Conv, Forward, Init};
use crate::error::{Error, Result};
use crate::tensor::{Conv2dOpts, Element, Graph, Var};

/// Spatial self-attention: `α·SᵀV + Y` with `S = softmax(QKᵀ)` row-wise.
///
/// `q`, `k`, `v`, `y` are `N×C×H×W`; positions are flattened to `H·W` rows.
/// The probability map kept for backward costs `N·(H·W)²` elements; if that
/// exceeds `budget` bytes a resource error is returned instead.
pub fn position_attention<T: Element>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    y: Var,
    alpha: Var,
    budget: usize,
) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    if shape.len() != 4 || g.shape(q) != shape || g.shape(k) != shape || g.shape(v) != shape {
        return Err(Error::dim("position_attention", format!("{shape:?}")));
    }
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let required = n * hw * hw * std::mem::size_of::<T>();
    if required > budget {
        return Err(Error::Resource {
            op: "position_attention",
            required,
            budget,
        });
    }
    let q = g.reshape(q, &[n, c, hw])?;
    let k = g.reshape(k, &[n, c, hw])?;
    let v = g.reshape(v, &[n, c, hw])?;
    // S[i][j] = softmax_j(Σ_c Q[c,i]·K[c,j]); (SᵀV)ᵀ = V·S keeps channels first.
    let attended = g.attention(q, k, v)?;
    let attended = g.reshape(attended, &shape)?;
    let gated = g.scale_by(attended, alpha)?;
    g.add(gated, y)
}

/// Channel self-attention: `β·F·Cᵀ + F` with `C = softmax(FᵀF)` row-wise,
/// where `F` is `(H·W)×C`. Parameter-free apart from `beta`.
pub fn channel_attention<T: Element>(g: &mut Graph<T>, f: Var, beta: Var) -> Result<Var> {
    let shape = g.shape(f).to_vec();
    if shape.len() != 4 {
        return Err(Error::dim("channel_attention", format!("{shape:?}")));
    }
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let fc = g.reshape(f, &[n, c, hw])?;
    let energy = g.bmm(fc, fc, false, true)?;
    let cmap = g.softmax(energy, 2)?;
    let mixed = g.bmm(cmap, fc, false, false)?;
    let mixed = g.reshape(mixed, &shape)?;
    let gated = g.scale_by(mixed, beta)?;
    g.add(gated, f)
}

/// Q/K/V 1×1 projections plus the learnable gate `α` (initialised to 0).
#[derive(Clone, Debug)]
pub struct PositionAttention {
    pub prefix: String,
    pub channels: usize,
    q: Conv,
    k: Conv,
    v: Conv,
}

impl PositionAttention {
    pub fn new(prefix: &str, channels: usize) -> Self {
        let proj = |name: &str| Conv::new(format!("{prefix}.{name}"), channels, channels, 1, Conv2dOpts::default());
        PositionAttention {
            prefix: prefix.to_string(),
            channels,
            q: proj("q"),
            k: proj("k"),
            v: proj("v"),
        }
    }

    pub fn alpha_name(&self) -> String {
        format!("{}.alpha", self.prefix)
    }

    pub fn init<T: Element>(&self, init: &mut Init<T>) -> Result<()> {
        self.q.init(init)?;
        self.k.init(init)?;
        self.v.init(init)?;
        init_gate(init, self.alpha_name())
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<T>, y: Var) -> Result<Var> {
        if f.graph.shape(y).get(1) != Some(&self.channels) {
            return Err(Error::dim("position_attention", format!("{:?}", f.graph.shape(y))));
        }
        let q = self.q.forward(f, y)?;
        let k = self.k.forward(f, y)?;
        let v = self.v.forward(f, y)?;
        let alpha = f.param(&self.alpha_name())?;
        let budget = f.attention_budget;
        position_attention(&mut f.graph, q, k, v, y, alpha, budget)
    }

    /// Projections plus the two `(H·W)²·C` products.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        3 * self.q.flops(h, w) + Self::attention_flops(self.channels, h, w)
    }

    pub fn attention_flops(channels: usize, h: usize, w: usize) -> u64 {
        let n = (h * w) as u64;
        2 * (2 * n * n * channels as u64)
    }
}
