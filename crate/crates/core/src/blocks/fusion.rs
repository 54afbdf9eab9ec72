use super::{channel_attention, init_gate, BatchNorm, Forward, Init, PositionAttention, WeightExcitation};
use crate::error::Result;
use crate::tensor::{Element, Var};

/// Position attention + weight excitation, then batch norm → dropout → SiLU.
#[derive(Clone, Debug)]
pub struct Pawe {
    pub attention: PositionAttention,
    pub excitation: WeightExcitation,
    pub bn: BatchNorm,
    pub dropout: f64,
}

impl Pawe {
    pub fn new(prefix: &str, channels: usize, reduction: usize, dropout: f64) -> Result<Self> {
        Ok(Pawe {
            attention: PositionAttention::new(&format!("{prefix}.pa"), channels),
            excitation: WeightExcitation::new(&format!("{prefix}.we"), channels, reduction)?,
            bn: BatchNorm::new(format!("{prefix}.bn"), channels),
            dropout,
        })
    }

    pub fn init<T: Element>(&self, init: &mut Init<T>) -> Result<()> {
        self.attention.init(init)?;
        self.excitation.init(init)?;
        self.bn.init(init)
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<T>, y: Var) -> Result<Var> {
        let pa = self.attention.forward(f, y)?;
        let we = self.excitation.forward(f, y)?;
        let fused = f.graph.add(pa, we)?;
        let fused = self.bn.forward(f, fused)?;
        let fused = f.dropout(fused, self.dropout)?;
        f.graph.silu(fused)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.attention.flops(h, w) + self.excitation.flops()
    }
}

/// Channel attention (gate `β`, initialised to 0) + weight excitation.
#[derive(Clone, Debug)]
pub struct Cawe {
    pub prefix: String,
    pub channels: usize,
    pub excitation: WeightExcitation,
}

impl Cawe {
    pub fn new(prefix: &str, channels: usize, reduction: usize) -> Result<Self> {
        Ok(Cawe {
            prefix: prefix.to_string(),
            channels,
            excitation: WeightExcitation::new(&format!("{prefix}.we"), channels, reduction)?,
        })
    }

    pub fn beta_name(&self) -> String {
        format!("{}.beta", self.prefix)
    }

    pub fn init<T: Element>(&self, init: &mut Init<T>) -> Result<()> {
        init_gate(init, self.beta_name())?;
        self.excitation.init(init)
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let beta = f.param(&self.beta_name())?;
        let ca = channel_attention(&mut f.graph, x, beta)?;
        let we = self.excitation.forward(f, x)?;
        f.graph.add(ca, we)
    }

    /// `FᵀF` and `F·Cᵀ` products plus the excitation FCs.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let c = self.channels as u64;
        2 * (2 * (h * w) as u64 * c * c) + self.excitation.flops()
    }
}
