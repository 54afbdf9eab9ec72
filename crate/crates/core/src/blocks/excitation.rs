use super::{Forward, Init, Linear};
use crate::error::{Error, Result};
use crate::tensor::{Element, Var};

/// Weight excitation: global average pool → FC(C→C/r) → ReLU → FC(C/r→C)
/// → sigmoid, used as a per-channel gate on the input.
#[derive(Clone, Debug)]
pub struct WeightExcitation {
    pub channels: usize,
    pub reduction: usize,
    fc1: Linear,
    fc2: Linear,
}

impl WeightExcitation {
    pub fn new(prefix: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) || channels / reduction == 0 {
            return Err(Error::Config(format!(
                "excitation reduction {reduction} must divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        Ok(WeightExcitation {
            channels,
            reduction,
            fc1: Linear::new(format!("{prefix}.fc1"), channels, hidden),
            fc2: Linear::new(format!("{prefix}.fc2"), hidden, channels),
        })
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn init<T: Element>(&self, init: &mut Init<T>) -> Result<()> {
        self.fc1.init(init)?;
        self.fc2.init(init)
    }

    /// The `N×C` gate in `(0, 1)`.
    pub fn gate<T: Element>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let shape = f.graph.shape(x);
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::dim(
                "weight_excitation",
                format!("input {shape:?}, expected {} channels", self.channels),
            ));
        }
        let pooled = f.graph.global_avg_pool(x)?;
        let h = self.fc1.forward(f, pooled)?;
        let h = f.graph.relu(h)?;
        let h = self.fc2.forward(f, h)?;
        f.graph.sigmoid(h)
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let gate = self.gate(f, x)?;
        f.graph.mul_channel(x, gate)
    }

    pub fn flops(&self) -> u64 {
        self.fc1.flops() + self.fc2.flops()
    }
}
