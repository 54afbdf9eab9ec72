use super::{Cawe, Conv, Forward, Init};
use crate::error::{Error, Result};
use crate::tensor::{Conv2dOpts, Element, Var};

/// CycleFC sampling footprint `(S_H, S_W)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stepsize {
    pub h: usize,
    pub w: usize,
}

impl Stepsize {
    /// At most one of the two axes may cycle.
    pub fn new(h: usize, w: usize) -> Result<Self> {
        let valid = h >= 1 && w >= 1 && (h == 1 || w == 1);
        if !valid {
            return Err(Error::Config(format!("invalid CycleFC stepsize ({h}, {w})")));
        }
        Ok(Stepsize { h, w })
    }
}

/// Branch footprints of the CycleMLP unit: 1×7, 7×1 and 1×1.
pub const CYCLE_MLP_STEPSIZES: [(usize, usize); 3] = [(1, 7), (7, 1), (1, 1)];

/// Channel-mixing FC whose spatial sampling point cycles with the input
/// channel index: `out(c_out,i,j) = b + Σ_c X(c, i+δh(c), j+δw(c))·W(c_out,c)`,
/// `δ(c) = (c mod S) − ⌊S/2⌋`, zero outside the map.
///
/// The weight is stored `Cout×Cin×1×1` so the mixing step is a pointwise
/// convolution.
#[derive(Clone, Debug)]
pub struct CycleFc {
    pub stepsize: Stepsize,
    pub proj: Conv,
}

impl CycleFc {
    pub fn new(prefix: &str, cin: usize, cout: usize, stepsize: Stepsize) -> Self {
        CycleFc {
            stepsize,
            proj: Conv::new(prefix, cin, cout, 1, Conv2dOpts::default()),
        }
    }

    pub fn init<T: Element>(&self, init: &mut Init<T>) -> Result<()> {
        self.proj.init(init)
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        if self.stepsize == (Stepsize { h: 1, w: 1 }) {
            return self.proj.forward(f, x);
        }
        let w = f.param(&format!("{}.weight", self.proj.prefix))?;
        let b = if self.proj.bias {
            Some(f.param(&format!("{}.bias", self.proj.prefix))?)
        } else {
            None
        };
        f.graph.cycle_fc(x, w, b, (self.stepsize.h, self.stepsize.w))
    }

    /// `2·Cin·Cout·H·W`: linear in the number of positions.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        2 * (self.proj.cin * self.proj.cout * h * w) as u64
    }
}

/// Parallel CycleFC branches (by default 1×7, 7×1, 1×1), summed with equal
/// weight.
#[derive(Clone, Debug)]
pub struct CycleMlp {
    pub branches: Vec<CycleFc>,
}

impl CycleMlp {
    pub fn new(prefix: &str, channels: usize, stepsizes: &[(usize, usize)]) -> Result<Self> {
        let branches = stepsizes
            .iter()
            .map(|&(h, w)| {
                Ok(CycleFc::new(
                    &format!("{prefix}.fc_{h}x{w}"),
                    channels,
                    channels,
                    Stepsize::new(h, w)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(CycleMlp { branches })
    }

    pub fn init<T: Element>(&self, init: &mut Init<T>) -> Result<()> {
        self.branches.iter().try_for_each(|b| b.init(init))
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for b in &self.branches {
            let y = b.forward(f, x)?;
            acc = Some(match acc {
                Some(a) => f.graph.add(a, y)?,
                None => y,
            });
        }
        acc.ok_or_else(|| Error::Config("CycleMLP has no branches".into()))
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.branches.iter().map(|b| b.flops(h, w)).sum()
    }
}

/// Skip refinement: `σ(CycleMLP(CAWE(F)))`, same shape as `F`.
#[derive(Clone, Debug)]
pub struct ChannelCycleMlp {
    pub prefix: String,
    pub cawe: Cawe,
    pub mlp: CycleMlp,
}

impl ChannelCycleMlp {
    pub fn new(prefix: &str, channels: usize, reduction: usize, stepsizes: &[(usize, usize)]) -> Result<Self> {
        Ok(ChannelCycleMlp {
            prefix: prefix.to_string(),
            cawe: Cawe::new(&format!("{prefix}.cawe"), channels, reduction)?,
            mlp: CycleMlp::new(&format!("{prefix}.mlp"), channels, stepsizes)?,
        })
    }

    pub fn init<T: Element>(&self, init: &mut Init<T>) -> Result<()> {
        self.cawe.init(init)?;
        self.mlp.init(init)
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let y = self.cawe.forward(f, x)?;
        let y = self.mlp.forward(f, y)?;
        f.graph.sigmoid(y)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.cawe.flops(h, w) + self.mlp.flops(h, w)
    }
}
