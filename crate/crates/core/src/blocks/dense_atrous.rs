use super::{ConvBnSilu, Forward, Init};
use crate::error::{Error, Result};
use crate::tensor::{Conv2dOpts, Element, Var};

/// Densely connected 3×3 stack: layer `ℓ` sees the input concatenated with
/// every earlier layer's output (`cin + ℓ·growth` channels) and emits
/// `growth` channels. A 1×1 transition maps `cin + depth·growth → cout`.
#[derive(Clone, Debug)]
pub struct DenseConv {
    pub cin: usize,
    pub cout: usize,
    pub growth: usize,
    pub layers: Vec<ConvBnSilu>,
    pub transition: ConvBnSilu,
}

impl DenseConv {
    pub fn new(prefix: &str, cin: usize, cout: usize, depth: usize, growth: usize) -> Result<Self> {
        if depth == 0 || growth == 0 {
            return Err(Error::Config("dense block needs depth ≥ 1 and growth ≥ 1".into()));
        }
        let layers = (0..depth)
            .map(|l| {
                ConvBnSilu::new(
                    &format!("{prefix}.layer{l}"),
                    Self::layer_input(cin, growth, l),
                    growth,
                    3,
                    Conv2dOpts::same(1),
                )
            })
            .collect();
        let transition = ConvBnSilu::new(
            &format!("{prefix}.transition"),
            cin + depth * growth,
            cout,
            1,
            Conv2dOpts::default(),
        );
        Ok(DenseConv {
            cin,
            cout,
            growth,
            layers,
            transition,
        })
    }

    /// Input channels of zero-based layer `l`.
    pub fn layer_input(cin: usize, growth: usize, l: usize) -> usize {
        cin + l * growth
    }

    pub fn init<T: Element>(&self, init: &mut Init<T>) -> Result<()> {
        for layer in &self.layers {
            layer.init(init)?;
        }
        self.transition.init(init)
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let mut feats = vec![x];
        for layer in &self.layers {
            let inp = if feats.len() == 1 {
                x
            } else {
                f.graph.concat(&feats, 1)?
            };
            feats.push(layer.forward(f, inp)?);
        }
        let all = f.graph.concat(&feats, 1)?;
        self.transition.forward(f, all)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.layers.iter().map(|l| l.conv.flops(h, w)).sum::<u64>() + self.transition.conv.flops(h, w)
    }
}

/// Single 3×3 dilated convolution with padding equal to the dilation, then
/// batch norm and SiLU.
#[derive(Clone, Debug)]
pub struct AtrousConv {
    pub dilation: usize,
    pub unit: ConvBnSilu,
}

impl AtrousConv {
    pub fn new(prefix: &str, cin: usize, cout: usize, dilation: usize) -> Result<Self> {
        if dilation == 0 {
            return Err(Error::Config("dilation must be ≥ 1".into()));
        }
        Ok(AtrousConv {
            dilation,
            unit: ConvBnSilu::new(prefix, cin, cout, 3, Conv2dOpts::same(dilation)),
        })
    }

    pub fn init<T: Element>(&self, init: &mut Init<T>) -> Result<()> {
        self.unit.init(init)
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        self.unit.forward(f, x)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.unit.conv.flops(h, w)
    }
}

/// Dense path + atrous path on a shared input, summed.
#[derive(Clone, Debug)]
pub struct DenseAtrous {
    pub dense: DenseConv,
    pub atrous: AtrousConv,
}

impl DenseAtrous {
    pub fn new(prefix: &str, cin: usize, cout: usize, depth: usize, growth: usize, dilation: usize) -> Result<Self> {
        Ok(DenseAtrous {
            dense: DenseConv::new(&format!("{prefix}.dense"), cin, cout, depth, growth)?,
            atrous: AtrousConv::new(&format!("{prefix}.atrous"), cin, cout, dilation)?,
        })
    }

    pub fn cin(&self) -> usize {
        self.dense.cin
    }

    pub fn cout(&self) -> usize {
        self.dense.cout
    }

    pub fn init<T: Element>(&self, init: &mut Init<T>) -> Result<()> {
        self.dense.init(init)?;
        self.atrous.init(init)
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let d = self.dense.forward(f, x)?;
        let a = self.atrous.forward(f, x)?;
        f.graph.add(d, a)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.dense.flops(h, w) + self.atrous.flops(h, w)
    }
}
