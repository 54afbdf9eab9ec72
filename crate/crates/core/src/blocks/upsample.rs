use super::{Conv, Forward, Init};
use crate::error::Result;
use crate::tensor::{Conv2dOpts, Element, Graph, Var};

/// ×`factor` bilinear resampling (half-pixel centres, edge clamped).
pub fn upsample_bilinear<T: Element>(g: &mut Graph<T>, x: Var, factor: usize) -> Result<Var> {
    g.upsample_bilinear(x, factor)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsamplerKind {
    /// 2×2 transposed convolution, stride 2.
    Transposed,
    /// Parameter-free bilinear ×2 followed by a 1×1 channel reduction.
    Bilinear,
}

/// Decoder upsampling step: doubles `H×W` and maps `cin → cout` channels.
#[derive(Clone, Debug)]
pub struct Upsampler {
    pub kind: UpsamplerKind,
    pub prefix: String,
    pub cin: usize,
    pub cout: usize,
    reduce: Conv,
}

impl Upsampler {
    pub fn new(prefix: &str, kind: UpsamplerKind, cin: usize, cout: usize) -> Self {
        Upsampler {
            kind,
            prefix: prefix.to_string(),
            cin,
            cout,
            reduce: Conv::new(format!("{prefix}.reduce"), cin, cout, 1, Conv2dOpts::default()),
        }
    }

    pub fn init<T: Element>(&self, init: &mut Init<T>) -> Result<()> {
        match self.kind {
            UpsamplerKind::Transposed => {
                init.kaiming(
                    format!("{}.weight", self.prefix),
                    &[self.cin, self.cout, 2, 2],
                    self.cin * 4,
                )?;
                init.zeros(format!("{}.bias", self.prefix), &[self.cout])
            }
            UpsamplerKind::Bilinear => self.reduce.init(init),
        }
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        match self.kind {
            UpsamplerKind::Transposed => {
                let w = f.param(&format!("{}.weight", self.prefix))?;
                let b = f.param(&format!("{}.bias", self.prefix))?;
                f.graph.conv_transpose2d(x, w, Some(b), 2)
            }
            UpsamplerKind::Bilinear => {
                let up = upsample_bilinear(&mut f.graph, x, 2)?;
                self.reduce.forward(f, up)
            }
        }
    }

    /// FLOPs at the *output* resolution `h×w`.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        match self.kind {
            // every input pixel scatters a 2×2 patch: Cin·Cout·4 MACs per input pixel
            UpsamplerKind::Transposed => 2 * (self.cin * self.cout * (h / 2) * (w / 2) * 4) as u64,
            UpsamplerKind::Bilinear => self.reduce.flops(h, w),
        }
    }
}
