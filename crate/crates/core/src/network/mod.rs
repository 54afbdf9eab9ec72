//! The full U-shaped network: a two-PAWE stem, dense-atrous encoder stages
//! with max pooling, a dense-atrous bottleneck, and a decoder that upsamples,
//! concatenates the (optionally CCM-refined) skip, and applies a
//! dense-atrous block, finishing with a 1×1 output convolution.

mod config;
#[cfg(test)]
mod tests;

pub use config::ModelConfig;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    Buffers, ChannelCycleMlp, Conv, DenseAtrous, Forward, Init, Pawe, PositionAttention, Upsampler,
};
use crate::error::{Error, Result};
use crate::tensor::{Conv2dOpts, Element, ParamStore, Tensor, Var};

/// Block descriptors wired from a [`ModelConfig`]. Holds no tensors.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ModelConfig,
    pub stem_conv0: Conv,
    pub stem_pawe0: Pawe,
    pub stem_conv1: Conv,
    pub stem_pawe1: Pawe,
    /// `encoder[s-1]` maps `C_{s-1} → C_s`.
    pub encoder: Vec<DenseAtrous>,
    pub bottleneck: DenseAtrous,
    /// `skips[s]` refines `F_s` for `s < stages`; `None` when CCM is off.
    pub skips: Vec<Option<ChannelCycleMlp>>,
    /// `ups[s-1]` maps `C_s → C_{s-1}` and doubles the resolution.
    pub ups: Vec<Upsampler>,
    /// `decoder[s-1]` maps `2·C_{s-1} → C_{s-1}`.
    pub decoder: Vec<DenseAtrous>,
    pub head: Conv,
}

/// Per-stage feature shape `(stage, channels, height, width)`.
pub type ShapeRung = (usize, usize, usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopReport {
    pub total: u64,
    /// The `(H·W)²·C` terms of the two position-attention maps.
    pub position_attention: u64,
}

impl FlopReport {
    pub fn attention_share(&self) -> f64 {
        self.position_attention as f64 / self.total as f64
    }
}

impl Architecture {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = |s| config.channels(s);
        let r = config.we_reduction;
        let da = |prefix: String, cin, cout| {
            DenseAtrous::new(&prefix, cin, cout, config.dense_depth, config.growth, config.dilation)
        };
        let encoder = (1..=config.stages)
            .map(|s| da(format!("enc{s}"), c(s - 1), c(s)))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (1..=config.stages)
            .map(|s| da(format!("dec{s}"), 2 * c(s - 1), c(s - 1)))
            .collect::<Result<Vec<_>>>()?;
        let skips = (0..config.stages)
            .map(|s| {
                config
                    .use_ccm
                    .then(|| ChannelCycleMlp::new(&format!("skip{s}"), c(s), r, &config.cyclefc_stepsizes))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        let ups = (1..=config.stages)
            .map(|s| Upsampler::new(&format!("up{s}"), config.upsampler, c(s), c(s - 1)))
            .collect();
        Ok(Architecture {
            stem_conv0: Conv::new("stem.conv0", config.in_channels, c(0), 3, Conv2dOpts::same(1)),
            stem_pawe0: Pawe::new("stem.pawe0", c(0), r, config.dropout)?,
            stem_conv1: Conv::new("stem.conv1", c(0), c(0), 3, Conv2dOpts::same(1)),
            stem_pawe1: Pawe::new("stem.pawe1", c(0), r, config.dropout)?,
            encoder,
            bottleneck: da("bottleneck".into(), c(config.stages), c(config.stages))?,
            skips,
            ups,
            decoder,
            head: Conv::new("head", c(0), config.num_classes, 1, Conv2dOpts::default()),
            config: config.clone(),
        })
    }

    pub fn init<T: Element>(&self, init: &mut Init<T>) -> Result<()> {
        self.stem_conv0.init(init)?;
        self.stem_pawe0.init(init)?;
        self.stem_conv1.init(init)?;
        self.stem_pawe1.init(init)?;
        for b in &self.encoder {
            b.init(init)?;
        }
        self.bottleneck.init(init)?;
        for s in self.skips.iter().flatten() {
            s.init(init)?;
        }
        for u in &self.ups {
            u.init(init)?;
        }
        for b in &self.decoder {
            b.init(init)?;
        }
        self.head.init(init)
    }

    /// Stem output at full resolution.
    pub fn stem<T: Element>(&self, f: &mut Forward<T>, image: Var) -> Result<Var> {
        let y = self.stem_conv0.forward(f, image)?;
        let y = self.stem_pawe0.forward(f, y)?;
        let y = self.stem_conv1.forward(f, y)?;
        self.stem_pawe1.forward(f, y)
    }

    /// Encoder features `F_0..F_stages`.
    pub fn encoder_forward<T: Element>(&self, f: &mut Forward<T>, image: Var) -> Result<Vec<Var>> {
        let shape = f.graph.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::dim(
                "encoder_forward",
                format!("image {shape:?}, expected N×{}×H×W", self.config.in_channels),
            ));
        }
        self.config.check_input(shape[2], shape[3])?;
        let mut feats = vec![self.stem(f, image)?];
        for block in &self.encoder {
            let prev = *feats.last().expect("stem present");
            let y = block.forward(f, prev)?;
            feats.push(f.graph.maxpool2d(y, 2, 2)?);
        }
        Ok(feats)
    }

    /// Logits `N×K×H×W` from the encoder features.
    pub fn decoder_forward<T: Element>(&self, f: &mut Forward<T>, feats: &[Var]) -> Result<Var> {
        let stages = self.config.stages;
        if feats.len() != stages + 1 {
            return Err(Error::dim(
                "decoder_forward",
                format!("{} features for {stages} stages", feats.len()),
            ));
        }
        let mut g = self.bottleneck.forward(f, feats[stages])?;
        for s in (1..=stages).rev() {
            let up = self.ups[s - 1].forward(f, g)?;
            let skip = match &self.skips[s - 1] {
                Some(ccm) => ccm.forward(f, feats[s - 1])?,
                None => feats[s - 1],
            };
            let joined = f.graph.concat(&[up, skip], 1)?;
            g = self.decoder[s - 1].forward(f, joined)?;
        }
        self.head.forward(f, g)
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<T>, image: Var) -> Result<Var> {
        let feats = self.encoder_forward(f, image)?;
        self.decoder_forward(f, &feats)
    }

    /// Encoder shape ladder for an `h×w` input.
    pub fn shape_ladder(&self, h: usize, w: usize) -> Vec<ShapeRung> {
        (0..=self.config.stages)
            .map(|s| (s, self.config.channels(s), h >> s, w >> s))
            .collect()
    }

    /// Analytic FLOP count at `h×w` (convolutions, products, FC layers;
    /// element-wise work is not counted).
    pub fn count_flops(&self, h: usize, w: usize) -> FlopReport {
        let stages = self.config.stages;
        let at = |s: usize| (h >> s, w >> s);
        let mut total = 0u64;
        total += self.stem_conv0.flops(h, w) + self.stem_conv1.flops(h, w);
        total += self.stem_pawe0.flops(h, w) + self.stem_pawe1.flops(h, w);
        for s in 1..=stages {
            let (hh, ww) = at(s - 1);
            total += self.encoder[s - 1].flops(hh, ww);
            total += self.ups[s - 1].flops(hh, ww);
            total += self.decoder[s - 1].flops(hh, ww);
            if let Some(ccm) = &self.skips[s - 1] {
                total += ccm.flops(hh, ww);
            }
        }
        let (hb, wb) = at(stages);
        total += self.bottleneck.flops(hb, wb);
        total += self.head.flops(h, w);
        let position_attention = 2 * PositionAttention::attention_flops(self.config.channels(0), h, w);
        FlopReport {
            total,
            position_attention,
        }
    }
}

/// Parameters, running statistics and wiring of one network instance.
#[derive(Clone, Debug)]
pub struct UCycleMLP<T: Element> {
    pub arch: Architecture,
    pub params: ParamStore<T>,
    pub buffers: Buffers<T>,
}

impl<T: Element> UCycleMLP<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::new(config)?;
        let mut params = ParamStore::new();
        let mut buffers = Buffers::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        arch.init(&mut Init {
            params: &mut params,
            buffers: &mut buffers,
            rng: &mut rng,
        })?;
        Ok(UCycleMLP {
            arch,
            params,
            buffers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    /// Opens a forward session. The architecture comes back alongside so the
    /// caller can record blocks while the session borrows the tensors.
    pub fn session(&mut self, training: bool, seed: u64) -> (&Architecture, Forward<'_, T>) {
        (&self.arch, Forward::new(&self.params, &mut self.buffers, training, seed))
    }

    /// Eval-mode logits for a batch.
    pub fn predict(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let (arch, mut f) = self.session(false, 0);
        let x = f.input(images.clone(), false);
        let y = arch.forward(&mut f, x)?;
        Ok(f.graph.value(y).clone())
    }

    /// Exact number of learnable scalars.
    pub fn count_params(&self) -> usize {
        self.params.numel()
    }

    /// Parameters held by the CCM skip blocks.
    pub fn ccm_params(&self) -> usize {
        (0..self.arch.config.stages)
            .map(|s| self.params.numel_with_prefix(&format!("skip{s}.")))
            .sum()
    }

    pub fn count_flops(&self, h: usize, w: usize) -> FlopReport {
        self.arch.count_flops(h, w)
    }
}
