use crate::blocks::{Stepsize, UpsamplerKind, CYCLE_MLP_STEPSIZES};
use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// `C`; stage `s` carries `2^s·C` channels.
    pub base_channels: usize,
    pub stages: usize,
    /// 1 → single logit with a sigmoid head, ≥2 → softmax over classes.
    pub num_classes: usize,
    pub dense_depth: usize,
    /// Channels added by each dense layer.
    pub growth: usize,
    pub dilation: usize,
    pub we_reduction: usize,
    pub cyclefc_stepsizes: Vec<(usize, usize)>,
    pub dropout: f64,
    pub use_ccm: bool,
    pub upsampler: UpsamplerKind,
    pub input_size: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            base_channels: 32,
            stages: 5,
            num_classes: 1,
            dense_depth: 3,
            growth: 8,
            dilation: 2,
            we_reduction: 4,
            cyclefc_stepsizes: CYCLE_MLP_STEPSIZES.to_vec(),
            dropout: 0.1,
            use_ccm: true,
            upsampler: UpsamplerKind::Transposed,
            input_size: (224, 224),
        }
    }
}

impl ModelConfig {
    /// A few-thousand-parameter variant for tests and quick experiments.
    pub fn compact(input: usize) -> Self {
        ModelConfig {
            base_channels: 4,
            stages: 2,
            dense_depth: 1,
            growth: 2,
            we_reduction: 2,
            input_size: (input, input),
            ..ModelConfig::default()
        }
    }

    /// `C_s = 2^s·C`.
    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn channel_schedule(&self) -> Vec<usize> {
        (0..=self.stages).map(|s| self.channels(s)).collect()
    }

    /// Spatial divisor the input must honour (`2^stages`).
    pub fn size_multiple(&self) -> usize {
        1 << self.stages
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.base_channels == 0 || self.stages == 0 {
            return fail("in_channels, base_channels and stages must be positive".into());
        }
        if self.num_classes == 0 {
            return fail("num_classes must be ≥ 1".into());
        }
        if self.we_reduction == 0 || !self.base_channels.is_multiple_of(self.we_reduction) {
            return fail(format!(
                "we_reduction {} must divide base_channels {}",
                self.we_reduction, self.base_channels
            ));
        }
        if self.dense_depth == 0 || self.growth == 0 || self.dilation == 0 {
            return fail("dense_depth, growth and dilation must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.cyclefc_stepsizes.is_empty() {
            return fail("at least one CycleFC stepsize is required".into());
        }
        for &(h, w) in &self.cyclefc_stepsizes {
            Stepsize::new(h, w)?;
        }
        self.check_input(self.input_size.0, self.input_size.1)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::Config(format!(
                "input {h}×{w} must be a positive multiple of {m} on both sides"
            )));
        }
        Ok(())
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_pair(key: &str, value: &str) -> Result<(usize, usize)> {
    let (a, b) = value
        .trim()
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("{key} expects AxB, got {value:?}")))?;
    Ok((parse(key, a)?, parse(key, b)?))
}

impl ModelConfig {
    pub const KEYS: [&'static str; 13] = [
        "in_channels",
        "base_channels",
        "stages",
        "num_classes",
        "dense_depth",
        "growth",
        "dilation",
        "we_reduction",
        "cyclefc_stepsizes",
        "dropout",
        "use_ccm",
        "upsampler",
        "input_size",
    ];

    /// `key=value` pairs in [`Self::KEYS`] order; [`Self::set`] reads them back.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let steps: Vec<String> = self.cyclefc_stepsizes.iter().map(|(h, w)| format!("{h}x{w}")).collect();
        let values = [
            self.in_channels.to_string(),
            self.base_channels.to_string(),
            self.stages.to_string(),
            self.num_classes.to_string(),
            self.dense_depth.to_string(),
            self.growth.to_string(),
            self.dilation.to_string(),
            self.we_reduction.to_string(),
            steps.join(","),
            self.dropout.to_string(),
            self.use_ccm.to_string(),
            match self.upsampler {
                UpsamplerKind::Transposed => "transposed".into(),
                UpsamplerKind::Bilinear => "bilinear".into(),
            },
            format!("{}x{}", self.input_size.0, self.input_size.1),
        ];
        Self::KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    /// Sets one field from text. Returns `false` for keys this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "in_channels" => self.in_channels = parse(key, value)?,
            "base_channels" => self.base_channels = parse(key, value)?,
            "stages" => self.stages = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "dense_depth" => self.dense_depth = parse(key, value)?,
            "growth" => self.growth = parse(key, value)?,
            "dilation" => self.dilation = parse(key, value)?,
            "we_reduction" => self.we_reduction = parse(key, value)?,
            "cyclefc_stepsizes" => {
                self.cyclefc_stepsizes = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse_pair(key, s))
                    .collect::<Result<_>>()?
            }
            "dropout" => self.dropout = parse(key, value)?,
            "use_ccm" => self.use_ccm = parse(key, value)?,
            "upsampler" => {
                self.upsampler = match value.trim() {
                    "transposed" => UpsamplerKind::Transposed,
                    "bilinear" => UpsamplerKind::Bilinear,
                    other => return Err(Error::Config(format!("unknown upsampler {other:?}"))),
                }
            }
            "input_size" => self.input_size = parse_pair(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}
