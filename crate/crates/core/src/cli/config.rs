use std::fs;
use std::path::{Path, PathBuf};

use crate::dataio::SplitSpec;
use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::objectives::{LossConfig, LossMode};
use crate::trainer::{default_loss, OptimConfig};

/// Everything a training run needs, read from a flat `key=value` file.
///
/// Keys are those of [`ModelConfig::KEYS`], the optimiser keys `lr`,
/// `beta1`, `beta2`, `eps`, `weight_decay`, `clip_max_norm`, `epochs`,
/// `batch_size`, `seed`, the loss keys `loss` (`auto`, `hybrid_ce_dice` or
/// `bce_focal`), `alpha`, `gamma`, `dice_smooth`, and the data keys
/// `data_dir`, `checkpoint`, `train_frac`, `val_frac`, `test_frac`.
/// `#` starts a comment. [`RunConfig::to_text`] prints every key with its
/// current value.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    /// `None` picks the regime matching the head.
    pub loss_mode: Option<LossMode>,
    pub alpha: f64,
    pub gamma: f64,
    pub dice_smooth: f64,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        let split = SplitSpec::default();
        RunConfig {
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            loss_mode: None,
            alpha: loss.alpha,
            gamma: loss.gamma,
            dice_smooth: loss.dice_smooth,
            data_dir: None,
            checkpoint: PathBuf::from("model.ckpt"),
            train_frac: split.train,
            val_frac: split.val,
            test_frac: split.test,
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip(e))))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? {
            return Ok(());
        }
        let o = &mut self.optim;
        match key {
            "lr" => o.lr = parse(key, value)?,
            "beta1" => o.beta1 = parse(key, value)?,
            "beta2" => o.beta2 = parse(key, value)?,
            "eps" => o.eps = parse(key, value)?,
            "weight_decay" => o.weight_decay = parse(key, value)?,
            "clip_max_norm" => o.clip_max_norm = parse(key, value)?,
            "epochs" => o.epochs = parse(key, value)?,
            "batch_size" => o.batch_size = parse(key, value)?,
            "seed" => o.seed = parse(key, value)?,
            "loss" => {
                self.loss_mode = match value {
                    "auto" => None,
                    "hybrid_ce_dice" => Some(LossMode::HybridCeDice),
                    "bce_focal" => Some(LossMode::BceFocal),
                    other => return Err(Error::Config(format!("unknown loss {other:?}"))),
                }
            }
            "alpha" => self.alpha = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "dice_smooth" => self.dice_smooth = parse(key, value)?,
            "data_dir" => self.data_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "checkpoint" => self.checkpoint = PathBuf::from(value),
            "train_frac" => self.train_frac = parse(key, value)?,
            "val_frac" => self.val_frac = parse(key, value)?,
            "test_frac" => self.test_frac = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.loss().validate()?;
        self.split().validate()
    }

    pub fn loss(&self) -> LossConfig {
        let base = default_loss(self.model.num_classes);
        LossConfig {
            mode: self.loss_mode.unwrap_or(base.mode),
            alpha: self.alpha,
            gamma: self.gamma,
            dice_smooth: self.dice_smooth,
        }
    }

    pub fn split(&self) -> SplitSpec {
        SplitSpec {
            train: self.train_frac,
            val: self.val_frac,
            test: self.test_frac,
            seed: self.optim.seed,
        }
    }

    pub fn to_text(&self) -> String {
        let o = &self.optim;
        let loss = match self.loss_mode {
            None => "auto",
            Some(LossMode::HybridCeDice) => "hybrid_ce_dice",
            Some(LossMode::BceFocal) => "bce_focal",
        };
        let mut pairs = self.model.to_pairs();
        pairs.extend(
            [
                ("lr", o.lr.to_string()),
                ("beta1", o.beta1.to_string()),
                ("beta2", o.beta2.to_string()),
                ("eps", o.eps.to_string()),
                ("weight_decay", o.weight_decay.to_string()),
                ("clip_max_norm", o.clip_max_norm.to_string()),
                ("epochs", o.epochs.to_string()),
                ("batch_size", o.batch_size.to_string()),
                ("seed", o.seed.to_string()),
                ("loss", loss.to_string()),
                ("alpha", self.alpha.to_string()),
                ("gamma", self.gamma.to_string()),
                ("dice_smooth", self.dice_smooth.to_string()),
                (
                    "data_dir",
                    self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                ),
                ("checkpoint", self.checkpoint.display().to_string()),
                ("train_frac", self.train_frac.to_string()),
                ("val_frac", self.val_frac.to_string()),
                ("test_frac", self.test_frac.to_string()),
            ]
            .map(|(k, v)| (k.to_string(), v)),
        );
        pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// Drops the `config error: ` prefix so wrapped messages read once.
fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::UpsamplerKind;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.loss().mode, LossMode::BceFocal);
    }

    #[test]
    fn parses_mixed_keys_and_comments() {
        let text = "# quick run\nnum_classes = 4\nbase_channels=8\nupsampler=bilinear\n\nlr=0.001  # faster\nepochs=3\nloss=auto\nalpha=0.25\ndata_dir=/tmp/d\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.model.num_classes, 4);
        assert_eq!(cfg.model.base_channels, 8);
        assert_eq!(cfg.model.upsampler, UpsamplerKind::Bilinear);
        assert_eq!(cfg.optim.lr, 0.001);
        assert_eq!(cfg.optim.epochs, 3);
        assert_eq!(cfg.loss().mode, LossMode::HybridCeDice);
        assert_eq!(cfg.loss().alpha, 0.25);
        assert_eq!(cfg.data_dir, Some(PathBuf::from("/tmp/d")));
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "colour=blue",
            "lr",
            "lr=fast",
            "loss=l2",
            "alpha=1.5",
            "train_frac=0.5",
            "input_size=100x100",
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
        let msg = RunConfig::parse("epochs=2\ncolour=blue").unwrap_err().to_string();
        assert!(msg.contains("line 2") && msg.contains("colour"), "{msg}");
    }
}
