use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::{LossWeights, DEFAULT_EPS, DEFAULT_TAU};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::isgvfc::CalibrationMode;
use crate::tensor::DType;
use crate::tgmim::{AttentionScale, MimVariant};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "VFE_SEED";

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    /// Words per caption.
    pub text_len: usize,
    pub embed_dim: usize,
    pub fusion_depth: usize,
    pub mca_scale: AttentionScale,
    pub tau: f64,
    pub eps: f64,
    pub mask_ratio: f64,
    /// Anchors `C` drawn per batch for calibration.
    pub pairs: usize,
    pub batch_size: usize,
    /// Images per identity inside a batch.
    pub views_per_batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub tgmim: bool,
    pub isgvfc: bool,
    pub cmpm: bool,
    pub isgvfc_mode: CalibrationMode,
    pub mim_variant: MimVariant,
    pub triplet_margin: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub dtype: DType,
    pub dataset: PathBuf,
    pub output: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Field names accepted by [`TrainConfig::set`].
pub const KEYS: &[&str] = &[
    "width",
    "layers",
    "heads",
    "mlp_ratio",
    "patch",
    "text_len",
    "embed_dim",
    "fusion_depth",
    "mca_scale",
    "tau",
    "eps",
    "mask_ratio",
    "pairs",
    "batch_size",
    "views_per_batch",
    "lr",
    "epochs",
    "tgmim",
    "isgvfc",
    "cmpm",
    "isgvfc_mode",
    "mim_variant",
    "triplet_margin",
    "weight_tgmim",
    "weight_isgvfc",
    "weight_cmpm",
    "seed",
    "dtype",
    "dataset",
    "output",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

impl TrainConfig {
    /// Small model for 64x32 images on one CPU core.
    pub fn desk() -> Self {
        Self {
            width: 64,
            layers: 2,
            heads: 4,
            mlp_ratio: 2,
            patch: 8,
            text_len: 16,
            embed_dim: 64,
            fusion_depth: 1,
            mca_scale: AttentionScale::Model,
            tau: DEFAULT_TAU,
            eps: DEFAULT_EPS,
            mask_ratio: 0.5,
            pairs: 8,
            batch_size: 16,
            views_per_batch: 4,
            lr: 1e-3,
            epochs: 200,
            tgmim: true,
            isgvfc: true,
            cmpm: true,
            isgvfc_mode: CalibrationMode::Kl,
            mim_variant: MimVariant::TextGuided,
            triplet_margin: 0.3,
            weights: LossWeights::default(),
            seed: 0,
            dtype: DType::F32,
            dataset: PathBuf::from("data"),
            output: PathBuf::from("runs"),
        }
    }

    /// ViT-B/16 scale with the published optimization settings.
    pub fn large() -> Self {
        Self {
            width: 768,
            layers: 12,
            heads: 12,
            mlp_ratio: 4,
            patch: 16,
            text_len: 77,
            embed_dim: 768,
            fusion_depth: 4,
            pairs: 20,
            batch_size: 100,
            lr: 1e-5,
            epochs: 60,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "large" => Ok(Self::large()),
            other => Err(Error::config(format!("unknown preset `{other}`"))),
        }
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "width" => self.width = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "patch" => self.patch = parse(key, value)?,
            "text_len" => self.text_len = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "fusion_depth" => self.fusion_depth = parse(key, value)?,
            "mca_scale" => {
                self.mca_scale = match value {
                    "model" => AttentionScale::Model,
                    "head" => AttentionScale::Head,
                    _ => return Err(Error::config(format!("bad value `{value}` for `{key}`"))),
                }
            }
            "tau" => self.tau = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "mask_ratio" => self.mask_ratio = parse(key, value)?,
            "pairs" => self.pairs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "views_per_batch" => self.views_per_batch = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "tgmim" => self.tgmim = parse_bool(key, value)?,
            "isgvfc" => self.isgvfc = parse_bool(key, value)?,
            "cmpm" => self.cmpm = parse_bool(key, value)?,
            "isgvfc_mode" => self.isgvfc_mode = value.parse()?,
            "mim_variant" => {
                if value == "off" {
                    self.tgmim = false;
                } else {
                    self.mim_variant = value.parse()?;
                    self.tgmim = true;
                }
            }
            "triplet_margin" => self.triplet_margin = parse(key, value)?,
            "weight_tgmim" => self.weights.tgmim = parse(key, value)?,
            "weight_isgvfc" => self.weights.isgvfc = parse(key, value)?,
            "weight_cmpm" => self.weights.cmpm = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "dtype" => self.dtype = parse(key, value)?,
            "dataset" => self.dataset = PathBuf::from(value),
            "output" => self.output = PathBuf::from(value),
            other => return Err(Error::config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Replaces the seed with `VFE_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => self.set("seed", &v),
            Err(_) => Ok(()),
        }
    }

    /// The configuration in the form read by [`TrainConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let mca = match self.mca_scale {
            AttentionScale::Model => "model",
            AttentionScale::Head => "head",
        };
        let mim = if self.tgmim {
            match self.mim_variant {
                MimVariant::TextGuided => "text_guided",
                MimVariant::TextFree => "text_free",
            }
        } else {
            "off"
        };
        let pairs: Vec<(&str, String)> = vec![
            ("width", self.width.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("patch", self.patch.to_string()),
            ("text_len", self.text_len.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("fusion_depth", self.fusion_depth.to_string()),
            ("mca_scale", mca.to_string()),
            ("tau", self.tau.to_string()),
            ("eps", self.eps.to_string()),
            ("mask_ratio", self.mask_ratio.to_string()),
            ("pairs", self.pairs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("views_per_batch", self.views_per_batch.to_string()),
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("isgvfc", self.isgvfc.to_string()),
            ("cmpm", self.cmpm.to_string()),
            ("mim_variant", mim.to_string()),
            ("isgvfc_mode", self.isgvfc_mode.as_str().to_string()),
            ("triplet_margin", self.triplet_margin.to_string()),
            ("weight_tgmim", self.weights.tgmim.to_string()),
            ("weight_isgvfc", self.weights.isgvfc.to_string()),
            ("weight_cmpm", self.weights.cmpm.to_string()),
            ("seed", self.seed.to_string()),
            ("dtype", self.dtype.to_string()),
            ("dataset", self.dataset.display().to_string()),
            ("output", self.output.display().to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.cmpm {
            return Err(Error::config("cmpm cannot be disabled: it is the retrieval objective"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.views_per_batch == 0 || self.views_per_batch > self.batch_size {
            return Err(Error::config("views_per_batch must be in 1..=batch_size"));
        }
        if self.isgvfc && self.isgvfc_mode == CalibrationMode::Kl && self.pairs > self.batch_size {
            return Err(Error::config(format!(
                "cannot draw {} anchors from batches of {}",
                self.pairs, self.batch_size
            )));
        }
        if !(self.tau > 0.0) || !(self.eps >= 0.0) || !(self.lr > 0.0) {
            return Err(Error::config("tau and lr must be positive, eps non-negative"));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::config("mask_ratio must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Encoder geometry for images of `h x w` and a vocabulary of `vocab` words.
    pub fn encoder(&self, h: usize, w: usize, vocab: usize) -> EncoderConfig {
        EncoderConfig {
            width: self.width,
            layers: self.layers,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            patch: self.patch,
            channels: 3,
            image_h: h,
            image_w: w,
            text_len: self.text_len,
            vocab_size: vocab,
            embed_dim: self.embed_dim,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut c = TrainConfig::desk();
        c.lr = 1e-3;
        c.tgmim = false;
        c.isgvfc_mode = CalibrationMode::Triplet;
        let mut d = TrainConfig::large();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn file_syntax_and_errors() {
        let mut c = TrainConfig::desk();
        c.apply_text("# comment\nlr = 0.01  # trailing\n\nmim_variant=text_free\n")
            .unwrap();
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.mim_variant, MimVariant::TextFree);
        assert!(c.apply_text("bogus = 1").is_err());
        assert!(c.apply_text("lr 1").is_err());
        assert!(c.apply_text("tgmim = maybe").is_err());
    }

    #[test]
    fn large_values_accepted() {
        let c = TrainConfig::large();
        assert_eq!((c.batch_size, c.epochs, c.text_len), (100, 60, 77));
        assert_eq!(c.lr, 1e-5);
        c.validate().unwrap();
        c.encoder(384, 128, 49408).validate().unwrap();
    }

    #[test]
    fn validation() {
        let mut c = TrainConfig::desk();
        c.cmpm = false;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.batch_size = 1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.pairs = 40;
        assert!(c.validate().is_err());
    }
}
