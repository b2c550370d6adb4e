use std::collections::{BTreeMap, BTreeSet};

use crate::encoders::{EncoderConfig, ImageEncoder, TextEncoder, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::isgvfc::{CalibrationMode, IdClassifier};
use crate::synthdata::{Dataset, Split};
use crate::tensor::{ParamStore, Real, Rng, Tensor};
use crate::tgmim::TgMimHead;

use super::TrainConfig;

/// Parameter-name prefixes of the training-only heads.
pub const TGMIM_PREFIX: &str = "tgmim.";
pub const ISGVFC_PREFIX: &str = "isgvfc.";

/// Both encoders plus whichever auxiliary heads the configuration enables.
#[derive(Debug)]
pub struct Model<T> {
    pub store: ParamStore<T>,
    pub encoder: EncoderConfig,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub mim: Option<TgMimHead>,
    pub classifier: Option<IdClassifier>,
}

impl<T: Real> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self {
            store: self.store.clone(),
            encoder: self.encoder.clone(),
            image: self.image.clone(),
            text: self.text.clone(),
            mim: self.mim.clone(),
            classifier: self.classifier.clone(),
        }
    }
}

impl<T: Real> Model<T> {
    /// Every component draws its initial weights from its own named stream,
    /// so variants that differ only in their heads share encoder weights.
    pub fn new(cfg: &TrainConfig, encoder: EncoderConfig, train_classes: usize) -> Result<Self> {
        encoder.validate()?;
        let init = Rng::seeded(cfg.seed).split("init");
        let mut store = ParamStore::new();
        let image = ImageEncoder::new(&mut store, "image", &encoder, &mut init.split("image"))?;
        let text = TextEncoder::new(&mut store, "text", &encoder, &mut init.split("text"))?;
        let mim = if cfg.tgmim {
            Some(TgMimHead::new(
                &mut store,
                "tgmim",
                &encoder,
                cfg.fusion_depth,
                cfg.mca_scale,
                &mut init.split("tgmim"),
            )?)
        } else {
            None
        };
        let classifier = if cfg.isgvfc && cfg.isgvfc_mode == CalibrationMode::IdLoss {
            Some(IdClassifier::new(
                &mut store,
                "isgvfc.classifier",
                encoder.embed_dim,
                train_classes,
                &mut init.split("isgvfc"),
            )?)
        } else {
            None
        };
        Ok(Self {
            store,
            encoder,
            image,
            text,
            mim,
            classifier,
        })
    }
}

/// One image with its tokenized captions, converted to the model's float
/// type.
#[derive(Debug, Clone)]
pub struct Item<T> {
    pub pid: u32,
    pub image: Tensor<T>,
    pub captions: Vec<TokenSequence>,
}

/// The samples of one split, ready for the model.
#[derive(Debug, Clone)]
pub struct SplitData<T> {
    pub items: Vec<Item<T>>,
    /// Identity to contiguous class index, in ascending pid order.
    pub classes: BTreeMap<u32, usize>,
}

impl<T: Real> SplitData<T> {
    pub fn new(dataset: &Dataset, split: Split, vocab: &Vocabulary, text_len: usize) -> Result<Self> {
        let items: Vec<Item<T>> = dataset
            .split(split)
            .into_iter()
            .map(|s| Item {
                pid: s.pid,
                image: s.image.cast(),
                captions: s.captions.iter().map(|c| vocab.tokenize(c, text_len)).collect(),
            })
            .collect();
        if items.is_empty() {
            return Err(Error::config(format!("split `{}` is empty", split.as_str())));
        }
        let pids: BTreeSet<u32> = items.iter().map(|it| it.pid).collect();
        let classes = pids.into_iter().enumerate().map(|(i, p)| (p, i)).collect();
        Ok(Self { items, classes })
    }

    /// Item indices grouped by identity, in ascending pid order.
    pub fn by_identity(&self) -> Vec<(u32, Vec<usize>)> {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, it) in self.items.iter().enumerate() {
            groups.entry(it.pid).or_default().push(i);
        }
        groups.into_iter().collect()
    }

    pub fn num_identities(&self) -> usize {
        self.classes.len()
    }
}
