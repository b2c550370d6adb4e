//! Training loop, evaluation, ablation runner and gradient checks.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod model;
pub mod optim;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::{
    cmpm_loss, identity_labels, similarity_matrix, total_loss, FeatureDump, FeatureMeta, LossBreakdown, LossParts,
};
use crate::encoders::{Modality, TokenSequence};
use crate::error::{Error, Result};
use crate::isgvfc::{id_loss, isgvfc_loss_on, sample_pairs, triplet_loss, CalibrationMode};
use crate::metrics::{avg_dist, silhouette, MetricsReport, RetrievalGroundTruth};
use crate::synthdata::{Dataset, Split};
use crate::tensor::{Graph, Real, Rng, Tensor};
use crate::tgmim::{MimVariant, PatchMask};

pub use checkpoint::{stored_dtype, Checkpoint, CheckpointMeta};
pub use config::TrainConfig;
pub use model::{Item, Model, SplitData, ISGVFC_PREFIX, TGMIM_PREFIX};
pub use optim::Adam;

/// Mean loss terms of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

/// Rows encoded per forward pass during evaluation.
const EVAL_CHUNK: usize = 32;

/// A model, its optimizer and the training split.
#[derive(Debug)]
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub model: Model<T>,
    pub adam: Adam<T>,
    pub data: SplitData<T>,
    pub history: Vec<EpochLog>,
    /// Completed epochs.
    pub epoch: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: &TrainConfig, dataset: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let data = SplitData::new(dataset, Split::Train, &dataset.vocab, cfg.text_len)?;
        let encoder = cfg.encoder(dataset.manifest.image_h, dataset.manifest.image_w, dataset.vocab.len());
        let model = Model::new(cfg, encoder, data.num_identities())?;
        let adam = Adam::new(&model.store, cfg.lr);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            adam,
            data,
            history: Vec::new(),
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>, dataset: &Dataset) -> Result<Self> {
        let cfg = ck.meta.config.clone();
        let data = SplitData::new(dataset, Split::Train, &dataset.vocab, cfg.text_len)?;
        if data.num_identities() != ck.meta.train_classes {
            return Err(Error::Version("dataset does not match the checkpoint".into()));
        }
        let (model, adam) = ck.restore()?;
        Ok(Self {
            cfg,
            model,
            adam,
            data,
            history: ck.meta.history.clone(),
            epoch: ck.meta.epoch,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::capture(
            &self.model,
            &self.adam,
            CheckpointMeta {
                config: self.cfg.clone(),
                encoder: self.model.encoder.clone(),
                train_classes: self.data.num_identities(),
                epoch: self.epoch,
                rng_seed: self.cfg.seed,
                history: self.history.clone(),
            },
        )
    }

    /// Item indices of every batch of epoch `epoch` (1-based).
    ///
    /// Identities are shuffled and taken `batch_size / views_per_batch` at
    /// a time; each contributes `views_per_batch` images, drawn without
    /// replacement when it has enough.
    pub fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let rng = Rng::seeded(self.cfg.seed).split_index("epoch", epoch as u64);
        let mut groups = self.data.by_identity();
        rng.split("order").shuffle(&mut groups);
        let k = self.cfg.views_per_batch;
        let per_batch = (self.cfg.batch_size / k).max(1);
        let mut pick = rng.split("views");
        groups
            .chunks(per_batch)
            .map(|chunk| {
                let mut batch = Vec::with_capacity(per_batch * k);
                for (_, items) in chunk {
                    if items.len() >= k {
                        batch.extend(pick.choose_distinct(items.len(), k).into_iter().map(|i| items[i]));
                    } else {
                        batch.extend(items.iter().copied());
                        batch.extend((items.len()..k).map(|_| items[pick.below(items.len())]));
                    }
                }
                batch
            })
            .collect()
    }

    /// Forward, backward and update on one batch.
    pub fn step(&mut self, batch: &[usize], rng: &Rng, step: usize) -> Result<LossBreakdown> {
        let cfg = &self.cfg;
        let model = &self.model;
        let store = &model.store;
        let items: Vec<&Item<T>> = batch.iter().map(|&i| &self.data.items[i]).collect();
        let images: Vec<&Tensor<T>> = items.iter().map(|it| &it.image).collect();
        let pids: Vec<u32> = items.iter().map(|it| it.pid).collect();
        let mut caption_rng = rng.split("captions");
        let tokens: Vec<TokenSequence> = items
            .iter()
            .map(|it| it.captions[caption_rng.below(it.captions.len())].clone())
            .collect();

        let mut g = Graph::new();
        let visual = model.image.forward(&mut g, store, &images, None)?;
        let text = model.text.forward(&mut g, store, &tokens)?;
        let labels = identity_labels(&pids, &pids);
        let mut parts = LossParts {
            cmpm: Some(cmpm_loss(
                &mut g,
                visual.global,
                text.global,
                &labels,
                cfg.tau,
                cfg.eps,
            )?),
            ..LossParts::default()
        };
        if cfg.isgvfc {
            parts.isgvfc = Some(match cfg.isgvfc_mode {
                CalibrationMode::Kl => {
                    let c = cfg.pairs.min(pids.len());
                    let sel = sample_pairs(&pids, c, &mut rng.split("pairs"))?;
                    isgvfc_loss_on(&mut g, visual.global, &sel, cfg.tau, cfg.eps)?
                }
                CalibrationMode::IdLoss => {
                    let head = model
                        .classifier
                        .as_ref()
                        .ok_or_else(|| Error::contract("id-loss mode without a classifier"))?;
                    let logits = head.logits(&mut g, store, visual.global)?;
                    let classes: Vec<usize> = pids.iter().map(|p| self.data.classes[p]).collect();
                    id_loss(&mut g, logits, &classes)?
                }
                CalibrationMode::Triplet => triplet_loss(&mut g, visual.global, &pids, cfg.triplet_margin)?,
            });
        }
        if let Some(head) = &model.mim {
            let n = model.encoder.num_patches();
            let mut mask_rng = rng.split("masks");
            let masks = (0..images.len())
                .map(|_| PatchMask::sample(n, cfg.mask_ratio, &mut mask_rng))
                .collect::<Result<Vec<_>>>()?;
            let masked = model.image.forward(&mut g, store, &images, Some(&masks))?;
            let rec = head.loss(&mut g, store, &masked, Some(&text), cfg.mim_variant, &images, &masks)?;
            parts.tgmim = Some(rec.loss);
        }
        let (total, breakdown) = total_loss(&mut g, &parts, &cfg.weights, self.epoch + 1, step)?;
        g.backward(total)?;
        self.model.store.zero_grad();
        g.accumulate_param_grads(&mut self.model.store);
        self.adam.update(&mut self.model.store);
        Ok(breakdown)
    }

    /// Runs the next epoch and appends its mean losses to the history.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.epoch + 1;
        let rng = Rng::seeded(self.cfg.seed).split_index("epoch", epoch as u64);
        let batches = self.batches(epoch);
        let mut sum = LossBreakdown::default();
        for (s, batch) in batches.iter().enumerate() {
            let step_rng = rng.split_index("step", s as u64);
            sum.accumulate(&self.step(batch, &step_rng, s)?);
        }
        let log = EpochLog {
            epoch,
            losses: sum.scaled(1.0 / batches.len() as f64),
        };
        self.epoch = epoch;
        self.history.push(log);
        Ok(log)
    }

    /// Trains until `cfg.epochs` epochs are complete.
    ///
    /// A non-finite loss aborts. The state from the start of the failing
    /// epoch is restored and, when `abort_path` is given, saved there.
    pub fn train(&mut self, abort_path: Option<&Path>) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            let snapshot = (self.model.store.clone(), self.adam.clone());
            match self.run_epoch() {
                Ok(log) => log::info!(
                    "epoch {} total {:.5} cmpm {:.5} isgvfc {:.5} tgmim {:.5}",
                    log.epoch,
                    log.losses.total,
                    log.losses.l_cmpm,
                    log.losses.l_isgvfc,
                    log.losses.l_tgmim
                ),
                Err(e @ Error::NonFinite { .. }) => {
                    (self.model.store, self.adam) = snapshot;
                    if let Some(path) = abort_path {
                        self.checkpoint().save(path)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }
}

/// Global features of images, `[n, embed_dim]`.
pub fn encode_images<T: Real>(model: &Model<T>, images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let e = model.encoder.embed_dim;
    let mut rows = Vec::with_capacity(images.len() * e);
    for chunk in images.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let out = model.image.forward(&mut g, &model.store, chunk, None)?;
        rows.extend_from_slice(g.data(out.global));
    }
    Tensor::new([images.len(), e], rows)
}

/// Global features of captions, `[n, embed_dim]`.
pub fn encode_texts<T: Real>(model: &Model<T>, tokens: &[TokenSequence]) -> Result<Tensor<T>> {
    let e = model.encoder.embed_dim;
    let mut rows = Vec::with_capacity(tokens.len() * e);
    for chunk in tokens.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let out = model.text.forward(&mut g, &model.store, chunk)?;
        rows.extend_from_slice(g.data(out.global));
    }
    Tensor::new([tokens.len(), e], rows)
}

/// Text-to-image retrieval on a split: every caption queries the split's
/// images. Only the encoders are used.
pub fn evaluate<T: Real>(model: &Model<T>, data: &SplitData<T>) -> Result<MetricsReport> {
    let images: Vec<&Tensor<T>> = data.items.iter().map(|it| &it.image).collect();
    let gallery_pids: Vec<u32> = data.items.iter().map(|it| it.pid).collect();
    let mut queries = Vec::new();
    let mut query_pids = Vec::new();
    for it in &data.items {
        for c in &it.captions {
            queries.push(c.clone());
            query_pids.push(it.pid);
        }
    }
    let gallery = encode_images(model, &images)?;
    let texts = encode_texts(model, &queries)?;
    let sim = similarity_matrix(&texts, &gallery)?;
    let gt = RetrievalGroundTruth::from_pids(&query_pids, &gallery_pids)?;
    let mut report = MetricsReport::retrieval(&sim, &gt)?;
    if data.num_identities() >= 2 {
        report.silhouette = silhouette(&gallery, &gallery_pids)?;
    }
    Ok(report)
}

/// Mean avgDist of reconstructions over a split at masking ratio `ratio`.
///
/// Each image is masked with its own stream derived from `seed`; the
/// text-guided variant is guided by the image's first caption.
pub fn reconstruction_avg_dist<T: Real>(
    model: &Model<T>,
    data: &SplitData<T>,
    ratio: f64,
    variant: MimVariant,
    seed: u64,
) -> Result<f64> {
    let head = model
        .mim
        .as_ref()
        .ok_or_else(|| Error::contract("model has no reconstruction head"))?;
    let n = model.encoder.num_patches();
    let root = Rng::seeded(seed).split("avg_dist");
    let mut total = 0.0;
    for (chunk_index, chunk) in data.items.chunks(EVAL_CHUNK).enumerate() {
        let masks = chunk
            .iter()
            .enumerate()
            .map(|(i, _)| {
                PatchMask::sample(
                    n,
                    ratio,
                    &mut root.split_index("image", (chunk_index * EVAL_CHUNK + i) as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let images: Vec<&Tensor<T>> = chunk.iter().map(|it| &it.image).collect();
        let tokens: Vec<TokenSequence> = chunk.iter().map(|it| it.captions[0].clone()).collect();
        let mut g = Graph::new();
        let masked = model.image.forward(&mut g, &model.store, &images, Some(&masks))?;
        let text = match variant {
            MimVariant::TextGuided => Some(model.text.forward(&mut g, &model.store, &tokens)?),
            MimVariant::TextFree => None,
        };
        let rec = head.loss(&mut g, &model.store, &masked, text.as_ref(), variant, &images, &masks)?;
        let pred = g.value(rec.predicted);
        let per = pred.numel() / images.len();
        for (i, img) in images.iter().enumerate() {
            let p = Tensor::new(img.shape().to_vec(), pred.data()[i * per..(i + 1) * per].to_vec())?;
            total += avg_dist(&p, &masks[i], img, model.encoder.patch)?;
        }
    }
    Ok(total / data.items.len() as f64)
}

/// Global features of a split's images and captions with identity metadata.
pub fn dump_features<T: Real>(model: &Model<T>, data: &SplitData<T>) -> Result<FeatureDump> {
    let images: Vec<&Tensor<T>> = data.items.iter().map(|it| &it.image).collect();
    let tokens: Vec<TokenSequence> = data.items.iter().flat_map(|it| it.captions.iter().cloned()).collect();
    let caption_pids = data
        .items
        .iter()
        .flat_map(|it| std::iter::repeat_n(it.pid, it.captions.len()));
    let vis = encode_images(model, &images)?;
    let txt = encode_texts(model, &tokens)?;
    let rows = vis.data().iter().chain(txt.data()).map(|v| v.f64() as f32).collect();
    let meta = data
        .items
        .iter()
        .map(|it| (it.pid, Modality::Image))
        .chain(caption_pids.map(|p| (p, Modality::Text)))
        .enumerate()
        .map(|(index, (person_id, modality))| FeatureMeta {
            index,
            person_id,
            modality,
        })
        .collect();
    Ok(FeatureDump {
        dim: model.encoder.embed_dim,
        rows,
        meta,
    })
}

/// Writes one JSON object per epoch.
pub fn write_loss_log(path: &Path, history: &[EpochLog]) -> Result<()> {
    let mut out = Vec::new();
    for h in history {
        serde_json::to_writer(&mut out, h)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
