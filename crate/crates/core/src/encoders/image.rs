use super::nn::{LayerNorm, Linear, SeqShape, Transformer, INIT_STD};
use super::{EncodedBatch, EncoderConfig, FeatureBundle, Modality};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Rng, Tensor};
use crate::tgmim::PatchMask;

/// Cuts a `[C, H, W]` image into `N = H * W / P^2` rows.
///
/// Patches are ordered row-major over the patch grid; each row is the
/// row-major flattening of a `P x P x C` block (channel fastest).
pub fn patchify<T: Real>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::contract(format!(
            "expected a [C, H, W] image, got {:?}",
            image.shape()
        )));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::config(format!(
            "image {h}x{w} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for py in 0..gh {
        for px in 0..gw {
            for r in 0..patch {
                for col in 0..patch {
                    let (y, x) = (py * patch + r, px * patch + col);
                    for ch in 0..c {
                        out.push(src[(ch * h + y) * w + x]);
                    }
                }
            }
        }
    }
    Tensor::new([gh * gw, c * patch * patch], out)
}

/// ViT-style encoder: linear patch embedding, a learnable CLS token,
/// learnable positions, pre-norm blocks, and a projection of the CLS output.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub patch_embed: Linear,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub transformer: Transformer,
    pub ln_final: LayerNorm,
    pub proj: Linear,
    cfg: EncoderConfig,
}

impl ImageEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        Ok(Self {
            patch_embed: Linear::new(store, &format!("{prefix}.patch_embed"), cfg.patch_dim(), d, true, rng),
            cls_token: store.randn(&format!("{prefix}.cls_token"), &[1, d], INIT_STD, rng),
            pos_embed: store.randn(&format!("{prefix}.pos_embed"), &[cfg.image_seq_len(), d], INIT_STD, rng),
            transformer: Transformer::new(
                store,
                &format!("{prefix}.blocks"),
                d,
                cfg.heads,
                cfg.layers,
                cfg.mlp_ratio,
                rng,
            )?,
            ln_final: LayerNorm::new(store, &format!("{prefix}.ln_final"), d),
            proj: Linear::new(store, &format!("{prefix}.proj"), d, cfg.embed_dim, true, rng),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn seq_len(&self) -> usize {
        self.cfg.image_seq_len()
    }

    /// Patch matrix of a batch with masked patches zeroed,
    /// `[B * N, C * P^2]`.
    fn patch_rows<T: Real>(&self, images: &[&Tensor<T>], masks: Option<&[PatchMask]>) -> Result<Tensor<T>> {
        let n = self.cfg.num_patches();
        let pd = self.cfg.patch_dim();
        let want = [self.cfg.channels, self.cfg.image_h, self.cfg.image_w];
        if let Some(m) = masks {
            if m.len() != images.len() {
                return Err(Error::contract(format!(
                    "{} masks for {} images",
                    m.len(),
                    images.len()
                )));
            }
        }
        let mut rows = Vec::with_capacity(images.len() * n * pd);
        for (b, img) in images.iter().enumerate() {
            if img.shape() != want {
                return Err(Error::Dimension {
                    op: "encode_image",
                    lhs: img.shape().to_vec(),
                    rhs: want.to_vec(),
                });
            }
            let mut p = patchify(img, self.cfg.patch)?;
            if let Some(masks) = masks {
                let mask = &masks[b];
                if mask.len() != n {
                    return Err(Error::contract(format!(
                        "mask covers {} patches, image has {n}",
                        mask.len()
                    )));
                }
                for (i, row) in p.data_mut().chunks_mut(pd).enumerate() {
                    if mask.is_masked(i) {
                        row.iter_mut().for_each(|v| *v = T::zero());
                    }
                }
            }
            rows.extend_from_slice(p.data());
        }
        Tensor::new([images.len() * n, pd], rows)
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: &[&Tensor<T>],
        masks: Option<&[PatchMask]>,
    ) -> Result<EncodedBatch> {
        if images.is_empty() {
            return Err(Error::contract("empty image batch"));
        }
        let batch = images.len();
        let n = self.cfg.num_patches();
        let d = self.cfg.width;
        let len = n + 1;
        let patches = g.constant(self.patch_rows(images, masks)?);
        let tokens = self.patch_embed.forward(g, store, patches)?;
        let cls = g.param(store, self.cls_token);
        // Row 0 of `pool` is CLS; patch row i of sample b sits at 1 + b*N + i.
        let pool = g.concat(&[cls, tokens])?;
        let order: Vec<usize> = (0..batch)
            .flat_map(|b| std::iter::once(0).chain((0..n).map(move |i| 1 + b * n + i)))
            .collect();
        let seq = g.gather(pool, &order, d)?;
        let pos_table = g.param(store, self.pos_embed);
        let pos_idx: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let pos = g.gather(pos_table, &pos_idx, d)?;
        let x = g.add(seq, pos)?;
        let shape = SeqShape { batch, len };
        let x = self.transformer.forward(g, store, x, shape, None)?;
        let tokens = self.ln_final.forward(g, store, x)?;
        let cls_rows: Vec<usize> = (0..batch).map(|b| b * len).collect();
        let cls_out = g.gather(tokens, &cls_rows, d)?;
        let global = self.proj.forward(g, store, cls_out)?;
        Ok(EncodedBatch {
            tokens,
            global,
            shape,
            key_valid: None,
            modality: Modality::Image,
        })
    }

    /// Encodes one image; locals are the `N` patch positions.
    pub fn encode<T: Real>(
        &self,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        mask: Option<&PatchMask>,
    ) -> Result<FeatureBundle<T>> {
        let mut g = Graph::new();
        let masks = mask.map(|m| vec![m.clone()]);
        let enc = self.forward(&mut g, store, &[image], masks.as_deref())?;
        enc.bundle(&g, 0, 1, self.cfg.num_patches())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> (ParamStore<f32>, ImageEncoder, EncoderConfig) {
        let cfg = EncoderConfig::desk();
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(&mut store, "image", &cfg, &mut Rng::seeded(1)).unwrap();
        (store, enc, cfg)
    }

    #[test]
    fn patchify_counts() {
        let img = Tensor::<f32>::zeros([3, 384, 128]);
        assert_eq!(patchify(&img, 16).unwrap().shape(), &[192, 768]);
        let img = Tensor::<f32>::zeros([3, 64, 32]);
        assert_eq!(patchify(&img, 8).unwrap().shape(), &[32, 192]);
        assert!(patchify(&Tensor::<f32>::zeros([3, 60, 32]), 8).is_err());
    }

    #[test]
    fn patchify_constant_and_layout() {
        let img = Tensor::<f64>::full([3, 16, 8], 0.25);
        let p = patchify(&img, 8).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.25));

        let data: Vec<f64> = (0..3 * 4 * 4).map(|v| v as f64).collect();
        let img = Tensor::new([3, 4, 4], data).unwrap();
        let p = patchify(&img, 2).unwrap();
        // Patch 1 is grid (0, 1); its pixel (r=1, c=0, ch=2) is image[2][1][2].
        let want = ((2 * 4 + 1) * 4 + 2) as f64;
        assert_eq!(p.row(1)[2 * 3 + 2], want);
    }

    #[test]
    fn desk_shapes() {
        let (store, enc, cfg) = desk();
        let img = Tensor::randn([3, 64, 32], 0.3, &mut Rng::seeded(2));
        let out = enc.encode(&store, &img, None).unwrap();
        assert_eq!(out.locals.shape(), &[32, 64]);
        assert_eq!(out.global.shape(), &[cfg.embed_dim]);
        assert!(out.global.is_finite());
    }

    #[test]
    fn zero_ratio_mask_equals_unmasked() {
        let (store, enc, cfg) = desk();
        let img = Tensor::randn([3, 64, 32], 0.3, &mut Rng::seeded(2));
        let mask = PatchMask::sample(cfg.num_patches(), 0.0, &mut Rng::seeded(3)).unwrap();
        assert_eq!(
            enc.encode(&store, &img, None).unwrap(),
            enc.encode(&store, &img, Some(&mask)).unwrap()
        );
    }

    #[test]
    fn changes_inside_masked_patches_are_invisible() {
        let (store, enc, cfg) = desk();
        let mut rng = Rng::seeded(4);
        let img = Tensor::<f32>::randn([3, 64, 32], 0.3, &mut rng);
        let mask = PatchMask::sample(cfg.num_patches(), 0.5, &mut rng).unwrap();
        let mut other = img.clone();
        let gw = cfg.grid().1;
        for ch in 0..3 {
            for y in 0..64 {
                for x in 0..32 {
                    let patch = (y / 8) * gw + x / 8;
                    if mask.is_masked(patch) {
                        other.data_mut()[(ch * 64 + y) * 32 + x] += 1.0;
                    }
                }
            }
        }
        assert_eq!(
            enc.encode(&store, &img, Some(&mask)).unwrap(),
            enc.encode(&store, &other, Some(&mask)).unwrap()
        );
    }

    #[test]
    fn wrong_mask_length() {
        let (store, enc, _) = desk();
        let img = Tensor::zeros([3, 64, 32]);
        let mask = PatchMask::sample(10, 0.5, &mut Rng::seeded(0)).unwrap();
        assert!(matches!(enc.encode(&store, &img, Some(&mask)), Err(Error::Contract(_))));
    }
}
