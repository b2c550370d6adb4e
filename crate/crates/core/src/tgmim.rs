//! Text-guided masked image modeling.
//!
//! A masked image is encoded, its token sequence attends to the caption's
//! token sequence through one multi-head cross-attention layer, a small
//! transformer fuses the result, and a 1x1 convolution followed by pixel
//! shuffle predicts raw pixels. The loss is the per-patch mean absolute
//! error averaged over masked patches.

use serde::{Deserialize, Serialize};

use crate::encoders::nn::{Attention, LayerNorm, Linear, SeqShape, Transformer};
use crate::encoders::{EncodedBatch, EncoderConfig};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Real, Rng, Tensor, Var};

/// Which patches of an image are hidden.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMask {
    flags: Vec<bool>,
    ratio: f64,
}

impl PatchMask {
    /// Masks exactly `round(ratio * n)` distinct patches, uniformly.
    pub fn sample(n: usize, ratio: f64, rng: &mut Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::config(format!("masking ratio {ratio} outside [0, 1]")));
        }
        let count = (ratio * n as f64).round() as usize;
        let mut flags = vec![false; n];
        for i in rng.choose_distinct(n, count.min(n)) {
            flags[i] = true;
        }
        Ok(Self { flags, ratio })
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        let ratio = if flags.is_empty() {
            0.0
        } else {
            flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
        };
        Self { flags, ratio }
    }

    pub fn none(n: usize) -> Self {
        Self {
            flags: vec![false; n],
            ratio: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn is_masked(&self, patch: usize) -> bool {
        self.flags[patch]
    }

    pub fn num_masked(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    /// Whether pixel `(y, x)` lies in a masked patch of a grid `grid_w` wide.
    pub fn covers(&self, y: usize, x: usize, patch: usize, grid_w: usize) -> bool {
        self.flags[(y / patch) * grid_w + x / patch]
    }
}

/// Denominator inside the cross-attention softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `sqrt(d)`, the model width.
    #[default]
    Model,
    /// `sqrt(d / H)`, the per-head width.
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MimVariant {
    /// Masked patches are predicted from image context plus the caption.
    TextGuided,
    /// Cross-attention is skipped; only image context is used.
    TextFree,
}

impl std::str::FromStr for MimVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text_guided" => Ok(MimVariant::TextGuided),
            "text_free" => Ok(MimVariant::TextFree),
            other => Err(Error::config(format!("unknown MIM variant `{other}`"))),
        }
    }
}

/// Multi-head cross-modal attention weights.
///
/// Head `i` uses columns `i*dh..(i+1)*dh` of the query/key/value matrices;
/// the output matrix maps the concatenated heads back to width `d`. No
/// biases.
#[derive(Debug, Clone)]
pub struct MultiHeadCrossAttention {
    pub attn: Attention,
}

impl MultiHeadCrossAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        scale: AttentionScale,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut attn = Attention::new(store, prefix, dim, heads, false, rng)?;
        attn.scale_dim = match scale {
            AttentionScale::Model => dim,
            AttentionScale::Head => dim / heads,
        };
        Ok(Self { attn })
    }

    pub fn heads(&self) -> usize {
        self.attn.heads
    }

    /// Per-head `(W_q, W_k, W_v)` slices, each `[d, dh]`.
    pub fn head_weights<T: Real>(&self, store: &ParamStore<T>, head: usize) -> Result<[Tensor<T>; 3]> {
        let d = self.attn.dim;
        let dh = self.attn.head_dim();
        let slice = |lin: &Linear| -> Result<Tensor<T>> {
            let w = store.peek(lin.weight).data();
            let mut out = Vec::with_capacity(d * dh);
            for r in 0..d {
                out.extend_from_slice(&w[r * d + head * dh..r * d + (head + 1) * dh]);
            }
            Tensor::new([d, dh], out)
        };
        Ok([slice(&self.attn.q)?, slice(&self.attn.k)?, slice(&self.attn.v)?])
    }

    /// `MCA(z_v, z_t, z_t)`: visual positions query text positions.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        visual: Var,
        vs: SeqShape,
        text: Var,
        ts: SeqShape,
        text_valid: Option<&[bool]>,
    ) -> Result<Var> {
        let wv = g.shape(visual).last().copied();
        let wt = g.shape(text).last().copied();
        if wv != Some(self.attn.dim) || wt != Some(self.attn.dim) {
            return Err(Error::contract(format!(
                "cross-attention width mismatch: visual {:?}, text {:?}, model {}",
                g.shape(visual),
                g.shape(text),
                self.attn.dim
            )));
        }
        self.attn.forward(g, store, visual, vs, text, ts, text_valid)
    }

    /// Tape-free evaluation on single sequences `[Lv, d]` and `[Lt, d]`.
    pub fn apply<T: Real>(&self, store: &ParamStore<T>, visual: &Tensor<T>, text: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let v = g.constant(visual.clone());
        let t = g.constant(text.clone());
        let vs = SeqShape {
            batch: 1,
            len: visual.shape()[0],
        };
        let ts = SeqShape {
            batch: 1,
            len: text.shape()[0],
        };
        let out = self.forward(&mut g, store, v, vs, t, ts, None)?;
        Ok(g.value(out).clone())
    }
}

/// Index map of pixel shuffle: output element `j` of a `[B, C, H, W]`
/// prediction reads element `map[j]` of the `[B * N, C * P^2]` input.
fn pixel_shuffle_map(batch: usize, channels: usize, patch: usize, grid: (usize, usize)) -> Vec<usize> {
    let (gh, gw) = grid;
    let (h, w) = (gh * patch, gw * patch);
    let n = gh * gw;
    let cpp = channels * patch * patch;
    let mut map = Vec::with_capacity(batch * channels * h * w);
    for b in 0..batch {
        for ch in 0..channels {
            for y in 0..h {
                for x in 0..w {
                    let cell = b * n + (y / patch) * gw + x / patch;
                    let channel = ch * patch * patch + (y % patch) * patch + x % patch;
                    map.push(cell * cpp + channel);
                }
            }
        }
    }
    map
}

/// Rearranges `[B * N, C * P^2]` grid-cell channels into `[B, C, H, W]`.
pub fn pixel_shuffle<T: Real>(
    cells: &Tensor<T>,
    channels: usize,
    patch: usize,
    grid: (usize, usize),
) -> Result<Tensor<T>> {
    let n = grid.0 * grid.1;
    let cpp = channels * patch * patch;
    let &[rows, width] = cells.shape() else {
        return Err(Error::contract("pixel shuffle expects a rank-2 input"));
    };
    if width != cpp || rows % n != 0 {
        return Err(Error::Dimension {
            op: "pixel_shuffle",
            lhs: cells.shape().to_vec(),
            rhs: vec![n, cpp],
        });
    }
    let batch = rows / n;
    let src = cells.data();
    let data = pixel_shuffle_map(batch, channels, patch, grid)
        .into_iter()
        .map(|i| src[i])
        .collect();
    Tensor::new([batch, channels, grid.0 * patch, grid.1 * patch], data)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Real>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let &[batch, channels, h, w] = image.shape() else {
        return Err(Error::contract("pixel unshuffle expects [B, C, H, W]"));
    };
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::config("image not divisible by the shuffle factor"));
    }
    let grid = (h / patch, w / patch);
    let map = pixel_shuffle_map(batch, channels, patch, grid);
    let mut out = vec![T::zero(); image.numel()];
    for (j, &src) in map.iter().enumerate() {
        out[src] = image.data()[j];
    }
    Tensor::new([batch * grid.0 * grid.1, channels * patch * patch], out)
}

/// Per-patch `1/(C P^2) * sum |pred - gt|` for one `[C, H, W]` image.
pub fn per_patch_l1<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, patch: usize) -> Result<Vec<T>> {
    if pred.shape() != gt.shape() || pred.rank() != 3 {
        return Err(Error::Dimension {
            op: "per_patch_l1",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let (c, h, w) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    let gw = w / patch;
    let mut out = vec![T::zero(); (h / patch) * gw];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let i = (ch * h + y) * w + x;
                out[(y / patch) * gw + x / patch] += (pred.data()[i] - gt.data()[i]).abs();
            }
        }
    }
    let norm = T::c((c * patch * patch) as f64);
    out.iter_mut().for_each(|v| *v /= norm);
    Ok(out)
}

/// Masked L1 reconstruction loss over a batch.
///
/// `pred` and `gt` are `[B, C, H, W]`; the result is the mean over all masked
/// patches of the batch of the per-patch mean absolute error. With no masked
/// patch at all the loss is zero.
pub fn tgmim_loss<T: Real>(g: &mut Graph<T>, pred: Var, gt: Var, masks: &[PatchMask], patch: usize) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    if shape != g.shape(gt) {
        return Err(Error::Dimension {
            op: "tgmim_loss",
            lhs: shape,
            rhs: g.shape(gt).to_vec(),
        });
    }
    let &[batch, c, h, w] = shape.as_slice() else {
        return Err(Error::contract("tgmim_loss expects [B, C, H, W]"));
    };
    if masks.len() != batch {
        return Err(Error::contract(format!("{} masks for {batch} images", masks.len())));
    }
    let gw = w / patch;
    let total: usize = masks.iter().map(PatchMask::num_masked).sum();
    if total == 0 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let unit = T::c(1.0 / ((c * patch * patch) as f64 * total as f64));
    let mut weights = Vec::with_capacity(batch * c * h * w);
    for mask in masks {
        for _ in 0..c {
            for y in 0..h {
                for x in 0..w {
                    weights.push(if mask.covers(y, x, patch, gw) { unit } else { T::zero() });
                }
            }
        }
    }
    let weights = g.constant(Tensor::new(shape, weights)?);
    let diff = g.sub(pred, gt)?;
    let abs = g.abs(diff);
    let weighted = g.mul(abs, weights)?;
    Ok(g.sum(weighted))
}

/// The reconstruction branch: cross-attention, fusion, pixel prediction.
#[derive(Debug, Clone)]
pub struct TgMimHead {
    pub ln_visual: LayerNorm,
    pub ln_text: LayerNorm,
    pub mca: MultiHeadCrossAttention,
    pub fusion: Transformer,
    pub ln_fusion: Option<LayerNorm>,
    /// 1x1 convolution from `d` to `C * P^2` channels per grid cell.
    pub predictor: Linear,
    cfg: EncoderConfig,
}

/// Outputs of one reconstruction pass.
#[derive(Debug, Clone, Copy)]
pub struct Reconstruction {
    pub loss: Var,
    /// `[B, C, H, W]`
    pub predicted: Var,
}

impl TgMimHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &EncoderConfig,
        fusion_depth: usize,
        scale: AttentionScale,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        Ok(Self {
            ln_visual: LayerNorm::new(store, &format!("{prefix}.ln_visual"), d),
            ln_text: LayerNorm::new(store, &format!("{prefix}.ln_text"), d),
            mca: MultiHeadCrossAttention::new(store, &format!("{prefix}.mca"), d, cfg.heads, scale, rng)?,
            fusion: Transformer::new(
                store,
                &format!("{prefix}.fusion"),
                d,
                cfg.heads,
                fusion_depth,
                cfg.mlp_ratio,
                rng,
            )?,
            ln_fusion: (fusion_depth > 0).then(|| LayerNorm::new(store, &format!("{prefix}.ln_fusion"), d)),
            predictor: Linear::new(store, &format!("{prefix}.predictor"), d, cfg.patch_dim(), true, rng),
            cfg: cfg.clone(),
        })
    }

    /// `z_v + MCA(LN(z_v), LN(z_t))`, or `z_v` unchanged without text.
    pub fn enhance<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        visual: &EncodedBatch,
        text: Option<&EncodedBatch>,
    ) -> Result<Var> {
        let Some(text) = text else {
            return Ok(visual.tokens);
        };
        let qv = self.ln_visual.forward(g, store, visual.tokens)?;
        let kt = self.ln_text.forward(g, store, text.tokens)?;
        let attended = self
            .mca
            .forward(g, store, qv, visual.shape, kt, text.shape, text.key_valid.as_deref())?;
        g.add(visual.tokens, attended)
    }

    /// Self-attention fusion over visual positions; identity at depth 0.
    pub fn fuse<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, shape: SeqShape) -> Result<Var> {
        let x = self.fusion.forward(g, store, x, shape, None)?;
        match &self.ln_fusion {
            Some(ln) => ln.forward(g, store, x),
            None => Ok(x),
        }
    }

    /// Drops the CLS row of every sample, projects each patch token to
    /// `C * P^2` values and pixel-shuffles to `[B, C, H, W]`.
    pub fn predict_pixels<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        fused: Var,
        shape: SeqShape,
    ) -> Result<Var> {
        let n = self.cfg.num_patches();
        if shape.len != n + 1 {
            return Err(Error::contract(format!(
                "{} visual positions do not match a grid of {n} patches plus CLS",
                shape.len
            )));
        }
        let d = self.cfg.width;
        let rows: Vec<usize> = (0..shape.batch)
            .flat_map(|b| (1..=n).map(move |i| b * (n + 1) + i))
            .collect();
        let patches = g.gather(fused, &rows, d)?;
        self.predict_from_cells(g, store, patches, shape.batch)
    }

    /// `[B * N, d]` patch tokens to a `[B, C, H, W]` image.
    pub fn predict_from_cells<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        patches: Var,
        batch: usize,
    ) -> Result<Var> {
        let n = self.cfg.num_patches();
        if g.shape(patches)[0] != batch * n {
            return Err(Error::contract(format!(
                "{} patch tokens do not fill {batch} grids of {n}",
                g.shape(patches)[0]
            )));
        }
        let cells = self.predictor.forward(g, store, patches)?;
        let map = pixel_shuffle_map(batch, self.cfg.channels, self.cfg.patch, self.cfg.grid());
        let flat = g.reshape(cells, &[batch * n * self.cfg.patch_dim(), 1])?;
        let pixels = g.gather(flat, &map, 1)?;
        g.reshape(pixels, &[batch, self.cfg.channels, self.cfg.image_h, self.cfg.image_w])
    }

    /// Full reconstruction loss for a masked visual pass.
    ///
    /// `ground_truth` holds the unmasked images.
    pub fn loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        visual: &EncodedBatch,
        text: Option<&EncodedBatch>,
        variant: MimVariant,
        ground_truth: &[&Tensor<T>],
        masks: &[PatchMask],
    ) -> Result<Reconstruction> {
        let text = match variant {
            MimVariant::TextGuided => {
                Some(text.ok_or_else(|| Error::contract("text-guided reconstruction needs caption tokens"))?)
            }
            MimVariant::TextFree => None,
        };
        if ground_truth.len() != visual.shape.batch {
            return Err(Error::contract("ground-truth count differs from batch size"));
        }
        let enhanced = self.enhance(g, store, visual, text)?;
        let fused = self.fuse(g, store, enhanced, visual.shape)?;
        let predicted = self.predict_pixels(g, store, fused, visual.shape)?;
        let mut gt = Vec::with_capacity(g.value(predicted).numel());
        for img in ground_truth {
            gt.extend_from_slice(img.data());
        }
        let gt = g.constant(Tensor::new(g.shape(predicted).to_vec(), gt)?);
        let loss = tgmim_loss(g, predicted, gt, masks, self.cfg.patch)?;
        Ok(Reconstruction { loss, predicted })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_cardinality() {
        let mut rng = Rng::seeded(0);
        assert_eq!(PatchMask::sample(32, 0.0, &mut rng).unwrap().num_masked(), 0);
        assert_eq!(PatchMask::sample(32, 0.5, &mut rng).unwrap().num_masked(), 16);
        assert_eq!(PatchMask::sample(32, 1.0, &mut rng).unwrap().num_masked(), 32);
        for k in 1..10 {
            let r = k as f64 / 10.0;
            let m = PatchMask::sample(32, r, &mut rng).unwrap();
            assert_eq!(m.num_masked(), (r * 32.0).round() as usize);
        }
        assert!(PatchMask::sample(32, 1.5, &mut rng).is_err());
    }

    #[test]
    fn mask_is_reproducible() {
        let a = PatchMask::sample(32, 0.3, &mut Rng::seeded(5)).unwrap();
        let b = PatchMask::sample(32, 0.3, &mut Rng::seeded(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_cell_shuffle_layout() {
        let (c, p) = (3, 2);
        let cells = Tensor::<f64>::new([1, c * p * p], (0..12).map(|v| v as f64).collect()).unwrap();
        let img = pixel_shuffle(&cells, c, p, (1, 1)).unwrap();
        assert_eq!(img.shape(), &[1, c, p, p]);
        for ch in 0..c {
            for r in 0..p {
                for col in 0..p {
                    let v = img.data()[(ch * p + r) * p + col];
                    assert_eq!(v, (ch * p * p + r * p + col) as f64);
                }
            }
        }
    }

    #[test]
    fn shuffle_unshuffle_identity() {
        let mut rng = Rng::seeded(1);
        let cells = Tensor::<f64>::randn([2 * 8, 3 * 4 * 4], 1.0, &mut rng);
        let img = pixel_shuffle(&cells, 3, 4, (4, 2)).unwrap();
        assert_eq!(img.shape(), &[2, 3, 16, 8]);
        assert_eq!(pixel_unshuffle(&img, 4).unwrap(), cells);
    }

    #[test]
    fn loss_constant_offset_and_zero() {
        let mut g = Graph::<f64>::new();
        let gt = Tensor::<f64>::randn([1, 3, 8, 8], 1.0, &mut Rng::seeded(2));
        let mut pred = gt.clone();
        let mask = PatchMask::from_flags(vec![false, true, false, false]);
        // Offset every pixel of patch 1 (rows 0..4, cols 4..8) by 0.5 and
        // scramble an unmasked patch.
        for ch in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    let i = (ch * 8 + y) * 8 + x;
                    if y < 4 && x >= 4 {
                        pred.data_mut()[i] += 0.5;
                    } else if y >= 4 {
                        pred.data_mut()[i] = 7.0;
                    }
                }
            }
        }
        let p = g.constant(pred);
        let t = g.constant(gt.clone());
        let loss = tgmim_loss(&mut g, p, t, std::slice::from_ref(&mask), 4).unwrap();
        assert!((g.scalar(loss) - 0.5).abs() < 1e-12);

        let t2 = g.constant(gt);
        let loss = tgmim_loss(&mut g, t, t2, &[mask], 4).unwrap();
        assert_eq!(g.scalar(loss), 0.0);
    }

    #[test]
    fn no_masked_patches_gives_zero() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full([1, 3, 4, 4], 1.0));
        let b = g.constant(Tensor::zeros([1, 3, 4, 4]));
        let loss = tgmim_loss(&mut g, a, b, &[PatchMask::none(4)], 2).unwrap();
        assert_eq!(g.scalar(loss), 0.0);
    }

    #[test]
    fn predictor_bias_only_gives_constant_image() {
        let cfg = EncoderConfig::tiny();
        let mut store = ParamStore::<f64>::new();
        let head = TgMimHead::new(&mut store, "mim", &cfg, 0, AttentionScale::Model, &mut Rng::seeded(0)).unwrap();
        *store.get_mut(head.predictor.weight) = Tensor::zeros([cfg.width, cfg.patch_dim()]);
        *store.get_mut(head.predictor.bias.unwrap()) = Tensor::full([cfg.patch_dim()], 0.3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(
            [2 * cfg.num_patches(), cfg.width],
            1.0,
            &mut Rng::seeded(1),
        ));
        let img = head.predict_from_cells(&mut g, &store, x, 2).unwrap();
        assert_eq!(g.shape(img), &[2, 3, 8, 8]);
        assert!(g.data(img).iter().all(|&v| v == 0.3));
    }

    #[test]
    fn zero_depth_fusion_is_identity() {
        let cfg = EncoderConfig::tiny();
        let mut store = ParamStore::<f64>::new();
        let head = TgMimHead::new(&mut store, "mim", &cfg, 0, AttentionScale::Model, &mut Rng::seeded(0)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn([5, cfg.width], 1.0, &mut Rng::seeded(1)));
        let y = head.fuse(&mut g, &store, x, SeqShape { batch: 1, len: 5 }).unwrap();
        assert_eq!(g.data(x), g.data(y));
    }
}
