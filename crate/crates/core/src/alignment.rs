//! Cross-modal projection matching between global image and text features,
//! the summed training objective, and the retrieval similarity path.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::Modality;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Norm floor applied before every cosine.
pub const NORM_FLOOR: f64 = 1e-12;
pub const DEFAULT_TAU: f64 = 0.02;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Row-normalized label distribution `q` from a `rows x cols` match matrix.
pub fn label_distribution<T: Real>(labels: &[bool], rows: usize, cols: usize) -> Result<Vec<T>> {
    if labels.len() != rows * cols {
        return Err(Error::Dimension {
            op: "label_distribution",
            lhs: vec![labels.len()],
            rhs: vec![rows, cols],
        });
    }
    let mut q = Vec::with_capacity(labels.len());
    for (i, row) in labels.chunks(cols).enumerate() {
        let count = row.iter().filter(|&&y| y).count();
        if count == 0 {
            return Err(Error::contract(format!("row {i} has no matching entry")));
        }
        let w = T::c(1.0 / count as f64);
        q.extend(row.iter().map(|&y| if y { w } else { T::zero() }));
    }
    Ok(q)
}

/// `scale * sum_ij p_ij (log p_ij - log(q_ij + eps))` where `p` is the row
/// softmax of `sims / tau`.
pub(crate) fn matching_kl<T: Real>(
    g: &mut Graph<T>,
    sims: Var,
    q: &[T],
    tau: f64,
    eps: f64,
    scale: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    let shape = g.shape(sims).to_vec();
    let logits = g.scale(sims, 1.0 / tau);
    let p = g.softmax(logits);
    let log_p = g.log_softmax(logits);
    let eps = T::c(eps);
    let log_q = g.constant(Tensor::new(shape, q.iter().map(|&v| (v + eps).ln()).collect())?);
    let ratio = g.sub(log_p, log_q)?;
    let terms = g.mul(p, ratio)?;
    let total = g.sum(terms);
    Ok(g.scale(total, scale))
}

/// Match labels `y_ij = (a[i] == b[j])`.
pub fn identity_labels(a: &[u32], b: &[u32]) -> Vec<bool> {
    a.iter().flat_map(|x| b.iter().map(move |y| x == y)).collect()
}

fn transpose_labels(labels: &[bool], rows: usize, cols: usize) -> Vec<bool> {
    (0..cols)
        .flat_map(|j| (0..rows).map(move |i| labels[i * cols + j]))
        .collect()
}

/// One matching direction: anchors against candidates.
///
/// `p` is the row softmax of cosine similarities over `tau`, `q` the
/// normalized labels; the per-anchor term is averaged over candidates and
/// the result averaged over anchors.
pub fn cmpm_direction<T: Real>(
    g: &mut Graph<T>,
    anchors: Var,
    candidates: Var,
    labels: &[bool],
    tau: f64,
    eps: f64,
) -> Result<Var> {
    let (sa, sc) = (g.shape(anchors).to_vec(), g.shape(candidates).to_vec());
    if sa.len() != 2 || sa != sc {
        return Err(Error::Dimension {
            op: "cmpm_direction",
            lhs: sa,
            rhs: sc,
        });
    }
    let b = sa[0];
    let q = label_distribution::<T>(labels, b, b)?;
    let sims = g.cosine(anchors, candidates, NORM_FLOOR)?;
    matching_kl(g, sims, &q, tau, eps, 1.0 / (b * b) as f64)
}

/// Both matching directions on a tape.
#[derive(Debug, Clone, Copy)]
pub struct CmpmTerms {
    pub cmpm: Var,
    pub i2t: Var,
    pub t2i: Var,
}

/// Image-to-text plus text-to-image matching loss. `labels` is indexed
/// `[image, text]`.
pub fn cmpm_loss<T: Real>(
    g: &mut Graph<T>,
    images: Var,
    texts: Var,
    labels: &[bool],
    tau: f64,
    eps: f64,
) -> Result<CmpmTerms> {
    let b = g.shape(images)[0];
    let i2t = cmpm_direction(g, images, texts, labels, tau, eps)?;
    let t2i = cmpm_direction(g, texts, images, &transpose_labels(labels, b, b), tau, eps)?;
    let cmpm = g.add(i2t, t2i)?;
    Ok(CmpmTerms { cmpm, i2t, t2i })
}

/// Global features of a batch of matched image/caption pairs.
#[derive(Debug, Clone)]
pub struct AlignmentBatch<T> {
    pub image_globals: Tensor<T>,
    pub text_globals: Tensor<T>,
    /// `[image, text]` match labels, row-major `B x B`.
    pub labels: Vec<bool>,
}

impl<T: Real> AlignmentBatch<T> {
    pub fn new(image_globals: Tensor<T>, text_globals: Tensor<T>, labels: Vec<bool>) -> Result<Self> {
        if image_globals.rank() != 2 || image_globals.shape() != text_globals.shape() {
            return Err(Error::Dimension {
                op: "alignment_batch",
                lhs: image_globals.shape().to_vec(),
                rhs: text_globals.shape().to_vec(),
            });
        }
        let b = image_globals.shape()[0];
        if labels.len() != b * b {
            return Err(Error::contract("label matrix is not B x B"));
        }
        if (0..b).any(|i| !labels[i * b + i]) {
            return Err(Error::contract("an image does not match its own caption"));
        }
        Ok(Self {
            image_globals,
            text_globals,
            labels,
        })
    }

    /// Labels from person ids; pair `i` is image `i` with caption `i`.
    pub fn from_pids(image_globals: Tensor<T>, text_globals: Tensor<T>, pids: &[u32]) -> Result<Self> {
        Self::new(image_globals, text_globals, identity_labels(pids, pids))
    }

    pub fn len(&self) -> usize {
        self.image_globals.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(l_cmpm, l_i2t, l_t2i)`.
    pub fn loss(&self, tau: f64, eps: f64) -> Result<(T, T, T)> {
        let mut g = Graph::new();
        let v = g.constant(self.image_globals.clone());
        let t = g.constant(self.text_globals.clone());
        let terms = cmpm_loss(&mut g, v, t, &self.labels, tau, eps)?;
        Ok((g.scalar(terms.cmpm), g.scalar(terms.i2t), g.scalar(terms.t2i)))
    }
}

/// Per-term values of one training step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_tgmim: f64,
    pub l_isgvfc: f64,
    pub l_cmpm: f64,
    pub l_i2t: f64,
    pub l_t2i: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.l_tgmim += other.l_tgmim;
        self.l_isgvfc += other.l_isgvfc;
        self.l_cmpm += other.l_cmpm;
        self.l_i2t += other.l_i2t;
        self.l_t2i += other.l_t2i;
        self.total += other.total;
    }

    pub fn scaled(&self, f: f64) -> LossBreakdown {
        LossBreakdown {
            l_tgmim: self.l_tgmim * f,
            l_isgvfc: self.l_isgvfc * f,
            l_cmpm: self.l_cmpm * f,
            l_i2t: self.l_i2t * f,
            l_t2i: self.l_t2i * f,
            total: self.total * f,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub tgmim: f64,
    pub isgvfc: f64,
    pub cmpm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            tgmim: 1.0,
            isgvfc: 1.0,
            cmpm: 1.0,
        }
    }
}

/// The enabled loss terms of a step; a disabled term is `None`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub tgmim: Option<Var>,
    pub isgvfc: Option<Var>,
    pub cmpm: Option<CmpmTerms>,
}

/// Weighted sum of the enabled terms.
///
/// Any non-finite term aborts with an error naming it; `epoch` and `step`
/// locate the failure.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    parts: &LossParts,
    weights: &LossWeights,
    epoch: usize,
    step: usize,
) -> Result<(Var, LossBreakdown)> {
    let mut out = LossBreakdown::default();
    let mut total: Option<Var> = None;
    let cmpm = parts.cmpm.map(|c| c.cmpm);
    let named = [
        ("tgmim", parts.tgmim, weights.tgmim),
        ("isgvfc", parts.isgvfc, weights.isgvfc),
        ("cmpm", cmpm, weights.cmpm),
    ];
    for (term, var, w) in named {
        let Some(var) = var else { continue };
        let value = g.scalar(var).f64();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                term: term.to_string(),
                epoch,
                step,
            });
        }
        match term {
            "tgmim" => out.l_tgmim = value,
            "isgvfc" => out.l_isgvfc = value,
            _ => out.l_cmpm = value,
        }
        let weighted = if w == 1.0 { var } else { g.scale(var, w) };
        total = Some(match total {
            Some(t) => g.add(t, weighted)?,
            None => weighted,
        });
    }
    if let Some(c) = parts.cmpm {
        out.l_i2t = g.scalar(c.i2t).f64();
        out.l_t2i = g.scalar(c.t2i).f64();
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    out.total = g.scalar(total).f64();
    if !out.total.is_finite() {
        return Err(Error::NonFinite {
            term: "total".into(),
            epoch,
            step,
        });
    }
    Ok((total, out))
}

fn normalized_rows<T: Real>(x: &Tensor<T>) -> Vec<T> {
    let d = x.shape()[1];
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::c(NORM_FLOOR));
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// `Q x G` cosine similarities between query texts and gallery images.
pub fn similarity_matrix<T: Real>(queries: &Tensor<T>, gallery: &Tensor<T>) -> Result<Tensor<T>> {
    if queries.rank() != 2 || gallery.rank() != 2 || queries.shape()[1] != gallery.shape()[1] {
        return Err(Error::Dimension {
            op: "similarity_matrix",
            lhs: queries.shape().to_vec(),
            rhs: gallery.shape().to_vec(),
        });
    }
    if !queries.is_finite() || !gallery.is_finite() {
        return Err(Error::contract("non-finite feature in similarity computation"));
    }
    let (q, d, n) = (queries.shape()[0], queries.shape()[1], gallery.shape()[0]);
    let a = normalized_rows(queries);
    let b = normalized_rows(gallery);
    let mut out = vec![T::zero(); q * n];
    T::gemm(q, d, n, &a, d as isize, 1, &b, 1, d as isize, T::zero(), &mut out);
    Tensor::new([q, n], out)
}

const DUMP_MAGIC: &[u8; 4] = b"VFET";
pub const DUMP_VERSION: u32 = 1;

/// One line of the feature-dump sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub index: usize,
    pub person_id: u32,
    pub modality: Modality,
}

/// Global features with their identities, as written by `dump-features`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub dim: usize,
    /// Row-major `count x dim`.
    pub rows: Vec<f32>,
    pub meta: Vec<FeatureMeta>,
}

impl FeatureDump {
    pub fn count(&self) -> usize {
        self.meta.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Sidecar path: the dump path with `.jsonl` appended.
    pub fn sidecar(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".jsonl");
        PathBuf::from(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if self.rows.len() != self.count() * self.dim {
            return Err(Error::contract("feature rows do not match metadata count"));
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut buf = Vec::with_capacity(16 + self.rows.len() * 4);
        buf.extend_from_slice(DUMP_MAGIC);
        buf.extend_from_slice(&DUMP_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.count() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.rows {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))?;

        let side = Self::sidecar(path);
        let file = File::create(&side).map_err(|e| Error::io(&side, e))?;
        let mut w = BufWriter::new(file);
        for m in &self.meta {
            serde_json::to_writer(&mut w, m)?;
            w.write_all(b"\n").map_err(|e| Error::io(&side, e))?;
        }
        w.flush().map_err(|e| Error::io(&side, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |detail: &str| Error::Format {
            what: "feature dump",
            detail: detail.to_string(),
        };
        if bytes.len() < 16 || &bytes[..4] != DUMP_MAGIC {
            return Err(bad("missing VFET header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != DUMP_VERSION {
            return Err(Error::Version(format!(
                "feature dump version {version}, expected {DUMP_VERSION}"
            )));
        }
        let (count, dim) = (word(8) as usize, word(12) as usize);
        if bytes.len() != 16 + count * dim * 4 {
            return Err(bad("payload length does not match header"));
        }
        let rows = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let side = Self::sidecar(path);
        let file = File::open(&side).map_err(|e| Error::io(&side, e))?;
        let mut meta = Vec::with_capacity(count);
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&side, e))?;
            if !line.trim().is_empty() {
                meta.push(serde_json::from_str::<FeatureMeta>(&line)?);
            }
        }
        if meta.len() != count {
            return Err(bad("sidecar line count differs from header"));
        }
        Ok(Self { dim, rows, meta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
        dot / (na * nb)
    }

    fn direction_oracle(a: &Tensor<f64>, c: &Tensor<f64>, y: &[bool], tau: f64, eps: f64) -> f64 {
        let b = a.shape()[0];
        let mut total = 0.0;
        for i in 0..b {
            let s: Vec<f64> = (0..b).map(|j| cos(a.row(i), c.row(j)) / tau).collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            let pos = (0..b).filter(|&j| y[i * b + j]).count() as f64;
            let mut li = 0.0;
            for j in 0..b {
                let p = s[j].exp() / z;
                let q = if y[i * b + j] { 1.0 / pos } else { 0.0 };
                li += p * (p / (q + eps)).ln();
            }
            total += li / b as f64;
        }
        total / b as f64
    }

    #[test]
    fn single_pair_is_minus_eps() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64([1, 3], &[1.0, 2.0, 3.0]).unwrap());
        let c = g.constant(Tensor::from_f64([1, 3], &[0.0, -1.0, 4.0]).unwrap());
        let l = cmpm_direction(&mut g, a, c, &[true], 0.02, 1e-8).unwrap();
        assert!((g.scalar(l) - (1.0f64 / (1.0 + 1e-8)).ln()).abs() < 1e-15);
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = Rng::seeded(3);
        for _ in 0..5 {
            let a = Tensor::<f64>::randn([5, 8], 1.0, &mut rng);
            let c = Tensor::<f64>::randn([5, 8], 1.0, &mut rng);
            let pids: Vec<u32> = (0..5).map(|_| rng.below(3) as u32).collect();
            let y = identity_labels(&pids, &pids);
            let mut g = Graph::new();
            let (va, vc) = (g.constant(a.clone()), g.constant(c.clone()));
            let l = cmpm_direction(&mut g, va, vc, &y, 0.5, 1e-8).unwrap();
            assert!((g.scalar(l) - direction_oracle(&a, &c, &y, 0.5, 1e-8)).abs() < 1e-10);
        }
    }

    #[test]
    fn swapping_modalities_swaps_directions() {
        let mut rng = Rng::seeded(4);
        let a = Tensor::<f64>::randn([4, 6], 1.0, &mut rng);
        let b = Tensor::<f64>::randn([4, 6], 1.0, &mut rng);
        let pids = [0, 0, 1, 2];
        let x = AlignmentBatch::from_pids(a.clone(), b.clone(), &pids).unwrap();
        let y = AlignmentBatch::from_pids(b, a, &pids).unwrap();
        let (cx, ix, tx) = x.loss(0.1, 1e-8).unwrap();
        let (cy, iy, ty) = y.loss(0.1, 1e-8).unwrap();
        assert_eq!(ix, ty);
        assert_eq!(tx, iy);
        assert!((cx - cy).abs() < 1e-15);
        assert!((cx - ix - tx).abs() < 1e-12);
    }

    #[test]
    fn nonnegative_up_to_eps() {
        let mut rng = Rng::seeded(6);
        for _ in 0..20 {
            let a = Tensor::<f64>::randn([6, 4], 1.0, &mut rng);
            let b = Tensor::<f64>::randn([6, 4], 1.0, &mut rng);
            let pids: Vec<u32> = (0..6).map(|_| rng.below(4) as u32).collect();
            let (c, ..) = AlignmentBatch::from_pids(a, b, &pids)
                .unwrap()
                .loss(0.02, 1e-8)
                .unwrap();
            assert!(c >= -1e-6);
        }
    }

    #[test]
    fn total_is_sum_of_enabled_terms() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(0.2));
        let b = g.constant(Tensor::scalar(0.3));
        let parts = LossParts {
            tgmim: Some(a),
            isgvfc: Some(b),
            cmpm: None,
        };
        let (t, br) = total_loss(&mut g, &parts, &LossWeights::default(), 0, 0).unwrap();
        assert!((g.scalar(t) - 0.5).abs() < 1e-15);
        assert_eq!(br.l_cmpm, 0.0);
        let (t, _) = total_loss(&mut g, &LossParts::default(), &LossWeights::default(), 0, 0).unwrap();
        assert_eq!(g.scalar(t), 0.0);

        let nan = g.constant(Tensor::scalar(f64::NAN));
        let parts = LossParts {
            tgmim: Some(a),
            isgvfc: Some(nan),
            cmpm: None,
        };
        let err = total_loss(&mut g, &parts, &LossWeights::default(), 3, 7).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref term, epoch: 3, step: 7 } if term == "isgvfc"));
    }

    #[test]
    fn similarity_examples() {
        let q = Tensor::from_f64([2, 2], &[1.0, 0.0, 0.0, 2.0]).unwrap();
        let gal = Tensor::from_f64([2, 2], &[3.0, 0.0, 1.0, 1.0]).unwrap();
        let s: Tensor<f64> = similarity_matrix(&q, &gal).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-15);
        assert!((s.data()[2]).abs() < 1e-15);
        assert!((s.data()[3] - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn dump_roundtrip_and_bad_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let dump = FeatureDump {
            dim: 3,
            rows: vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.25],
            meta: vec![
                FeatureMeta {
                    index: 0,
                    person_id: 7,
                    modality: Modality::Image,
                },
                FeatureMeta {
                    index: 1,
                    person_id: 7,
                    modality: Modality::Text,
                },
            ],
        };
        dump.write(&path).unwrap();
        assert_eq!(FeatureDump::read(&path).unwrap(), dump);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(FeatureDump::read(&path), Err(Error::Version(_))));
    }
}
