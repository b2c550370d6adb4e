//! Identity-supervised calibration of global visual features.
//!
//! `C` images are drawn from a batch; the softmax of their pairwise cosine
//! similarities is pulled towards the normalized same-identity label matrix.
//! An identity classifier and a batch-hard triplet loss are provided as
//! alternative calibration objectives.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::alignment::{identity_labels, label_distribution, matching_kl, NORM_FLOOR};
use crate::encoders::nn::Linear;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Real, Rng, Tensor, Var};

/// How global visual features are calibrated during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    Kl,
    IdLoss,
    Triplet,
}

impl std::str::FromStr for CalibrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(CalibrationMode::Kl),
            "id_loss" => Ok(CalibrationMode::IdLoss),
            "triplet" => Ok(CalibrationMode::Triplet),
            other => Err(Error::config(format!("unknown calibration mode `{other}`"))),
        }
    }
}

impl CalibrationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CalibrationMode::Kl => "kl",
            CalibrationMode::IdLoss => "id_loss",
            CalibrationMode::Triplet => "triplet",
        }
    }
}

/// Anchors drawn from a batch together with their identities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSelection {
    /// Batch positions of the `C` anchors.
    pub anchors: Vec<usize>,
    pub pids: Vec<u32>,
}

impl PairSelection {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// `y_ij = 1` iff anchors `i` and `j` share an identity; the diagonal is
    /// always set.
    pub fn labels(&self) -> Vec<bool> {
        identity_labels(&self.pids, &self.pids)
    }
}

/// Draws `c` distinct anchors from a batch with identities `pids`.
///
/// When some identity occurs twice, two of its images are always among the
/// anchors so that at least one anchor has a positive other than itself.
pub fn sample_pairs(pids: &[u32], c: usize, rng: &mut Rng) -> Result<PairSelection> {
    let b = pids.len();
    if c > b {
        return Err(Error::config(format!("cannot draw {c} anchors from a batch of {b}")));
    }
    if c == 0 {
        return Err(Error::config("anchor count must be positive"));
    }
    let mut by_pid: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &p) in pids.iter().enumerate() {
        by_pid.entry(p).or_default().push(i);
    }
    let repeated: Vec<&Vec<usize>> = by_pid.values().filter(|v| v.len() >= 2).collect();
    let mut anchors = Vec::with_capacity(c);
    if c >= 2 && !repeated.is_empty() {
        let group = repeated[rng.below(repeated.len())];
        anchors.extend(rng.choose_distinct(group.len(), 2).into_iter().map(|k| group[k]));
    }
    let rest: Vec<usize> = (0..b).filter(|i| !anchors.contains(i)).collect();
    let need = c - anchors.len();
    anchors.extend(rng.choose_distinct(rest.len(), need).into_iter().map(|k| rest[k]));
    rng.shuffle(&mut anchors);
    let pids = anchors.iter().map(|&i| pids[i]).collect();
    Ok(PairSelection { anchors, pids })
}

/// Sampled global visual features with their identities.
#[derive(Debug, Clone)]
pub struct IdentitySampleSet<T> {
    /// `[C, d]`
    pub features: Tensor<T>,
    pub pids: Vec<u32>,
}

impl<T: Real> IdentitySampleSet<T> {
    pub fn new(features: Tensor<T>, pids: Vec<u32>) -> Result<Self> {
        if features.rank() != 2 || features.shape()[0] != pids.len() {
            return Err(Error::Dimension {
                op: "identity_sample_set",
                lhs: features.shape().to_vec(),
                rhs: vec![pids.len()],
            });
        }
        Ok(Self { features, pids })
    }

    /// Rows of `batch` selected by `sel`.
    pub fn select(batch: &Tensor<T>, sel: &PairSelection) -> Result<Self> {
        let d = batch.shape()[1];
        let mut rows = Vec::with_capacity(sel.len() * d);
        for &i in &sel.anchors {
            rows.extend_from_slice(batch.row(i));
        }
        Self::new(Tensor::new([sel.len(), d], rows)?, sel.pids.clone())
    }

    pub fn labels(&self) -> Vec<bool> {
        identity_labels(&self.pids, &self.pids)
    }
}

/// Predicted and target matching distributions over `C` anchors.
#[derive(Debug, Clone)]
pub struct MatchDistribution<T> {
    pub p: Tensor<T>,
    pub q: Tensor<T>,
    pub tau: f64,
}

/// Row softmax of pairwise cosine similarity over `tau`, diagonal included.
pub fn match_prob<T: Real>(features: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let sims = g.cosine(f, f, NORM_FLOOR)?;
    let logits = g.scale(sims, 1.0 / tau);
    let p = g.softmax(logits);
    Ok(g.value(p).clone())
}

pub fn match_distribution<T: Real>(set: &IdentitySampleSet<T>, tau: f64) -> Result<MatchDistribution<T>> {
    let c = set.pids.len();
    let p = match_prob(&set.features, tau)?;
    let q = Tensor::new([c, c], label_distribution(&set.labels(), c, c)?)?;
    Ok(MatchDistribution { p, q, tau })
}

/// `(1/C) sum_i sum_j p_ij log(p_ij / (q_ij + eps))`.
pub fn isgvfc_loss<T: Real>(dist: &MatchDistribution<T>, eps: f64) -> T {
    let c = dist.p.shape()[0];
    let eps = T::c(eps);
    let total = dist
        .p
        .data()
        .iter()
        .zip(dist.q.data())
        .map(|(&p, &q)| p * (p.ln() - (q + eps).ln()))
        .sum::<T>();
    total / T::c(c as f64)
}

/// Calibration loss on a tape for anchors `sel` of the batch `globals`.
pub fn isgvfc_loss_on<T: Real>(g: &mut Graph<T>, globals: Var, sel: &PairSelection, tau: f64, eps: f64) -> Result<Var> {
    let d = g.shape(globals)[1];
    let f = g.gather(globals, &sel.anchors, d)?;
    let c = sel.len();
    let q = label_distribution::<T>(&sel.labels(), c, c)?;
    let sims = g.cosine(f, f, NORM_FLOOR)?;
    matching_kl(g, sims, &q, tau, eps, 1.0 / c as f64)
}

/// Linear identity classifier used by the id-loss alternative.
#[derive(Debug, Clone)]
pub struct IdClassifier {
    pub linear: Linear,
    pub classes: usize,
}

impl IdClassifier {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(Error::config("identity classifier needs at least one class"));
        }
        Ok(Self {
            linear: Linear::new(store, name, dim, classes, true, rng),
            classes,
        })
    }

    pub fn logits<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
        self.linear.forward(g, store, features)
    }
}

/// Mean softmax cross-entropy of `logits` (`[B, K]`) against class indices.
pub fn id_loss<T: Real>(g: &mut Graph<T>, logits: Var, classes: &[usize]) -> Result<Var> {
    let &[b, k] = g.shape(logits) else {
        return Err(Error::contract("identity logits must be [B, K]"));
    };
    if classes.len() != b {
        return Err(Error::contract(format!("{} labels for {b} rows", classes.len())));
    }
    if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
        return Err(Error::contract(format!("identity {bad} outside classifier range {k}")));
    }
    let log_p = g.log_softmax(logits);
    let flat = g.reshape(log_p, &[b * k, 1])?;
    let idx: Vec<usize> = classes.iter().enumerate().map(|(i, &c)| i * k + c).collect();
    let picked = g.gather(flat, &idx, 1)?;
    let mean = g.mean(picked);
    Ok(g.scale(mean, -1.0))
}

/// Hardest positive and negative per anchor, by cosine distance.
///
/// Anchors lacking a non-self positive or a negative are skipped.
pub fn hardest_triples<T: Real>(sims: &Tensor<T>, pids: &[u32]) -> Vec<(usize, usize, usize)> {
    let b = pids.len();
    let mut out = Vec::new();
    for a in 0..b {
        let row = sims.row(a);
        // Largest distance is smallest similarity; ties keep the first index.
        let pos = (0..b)
            .filter(|&j| j != a && pids[j] == pids[a])
            .fold(None, |best: Option<usize>, j| match best {
                Some(k) if row[k] <= row[j] => Some(k),
                _ => Some(j),
            });
        let neg = (0..b)
            .filter(|&j| pids[j] != pids[a])
            .fold(None, |best: Option<usize>, j| match best {
                Some(k) if row[k] >= row[j] => Some(k),
                _ => Some(j),
            });
        if let (Some(p), Some(n)) = (pos, neg) {
            out.push((a, p, n));
        }
    }
    out
}

/// Batch-hard triplet loss with cosine distance:
/// mean over anchors of `max(0, d(a, p) - d(a, n) + margin)`.
///
/// Without any valid triple the loss is zero and a warning is logged.
pub fn triplet_loss<T: Real>(g: &mut Graph<T>, features: Var, pids: &[u32], margin: f64) -> Result<Var> {
    let b = g.shape(features)[0];
    if pids.len() != b {
        return Err(Error::contract(format!("{} identities for {b} features", pids.len())));
    }
    let sims = g.cosine(features, features, NORM_FLOOR)?;
    let triples = hardest_triples(g.value(sims), pids);
    if triples.is_empty() {
        log::warn!("triplet loss: batch has no valid (anchor, positive, negative) triple");
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let flat = g.reshape(sims, &[b * b, 1])?;
    let pos: Vec<usize> = triples.iter().map(|&(a, p, _)| a * b + p).collect();
    let neg: Vec<usize> = triples.iter().map(|&(a, _, n)| a * b + n).collect();
    let sp = g.gather(flat, &pos, 1)?;
    let sn = g.gather(flat, &neg, 1)?;
    // d(a,p) - d(a,n) = s(a,n) - s(a,p)
    let gap = g.sub(sn, sp)?;
    let m = g.constant(Tensor::full([triples.len(), 1], T::c(margin)));
    let shifted = g.add(gap, m)?;
    let hinge = g.relu(shifted);
    Ok(g.mean(hinge))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_label_sets() {
        let set =
            IdentitySampleSet::new(Tensor::<f64>::randn([3, 4], 1.0, &mut Rng::seeded(0)), vec![5, 5, 5]).unwrap();
        let d = match_distribution(&set, 0.02).unwrap();
        assert!(d.q.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let set = IdentitySampleSet::new(set.features.clone(), vec![1, 2, 3]).unwrap();
        let d = match_distribution(&set, 0.02).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(d.q.data()[i * 3 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn sampling_counts_and_errors() {
        let pids: Vec<u32> = (0..100).map(|i| i / 4).collect();
        let mut rng = Rng::seeded(1);
        let sel = sample_pairs(&pids, 20, &mut rng).unwrap();
        assert_eq!(sel.len(), 20);
        let mut seen = sel.anchors.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 20);
        assert!(sample_pairs(&pids, 101, &mut rng).is_err());
        // Only one repeated identity: it must appear twice.
        let pids = [0, 1, 2, 3, 4, 5, 6, 6];
        for s in 0..20 {
            let sel = sample_pairs(&pids, 2, &mut Rng::seeded(s)).unwrap();
            assert_eq!(sel.pids, vec![6, 6]);
        }
    }

    #[test]
    fn orthogonal_pair_probabilities() {
        let f = Tensor::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let p: Tensor<f64> = match_prob(&f, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p.data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((p.data()[3] - e / (e + 1.0)).abs() < 1e-15);
        assert!(match_prob(&f, 0.0).is_err());
    }

    #[test]
    fn hand_evaluated_uniform_against_identity() {
        let d = MatchDistribution {
            p: Tensor::from_f64([2, 2], &[0.5; 4]).unwrap(),
            q: Tensor::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap(),
            tau: 1.0,
        };
        let want = 0.5 * (0.5f64 / 1e-8).ln() + 0.5 * (0.5f64 / (1.0 + 1e-8)).ln();
        let got: f64 = isgvfc_loss(&d, 1e-8);
        assert!((got - want).abs() < 1e-12);
        assert!((got - 8.517).abs() < 1e-3);
    }

    #[test]
    fn tape_and_tensor_paths_agree() {
        let mut rng = Rng::seeded(2);
        let f = Tensor::<f64>::randn([6, 5], 1.0, &mut rng);
        let pids = vec![0, 0, 1, 1, 2, 2];
        let sel = sample_pairs(&pids, 4, &mut rng).unwrap();
        let set = IdentitySampleSet::select(&f, &sel).unwrap();
        let direct = isgvfc_loss(&match_distribution(&set, 0.1).unwrap(), 1e-8);
        let mut g = Graph::new();
        let v = g.constant(f);
        let l = isgvfc_loss_on(&mut g, v, &sel, 0.1, 1e-8).unwrap();
        assert!((g.scalar(l) - direct).abs() < 1e-10);
    }

    #[test]
    fn id_loss_examples() {
        let mut g = Graph::<f64>::new();
        let uniform = g.constant(Tensor::zeros([3, 5]));
        let l = id_loss(&mut g, uniform, &[0, 4, 2]).unwrap();
        assert!((g.scalar(l) - 5f64.ln()).abs() < 1e-12);
        let mut sharp = vec![0.0; 6];
        sharp[1] = 60.0;
        sharp[3] = 60.0;
        let sharp = g.constant(Tensor::from_f64([2, 3], &sharp).unwrap());
        let l = id_loss(&mut g, sharp, &[1, 0]).unwrap();
        assert!(g.scalar(l) < 1e-20);
        assert!(matches!(id_loss(&mut g, sharp, &[1, 3]), Err(Error::Contract(_))));
    }

    #[test]
    fn triplet_examples() {
        let mut g = Graph::<f64>::new();
        let same = g.constant(Tensor::full([4, 3], 1.0));
        let l = triplet_loss(&mut g, same, &[0, 0, 1, 1], 0.3).unwrap();
        assert!((g.scalar(l) - 0.3).abs() < 1e-12);

        let sep = g.constant(Tensor::from_f64([4, 2], &[1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 3.0]).unwrap());
        let l = triplet_loss(&mut g, sep, &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(g.scalar(l), 0.0);

        let distinct = g.constant(Tensor::full([3, 2], 1.0));
        let l = triplet_loss(&mut g, distinct, &[0, 1, 2], 0.3).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }
}
