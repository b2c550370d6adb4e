//! Brute-force reference implementations and the random instances they are
//! compared on.
#![allow(dead_code)]

use vfe_tps::alignment::{cmpm_loss, identity_labels};
use vfe_tps::isgvfc::{isgvfc_loss, match_distribution, match_prob, IdentitySampleSet};
use vfe_tps::metrics::{avg_dist, mean_average_precision, rank_k, silhouette, RetrievalGroundTruth};
use vfe_tps::tensor::{Graph, Rng, Tensor};
use vfe_tps::tgmim::PatchMask;

pub const INSTANCES: usize = 100;
pub const REAL_TOL: f64 = 1e-9;

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    dot / (na * nb)
}

fn kl_rows(anchors: &[Vec<f64>], cands: &[Vec<f64>], same: &dyn Fn(usize, usize) -> bool, tau: f64, eps: f64) -> f64 {
    let mut total = 0.0;
    for (i, a) in anchors.iter().enumerate() {
        let logits: Vec<f64> = cands.iter().map(|c| cos(a, c) / tau).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let matches = (0..cands.len()).filter(|&j| same(i, j)).count() as f64;
        for (j, l) in logits.iter().enumerate() {
            let p = (l - m).exp() / z;
            let q = if same(i, j) { 1.0 / matches } else { 0.0 };
            total += p * (p.ln() - (q + eps).ln());
        }
    }
    total
}

/// `(i2t, t2i)` by explicit loops.
pub fn cmpm_oracle(img: &[Vec<f64>], txt: &[Vec<f64>], pids: &[u32], tau: f64, eps: f64) -> (f64, f64) {
    let b = img.len() as f64;
    let same = |i: usize, j: usize| pids[i] == pids[j];
    (
        kl_rows(img, txt, &same, tau, eps) / (b * b),
        kl_rows(txt, img, &same, tau, eps) / (b * b),
    )
}

pub fn isgvfc_oracle(f: &[Vec<f64>], pids: &[u32], tau: f64, eps: f64) -> f64 {
    let same = |i: usize, j: usize| pids[i] == pids[j];
    kl_rows(f, f, &same, tau, eps) / f.len() as f64
}

pub fn match_prob_oracle(f: &[Vec<f64>], tau: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for a in f {
        let e: Vec<f64> = f.iter().map(|b| (cos(a, b) / tau).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    out
}

/// Position of gallery item `i` when sorted by descending score, earlier
/// index first among equals.
fn position(row: &[f64], i: usize) -> usize {
    (0..row.len())
        .filter(|&j| row[j] > row[i] || (row[j] == row[i] && j < i))
        .count()
}

pub fn rank_k_oracle(sim: &[Vec<f64>], rel: &[Vec<bool>], k: usize) -> f64 {
    let hits = sim
        .iter()
        .zip(rel)
        .filter(|(row, r)| (0..row.len()).any(|i| r[i] && position(row, i) < k))
        .count();
    100.0 * hits as f64 / sim.len() as f64
}

pub fn map_oracle(sim: &[Vec<f64>], rel: &[Vec<bool>]) -> f64 {
    let mut total = 0.0;
    for (row, r) in sim.iter().zip(rel) {
        let pos: Vec<usize> = (0..row.len()).filter(|&i| r[i]).map(|i| position(row, i)).collect();
        let ap: f64 = pos
            .iter()
            .map(|&p| pos.iter().filter(|&&o| o <= p).count() as f64 / (p + 1) as f64)
            .sum();
        total += ap / pos.len() as f64;
    }
    100.0 * total / sim.len() as f64
}

pub fn silhouette_oracle(x: &[Vec<f64>], pids: &[u32]) -> f64 {
    let n = x.len();
    let dist = |i: usize, j: usize| x[i].iter().zip(&x[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let mut s = 0.0;
    for i in 0..n {
        let own: Vec<usize> = (0..n).filter(|&j| j != i && pids[j] == pids[i]).collect();
        if own.is_empty() {
            continue;
        }
        let a = own.iter().map(|&j| dist(i, j)).sum::<f64>() / own.len() as f64;
        let mut others: Vec<u32> = pids.iter().copied().filter(|&p| p != pids[i]).collect();
        others.sort_unstable();
        others.dedup();
        let b = others
            .iter()
            .map(|&p| {
                let m: Vec<usize> = (0..n).filter(|&j| pids[j] == p).collect();
                m.iter().map(|&j| dist(i, j)).sum::<f64>() / m.len() as f64
            })
            .fold(f64::INFINITY, f64::min);
        if a.max(b) > 0.0 {
            s += (b - a) / a.max(b);
        }
    }
    s / n as f64
}

/// Searches every visible pixel for each masked one.
pub fn avg_dist_oracle(pred: &Tensor<f64>, mask: &PatchMask, orig: &Tensor<f64>, patch: usize) -> f64 {
    let (c, h, w) = (orig.shape()[0], orig.shape()[1], orig.shape()[2]);
    let gw = w / patch;
    let masked = |y: usize, x: usize| mask.is_masked((y / patch) * gw + x / patch);
    let (p, o) = (pred.data(), orig.data());
    let (mut total, mut count) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if !masked(y, x) {
                continue;
            }
            let mut best = (usize::MAX, 0, 0);
            for vy in 0..h {
                for vx in 0..w {
                    if masked(vy, vx) {
                        continue;
                    }
                    let d2 = vy.abs_diff(y).pow(2) + vx.abs_diff(x).pow(2);
                    if (d2, vy, vx) < best {
                        best = (d2, vy, vx);
                    }
                }
            }
            let (_, ny, nx) = best;
            total += (0..c)
                .map(|ch| (p[(ch * h + y) * w + x] - o[(ch * h + ny) * w + nx]).abs())
                .sum::<f64>()
                / c as f64;
            count += 1;
        }
    }
    total / count as f64
}

fn rows(rng: &mut Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
}

fn flat(x: &[Vec<f64>]) -> Tensor<f64> {
    let d = x[0].len();
    Tensor::new([x.len(), d], x.concat()).unwrap()
}

/// Identities drawn from a small pool so repeats are common.
fn pids(rng: &mut Rng, n: usize) -> Vec<u32> {
    let pool = 1 + rng.below(n) as u32;
    (0..n).map(|_| rng.below(pool as usize) as u32).collect()
}

/// Largest error of each real-valued check over `INSTANCES` random cases;
/// ranking metrics must agree exactly, reported as a mismatch count.
#[derive(Debug, Default)]
pub struct OracleSummary {
    pub cmpm: f64,
    pub match_prob: f64,
    pub isgvfc: f64,
    pub silhouette: f64,
    pub avg_dist: f64,
    pub ranking_mismatches: usize,
}

pub fn run_oracles(seed: u64) -> OracleSummary {
    let root = Rng::seeded(seed);
    let mut s = OracleSummary::default();
    for k in 0..INSTANCES {
        let mut rng = root.split_index("instance", k as u64);
        let b = 2 + rng.below(7);
        let d = 2 + rng.below(8);
        let tau = 0.02 + rng.uniform() * 0.5;
        let eps = 1e-8;
        let ids = pids(&mut rng, b);

        let (img, txt) = (rows(&mut rng, b, d), rows(&mut rng, b, d));
        let (oi, ot) = cmpm_oracle(&img, &txt, &ids, tau, eps);
        let mut g = Graph::<f64>::new();
        let (vi, vt) = (g.constant(flat(&img)), g.constant(flat(&txt)));
        let terms = cmpm_loss(&mut g, vi, vt, &identity_labels(&ids, &ids), tau, eps).unwrap();
        s.cmpm = s
            .cmpm
            .max((g.scalar(terms.i2t) - oi).abs())
            .max((g.scalar(terms.t2i) - ot).abs())
            .max((g.scalar(terms.cmpm) - oi - ot).abs());

        let f = rows(&mut rng, b, d);
        let p = match_prob(&flat(&f), tau).unwrap();
        let po = match_prob_oracle(&f, tau);
        s.match_prob = p
            .data()
            .iter()
            .zip(&po)
            .fold(s.match_prob, |m, (a, b)| m.max((a - b).abs()));
        let set = IdentitySampleSet::new(flat(&f), ids.clone()).unwrap();
        let got: f64 = isgvfc_loss(&match_distribution(&set, tau).unwrap(), eps);
        s.isgvfc = s.isgvfc.max((got - isgvfc_oracle(&f, &ids, tau, eps)).abs());

        // Retrieval with quantized scores so ties occur.
        let (nq, ng) = (1 + rng.below(6), 2 + rng.below(10));
        let gp = pids(&mut rng, ng);
        let qp: Vec<u32> = (0..nq).map(|_| gp[rng.below(ng)]).collect();
        let quantize = rng.below(2) == 0;
        let sim: Vec<Vec<f64>> = (0..nq)
            .map(|_| {
                (0..ng)
                    .map(|_| {
                        let v = rng.normal();
                        if quantize {
                            (v * 2.0).round() / 2.0
                        } else {
                            v
                        }
                    })
                    .collect()
            })
            .collect();
        let gt = RetrievalGroundTruth::from_pids(&qp, &gp).unwrap();
        let rel: Vec<Vec<bool>> = qp.iter().map(|q| gp.iter().map(|g| g == q).collect()).collect();
        let st = flat(&sim);
        for kk in 1..=ng {
            if rank_k(&st, &gt, kk).unwrap() != rank_k_oracle(&sim, &rel, kk) {
                s.ranking_mismatches += 1;
            }
        }
        let (m, mo) = (mean_average_precision(&st, &gt).unwrap(), map_oracle(&sim, &rel));
        if (m - mo).abs() > 1e-9 {
            s.ranking_mismatches += 1;
        }

        let n = 3 + rng.below(10);
        let mut sp = pids(&mut rng, n);
        if sp.iter().all(|&p| p == sp[0]) {
            sp[0] += 1;
        }
        let x = rows(&mut rng, n, d);
        s.silhouette = s
            .silhouette
            .max((silhouette(&flat(&x), &sp).unwrap() - silhouette_oracle(&x, &sp)).abs());

        let patch = 1 + rng.below(3);
        let (gh, gw) = (1 + rng.below(3), 2 + rng.below(3));
        let (c, h, w) = (1 + rng.below(3), gh * patch, gw * patch);
        let cells = gh * gw;
        let masked = 1 + rng.below(cells - 1);
        let mask = PatchMask::sample(cells, masked as f64 / cells as f64, &mut rng).unwrap();
        let img = |rng: &mut Rng| Tensor::new([c, h, w], (0..c * h * w).map(|_| rng.uniform()).collect()).unwrap();
        let (pred, orig) = (img(&mut rng), img(&mut rng));
        s.avg_dist = s
            .avg_dist
            .max((avg_dist(&pred, &mask, &orig, patch).unwrap() - avg_dist_oracle(&pred, &mask, &orig, patch)).abs());
    }
    s
}

impl OracleSummary {
    pub fn worst_real(&self) -> f64 {
        [self.cmpm, self.match_prob, self.isgvfc, self.silhouette, self.avg_dist]
            .into_iter()
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.ranking_mismatches == 0 && self.worst_real() <= REAL_TOL
    }
}
