//! Retrieval metrics (Rank-k, mAP) and feature diagnostics (silhouette
//! coefficient, average distance of reconstructed pixels to their nearest
//! visible neighbour).

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::alignment::LossBreakdown;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::tgmim::PatchMask;

/// Relevant gallery items of every query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalGroundTruth {
    relevant: Vec<Vec<bool>>,
}

impl RetrievalGroundTruth {
    pub fn new(relevant: Vec<Vec<bool>>) -> Result<Self> {
        let g = relevant.first().map_or(0, Vec::len);
        if g == 0 {
            return Err(Error::contract("empty gallery"));
        }
        for (q, row) in relevant.iter().enumerate() {
            if row.len() != g {
                return Err(Error::contract("ragged relevance matrix"));
            }
            if !row.iter().any(|&r| r) {
                return Err(Error::contract(format!("query {q} has no relevant gallery item")));
            }
        }
        Ok(Self { relevant })
    }

    /// Items are relevant when they share the query's person id.
    pub fn from_pids(query_pids: &[u32], gallery_pids: &[u32]) -> Result<Self> {
        Self::new(
            query_pids
                .iter()
                .map(|q| gallery_pids.iter().map(|g| g == q).collect())
                .collect(),
        )
    }

    pub fn num_queries(&self) -> usize {
        self.relevant.len()
    }

    pub fn gallery_size(&self) -> usize {
        self.relevant[0].len()
    }

    pub fn is_relevant(&self, query: usize, item: usize) -> bool {
        self.relevant[query][item]
    }

    pub fn relevant_count(&self, query: usize) -> usize {
        self.relevant[query].iter().filter(|&&r| r).count()
    }

    /// Rank-1 of a uniformly random ranking: mean fraction of relevant items.
    pub fn chance_rank1(&self) -> f64 {
        let g = self.gallery_size() as f64;
        100.0
            * (0..self.num_queries())
                .map(|q| self.relevant_count(q) as f64 / g)
                .sum::<f64>()
            / self.num_queries() as f64
    }
}

fn check<T: Real>(sim: &Tensor<T>, gt: &RetrievalGroundTruth) -> Result<()> {
    if sim.rank() != 2 || sim.shape() != [gt.num_queries(), gt.gallery_size()] {
        return Err(Error::Dimension {
            op: "retrieval",
            lhs: sim.shape().to_vec(),
            rhs: vec![gt.num_queries(), gt.gallery_size()],
        });
    }
    if !sim.is_finite() {
        return Err(Error::contract("non-finite similarity"));
    }
    Ok(())
}

/// Gallery indices by descending similarity, ties by ascending index.
pub fn ranking<T: Real>(row: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal));
    order
}

/// Percentage of queries with a relevant item among the top `k`.
pub fn rank_k<T: Real>(sim: &Tensor<T>, gt: &RetrievalGroundTruth, k: usize) -> Result<f64> {
    check(sim, gt)?;
    if k == 0 || k > gt.gallery_size() {
        return Err(Error::contract(format!("k = {k} outside 1..={}", gt.gallery_size())));
    }
    let hits = (0..gt.num_queries())
        .filter(|&q| ranking(sim.row(q)).iter().take(k).any(|&i| gt.is_relevant(q, i)))
        .count();
    Ok(100.0 * hits as f64 / gt.num_queries() as f64)
}

/// Mean over queries of average precision, as a percentage.
pub fn mean_average_precision<T: Real>(sim: &Tensor<T>, gt: &RetrievalGroundTruth) -> Result<f64> {
    check(sim, gt)?;
    let mut total = 0.0;
    for q in 0..gt.num_queries() {
        let mut found = 0usize;
        let mut ap = 0.0;
        for (pos, &i) in ranking(sim.row(q)).iter().enumerate() {
            if gt.is_relevant(q, i) {
                found += 1;
                ap += found as f64 / (pos + 1) as f64;
            }
        }
        total += ap / found as f64;
    }
    Ok(100.0 * total / gt.num_queries() as f64)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient with Euclidean distance.
///
/// Points of singleton identities score 0; a point with `a = b = 0`
/// scores 0.
pub fn silhouette<T: Real>(features: &Tensor<T>, pids: &[u32]) -> Result<f64> {
    if features.rank() != 2 || features.shape()[0] != pids.len() {
        return Err(Error::Dimension {
            op: "silhouette",
            lhs: features.shape().to_vec(),
            rhs: vec![pids.len()],
        });
    }
    let mut classes: Vec<u32> = pids.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::contract("silhouette needs at least two identities"));
    }
    let rows: Vec<Vec<f64>> = features.rows().map(|r| r.iter().map(|v| v.f64()).collect()).collect();
    let n = rows.len();
    let class_of: Vec<usize> = pids.iter().map(|p| classes.binary_search(p).unwrap()).collect();
    let mut sizes = vec![0usize; classes.len()];
    class_of.iter().for_each(|&c| sizes[c] += 1);

    let mut total = 0.0;
    let mut sums = vec![0.0; classes.len()];
    for i in 0..n {
        let own = class_of[i];
        if sizes[own] < 2 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if j != i {
                sums[class_of[j]] += euclidean(&rows[i], &rows[j]);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..classes.len())
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// One masked pixel of the average-distance computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NearestVisible {
    pub y: usize,
    pub x: usize,
    pub nearest_y: usize,
    pub nearest_x: usize,
    /// Euclidean pixel distance to the nearest visible pixel.
    pub distance: f64,
    /// Mean over channels of |predicted - original at the nearest visible pixel|.
    pub value_gap: f64,
}

/// Nearest pixel of any visible patch to `(y, x)`; ties go to the smallest
/// row, then column.
pub fn nearest_visible(y: usize, x: usize, mask: &PatchMask, patch: usize, grid_w: usize) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize, usize)> = None;
    for cell in (0..mask.len()).filter(|&c| !mask.is_masked(c)) {
        let (y0, x0) = ((cell / grid_w) * patch, (cell % grid_w) * patch);
        let ny = y.clamp(y0, y0 + patch - 1);
        let nx = x.clamp(x0, x0 + patch - 1);
        let d2 = ny.abs_diff(y).pow(2) + nx.abs_diff(x).pow(2);
        if best.is_none_or(|b| (d2, ny, nx) < b) {
            best = Some((d2, ny, nx));
        }
    }
    best.map(|(_, ny, nx)| (ny, nx))
}

/// Per-pixel table behind [`avg_dist`].
pub fn avg_dist_table<T: Real>(
    predicted: &Tensor<T>,
    mask: &PatchMask,
    original: &Tensor<T>,
    patch: usize,
) -> Result<Vec<NearestVisible>> {
    let &[c, h, w] = original.shape() else {
        return Err(Error::contract("avg_dist expects [C, H, W] images"));
    };
    if predicted.shape() != original.shape() {
        return Err(Error::Dimension {
            op: "avg_dist",
            lhs: predicted.shape().to_vec(),
            rhs: original.shape().to_vec(),
        });
    }
    let gw = w / patch;
    if mask.len() != (h / patch) * gw {
        return Err(Error::contract("mask does not match the patch grid"));
    }
    let masked = mask.num_masked();
    if masked == 0 || masked == mask.len() {
        return Err(Error::contract("avg_dist needs both masked and visible patches"));
    }
    let (p, o) = (predicted.data(), original.data());
    let mut out = Vec::with_capacity(masked * patch * patch);
    for y in 0..h {
        for x in 0..w {
            if !mask.covers(y, x, patch, gw) {
                continue;
            }
            let (ny, nx) = nearest_visible(y, x, mask, patch, gw).expect("visible patch exists");
            let gap = (0..c)
                .map(|ch| (p[(ch * h + y) * w + x] - o[(ch * h + ny) * w + nx]).abs().f64())
                .sum::<f64>()
                / c as f64;
            let distance = ((ny.abs_diff(y).pow(2) + nx.abs_diff(x).pow(2)) as f64).sqrt();
            out.push(NearestVisible {
                y,
                x,
                nearest_y: ny,
                nearest_x: nx,
                distance,
                value_gap: gap,
            });
        }
    }
    Ok(out)
}

/// Mean over masked pixels (and channels) of the absolute difference
/// between the prediction and the original value of the nearest visible
/// pixel.
pub fn avg_dist<T: Real>(predicted: &Tensor<T>, mask: &PatchMask, original: &Tensor<T>, patch: usize) -> Result<f64> {
    let table = avg_dist_table(predicted, mask, original, patch)?;
    Ok(table.iter().map(|e| e.value_gap).sum::<f64>() / table.len() as f64)
}

/// Evaluation summary of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub silhouette: f64,
    pub avg_dist: f64,
    #[serde(default)]
    pub loss_curve: Vec<LossBreakdown>,
}

impl MetricsReport {
    /// Rank-1/5/10 and mAP of a similarity matrix; diagnostics left at 0.
    pub fn retrieval<T: Real>(sim: &Tensor<T>, gt: &RetrievalGroundTruth) -> Result<Self> {
        let g = gt.gallery_size();
        Ok(Self {
            rank1: rank_k(sim, gt, 1)?,
            rank5: rank_k(sim, gt, 5.min(g))?,
            rank10: rank_k(sim, gt, 10.min(g))?,
            map: mean_average_precision(sim, gt)?,
            silhouette: 0.0,
            avg_dist: 0.0,
            loss_curve: Vec::new(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub const MARKDOWN_HEADER: &'static str =
        "| Rank-1 | Rank-5 | Rank-10 | mAP | silhouette | avgDist |\n|---:|---:|---:|---:|---:|---:|";

    pub fn markdown_cells(&self) -> String {
        format!(
            "{:.2} | {:.2} | {:.2} | {:.2} | {:.4} | {:.4}",
            self.rank1, self.rank5, self.rank10, self.map, self.silhouette, self.avg_dist
        )
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from(Self::MARKDOWN_HEADER);
        let _ = write!(s, "\n| {} |\n", self.markdown_cells());
        s
    }
}
