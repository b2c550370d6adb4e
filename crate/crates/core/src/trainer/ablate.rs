//! Trains configuration variants with shared seeds and tabulates their test
//! metrics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::synthdata::{Dataset, Split};
use crate::tensor::Real;

use super::{evaluate, reconstruction_avg_dist, SplitData, TrainConfig, Trainer};

/// A named set of `key=value` overrides on the base configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl Variant {
    pub fn new(name: &str, overrides: &[(&str, &str)]) -> Self {
        Self {
            name: name.to_string(),
            overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub const PRESETS: &[&str] = &["table5", "mask_ratio", "mim_variant", "calibration"];

/// Named variant grids: the on/off auxiliary grid, the masking-ratio sweep,
/// the reconstruction variants and the calibration modes.
pub fn preset(name: &str) -> Result<Vec<Variant>> {
    Ok(match name {
        "table5" => vec![
            Variant::new("baseline", &[("tgmim", "false"), ("isgvfc", "false")]),
            Variant::new("tgmim", &[("tgmim", "true"), ("isgvfc", "false")]),
            Variant::new("isgvfc", &[("tgmim", "false"), ("isgvfc", "true")]),
            Variant::new("tgmim+isgvfc", &[("tgmim", "true"), ("isgvfc", "true")]),
        ],
        "mask_ratio" => (1..=9)
            .map(|k| {
                let r = format!("0.{k}");
                Variant {
                    name: format!("mask_ratio={r}"),
                    overrides: vec![("tgmim".into(), "true".into()), ("mask_ratio".into(), r)],
                }
            })
            .collect(),
        "mim_variant" => vec![
            Variant::new("text_guided", &[("tgmim", "true"), ("mim_variant", "text_guided")]),
            Variant::new("text_free", &[("tgmim", "true"), ("mim_variant", "text_free")]),
            Variant::new("off", &[("mim_variant", "off")]),
        ],
        "calibration" => vec![
            Variant::new("none", &[("isgvfc", "false")]),
            Variant::new("kl", &[("isgvfc", "true"), ("isgvfc_mode", "kl")]),
            Variant::new("id_loss", &[("isgvfc", "true"), ("isgvfc_mode", "id_loss")]),
            Variant::new("triplet", &[("isgvfc", "true"), ("isgvfc_mode", "triplet")]),
        ],
        other => {
            return Err(Error::config(format!(
                "unknown ablation preset `{other}`; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    })
}

/// Mean test metrics of one variant, or the reason it failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<MetricsReport>,
    pub mean: Option<MetricsReport>,
    pub error: Option<String>,
}

/// Trains `cfg` on `dataset` and reports test metrics. avgDist is filled in
/// when the model has a reconstruction head.
pub fn run_once<T: Real>(cfg: &TrainConfig, dataset: &Dataset) -> Result<MetricsReport> {
    let mut trainer = Trainer::<T>::new(cfg, dataset)?;
    trainer.train(None)?;
    let test = SplitData::<T>::new(dataset, Split::Test, &dataset.vocab, cfg.text_len)?;
    let mut report = evaluate(&trainer.model, &test)?;
    if trainer.model.mim.is_some() {
        report.avg_dist = reconstruction_avg_dist(&trainer.model, &test, cfg.mask_ratio, cfg.mim_variant, cfg.seed)?;
    }
    report.loss_curve = trainer.history.iter().map(|h| h.losses).collect();
    Ok(report)
}

pub fn mean_report(reports: &[MetricsReport]) -> MetricsReport {
    let n = reports.len().max(1) as f64;
    let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    MetricsReport {
        rank1: avg(|r| r.rank1),
        rank5: avg(|r| r.rank5),
        rank10: avg(|r| r.rank10),
        map: avg(|r| r.map),
        silhouette: avg(|r| r.silhouette),
        avg_dist: avg(|r| r.avg_dist),
        loss_curve: Vec::new(),
    }
}

/// Runs the base configuration followed by every variant, each over all
/// `seeds`. A failing variant yields a row marked failed.
pub fn ablate<T: Real>(base: &TrainConfig, variants: &[Variant], seeds: &[u64], dataset: &Dataset) -> Vec<AblationRow> {
    let base_row = Variant::new("base", &[]);
    std::iter::once(&base_row)
        .chain(variants)
        .map(|v| {
            log::info!("ablation variant {}", v.name);
            let outcome = v.apply(base).and_then(|cfg| {
                seeds
                    .iter()
                    .map(|&s| {
                        let mut c = cfg.clone();
                        c.seed = s;
                        run_once::<T>(&c, dataset)
                    })
                    .collect::<Result<Vec<_>>>()
            });
            match outcome {
                Ok(per_seed) => AblationRow {
                    name: v.name.clone(),
                    seeds: seeds.to_vec(),
                    mean: Some(mean_report(&per_seed)),
                    per_seed,
                    error: None,
                },
                Err(e) => AblationRow {
                    name: v.name.clone(),
                    seeds: seeds.to_vec(),
                    per_seed: Vec::new(),
                    mean: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

pub fn to_markdown(rows: &[AblationRow]) -> String {
    let mut out = String::from("| variant | Rank-1 | Rank-5 | Rank-10 | mAP | silhouette | avgDist |\n");
    out.push_str("|---|---:|---:|---:|---:|---:|---:|\n");
    for r in rows {
        match (&r.mean, &r.error) {
            (Some(m), _) => out.push_str(&format!("| {} | {} |\n", r.name, m.markdown_cells())),
            (None, e) => out.push_str(&format!(
                "| {} | failed: {} | | | | | |\n",
                r.name,
                e.as_deref().unwrap_or("unknown").replace('|', "/")
            )),
        }
    }
    out
}

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,status,rank1,rank5,rank10,map,silhouette,avg_dist\n");
    for r in rows {
        match &r.mean {
            Some(m) => out.push_str(&format!(
                "{},ok,{},{},{},{},{},{}\n",
                r.name, m.rank1, m.rank5, m.rank10, m.map, m.silhouette, m.avg_dist
            )),
            None => out.push_str(&format!("{},failed,,,,,,\n", r.name)),
        }
    }
    out
}
