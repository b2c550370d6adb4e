use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use vfe_tps::synthdata::{write_dataset, Dataset, DatasetConfig, Split};
use vfe_tps::tensor::{DType, Real};
use vfe_tps::trainer::ablate::{self, Variant};
use vfe_tps::trainer::config::KEYS;
use vfe_tps::trainer::gradcheck::{gradcheck, GradcheckOptions};
use vfe_tps::trainer::{
    dump_features, evaluate, reconstruction_avg_dist, stored_dtype, write_loss_log, Checkpoint, SplitData, TrainConfig,
    Trainer,
};
use vfe_tps::{Error, Result};

/// Adds `--config`, `--preset` and one flag per configuration key.
fn with_config_flags(cmd: Command) -> Command {
    let cmd = cmd
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key = value configuration file"),
        )
        .arg(
            Arg::new("preset")
                .long("preset")
                .default_value("desk")
                .help("base configuration: desk or large"),
        );
    KEYS.iter().fold(cmd, |cmd, key| {
        cmd.arg(
            Arg::new(*key)
                .long(*key)
                .value_name("VALUE")
                .help_heading("Configuration"),
        )
    })
}

/// Defaults, then the file, then `VFE_SEED`, then flags.
fn resolve_config(m: &ArgMatches) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::preset(m.get_one::<String>("preset").map_or("desk", String::as_str))?;
    if let Some(path) = m.get_one::<String>("config") {
        cfg.apply_file(Path::new(path))?;
    }
    cfg.apply_env()?;
    for key in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn cli() -> Command {
    Command::new("vfe")
        .about("Text-based person search with visual feature enhancement")
        .subcommand_required(true)
        .subcommand(
            Command::new("gen-data")
                .about("Generate a synthetic pedestrian dataset")
                .arg(Arg::new("out").long("out").required(true).value_name("DIR"))
                .arg(Arg::new("identities").long("identities").default_value("32"))
                .arg(Arg::new("views").long("views").default_value("4"))
                .arg(Arg::new("captions").long("captions").default_value("2"))
                .arg(Arg::new("seed").long("seed").default_value("0"))
                .arg(Arg::new("no-jitter").long("no-jitter").action(ArgAction::SetTrue)),
        )
        .subcommand(with_config_flags(
            Command::new("train")
                .about("Train a model and evaluate it on the test split")
                .arg(Arg::new("resume").long("resume").value_name("CHECKPOINT")),
        ))
        .subcommand(
            Command::new("evaluate")
                .about("Text-to-image retrieval metrics of a checkpoint")
                .arg(Arg::new("checkpoint").long("checkpoint").required(true))
                .arg(Arg::new("dataset").long("dataset"))
                .arg(Arg::new("split").long("split").default_value("test"))
                .arg(
                    Arg::new("avg-dist")
                        .long("avg-dist")
                        .value_name("RATIO")
                        .help("also report reconstruction avgDist at this masking ratio"),
                )
                .arg(Arg::new("json").long("json").value_name("FILE")),
        )
        .subcommand(with_config_flags(
            Command::new("ablate")
                .about("Train configuration variants and tabulate their metrics")
                .arg(
                    Arg::new("study")
                        .long("study")
                        .default_value("table5")
                        .help("table5, mask_ratio, mim_variant, calibration or none"),
                )
                .arg(Arg::new("seeds").long("seeds").default_value("0,1,2"))
                .arg(
                    Arg::new("out")
                        .long("out")
                        .value_name("PREFIX")
                        .help("writes PREFIX.md and PREFIX.csv"),
                ),
        ))
        .subcommand(with_config_flags(
            Command::new("gradcheck")
                .about("Compare analytic gradients of each enabled loss with central differences")
                .arg(Arg::new("seeds").long("gc-seeds").default_value("5"))
                .arg(Arg::new("gc-tau").long("gc-tau").default_value("0.1"))
                .arg(Arg::new("step").long("step").default_value("1e-5"))
                .arg(
                    Arg::new("corrupt")
                        .long("corrupt")
                        .action(ArgAction::SetTrue)
                        .hide(true),
                ),
        ))
        .subcommand(
            Command::new("dump-features")
                .about("Write global features of a split with identity metadata")
                .arg(Arg::new("checkpoint").long("checkpoint").required(true))
                .arg(Arg::new("dataset").long("dataset"))
                .arg(Arg::new("split").long("split").default_value("test"))
                .arg(Arg::new("out").long("out").required(true)),
        )
}

fn parse_arg<T: std::str::FromStr>(m: &ArgMatches, name: &str) -> Result<T> {
    let raw = m.get_one::<String>(name).map(String::as_str).unwrap_or_default();
    raw.parse()
        .map_err(|_| Error::Config(format!("bad value `{raw}` for --{name}")))
}

fn gen_data(m: &ArgMatches) -> Result<()> {
    let cfg = DatasetConfig {
        identities: parse_arg(m, "identities")?,
        views_per_id: parse_arg(m, "views")?,
        captions_per_view: parse_arg(m, "captions")?,
        seed: parse_arg(m, "seed")?,
        jitter: !m.get_flag("no-jitter"),
        ..DatasetConfig::default()
    };
    let out = PathBuf::from(m.get_one::<String>("out").unwrap());
    let manifest = write_dataset(&out, &cfg)?;
    for (split, c) in &manifest.splits {
        println!(
            "{}: {} identities, {} images, {} captions",
            split.as_str(),
            c.identities,
            c.images,
            c.captions
        );
    }
    Ok(())
}

fn train<T: Real>(m: &ArgMatches) -> Result<()> {
    let (mut trainer, dataset) = match m.get_one::<String>("resume") {
        Some(path) => {
            let ck = Checkpoint::<T>::load(Path::new(path))?;
            let mut cfg = ck.meta.config.clone();
            if let Some(e) = m.get_one::<String>("epochs") {
                cfg.set("epochs", e)?;
            }
            if let Some(o) = m.get_one::<String>("output") {
                cfg.set("output", o)?;
            }
            let dataset = Dataset::load(&cfg.dataset)?;
            let mut trainer = Trainer::from_checkpoint(&ck, &dataset)?;
            trainer.cfg = cfg;
            (trainer, dataset)
        }
        None => {
            let cfg = resolve_config(m)?;
            let dataset = Dataset::load(&cfg.dataset)?;
            (Trainer::new(&cfg, &dataset)?, dataset)
        }
    };
    let out = trainer.cfg.output.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let cfg_path = out.join("config.txt");
    std::fs::write(&cfg_path, trainer.cfg.to_text()).map_err(|e| Error::Io {
        path: cfg_path,
        source: e,
    })?;
    let result = trainer.train(Some(&out.join("aborted.vftc")));
    write_loss_log(&out.join("loss_log.jsonl"), &trainer.history)?;
    result?;
    trainer.checkpoint().save(&out.join("checkpoint.vftc"))?;
    let test = SplitData::<T>::new(&dataset, Split::Test, &dataset.vocab, trainer.cfg.text_len)?;
    let mut report = evaluate(&trainer.model, &test)?;
    report.loss_curve = trainer.history.iter().map(|h| h.losses).collect();
    let json = out.join("metrics.json");
    std::fs::write(&json, report.to_json()?).map_err(|e| Error::Io { path: json, source: e })?;
    println!("{}", report.to_markdown());
    Ok(())
}

fn load_for_eval<T: Real>(m: &ArgMatches, path: &Path) -> Result<(Checkpoint<T>, Dataset, Split)> {
    let ck = Checkpoint::<T>::load(path)?;
    let root = m
        .get_one::<String>("dataset")
        .map(PathBuf::from)
        .unwrap_or_else(|| ck.meta.config.dataset.clone());
    let dataset = Dataset::load(&root)?;
    let split: Split = parse_arg(m, "split")?;
    Ok((ck, dataset, split))
}

fn evaluate_cmd<T: Real>(m: &ArgMatches, path: &Path) -> Result<()> {
    let (ck, dataset, split) = load_for_eval::<T>(m, path)?;
    let (model, _) = ck.restore()?;
    let data = SplitData::<T>::new(&dataset, split, &dataset.vocab, ck.meta.config.text_len)?;
    let mut report = evaluate(&model, &data)?;
    if m.get_one::<String>("avg-dist").is_some() {
        let ratio: f64 = parse_arg(m, "avg-dist")?;
        let cfg = &ck.meta.config;
        report.avg_dist = reconstruction_avg_dist(&model, &data, ratio, cfg.mim_variant, cfg.seed)?;
    }
    if let Some(out) = m.get_one::<String>("json") {
        std::fs::write(out, report.to_json()?).map_err(|e| Error::Io {
            path: out.into(),
            source: e,
        })?;
    }
    println!("{}", report.to_markdown());
    Ok(())
}

fn dump_cmd<T: Real>(m: &ArgMatches, path: &Path) -> Result<()> {
    let (ck, dataset, split) = load_for_eval::<T>(m, path)?;
    let (model, _) = ck.restore()?;
    let data = SplitData::<T>::new(&dataset, split, &dataset.vocab, ck.meta.config.text_len)?;
    let dump = dump_features(&model, &data)?;
    dump.write(Path::new(m.get_one::<String>("out").unwrap()))?;
    println!("{} rows of width {}", dump.count(), dump.dim);
    Ok(())
}

fn ablate_cmd(m: &ArgMatches) -> Result<()> {
    let cfg = resolve_config(m)?;
    let study = m.get_one::<String>("study").unwrap();
    let variants: Vec<Variant> = if study == "none" {
        Vec::new()
    } else {
        ablate::preset(study)?
    };
    let seeds = m
        .get_one::<String>("seeds")
        .unwrap()
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("bad seed `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset::load(&cfg.dataset)?;
    let rows = match cfg.dtype {
        DType::F32 => ablate::ablate::<f32>(&cfg, &variants, &seeds, &dataset),
        DType::F64 => ablate::ablate::<f64>(&cfg, &variants, &seeds, &dataset),
    };
    let md = ablate::to_markdown(&rows);
    if let Some(prefix) = m.get_one::<String>("out") {
        for (ext, body) in [("md", md.clone()), ("csv", ablate::to_csv(&rows))] {
            let path = PathBuf::from(format!("{prefix}.{ext}"));
            std::fs::write(&path, body).map_err(|e| Error::Io { path, source: e })?;
        }
    }
    print!("{md}");
    Ok(())
}

fn gradcheck_cmd(m: &ArgMatches) -> Result<bool> {
    let cfg = resolve_config(m)?;
    let n: u64 = parse_arg(m, "seeds")?;
    let opts = GradcheckOptions {
        tau: parse_arg(m, "gc-tau")?,
        h: parse_arg(m, "step")?,
        seeds: (0..n).map(|s| cfg.seed.wrapping_add(s)).collect(),
        corrupt: m.get_flag("corrupt"),
        ..GradcheckOptions::default()
    };
    let rows = gradcheck(&cfg, &opts)?;
    println!("| loss | max rel. error | coordinates | status |\n|---|---:|---:|---|");
    for r in &rows {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "| {} | {:.3e} | {} | {status} |",
            r.loss, r.max_rel_error, r.coordinates
        );
    }
    Ok(rows.iter().all(|r| r.passed()))
}

fn run() -> Result<bool> {
    let matches = cli().get_matches();
    match matches.subcommand() {
        Some(("gen-data", m)) => gen_data(m)?,
        Some(("train", m)) => {
            let dtype = match m.get_one::<String>("resume") {
                Some(p) => stored_dtype(Path::new(p))?,
                None => resolve_config(m)?.dtype,
            };
            match dtype {
                DType::F32 => train::<f32>(m)?,
                DType::F64 => train::<f64>(m)?,
            }
        }
        Some((cmd @ ("evaluate" | "dump-features"), m)) => {
            let path = PathBuf::from(m.get_one::<String>("checkpoint").unwrap());
            match (stored_dtype(&path)?, cmd) {
                (DType::F32, "evaluate") => evaluate_cmd::<f32>(m, &path)?,
                (DType::F64, "evaluate") => evaluate_cmd::<f64>(m, &path)?,
                (DType::F32, _) => dump_cmd::<f32>(m, &path)?,
                (DType::F64, _) => dump_cmd::<f64>(m, &path)?,
            }
        }
        Some(("ablate", m)) => ablate_cmd(m)?,
        Some(("gradcheck", m)) => return gradcheck_cmd(m),
        _ => unreachable!("subcommand is required"),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
