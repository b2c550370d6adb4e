//! Procedural pedestrian-like identities, rendered views and template
//! captions, written as a small identity-split retrieval dataset.

pub mod ppm;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub const IMAGE_H: usize = 64;
pub const IMAGE_W: usize = 32;

/// Named colors used for every clothing attribute.
pub const PALETTE: [(&str, [f32; 3]); 8] = [
    ("black", [0.08, 0.08, 0.08]),
    ("white", [0.95, 0.95, 0.95]),
    ("red", [0.85, 0.12, 0.12]),
    ("green", [0.12, 0.65, 0.18]),
    ("blue", [0.12, 0.22, 0.85]),
    ("yellow", [0.95, 0.85, 0.15]),
    ("purple", [0.55, 0.15, 0.7]),
    ("orange", [0.95, 0.5, 0.08]),
];

const SKIN: [f32; 3] = [0.87, 0.7, 0.58];
const BAG: [f32; 3] = [0.42, 0.27, 0.12];
const PLAIN_BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bag {
    None,
    Backpack,
    Shoulder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopLength {
    Short,
    Long,
}

/// Appearance of one person. Colors index [`PALETTE`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub pid: u32,
    pub hair: usize,
    pub top: usize,
    pub bottom: usize,
    pub shoes: usize,
    pub bag: Bag,
    pub top_len: TopLength,
}

type AttributeKey = (usize, usize, usize, usize, Bag, TopLength);

impl IdentitySpec {
    pub fn attributes(&self) -> AttributeKey {
        (self.hair, self.top, self.bottom, self.shoes, self.bag, self.top_len)
    }

    /// Words a faithful caption must contain.
    pub fn attribute_words(&self) -> Vec<&'static str> {
        let mut w = vec![
            PALETTE[self.hair].0,
            PALETTE[self.top].0,
            PALETTE[self.bottom].0,
            PALETTE[self.shoes].0,
            match self.top_len {
                TopLength::Short => "short",
                TopLength::Long => "long",
            },
        ];
        match self.bag {
            Bag::None => {}
            Bag::Backpack => w.push("backpack"),
            Bag::Shoulder => w.push("shoulder"),
        }
        w
    }
}

/// Uniformly random attributes for `pid`.
pub fn generate_identity(pid: u32, rng: &mut Rng) -> IdentitySpec {
    let n = PALETTE.len();
    IdentitySpec {
        pid,
        hair: rng.below(n),
        top: rng.below(n),
        bottom: rng.below(n),
        shoes: rng.below(n),
        bag: [Bag::None, Bag::Backpack, Bag::Shoulder][rng.below(3)],
        top_len: [TopLength::Short, TopLength::Long][rng.below(2)],
    }
}

/// `count` identities with pairwise distinct attribute tuples; collisions
/// are redrawn.
pub fn generate_identities(count: usize, rng: &mut Rng) -> Result<Vec<IdentitySpec>> {
    let combos = PALETTE.len().pow(4) * 3 * 2;
    if count > combos {
        return Err(Error::config(format!(
            "{count} identities exceed the {combos} distinct appearances"
        )));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    for pid in 0..count as u32 {
        let mut stream = rng.split_index("identity", pid as u64);
        let spec = loop {
            let s = generate_identity(pid, &mut stream);
            if seen.insert(s.attributes()) {
                break s;
            }
        };
        out.push(spec);
    }
    Ok(out)
}

/// One rendered camera view.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub pid: u32,
    /// `[3, 64, 32]` with values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub view_seed: u64,
}

fn fill(img: &mut [f32], y0: usize, y1: usize, x0: i32, x1: i32, color: [f32; 3]) {
    let area = IMAGE_H * IMAGE_W;
    for y in y0..y1.min(IMAGE_H) {
        for x in x0.max(0)..x1.min(IMAGE_W as i32) {
            for ch in 0..3 {
                img[ch * area + y * IMAGE_W + x as usize] = color[ch];
            }
        }
    }
}

/// Renders `spec` for one view. Without jitter the background is plain gray
/// and the figure is centered, so the image depends on `spec` only.
pub fn render_view(spec: &IdentitySpec, view_seed: u64, jitter: bool) -> RenderedView {
    let mut rng = Rng::seeded(view_seed);
    let (background, dx, brightness) = if jitter {
        let base = rng.range(0.3, 0.7) as f32;
        let tint: Vec<f32> = (0..3).map(|_| base + rng.range(-0.05, 0.05) as f32).collect();
        (
            [tint[0], tint[1], tint[2]],
            rng.below(7) as i32 - 3,
            rng.range(0.9, 1.1) as f32,
        )
    } else {
        (PLAIN_BACKGROUND, 0, 1.0)
    };
    let mut img = vec![0.0f32; 3 * IMAGE_H * IMAGE_W];
    fill(&mut img, 0, IMAGE_H, 0, IMAGE_W as i32, background);
    let c = |x: i32| x + dx;
    // Hair, face, torso, legs, shoes from top to bottom.
    fill(&mut img, 2, 8, c(11), c(21), PALETTE[spec.hair].1);
    fill(&mut img, 8, 14, c(12), c(20), SKIN);
    let torso_end = match spec.top_len {
        TopLength::Short => 32,
        TopLength::Long => 40,
    };
    fill(&mut img, 32, 56, c(11), c(21), PALETTE[spec.bottom].1);
    fill(&mut img, 14, torso_end, c(8), c(24), PALETTE[spec.top].1);
    fill(&mut img, 56, 62, c(10), c(22), PALETTE[spec.shoes].1);
    match spec.bag {
        Bag::None => {}
        Bag::Backpack => fill(&mut img, 16, 32, c(3), c(8), BAG),
        Bag::Shoulder => fill(&mut img, 28, 38, c(24), c(28), BAG),
    }
    if jitter {
        for v in img.iter_mut() {
            *v = (*v * brightness + 0.02 * rng.normal() as f32).clamp(0.0, 1.0);
        }
    }
    RenderedView {
        pid: spec.pid,
        image: Tensor::new([3, IMAGE_H, IMAGE_W], img).expect("fixed geometry"),
        view_seed,
    }
}

pub fn render_views(spec: &IdentitySpec, count: usize, rng: &mut Rng, jitter: bool) -> Vec<RenderedView> {
    (0..count).map(|_| render_view(spec, rng.next_u64(), jitter)).collect()
}

/// A caption from one of four templates, at most 16 words long.
pub fn describe(spec: &IdentitySpec, rng: &mut Rng) -> String {
    let [hair, top, bottom, shoes, len] = [
        PALETTE[spec.hair].0,
        PALETTE[spec.top].0,
        PALETTE[spec.bottom].0,
        PALETTE[spec.shoes].0,
        match spec.top_len {
            TopLength::Short => "short",
            TopLength::Long => "long",
        },
    ];
    let bag = match spec.bag {
        Bag::None => None,
        Bag::Backpack => Some("backpack"),
        Bag::Shoulder => Some("shoulder bag"),
    };
    let (mut s, bag_clause) = match rng.below(4) {
        0 => (
            format!("a person with {hair} hair, {len} {top} top, {bottom} pants, {shoes} shoes"),
            ", carrying a",
        ),
        1 => (
            format!("wears a {len} {top} top, {bottom} pants, {shoes} shoes, {hair} hair"),
            ", has a",
        ),
        2 => (
            format!("{len} {top} top over {bottom} pants with {shoes} shoes and {hair} hair"),
            " plus a",
        ),
        _ => (
            format!("{hair} hair, {len} {top} top, {bottom} pants, {shoes} shoes"),
            ",",
        ),
    };
    if let Some(b) = bag {
        s += &format!("{bag_clause} {b}");
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split `{other}`"))),
        }
    }
}

/// Generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub identities: usize,
    pub views_per_id: usize,
    pub captions_per_view: usize,
    /// Fractions of identities in train, val and test.
    pub split_ratios: [f64; 3],
    pub seed: u64,
    pub jitter: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            identities: 32,
            views_per_id: 4,
            captions_per_view: 2,
            split_ratios: [0.625, 0.125, 0.25],
            seed: 0,
            jitter: true,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.split_ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.split_ratios.iter().any(|r| *r < 0.0) {
            return Err(Error::config(format!(
                "split ratios {:?} must be non-negative and sum to 1",
                self.split_ratios
            )));
        }
        if self.identities == 0 || self.views_per_id == 0 || self.captions_per_view == 0 {
            return Err(Error::config("identities, views and captions must be positive"));
        }
        Ok(())
    }

    /// Identity counts per split; test takes the remainder.
    pub fn split_counts(&self) -> [usize; 3] {
        let n = self.identities;
        let train = ((self.split_ratios[0] * n as f64).round() as usize).min(n);
        let val = ((self.split_ratios[1] * n as f64).round() as usize).min(n - train);
        [train, val, n - train - val]
    }
}

/// One line of `captions.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_path: String,
    pub caption: String,
    pub pid: u32,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub identities: usize,
    pub images: usize,
    pub captions: usize,
}

/// Contents of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub image_h: usize,
    pub image_w: usize,
    pub vocab_size: usize,
    pub splits: BTreeMap<Split, SplitCounts>,
    pub identities: Vec<IdentitySpec>,
}

/// Generates and writes a dataset under `dir`.
pub fn write_dataset(dir: &Path, cfg: &DatasetConfig) -> Result<Manifest> {
    cfg.validate()?;
    let root = Rng::seeded(cfg.seed);
    let specs = generate_identities(cfg.identities, &mut root.split("identities"))?;
    let mut order: Vec<usize> = (0..specs.len()).collect();
    root.split("split").shuffle(&mut order);
    let counts = cfg.split_counts();
    let mut split_of = vec![Split::Train; specs.len()];
    for (rank, &i) in order.iter().enumerate() {
        split_of[i] = if rank < counts[0] {
            Split::Train
        } else if rank < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
    }

    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::new();
    let mut splits: BTreeMap<Split, SplitCounts> = BTreeMap::new();
    for spec in &specs {
        let split = split_of[spec.pid as usize];
        let entry = splits.entry(split).or_default();
        entry.identities += 1;
        let mut view_rng = root.split_index("views", spec.pid as u64);
        let mut caption_rng = root.split_index("captions", spec.pid as u64);
        for (v, view) in render_views(spec, cfg.views_per_id, &mut view_rng, cfg.jitter)
            .into_iter()
            .enumerate()
        {
            let rel = format!("images/{}_{}.ppm", spec.pid, v);
            ppm::write(&dir.join(&rel), &view.image)?;
            entry.images += 1;
            for _ in 0..cfg.captions_per_view {
                records.push(CaptionRecord {
                    image_path: rel.clone(),
                    caption: describe(spec, &mut caption_rng),
                    pid: spec.pid,
                    split,
                });
                entry.captions += 1;
            }
        }
    }

    let vocab = Vocabulary::build(records.iter().map(|r| r.caption.as_str()));
    vocab.save(&dir.join("vocab.txt"))?;
    let path = dir.join("captions.jsonl");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let manifest = Manifest {
        config: cfg.clone(),
        image_h: IMAGE_H,
        image_w: IMAGE_W,
        vocab_size: vocab.len(),
        splits,
        identities: specs,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// One image with its captions.
#[derive(Debug, Clone)]
pub struct Sample {
    pub pid: u32,
    pub image_path: String,
    pub image: Tensor<f32>,
    pub captions: Vec<String>,
    pub split: Split,
}

/// A dataset directory loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub vocab: Vocabulary,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
        let path = dir.join("captions.jsonl");
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut samples: Vec<Sample> = Vec::new();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: CaptionRecord = serde_json::from_str(&line)?;
            let i = match index.get(&r.image_path) {
                Some(&i) => i,
                None => {
                    let image = ppm::read(&dir.join(&r.image_path))?;
                    samples.push(Sample {
                        pid: r.pid,
                        image_path: r.image_path.clone(),
                        image,
                        captions: Vec::new(),
                        split: r.split,
                    });
                    index.insert(r.image_path.clone(), samples.len() - 1);
                    samples.len() - 1
                }
            };
            if samples[i].pid != r.pid || samples[i].split != r.split {
                return Err(Error::Format {
                    what: "captions.jsonl",
                    detail: format!("{} listed with conflicting identity or split", r.image_path),
                });
            }
            samples[i].captions.push(r.caption);
        }
        Ok(Self {
            root: dir.to_path_buf(),
            manifest,
            vocab,
            samples,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}
