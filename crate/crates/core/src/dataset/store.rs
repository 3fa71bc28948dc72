use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::procedural::SourceRecord;
use super::synth::{synthesize_sample, SynthParams};
use super::{select_sources, SampleMeta, SamplePair, SourceItem};
use crate::error::{Error, Result};
use crate::flow::{read_flow, write_flow};
use crate::frame::{Frame, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

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
            other => Err(Error::Config(format!(
                "unknown split '{other}' (expected train, val or test)"
            ))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    /// The full-scale split: 29,818 / 1,000 / 2,520 pairs.
    pub const FULL: SplitSizes = SplitSizes {
        train: 29_818,
        val: 1_000,
        test: 2_520,
    };

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Everything needed to rebuild a dataset bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Source corpus index (JSON or CSV).
    pub sources: PathBuf,
    pub output: PathBuf,
    pub seed: u64,
    pub splits: SplitSizes,
    #[serde(default = "default_min_area")]
    pub min_area: f64,
    /// Sources are resized to `[width, height]` before synthesis.
    #[serde(default)]
    pub resolution: Option<[usize; 2]>,
    #[serde(default)]
    pub params: SynthParams,
    #[serde(default)]
    pub parallel: bool,
}

fn default_min_area() -> f64 {
    0.10
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub source_id: String,
    /// Sample directory relative to the dataset root.
    pub dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub splits: SplitSizes,
    pub params: SynthParams,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn sample_dir(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.dir)
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<SamplePair> {
        load_sample(&self.sample_dir(entry))
    }
}

/// Mix `(seed, index)` into an independent per-sample seed (SplitMix64).
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    json.push('\n');
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn save_sample(dir: &Path, pair: &SamplePair) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    pair.gt_1.save_png(&dir.join("gt_1.png"))?;
    pair.gt_2.save_png(&dir.join("gt_2.png"))?;
    pair.comp_1.save_png(&dir.join("comp_1.png"))?;
    pair.comp_2.save_png(&dir.join("comp_2.png"))?;
    pair.mask_1.save_png(&dir.join("mask_1.png"))?;
    pair.mask_2.save_png(&dir.join("mask_2.png"))?;
    pair.valid_2.save_png(&dir.join("valid_2.png"))?;
    write_flow(&dir.join("flow_2to1.flo"), &pair.flow_2_to_1)?;
    write_json(&dir.join("meta.json"), &pair.meta)
}

fn load_binary_mask(path: &Path) -> Result<Mask> {
    let mask = Mask::load_png(path)?;
    if !mask.is_binary() {
        return Err(Error::format(
            path,
            "mask is not binary (expected 0 or 255)",
        ));
    }
    Ok(mask)
}

pub fn load_sample(dir: &Path) -> Result<SamplePair> {
    let pair = SamplePair {
        gt_1: Frame::load_png(&dir.join("gt_1.png"))?,
        gt_2: Frame::load_png(&dir.join("gt_2.png"))?,
        comp_1: Frame::load_png(&dir.join("comp_1.png"))?,
        comp_2: Frame::load_png(&dir.join("comp_2.png"))?,
        mask_1: load_binary_mask(&dir.join("mask_1.png"))?,
        mask_2: load_binary_mask(&dir.join("mask_2.png"))?,
        valid_2: load_binary_mask(&dir.join("valid_2.png"))?,
        flow_2_to_1: read_flow(&dir.join("flow_2to1.flo"))?,
        meta: read_json::<SampleMeta>(&dir.join("meta.json"))?,
    };
    let dims = pair.dims();
    let all_same = [pair.gt_2.dims(), pair.comp_1.dims(), pair.comp_2.dims()]
        .into_iter()
        .chain([pair.mask_1.dims(), pair.mask_2.dims(), pair.valid_2.dims()])
        .chain([pair.flow_2_to_1.dims()])
        .all(|d| d == dims);
    if !all_same {
        return Err(Error::Dimension(format!(
            "sample {}: files differ in size",
            dir.display()
        )));
    }
    Ok(pair)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let mut manifest: DatasetManifest = read_json(path)?;
    manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(manifest)
}

/// Load a source corpus from a JSON array of `{id, image, mask}` records or
/// a CSV with an `id,image,mask` header. Paths resolve against the index.
pub fn load_source_corpus(index: &Path) -> Result<Vec<SourceItem>> {
    let records: Vec<SourceRecord> = match index.extension().and_then(|e| e.to_str()) {
        Some("csv") => {
            let mut reader =
                csv::Reader::from_path(index).map_err(|e| Error::format(index, e.to_string()))?;
            reader
                .deserialize()
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(index, e.to_string()))?
        }
        _ => read_json(index)?,
    };
    let base = index.parent().unwrap_or(Path::new("."));
    let mut seen = BTreeSet::new();
    let mut items = Vec::with_capacity(records.len());
    for record in records {
        if !seen.insert(record.id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate source id '{}'",
                record.id
            )));
        }
        let image = Frame::load_png(&base.join(&record.image))?;
        let mask = Mask::load_png(&base.join(&record.mask))?.threshold(0.5);
        items.push(SourceItem::new(record.id, image, mask)?);
    }
    Ok(items)
}

fn resize_source(item: &SourceItem, [width, height]: [usize; 2]) -> Result<SourceItem> {
    if item.image.dims() == (width, height) {
        return Ok(item.clone());
    }
    SourceItem::new(
        item.id.clone(),
        item.image.resize_bilinear(width, height),
        item.mask.resize_nearest(width, height),
    )
}

/// Synthesize and write a whole dataset, returning its manifest.
///
/// Sources are filtered by `min_area`, shuffled with the seed, and assigned
/// to samples in order, cycling when more samples than sources are asked
/// for. Sample `i` is drawn from its own generator seeded by `(seed, i)`,
/// so the output does not depend on `parallel`.
pub fn build_dataset(config: &SynthConfig) -> Result<DatasetManifest> {
    let corpus = load_source_corpus(&config.sources)?;
    build_dataset_from(config, &corpus)
}

/// As [`build_dataset`] with an in-memory corpus; `config.sources` is ignored.
pub fn build_dataset_from(config: &SynthConfig, corpus: &[SourceItem]) -> Result<DatasetManifest> {
    config.params.crop.validate()?;
    if config.splits.total() == 0 {
        return Err(Error::Config("split sizes are all zero".into()));
    }
    let mut seen = BTreeSet::new();
    for item in corpus {
        if !seen.insert(item.id.as_str()) {
            return Err(Error::Validation(format!(
                "duplicate source id '{}'",
                item.id
            )));
        }
    }
    let mut sources = select_sources(corpus, config.min_area)?;
    if sources.is_empty() {
        return Err(Error::Validation(format!(
            "no source has a foreground covering at least {} of the image",
            config.min_area
        )));
    }
    if let Some(res) = config.resolution {
        if res[0] == 0 || res[1] == 0 {
            return Err(Error::Config(format!("resolution {res:?} has a zero side")));
        }
        sources = sources
            .iter()
            .map(|s| resize_source(s, res))
            .collect::<Result<_>>()?;
    }
    sources.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    if config.splits.total() > sources.len() {
        log::warn!(
            "{} samples requested from {} sources; sources will be reused",
            config.splits.total(),
            sources.len()
        );
    }

    let entries: Vec<ManifestEntry> = (0..config.splits.total())
        .map(|i| {
            let split = config.splits.split_of(i);
            let id = format!("{i:06}");
            ManifestEntry {
                dir: format!("{}/{id}", split.as_str()),
                id,
                split,
                source_id: sources[i % sources.len()].id.clone(),
            }
        })
        .collect();

    let make = |i: usize| -> Result<()> {
        let src = &sources[i % sources.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, i as u64));
        let pair = synthesize_sample(src, &sources, &config.params, &mut rng)?;
        save_sample(&config.output.join(&entries[i].dir), &pair)
    };
    if config.parallel {
        (0..entries.len()).into_par_iter().try_for_each(make)?;
    } else {
        (0..entries.len()).try_for_each(make)?;
    }

    let manifest = DatasetManifest {
        version: 1,
        seed: config.seed,
        splits: config.splits,
        params: config.params.clone(),
        entries,
        root: config.output.clone(),
    };
    write_json(&config.output.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
