#![allow(dead_code)]

use std::path::Path;

use harmonizer_core::dataset::procedural::procedural_source;
use harmonizer_core::dataset::{
    build_dataset_from, synthesize_sample, DatasetManifest, InpaintMethod, SamplePair, SourceItem,
    SplitSizes, SynthConfig, SynthParams,
};
use harmonizer_core::networks::{DiscriminatorConfig, GeneratorConfig};
use harmonizer_core::training::TrainConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn sources(count: usize, size: usize, seed: u64) -> Vec<SourceItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| procedural_source(&mut rng, &format!("src{i:04}"), size, size))
        .collect()
}

pub fn fast_params() -> SynthParams {
    SynthParams {
        inpaint: InpaintMethod::Diffusion,
        ..SynthParams::default()
    }
}

/// Synthesize `count` pairs in memory, one per source, cycling.
pub fn pairs(count: usize, size: usize, seed: u64) -> Vec<SamplePair> {
    let srcs = sources(count.min(16), size, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..count)
        .map(|i| synthesize_sample(&srcs[i % srcs.len()], &srcs, &fast_params(), &mut rng).unwrap())
        .collect()
}

pub fn dataset(dir: &Path, splits: SplitSizes, size: usize, seed: u64) -> DatasetManifest {
    let corpus = sources(12, size, seed);
    let cfg = SynthConfig {
        sources: dir.join("unused.json"),
        output: dir.to_path_buf(),
        seed,
        splits,
        min_area: 0.05,
        resolution: None,
        params: fast_params(),
        parallel: false,
    };
    build_dataset_from(&cfg, &corpus).unwrap()
}

pub fn tiny_train_config(resolution: usize) -> TrainConfig {
    TrainConfig {
        resolution,
        epochs: 1,
        generator: GeneratorConfig {
            base_channels: 4,
            depth: 2,
            max_channels: 8,
            ..GeneratorConfig::default()
        },
        discriminator: DiscriminatorConfig {
            base_channels: 4,
            depth: 2,
            max_channels: 8,
            ..DiscriminatorConfig::default()
        },
        validate: false,
        ..TrainConfig::default()
    }
}
