use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use harmonizer_core::config::{apply_overrides, load_config};
use harmonizer_core::dataset::procedural::write_procedural_corpus;
use harmonizer_core::dataset::{
    build_dataset_from, load_manifest, load_source_corpus, DatasetManifest, SplitSizes, SynthConfig,
};
use harmonizer_core::evaluation::{
    evaluate_split, format_table, predict_mask, EvalOptions, HarmonizeModel, IdentityModel,
    MaskFreeModel,
};
use harmonizer_core::networks::{generate, ModelBundle};
use harmonizer_core::ranking::{plackett_luce, read_ballots};
use harmonizer_core::training::{train, TrainConfig, TrainOptions};
use harmonizer_core::{Error, Frame, Mask};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::frames::{harmonize_at_valid_size, list_frames, working_size};
use crate::{
    Cli, Command, EvalArgs, HarmonizeArgs, PredictMaskArgs, RankArgs, SynthArgs, TrainArgs,
    UsageError,
};

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Shared {
        seed: cli.seed,
        config: cli.config,
        overrides: cli.overrides,
    };
    if let Some(path) = &ctx.config {
        require_file(path, "config file")?;
    }
    match cli.command {
        Command::Synth(args) => synth(&ctx, args),
        Command::Train(args) => train_cmd(&ctx, args),
        Command::Harmonize(args) => harmonize(args),
        Command::PredictMask(args) => predict_masks(args),
        Command::Eval(args) => eval(args),
        Command::Rank(args) => rank(args),
    }
}

/// Options shared by every subcommand.
struct Shared {
    seed: Option<u64>,
    config: Option<PathBuf>,
    overrides: Vec<String>,
}

impl Shared {
    /// Defaults, then the config file, then `--set` overrides.
    fn resolve<T: Serialize + DeserializeOwned>(&self, defaults: T) -> Result<T> {
        let mut value = serde_json::to_value(&defaults).context("serializing defaults")?;
        if let Some(path) = &self.config {
            let patch: Value = load_config(path)?;
            merge(&mut value, patch);
        }
        let merged: T = serde_json::from_value(value).map_err(|e| {
            Error::Config(format!(
                "{}: {e}",
                self.config.as_deref().unwrap_or(Path::new("")).display()
            ))
        })?;
        Ok(apply_overrides(&merged, &self.overrides)?)
    }
}

/// Deep-merge `patch` into `base`. Tagged enums (objects with a `kind`)
/// are replaced whole so fields of the old variant do not linger.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(base), Value::Object(patch)) if !patch.contains_key("kind") => {
            for (key, value) in patch {
                match base.get_mut(&key) {
                    Some(slot) => merge(slot, value),
                    None => {
                        base.insert(key, value);
                    }
                }
            }
        }
        (base, patch) => *base = patch,
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(UsageError(format!("{what} {} does not exist", path.display())).into())
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(UsageError(format!("{what} {} does not exist", path.display())).into())
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// Accept a dataset directory or the manifest itself.
fn open_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    };
    require_file(&file, "dataset manifest")?;
    Ok(load_manifest(&file)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth(ctx: &Shared, args: SynthArgs) -> Result<()> {
    let defaults = SynthConfig {
        sources: PathBuf::new(),
        output: PathBuf::new(),
        seed: 0,
        splits: SplitSizes {
            train: 200,
            val: 20,
            test: 50,
        },
        min_area: 0.10,
        resolution: None,
        params: Default::default(),
        parallel: false,
    };
    let mut cfg = ctx.resolve(defaults)?;
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.output = out;
    }
    if let Some(n) = args.resolution {
        cfg.resolution = Some([n, n]);
    }
    for (flag, slot) in [
        (args.train, &mut cfg.splits.train),
        (args.val, &mut cfg.splits.val),
        (args.test, &mut cfg.splits.test),
    ] {
        if let Some(n) = flag {
            *slot = n;
        }
    }
    cfg.parallel |= args.parallel;
    if cfg.output.as_os_str().is_empty() {
        return Err(UsageError("synth needs an output directory (--out)".into()).into());
    }

    let corpus = match (args.sources, args.procedural) {
        (_, Some(count)) => {
            let [w, h] = cfg.resolution.unwrap_or([128, 128]);
            let dir = match std::env::var_os("HARMONIZER_CACHE") {
                Some(cache) => {
                    PathBuf::from(cache).join(format!("procedural-{count}-{w}x{h}-{}", cfg.seed))
                }
                None => cfg.output.join("sources"),
            };
            let index = dir.join("index.json");
            cfg.sources = index.clone();
            if index.is_file() {
                log::info!("reusing procedural sources in {}", dir.display());
                load_source_corpus(&index)?
            } else {
                log::info!("writing {count} procedural sources to {}", dir.display());
                write_procedural_corpus(&dir, count, w, h, cfg.seed)?
            }
        }
        (Some(sources), None) => {
            require_file(&sources, "source index")?;
            cfg.sources = sources;
            load_source_corpus(&cfg.sources)?
        }
        (None, None) => {
            if cfg.sources.as_os_str().is_empty() {
                return Err(UsageError(
                    "synth needs --sources, --procedural or `sources` in the config".into(),
                )
                .into());
            }
            require_file(&cfg.sources, "source index")?;
            load_source_corpus(&cfg.sources)?
        }
    };
    let manifest = build_dataset_from(&cfg, &corpus)?;
    println!(
        "wrote {} pairs ({} train / {} val / {} test) to {}",
        manifest.entries.len(),
        cfg.splits.train,
        cfg.splits.val,
        cfg.splits.test,
        cfg.output.display()
    );
    Ok(())
}

fn train_cmd(ctx: &Shared, args: TrainArgs) -> Result<()> {
    let manifest = open_manifest(&args.data)?;
    let mut cfg = ctx.resolve(TrainConfig::default())?;
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.resolution {
        cfg.resolution = n;
    }
    if args.max_steps.is_some() {
        cfg.max_steps = args.max_steps;
    }
    cfg.validate()?;
    let resume = match &args.checkpoint {
        Some(path) => {
            require_file(path, "checkpoint")?;
            Some(ModelBundle::load(path)?)
        }
        None => None,
    };
    create_dir(&args.out)?;
    write_json(&args.out.join("config.json"), &cfg)?;
    let outcome = train(
        &cfg,
        &manifest,
        TrainOptions {
            out_dir: Some(args.out.clone()),
            resume,
            cache_samples: args.cache_samples,
        },
    )?;
    match outcome.records.last() {
        Some(last) => println!(
            "trained to step {} (epoch {}), reconstruction {:.5}; checkpoints in {}",
            last.step,
            outcome.bundle.epoch,
            last.losses.reconstruction,
            args.out.display()
        ),
        None => println!(
            "nothing to do: checkpoint already at epoch {}",
            outcome.bundle.epoch
        ),
    }
    Ok(())
}

fn harmonize(args: HarmonizeArgs) -> Result<()> {
    let frames = list_frames(&args.frames)?;
    require_file(&args.checkpoint, "checkpoint")?;
    if let Some(dir) = &args.mask_dir {
        require_dir(dir, "mask directory")?;
        for frame in &frames {
            let name = frame.file_name().expect("listed files have names");
            require_file(&dir.join(name), "mask")?;
        }
    }
    let bundle = ModelBundle::load_for_inference(&args.checkpoint)?;
    let gen = &bundle.generator;
    let disc = &bundle.discriminator;
    create_dir(&args.out)?;
    for path in &frames {
        let name = path.file_name().expect("listed files have names");
        let frame = Frame::load_png(path)?;
        let out = match &args.mask_dir {
            Some(dir) => {
                let mask = Mask::load_png(&dir.join(name))?;
                if mask.dims() != frame.dims() {
                    return Err(Error::Dimension(format!(
                        "{}: mask is {:?} but the frame is {:?}",
                        name.to_string_lossy(),
                        mask.dims(),
                        frame.dims()
                    ))
                    .into());
                }
                harmonize_at_valid_size(&frame, &mask, gen.config().depth, |f, m| {
                    generate(gen, f, m)
                })?
            }
            None => {
                let depth = gen.config().depth.max(disc.config().depth);
                let mask = predicted_mask(disc, &frame, depth)?;
                harmonize_at_valid_size(&frame, &mask, depth, |f, m| generate(gen, f, m))?
            }
        };
        out.save_png(&args.out.join(name))?;
    }
    println!(
        "harmonized {} frames into {}",
        frames.len(),
        args.out.display()
    );
    Ok(())
}

/// Disharmony map at the frame's own size.
fn predicted_mask(
    disc: &harmonizer_core::networks::Discriminator,
    frame: &Frame,
    depth: usize,
) -> Result<Mask> {
    Ok(match working_size(frame, depth) {
        None => predict_mask(disc, frame)?,
        Some((w, h)) => {
            let (fw, fh) = frame.dims();
            predict_mask(disc, &frame.resize_bilinear(w, h))?.resize_bilinear(fw, fh)
        }
    })
}

fn predict_masks(args: PredictMaskArgs) -> Result<()> {
    let frames = list_frames(&args.frames)?;
    require_file(&args.checkpoint, "checkpoint")?;
    let bundle = ModelBundle::load_for_inference(&args.checkpoint)?;
    create_dir(&args.out)?;
    let depth = bundle.discriminator.config().depth;
    for path in &frames {
        let name = path.file_name().expect("listed files have names");
        let mask = predicted_mask(&bundle.discriminator, &Frame::load_png(path)?, depth)?;
        mask.save_png(&args.out.join(name))?;
    }
    println!("wrote {} masks to {}", frames.len(), args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let manifest = open_manifest(&args.data)?;
    if let Some(dir) = &args.flows {
        require_dir(dir, "flow directory")?;
    }
    let options = EvalOptions {
        resolution: args.resolution,
        estimated_flows: args.flows.clone(),
    };
    let bundle = match &args.checkpoint {
        Some(path) => {
            require_file(path, "checkpoint")?;
            Some(ModelBundle::load_for_inference(path)?)
        }
        None => None,
    };
    let stem = args
        .checkpoint
        .as_deref()
        .and_then(Path::file_stem)
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mask_free;
    let (model, method): (&dyn HarmonizeModel, String) = match &bundle {
        None => (&IdentityModel, "cut-and-paste".into()),
        Some(b) if args.mask_free => {
            mask_free = MaskFreeModel {
                generator: &b.generator,
                discriminator: &b.discriminator,
            };
            (&mask_free, format!("{stem} (mask-free)"))
        }
        Some(b) => (&b.generator, stem),
    };
    let mut report = evaluate_split(model, &manifest, args.split, &options)?;
    report.method = method;
    print!("{}", format_table(std::slice::from_ref(&report)));
    if let Some(path) = &args.out {
        let mut text = report.to_json();
        text.push('\n');
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn fmt_score(v: f64) -> String {
    if v.is_infinite() {
        "-inf".into()
    } else {
        format!("{v:.4}")
    }
}

fn rank(args: RankArgs) -> Result<()> {
    require_file(&args.ballots, "ballot file")?;
    let ballots = read_ballots(&args.ballots)?;
    let fit = plackett_luce(&ballots)?;
    let mut order: Vec<usize> = (0..fit.methods.len()).collect();
    order.sort_by(|&a, &b| {
        fit.log_scores[b]
            .total_cmp(&fit.log_scores[a])
            .then(a.cmp(&b))
    });
    let width = fit
        .methods
        .iter()
        .map(String::len)
        .max()
        .unwrap_or(0)
        .max(6);
    println!("{:<width$}  {:>9}", "Method", "Score");
    for i in order {
        println!(
            "{:<width$}  {:>9}",
            fit.methods[i],
            fmt_score(fit.log_scores[i])
        );
    }
    if let Some(path) = &args.out {
        let scores: serde_json::Map<String, Value> = fit
            .methods
            .iter()
            .zip(&fit.log_scores)
            .map(|(m, s)| {
                let v = if s.is_finite() {
                    Value::from(*s)
                } else {
                    Value::from("-inf")
                };
                (m.clone(), v)
            })
            .collect();
        let json = serde_json::json!({
            "ballots": ballots.len(),
            "scores": scores,
            "worth": fit.methods.iter().cloned().zip(fit.worth.iter().map(|&w| Value::from(w))).collect::<serde_json::Map<_, _>>(),
            "iterations": fit.iterations,
            "converged": fit.converged,
        });
        write_json(path, &json)?;
    }
    Ok(())
}
