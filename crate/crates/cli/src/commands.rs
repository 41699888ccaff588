use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use landslide::alignment::{
    align_features, select_aligned_channels, AlignmentConfig, DEFAULT_RANGES_M,
    DEFAULT_WEIGHT_THRESHOLD,
};
use landslide::dataset::{
    core_mask, make_patch_grid, mark_positive, read_manifest, split_patches,
    write_manifest as write_patches, Patch, PatchSource, Split, DEFAULT_CORE, DEFAULT_FRACTIONS,
    DEFAULT_PAD,
};
use landslide::evaluation::{gather_from_map, predict_full, write_roc_table, RocCurve};
use landslide::models::{
    build_model, load_checkpoint, save_checkpoint, ModelKind, ModelSpec, Normalizer,
};
use landslide::nn::gradcheck::{grad_check, standard_suite, DEFAULT_TOLERANCE};
use landslide::nn::OptimizerKind;
use landslide::raster::{
    build_feature_stack, load_categorical, load_raster, read_stack, slope_degrees, write_raster,
    write_stack, CategoricalRaster, FeatureStack, Raster, ValidRange,
};
use landslide::render::{curve_color, heatmap, roc_plot};
use landslide::synthetic::{gen_world, label_probability, plant_labels, WorldConfig};
use landslide::training::{train as train_model, TrainConfig};

use crate::config::{require, resolve, usage, write_manifest, CliResult, Failure, Resolved};

pub struct Context {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: usize,
}

impl Context {
    fn resolve<T: Serialize + for<'de> Deserialize<'de>>(
        &self,
        command: &str,
        flags: &T,
    ) -> CliResult<Resolved<T>> {
        resolve(command, flags, self.config.as_deref(), self.seed)
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text)
        .map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))
}

/// `name=path` pairs.
fn named_paths(items: &[String], flag: &str) -> CliResult<Vec<(String, PathBuf)>> {
    items
        .iter()
        .map(|s| match s.split_once('=') {
            Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok((n.to_string(), PathBuf::from(p))),
            _ => usage(format!("--{flag} expects NAME=PATH, got {s:?}")),
        })
        .collect()
}

fn parse_kind(name: &str) -> CliResult<ModelKind> {
    name.parse().map_err(|_| {
        let known: Vec<&str> = ModelKind::ALL.iter().map(|k| k.name()).collect();
        Failure::Usage(format!(
            "unknown model {name:?}; expected one of {}",
            known.join(", ")
        ))
    })
}

/// Reads and concatenates stacks in the order given.
fn load_stacks(dirs: &[PathBuf]) -> CliResult<FeatureStack> {
    let mut it = dirs.iter();
    let Some(first) = it.next() else {
        return usage("at least one --stack is required");
    };
    let mut stack = read_stack(first)?;
    for d in it {
        stack = stack.concat(&read_stack(d)?)?;
    }
    Ok(stack)
}

fn is_aligned_channel(name: &str) -> bool {
    name.contains('@')
}

// ---------------------------------------------------------------------------

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    /// Meters per pixel.
    #[arg(long)]
    pub pixel_size: Option<f64>,
    #[arg(long)]
    pub hills: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub cell_px: Option<usize>,
    #[arg(long)]
    pub lithology_classes: Option<usize>,
    #[arg(long)]
    pub land_cover_classes: Option<usize>,
    #[arg(long)]
    pub rock_family_classes: Option<usize>,
    #[arg(long)]
    pub rock_age_classes: Option<usize>,
    #[arg(long)]
    pub weak_fraction: Option<f64>,
    /// Slope weight of the planted rule.
    #[arg(long)]
    pub a: Option<f64>,
    /// Uphill weak-rock weight of the planted rule.
    #[arg(long)]
    pub b: Option<f64>,
    /// Bias of the planted rule.
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub uphill_range_m: Option<f64>,
}

pub fn synth(ctx: &Context, flags: &SynthArgs) -> CliResult<()> {
    let r = ctx.resolve("synth", flags)?;
    let a = &r.args;
    let out = require(a.out.clone(), "out")?;
    let d = WorldConfig::default();
    let world = WorldConfig {
        rows: a.rows.unwrap_or(d.rows),
        cols: a.cols.unwrap_or(d.cols),
        seed: r.seed,
        pixel_size: a.pixel_size.unwrap_or(d.pixel_size),
        hills: a.hills.unwrap_or(d.hills),
        noise: a.noise.unwrap_or(d.noise),
        cell_px: a.cell_px.unwrap_or(d.cell_px),
        lithology_classes: a.lithology_classes.unwrap_or(d.lithology_classes),
        land_cover_classes: a.land_cover_classes.unwrap_or(d.land_cover_classes),
        rock_family_classes: a.rock_family_classes.unwrap_or(d.rock_family_classes),
        rock_age_classes: a.rock_age_classes.unwrap_or(d.rock_age_classes),
        weak_fraction: a.weak_fraction.unwrap_or(d.weak_fraction),
        a: a.a.unwrap_or(d.a),
        b: a.b.unwrap_or(d.b),
        c: a.c.unwrap_or(d.c),
        uphill_range_m: a.uphill_range_m.unwrap_or(d.uphill_range_m),
    };
    let (dem, stack) = gen_world(&world)?;
    let labels = plant_labels(&dem, &stack, &world)?;
    let prob = label_probability(&dem, &stack, &world)?;
    create_dir(&out)?;
    write_raster(
        &out.join("dem.json"),
        &dem,
        Some(ValidRange::DEM_METERS),
        Some("dem"),
    )?;
    write_raster(&out.join("labels.json"), &labels, None, Some("labels"))?;
    write_raster(
        &out.join("probability.json"),
        &prob,
        None,
        Some("probability"),
    )?;
    write_stack(&out.join("stack"), &stack)?;
    let positives = labels
        .values
        .iter()
        .zip(&labels.valid)
        .filter(|(v, ok)| **ok && **v > 0.5)
        .count();
    log::info!(
        "world {}x{}: {} channels, positive ratio {:.4}",
        world.rows,
        world.cols,
        stack.len(),
        positives as f64 / labels.valid_count().max(1) as f64
    );
    write_manifest(&out, "synth", &r, ctx.threads, &[])
}

// ---------------------------------------------------------------------------

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EncodeArgs {
    /// Categorical layer as NAME=PATH (repeatable); one-hot encoded.
    #[arg(long)]
    pub categorical: Option<Vec<String>>,
    /// Continuous layer as NAME=PATH (repeatable).
    #[arg(long)]
    pub continuous: Option<Vec<String>>,
    /// DEM raster; adds `dem` and, unless given, a derived `slope` channel.
    #[arg(long)]
    pub dem: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn encode(ctx: &Context, flags: &EncodeArgs) -> CliResult<()> {
    let r = ctx.resolve("encode", flags)?;
    let a = &r.args;
    let out = require(a.out.clone(), "out")?;
    let cats = named_paths(a.categorical.as_deref().unwrap_or_default(), "categorical")?;
    let conts = named_paths(a.continuous.as_deref().unwrap_or_default(), "continuous")?;
    let mut inputs: Vec<PathBuf> = cats.iter().chain(&conts).map(|(_, p)| p.clone()).collect();

    let mut cont_rasters: Vec<(String, Raster)> = Vec::new();
    for (name, path) in &conts {
        cont_rasters.push((name.clone(), load_raster(path, None)?));
    }
    if let Some(dem_path) = &a.dem {
        let dem = load_raster(dem_path, Some(ValidRange::DEM_METERS))?;
        if !conts.iter().any(|(n, _)| n == "slope") {
            cont_rasters.push(("slope".into(), slope_degrees(&dem)));
        }
        cont_rasters.push(("dem".into(), dem));
        inputs.push(dem_path.clone());
    }
    let cat_rasters: Vec<(String, CategoricalRaster)> = cats
        .iter()
        .map(|(n, p)| Ok((n.clone(), load_categorical(p)?)))
        .collect::<CliResult<_>>()?;
    if cont_rasters.is_empty() && cat_rasters.is_empty() {
        return usage("nothing to encode: give --categorical, --continuous or --dem");
    }
    let cont_refs: Vec<(&str, &Raster)> =
        cont_rasters.iter().map(|(n, r)| (n.as_str(), r)).collect();
    let cat_refs: Vec<(&str, &CategoricalRaster)> =
        cat_rasters.iter().map(|(n, c)| (n.as_str(), c)).collect();
    let stack = build_feature_stack(&cont_refs, &cat_refs)?;
    write_stack(&out, &stack)?;
    log::info!("encoded {} channels", stack.len());
    write_manifest(&out, "encode", &r, ctx.threads, &inputs)
}

// ---------------------------------------------------------------------------

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AlignArgs {
    /// Base feature stack directory.
    #[arg(long)]
    pub stack: Option<PathBuf>,
    #[arg(long)]
    pub dem: Option<PathBuf>,
    /// Channels to align, by name (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<String>>,
    /// Trained LLR checkpoint; channels with |weight| >= threshold are aligned.
    #[arg(long)]
    pub llr: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Looking distances in meters (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub ranges: Option<Vec<f64>>,
    /// Output directory for the aligned channels only.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn align(ctx: &Context, flags: &AlignArgs) -> CliResult<()> {
    let r = ctx.resolve("align", flags)?;
    let a = &r.args;
    let out = require(a.out.clone(), "out")?;
    let stack_dir = require(a.stack.clone(), "stack")?;
    let dem_path = require(a.dem.clone(), "dem")?;
    let threshold = a.threshold.unwrap_or(DEFAULT_WEIGHT_THRESHOLD);
    let stack = read_stack(&stack_dir)?;
    let dem = load_raster(&dem_path, Some(ValidRange::DEM_METERS))?;
    let mut inputs = vec![stack_dir, dem_path];
    let mut selected = match (&a.channels, &a.llr) {
        (Some(names), None) => names
            .iter()
            .map(|n| {
                stack
                    .index_of(n)
                    .ok_or_else(|| Failure::Data(format!("stack has no channel {n:?}")))
            })
            .collect::<CliResult<Vec<usize>>>()?,
        (None, Some(dir)) => {
            let (llr, _) = load_checkpoint(dir)?;
            if llr.spec.in_channels != stack.len() {
                return Err(Failure::Data(format!(
                    "LLR was trained on {} channels, stack has {}",
                    llr.spec.in_channels,
                    stack.len()
                )));
            }
            inputs.push(dir.clone());
            select_aligned_channels(&llr.llr_channel_weights()?, threshold)?
        }
        _ => return usage("give exactly one of --channels or --llr"),
    };
    selected.sort_unstable();
    selected.dedup();
    let mut config = AlignmentConfig::new(selected);
    config.ranges_m = a
        .ranges
        .clone()
        .unwrap_or_else(|| DEFAULT_RANGES_M.to_vec());
    config.weight_threshold = threshold;
    let aligned = align_features(&stack, &dem, &config)?;
    write_stack(&out, &aligned)?;
    log::info!(
        "aligned {} channels at {} ranges -> {} channels",
        config.selected_channels.len(),
        config.ranges_m.len(),
        aligned.len()
    );
    write_manifest(&out, "align", &r, ctx.threads, &inputs)
}

// ---------------------------------------------------------------------------

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SplitArgs {
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Patch core size in pixels.
    #[arg(long)]
    pub core: Option<usize>,
    /// Train, validation and test fractions (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn split(ctx: &Context, flags: &SplitArgs) -> CliResult<()> {
    let r = ctx.resolve("split", flags)?;
    let a = &r.args;
    let out = require(a.out.clone(), "out")?;
    let labels_path = require(a.labels.clone(), "labels")?;
    let fractions: [f64; 3] = match &a.fractions {
        None => DEFAULT_FRACTIONS,
        Some(f) => f.as_slice().try_into().map_err(|_| {
            Failure::Usage(format!("--fractions needs three values, got {}", f.len()))
        })?,
    };
    let labels = load_raster(&labels_path, None)?;
    let mut patches = make_patch_grid(&labels.georef, a.core.unwrap_or(DEFAULT_CORE))?;
    mark_positive(&mut patches, &labels);
    let split = split_patches(patches.len(), fractions, r.seed)?;
    create_dir(&out)?;
    write_patches(&out.join("patches.tsv"), &patches, &split)?;
    log::info!(
        "{} patches: {} train / {} val / {} test",
        patches.len(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    write_manifest(&out, "split", &r, ctx.threads, &[labels_path])
}

// ---------------------------------------------------------------------------

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    /// naive, llr, nn, lann, cnn or lacnn.
    #[arg(long)]
    pub model: Option<String>,
    /// Feature stack directory (repeatable; concatenated in order, base first).
    #[arg(long)]
    pub stack: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Patch manifest written by `split`.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// sgd or adam.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub oversample: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub plateau_factor: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Context padding around each patch core.
    #[arg(long)]
    pub pad: Option<usize>,
    /// Number of pooling stages of the convolutional models.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Channel widths per stage (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    /// Hidden layer sizes of the per-pixel perceptrons (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
}

fn parse_optimizer(name: &str) -> CliResult<OptimizerKind> {
    match name.to_ascii_lowercase().as_str() {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        _ => usage(format!("unknown optimizer {name:?}; expected sgd or adam")),
    }
}

pub fn train(ctx: &Context, flags: &TrainArgs) -> CliResult<()> {
    let r = ctx.resolve("train", flags)?;
    let a = &r.args;
    let kind = parse_kind(&require(a.model.clone(), "model")?)?;
    let out = require(a.out.clone(), "out")?;
    let stack_dirs = require(a.stack.clone(), "stack")?;
    let labels_path = require(a.labels.clone(), "labels")?;
    let split_path = require(a.split.clone(), "split")?;

    let stack = load_stacks(&stack_dirs)?;
    let labels = load_raster(&labels_path, None)?;
    stack
        .georef
        .ensure_same(&labels.georef, "labels vs stack")?;
    let (patches, split) = read_manifest(&split_path)?;

    let aligned = stack.names.iter().filter(|n| is_aligned_channel(n)).count();
    let base = stack.len() - aligned;
    if kind.uses_alignment() {
        if aligned == 0 {
            return Err(Failure::Data(format!(
                "{kind} needs aligned channels; pass the `align` output as a second --stack"
            )));
        }
        if stack.names[base..].iter().any(|n| !is_aligned_channel(n)) {
            return Err(Failure::Data(
                "aligned channels must follow the base channels; list the base --stack first"
                    .into(),
            ));
        }
    } else if aligned > 0 {
        return Err(Failure::Data(format!(
            "{kind} does not use aligned channels; pass only the base stack"
        )));
    }

    let mut spec = ModelSpec::for_stack(kind, base, aligned);
    if let Some(d) = a.depth {
        spec.depth = d;
    }
    if let Some(w) = &a.widths {
        spec.widths = w.clone();
    }
    if let Some(h) = &a.hidden {
        spec.hidden = h.clone();
    }
    let mut tc = TrainConfig::preset(kind);
    if let Some(o) = &a.optimizer {
        tc.optimizer = parse_optimizer(o)?;
    }
    tc.lr = a.lr.unwrap_or(tc.lr);
    tc.epochs = a.epochs.unwrap_or(tc.epochs);
    tc.batch_size = a.batch_size.unwrap_or(tc.batch_size);
    tc.oversample = a.oversample.unwrap_or(tc.oversample);
    tc.patience = a.patience.unwrap_or(tc.patience);
    tc.plateau_factor = a.plateau_factor.unwrap_or(tc.plateau_factor);
    tc.weight_decay = a.weight_decay.unwrap_or(tc.weight_decay);
    tc.seed = r.seed;
    let pad = a.pad.unwrap_or(DEFAULT_PAD);

    let mut model = build_model(&spec, r.seed)?;
    model.normalizer = Normalizer::fit(&stack, &core_mask(&stack.georef, &patches, &split.train));
    let source = PatchSource::new(
        &stack,
        &labels,
        model.normalizer.clone(),
        pad,
        spec.size_multiple(),
    )?;
    log::info!(
        "training {kind}: {} channels, {} parameters, {} epochs",
        stack.len(),
        model.num_parameters(),
        tc.epochs
    );
    let history = train_model(&mut model, &source, &patches, &split, &tc)?;

    create_dir(&out)?;
    save_checkpoint(&out, &model, None)?;
    history.write(&out.join("history.tsv"))?;
    let mut inputs = stack_dirs;
    inputs.extend([labels_path, split_path]);
    write_manifest(&out, "train", &r, ctx.threads, &inputs)
}

// ---------------------------------------------------------------------------

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PredictArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Feature stack directory (repeatable, same order as in training).
    #[arg(long)]
    pub stack: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub core: Option<usize>,
    #[arg(long)]
    pub pad: Option<usize>,
    /// Probability mapped to full red in the heatmap (default: map maximum).
    #[arg(long)]
    pub vmax: Option<f32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn predict(ctx: &Context, flags: &PredictArgs) -> CliResult<()> {
    let r = ctx.resolve("predict", flags)?;
    let a = &r.args;
    let out = require(a.out.clone(), "out")?;
    let model_dir = require(a.model.clone(), "model")?;
    let stack_dirs = require(a.stack.clone(), "stack")?;
    let (model, _) = load_checkpoint(&model_dir)?;
    let stack = load_stacks(&stack_dirs)?;
    let map = predict_full(
        &model,
        &stack,
        a.core.unwrap_or(DEFAULT_CORE),
        a.pad.unwrap_or(DEFAULT_PAD),
    )?;
    let vmax = a.vmax.unwrap_or_else(|| {
        map.values
            .iter()
            .zip(&map.valid)
            .filter(|(_, ok)| **ok)
            .fold(0.0f32, |m, (v, _)| m.max(*v))
    });
    create_dir(&out)?;
    write_raster(
        &out.join("probability.json"),
        &map,
        None,
        Some("probability"),
    )?;
    heatmap(&map, vmax).write_png(&out.join("heatmap.png"))?;
    let mut inputs = vec![model_dir];
    inputs.extend(stack_dirs);
    write_manifest(&out, "predict", &r, ctx.threads, &inputs)
}

// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SetArg {
    Train,
    Val,
    Test,
    All,
}

fn set_ids(split: &Split, patches: &[Patch], set: SetArg) -> Vec<usize> {
    match set {
        SetArg::Train => split.train.clone(),
        SetArg::Val => split.val.clone(),
        SetArg::Test => split.test.clone(),
        SetArg::All => (0..patches.len()).collect(),
    }
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    /// Probability raster written by `predict`.
    #[arg(long)]
    pub prediction: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Which patches to score (default test).
    #[arg(long)]
    pub set: Option<SetArg>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Metrics {
    set: SetArg,
    cells: usize,
    positives: usize,
    positive_ratio: f64,
    nll: f64,
    auc: Option<f64>,
}

pub fn eval(ctx: &Context, flags: &EvalArgs) -> CliResult<()> {
    let r = ctx.resolve("eval", flags)?;
    let a = &r.args;
    let out = require(a.out.clone(), "out")?;
    let pred_path = require(a.prediction.clone(), "prediction")?;
    let labels_path = require(a.labels.clone(), "labels")?;
    let split_path = require(a.split.clone(), "split")?;
    let set = a.set.unwrap_or(SetArg::Test);
    let map = load_raster(&pred_path, None)?;
    let labels = load_raster(&labels_path, None)?;
    let (patches, split) = read_manifest(&split_path)?;
    let preds = gather_from_map(&map, &labels, &patches, &set_ids(&split, &patches, set))?;
    let auc = match preds.roc() {
        Ok(c) => Some(c.auc),
        Err(e) => {
            log::warn!("{e}; AUC undefined");
            None
        }
    };
    let metrics = Metrics {
        set,
        cells: preds.scores.len(),
        positives: preds.labels.iter().filter(|y| **y > 0.5).count(),
        positive_ratio: preds.positive_ratio(),
        nll: preds.nll()?,
        auc,
    };
    match metrics.auc {
        Some(auc) => println!("nll {:.5}  auc {:.4}", metrics.nll, auc),
        None => println!("nll {:.5}  auc undefined", metrics.nll),
    }
    create_dir(&out)?;
    write_text(
        &out.join("metrics.json"),
        &(serde_json::to_string_pretty(&metrics).expect("metrics serialize") + "\n"),
    )?;
    write_manifest(
        &out,
        "eval",
        &r,
        ctx.threads,
        &[pred_path, labels_path, split_path],
    )
}

// ---------------------------------------------------------------------------

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RocArgs {
    /// Probability raster as NAME=PATH (repeatable).
    #[arg(long)]
    pub prediction: Option<Vec<String>>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub set: Option<SetArg>,
    /// Side length of the plot in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn roc(ctx: &Context, flags: &RocArgs) -> CliResult<()> {
    let r = ctx.resolve("roc", flags)?;
    let a = &r.args;
    let out = require(a.out.clone(), "out")?;
    let preds = named_paths(&require(a.prediction.clone(), "prediction")?, "prediction")?;
    let labels_path = require(a.labels.clone(), "labels")?;
    let split_path = require(a.split.clone(), "split")?;
    let labels = load_raster(&labels_path, None)?;
    let (patches, split) = read_manifest(&split_path)?;
    let ids = set_ids(&split, &patches, a.set.unwrap_or(SetArg::Test));

    let mut curves: Vec<(String, RocCurve)> = Vec::new();
    for (name, path) in &preds {
        let map = load_raster(path, None)?;
        curves.push((
            name.clone(),
            gather_from_map(&map, &labels, &patches, &ids)?.roc()?,
        ));
    }
    let refs: Vec<(&str, &RocCurve)> = curves.iter().map(|(n, c)| (n.as_str(), c)).collect();
    create_dir(&out)?;
    write_roc_table(&out.join("roc.tsv"), &refs)?;
    roc_plot(&refs, a.size.unwrap_or(600)).write_png(&out.join("roc.png"))?;
    let mut legend = String::from("model\tauc\tcolor\n");
    for (k, (name, c)) in curves.iter().enumerate() {
        let [r, g, b, _] = curve_color(k);
        legend.push_str(&format!("{name}\t{:.6}\t#{r:02x}{g:02x}{b:02x}\n", c.auc));
        println!("{name}: AUC {:.4}", c.auc);
    }
    write_text(&out.join("auc.tsv"), &legend)?;
    let mut inputs: Vec<PathBuf> = preds.into_iter().map(|(_, p)| p).collect();
    inputs.extend([labels_path, split_path]);
    write_manifest(&out, "roc", &r, ctx.threads, &inputs)
}

// ---------------------------------------------------------------------------

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GradcheckArgs {
    /// Number of random shapes per layer.
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Maximum relative error.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Directory for the report (optional).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn gradcheck(ctx: &Context, flags: &GradcheckArgs) -> CliResult<()> {
    let r = ctx.resolve("gradcheck", flags)?;
    let a = &r.args;
    let seeds = a.seeds.unwrap_or(20);
    let tolerance = a.tolerance.unwrap_or(DEFAULT_TOLERANCE);
    let mut report = String::from("seed\top\tmax_rel_error\tprobes\tpassed\n");
    let mut failures = 0;
    for s in 0..seeds {
        let seed = r.seed.wrapping_add(s);
        for op in standard_suite(seed) {
            let rep = grad_check(op.as_ref(), tolerance, seed);
            if !rep.passed {
                failures += 1;
                log::error!(
                    "{} (seed {seed}): max relative error {:.3e}",
                    rep.op,
                    rep.max_rel_error
                );
            }
            report.push_str(&format!(
                "{seed}\t{}\t{:.3e}\t{}\t{}\n",
                rep.op, rep.max_rel_error, rep.probes, rep.passed
            ));
        }
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_text(&out.join("gradcheck.tsv"), &report)?;
        write_manifest(out, "gradcheck", &r, ctx.threads, &[])?;
    }
    if failures > 0 {
        return Err(Failure::Data(format!(
            "{failures} gradient checks exceeded tolerance {tolerance:e}"
        )));
    }
    println!("all layers pass at tolerance {tolerance:e} over {seeds} seeds");
    Ok(())
}
