//! End-to-end comparison on a planted synthetic world: train the baselines
//! and the aligned models on one split and report test metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::alignment::{
    align_features, select_aligned_channels, AlignmentConfig, DEFAULT_WEIGHT_THRESHOLD,
};
use crate::dataset::{
    core_mask, make_patch_grid, mark_positive, split_patches, Patch, PatchSource, Split,
    DEFAULT_FRACTIONS,
};
use crate::error::Result;
use crate::evaluation::predict_patches;
use crate::models::{build_model, Model, ModelKind, ModelSpec, Normalizer};
use crate::raster::{FeatureStack, Raster};
use crate::synthetic::{gen_world, plant_labels, WorldConfig};
use crate::training::{train, TrainConfig, TrainHistory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub core: usize,
    pub pad: usize,
    pub depth: usize,
    pub widths: Vec<usize>,
    pub hidden: Vec<usize>,
    /// Table 1 epochs are capped at this many.
    pub max_epochs: usize,
    /// Overrides the Table 1 batch size when set.
    pub batch_size: Option<usize>,
    pub weight_threshold: f64,
    pub ranges_m: Vec<f64>,
    pub models: Vec<ModelKind>,
    /// Seeds the split, initialization and epoch shuffles.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: WorldConfig::default(),
            core: 256,
            pad: 64,
            depth: 3,
            widths: vec![8, 16, 32, 64],
            hidden: vec![16, 8],
            max_epochs: 10,
            batch_size: None,
            weight_threshold: DEFAULT_WEIGHT_THRESHOLD,
            ranges_m: crate::alignment::DEFAULT_RANGES_M.to_vec(),
            models: vec![
                ModelKind::Naive,
                ModelKind::Llr,
                ModelKind::Cnn,
                ModelKind::Lacnn,
            ],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutcome {
    pub test_auc: f64,
    pub test_nll: f64,
    pub train_nll: f64,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub positive_ratio: f64,
    pub selected_channels: Vec<String>,
    pub outcomes: BTreeMap<String, ModelOutcome>,
}

impl ExperimentReport {
    pub fn auc(&self, kind: ModelKind) -> Option<f64> {
        self.outcomes.get(kind.name()).map(|o| o.test_auc)
    }
}

/// Inputs shared by every model of one experiment.
pub struct Prepared {
    pub dem: Raster,
    pub base: FeatureStack,
    pub labels: Raster,
    pub patches: Vec<Patch>,
    pub split: Split,
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let (dem, base) = gen_world(&config.world)?;
    let labels = plant_labels(&dem, &base, &config.world)?;
    let mut patches = make_patch_grid(&base.georef, config.core)?;
    mark_positive(&mut patches, &labels);
    let split = split_patches(patches.len(), DEFAULT_FRACTIONS, config.seed)?;
    Ok(Prepared {
        dem,
        base,
        labels,
        patches,
        split,
    })
}

fn spec_for(config: &ExperimentConfig, kind: ModelKind, base: usize, aligned: usize) -> ModelSpec {
    let mut spec = ModelSpec::for_stack(kind, base, aligned);
    spec.depth = config.depth;
    spec.widths = config.widths.clone();
    spec.hidden = config.hidden.clone();
    spec
}

/// Trains one model on `stack` and evaluates it on the test split.
pub fn run_model(
    config: &ExperimentConfig,
    prepared: &Prepared,
    stack: &FeatureStack,
    spec: &ModelSpec,
) -> Result<(Model, ModelOutcome)> {
    let mask = core_mask(&stack.georef, &prepared.patches, &prepared.split.train);
    let mut model = build_model(spec, config.seed)?;
    model.normalizer = Normalizer::fit(stack, &mask);
    let source = PatchSource::new(
        stack,
        &prepared.labels,
        model.normalizer.clone(),
        config.pad,
        spec.size_multiple(),
    )?;
    let mut tc = TrainConfig::preset(spec.kind);
    tc.epochs = tc.epochs.min(config.max_epochs);
    if let Some(b) = config.batch_size {
        tc.batch_size = b;
    }
    tc.seed = config.seed;
    let history = train(&mut model, &source, &prepared.patches, &prepared.split, &tc)?;
    let test = predict_patches(&model, &source, &prepared.patches, &prepared.split.test)?;
    let train_nll =
        predict_patches(&model, &source, &prepared.patches, &prepared.split.train)?.nll()?;
    let outcome = ModelOutcome {
        test_auc: test.roc()?.auc,
        test_nll: test.nll()?,
        train_nll,
        history,
    };
    log::info!(
        "{}: test AUC {:.4}, test NLL {:.5}",
        spec.kind,
        outcome.test_auc,
        outcome.test_nll
    );
    Ok((model, outcome))
}

/// Runs every requested model. Aligned channels are selected from the trained
/// LLR's weights, so LLR is trained whenever an aligned model is requested.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let prepared = prepare(config)?;
    let base_n = prepared.base.len();
    let positives = prepared.labels.values.iter().filter(|v| **v > 0.5).count();
    let mut report = ExperimentReport {
        positive_ratio: positives as f64 / prepared.labels.values.len() as f64,
        selected_channels: Vec::new(),
        outcomes: BTreeMap::new(),
    };
    let wants = |k: ModelKind| config.models.contains(&k);
    let needs_alignment = config.models.iter().any(|k| k.uses_alignment());

    for kind in [ModelKind::Naive, ModelKind::Nn, ModelKind::Cnn] {
        if wants(kind) {
            let (_, o) = run_model(
                config,
                &prepared,
                &prepared.base,
                &spec_for(config, kind, base_n, 0),
            )?;
            report.outcomes.insert(kind.name().into(), o);
        }
    }
    if wants(ModelKind::Llr) || needs_alignment {
        let (llr, o) = run_model(
            config,
            &prepared,
            &prepared.base,
            &spec_for(config, ModelKind::Llr, base_n, 0),
        )?;
        if wants(ModelKind::Llr) {
            report.outcomes.insert(ModelKind::Llr.name().into(), o);
        }
        if needs_alignment {
            let selected =
                select_aligned_channels(&llr.llr_channel_weights()?, config.weight_threshold)?;
            report.selected_channels = selected
                .iter()
                .map(|&i| prepared.base.names[i].clone())
                .collect();
            let mut ac = AlignmentConfig::new(selected);
            ac.ranges_m = config.ranges_m.clone();
            ac.weight_threshold = config.weight_threshold;
            let aligned = align_features(&prepared.base, &prepared.dem, &ac)?;
            let full = prepared.base.concat(&aligned)?;
            for kind in [ModelKind::Lann, ModelKind::Lacnn] {
                if wants(kind) {
                    let spec = spec_for(config, kind, base_n, aligned.len());
                    let (_, o) = run_model(config, &prepared, &full, &spec)?;
                    report.outcomes.insert(kind.name().into(), o);
                }
            }
        }
    }
    Ok(report)
}
