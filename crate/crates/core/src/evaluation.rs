//! NLL and ROC/AUC metrics, and full-extent susceptibility maps by stitching
//! padded patch predictions.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{extract_input, make_patch_grid, Patch, PatchSource, Window};
use crate::error::{Error, Result};
use crate::models::{receptive_field, Model};
use crate::nn::layers::masked_bce_loss;
use crate::nn::Tensor;
use crate::raster::{FeatureStack, Raster};

/// Mean masked negative log-likelihood of Bernoulli labels.
pub fn nll_metric(probs: &[f32], labels: &[f32], mask: &[bool]) -> Result<f64> {
    masked_bce_loss(&Tensor::vector(probs.to_vec()), labels, mask)
}

/// `-(q log p + (1 - q) log(1 - p))`: the NLL of a constant predictor `p` on
/// labels with positive ratio `q`.
pub fn constant_nll(p: f64, q: f64) -> f64 {
    -(q * p.ln() + (1.0 - q) * (1.0 - p).ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    /// Score threshold of each point after the first (`score >= t` is positive).
    pub thresholds: Vec<f64>,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// ROC over the masked cells, sweeping every distinct score. Tied scores form
/// one step, so the trapezoid area counts tied positive/negative pairs as ½.
pub fn roc_curve(scores: &[f64], labels: &[f32], mask: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() || scores.len() != mask.len() {
        return Err(Error::Shape(format!(
            "roc inputs differ in length: {} scores, {} labels, {} mask",
            scores.len(),
            labels.len(),
            mask.len()
        )));
    }
    let mut items: Vec<(f64, bool)> = scores
        .iter()
        .zip(labels)
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|((s, y), _)| (*s, *y > 0.5))
        .collect();
    let positives = items.iter().filter(|(_, y)| *y).count();
    let negatives = items.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass {
            positives,
            negatives,
        });
    }
    items.sort_by(|a, b| b.0.total_cmp(&a.0));

    let (mut tp, mut fp) = (0u64, 0u64);
    // twice the area in units of one positive/negative pair
    let mut area2: u128 = 0;
    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = Vec::new();
    let mut i = 0;
    while i < items.len() {
        let t = items[i].0;
        let (mut dtp, mut dfp) = (0u64, 0u64);
        while i < items.len() && items[i].0 == t {
            if items[i].1 {
                dtp += 1;
            } else {
                dfp += 1;
            }
            i += 1;
        }
        area2 += dfp as u128 * (2 * tp + dtp) as u128;
        tp += dtp;
        fp += dfp;
        points.push((fp as f64 / negatives as f64, tp as f64 / positives as f64));
        thresholds.push(t);
    }
    let auc = area2 as f64 / (2.0 * positives as f64 * negatives as f64);
    Ok(RocCurve {
        points,
        thresholds,
        auc,
        positives,
        negatives,
    })
}

/// ROC points as tab-separated text.
pub fn roc_table(curves: &[(&str, &RocCurve)]) -> String {
    let mut out = String::from("model\tthreshold\tfpr\ttpr\n");
    for (name, curve) in curves {
        for (k, (fpr, tpr)) in curve.points.iter().enumerate() {
            let t = if k == 0 {
                f64::INFINITY
            } else {
                curve.thresholds[k - 1]
            };
            let _ = writeln!(out, "{name}\t{t}\t{fpr}\t{tpr}");
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Prediction

fn check_stack(model: &Model, stack: &FeatureStack) -> Result<()> {
    if stack.len() != model.spec.in_channels {
        return Err(Error::Shape(format!(
            "model expects {} channels, stack has {}",
            model.spec.in_channels,
            stack.len()
        )));
    }
    Ok(())
}

fn warn_if_short_pad(model: &Model, pad: usize) -> Result<()> {
    if model.spec.kind.is_convolutional() {
        let r = receptive_field(&model.spec)?;
        if r > pad {
            log::warn!(
                "receptive field radius {r} exceeds pad {pad}; stitched patches will show seams"
            );
        }
    }
    Ok(())
}

/// Forward pass over `window`, returning probabilities with the window's shape.
pub fn predict_window(model: &Model, stack: &FeatureStack, window: &Window) -> Result<Tensor<f32>> {
    let x = extract_input(stack, &model.normalizer, window)?;
    model.forward(&x)
}

fn copy_core(out: &mut Raster, probs: &Tensor<f32>, window: &Window, core: &Window) {
    let (dr, dc) = window.offset_of(core);
    let plane = probs.plane_slice(0, 0);
    let cols = out.georef.cols;
    for r in 0..core.rows {
        let src = (dr + r) * window.cols + dc;
        let dst = (core.row0 as usize + r) * cols + core.col0 as usize;
        out.values[dst..dst + core.cols].copy_from_slice(&plane[src..src + core.cols]);
    }
}

fn finish_map(mut out: Raster, stack: &FeatureStack) -> Raster {
    out.valid = stack.valid_mask();
    for (v, ok) in out.values.iter_mut().zip(&out.valid) {
        if !ok {
            *v = 0.0;
        }
    }
    out
}

/// Susceptibility map by tiling the extent into `core`-sized patches,
/// predicting each on a window grown by at least `pad` and keeping the core.
pub fn predict_full(
    model: &Model,
    stack: &FeatureStack,
    core: usize,
    pad: usize,
) -> Result<Raster> {
    check_stack(model, stack)?;
    warn_if_short_pad(model, pad)?;
    let multiple = model.spec.size_multiple();
    let mut out = Raster::filled(stack.georef, 0.0);
    for patch in make_patch_grid(&stack.georef, core)? {
        let window = patch.core.grown_aligned(pad, multiple);
        let probs = predict_window(model, stack, &window)?;
        copy_core(&mut out, &probs, &window, &patch.core);
    }
    Ok(finish_map(out, stack))
}

/// Single forward pass over the whole extent grown by `pad` nodata cells.
/// This is the reference that stitched maps must reproduce.
pub fn predict_whole(model: &Model, stack: &FeatureStack, pad: usize) -> Result<Raster> {
    check_stack(model, stack)?;
    let extent = Window::new(0, 0, stack.georef.rows, stack.georef.cols);
    let window = extent.grown_aligned(pad, model.spec.size_multiple());
    let probs = predict_window(model, stack, &window)?;
    let mut out = Raster::filled(stack.georef, 0.0);
    copy_core(&mut out, &probs, &window, &extent);
    Ok(finish_map(out, stack))
}

/// Scores and labels of every loss-eligible cell in the given patches' cores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitPredictions {
    pub scores: Vec<f32>,
    pub labels: Vec<f32>,
}

impl SplitPredictions {
    pub fn nll(&self) -> Result<f64> {
        nll_metric(&self.scores, &self.labels, &vec![true; self.scores.len()])
    }

    pub fn roc(&self) -> Result<RocCurve> {
        let scores: Vec<f64> = self.scores.iter().map(|s| *s as f64).collect();
        roc_curve(&scores, &self.labels, &vec![true; scores.len()])
    }

    pub fn positive_ratio(&self) -> f64 {
        self.labels.iter().filter(|y| **y > 0.5).count() as f64 / self.labels.len().max(1) as f64
    }
}

/// Predicts each listed patch on its padded window and gathers core cells.
pub fn predict_patches(
    model: &Model,
    source: &PatchSource,
    patches: &[Patch],
    ids: &[usize],
) -> Result<SplitPredictions> {
    let mut out = SplitPredictions::default();
    for &id in ids {
        let s = source.sample(&patches[id])?;
        let p = model.forward(&s.input)?;
        for ((&pv, &y), &m) in p.data().iter().zip(&s.labels).zip(&s.mask) {
            if m {
                out.scores.push(pv);
                out.labels.push(y);
            }
        }
    }
    if out.scores.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(out)
}

/// Same as [`predict_patches`] but reading from a precomputed map.
pub fn gather_from_map(
    map: &Raster,
    labels: &Raster,
    patches: &[Patch],
    ids: &[usize],
) -> Result<SplitPredictions> {
    map.georef.ensure_same(&labels.georef, "labels")?;
    let mut out = SplitPredictions::default();
    for &id in ids {
        let core = &patches[id].core;
        for r in core.row0 as usize..core.row0 as usize + core.rows {
            for c in core.col0 as usize..core.col0 as usize + core.cols {
                let i = map.georef.index(r, c);
                if map.valid[i] && labels.valid[i] {
                    out.scores.push(map.values[i]);
                    out.labels
                        .push(if labels.values[i] > 0.5 { 1.0 } else { 0.0 });
                }
            }
        }
    }
    if out.scores.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(out)
}

/// Writes ROC points as a table.
pub fn write_roc_table(path: &Path, curves: &[(&str, &RocCurve)]) -> Result<()> {
    fs::write(path, roc_table(curves)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, ModelKind, ModelSpec};
    use crate::raster::GeoRef;
    use proptest::prelude::*;

    /// Probability that a random positive outscores a random negative, ties ½.
    fn pairwise_auc(scores: &[f64], labels: &[f32]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] < 0.5 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] > 0.5 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn worked_auc_example() {
        let roc = roc_curve(&[0.9, 0.8, 0.3, 0.2], &[1., 0., 1., 0.], &[true; 4]).unwrap();
        assert_eq!(roc.auc, 0.75);
        assert_eq!(
            roc.points,
            vec![(0., 0.), (0., 0.5), (0.5, 0.5), (0.5, 1.), (1., 1.)]
        );
    }

    #[test]
    fn separated_tied_and_single_class() {
        let m = [true; 4];
        assert_eq!(
            roc_curve(&[0.9, 0.8, 0.3, 0.2], &[1., 1., 0., 0.], &m)
                .unwrap()
                .auc,
            1.0
        );
        assert_eq!(
            roc_curve(&[0.5; 4], &[1., 0., 1., 0.], &m).unwrap().auc,
            0.5
        );
        assert!(matches!(
            roc_curve(&[0.1, 0.2], &[1., 1.], &[true, true]),
            Err(Error::SingleClass { .. })
        ));
        // masked-out negative leaves a single class
        assert!(roc_curve(&[0.1, 0.2], &[1., 0.], &[true, false]).is_err());
    }

    #[test]
    fn nll_cases() {
        let labels = [1.0, 0.0, 1.0, 0.0];
        let probs = [0.8f32, 0.1, 0.6, 0.3];
        let f = |p: f32| p as f64;
        let expected =
            -(f(0.8).ln() + (1.0 - f(0.1)).ln() + f(0.6).ln() + (1.0 - f(0.3)).ln()) / 4.0;
        assert!((nll_metric(&probs, &labels, &[true; 4]).unwrap() - expected).abs() < 1e-12);
        assert!(nll_metric(&[1.0, 0.0], &[1.0, 0.0], &[true; 2]).unwrap() < 1e-9);
        assert!(matches!(
            nll_metric(&[0.5], &[1.0], &[false]),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn constant_predictor_closed_form() {
        // 13 positives in 1000 cells, p = 0.013
        let mut labels = vec![0.0f32; 1000];
        labels[..13].iter_mut().for_each(|v| *v = 1.0);
        let p = 0.013f32;
        let nll = nll_metric(&vec![p; 1000], &labels, &[true; 1000]).unwrap();
        assert!((nll - constant_nll(p as f64, 0.013)).abs() < 1e-12);
        assert!((nll - 0.0694).abs() < 1e-4);
    }

    fn tiny_stack(rows: usize, cols: usize) -> FeatureStack {
        let g = GeoRef::grid(rows, cols);
        let mut s = FeatureStack::empty(g);
        s.push(
            "dem",
            Raster::from_fn(g, |r, c| ((r * 7 + c * 3) % 11) as f32),
        )
        .unwrap();
        s.push(
            "slope",
            Raster::from_fn(g, |r, c| ((r * c) % 5) as f32 * 0.3),
        )
        .unwrap();
        s
    }

    #[test]
    fn naive_map_is_constant_and_covers_valid_cells() {
        let mut stack = tiny_stack(37, 23);
        stack.channels[0].valid[5] = false;
        let m = build_model(&ModelSpec::for_stack(ModelKind::Naive, 2, 0), 0).unwrap();
        let map = predict_full(&m, &stack, 10, 4).unwrap();
        assert!(!map.valid[5]);
        assert_eq!(map.valid_count(), 37 * 23 - 1);
        assert!(map
            .values
            .iter()
            .zip(&map.valid)
            .all(|(v, ok)| !ok || (*v - 0.013).abs() < 1e-7));
    }

    #[test]
    fn stitched_matches_whole_on_small_world() {
        let stack = tiny_stack(70, 45);
        let mut spec = ModelSpec::for_stack(ModelKind::Cnn, 2, 0);
        spec.depth = 2;
        spec.widths = vec![3, 4, 5];
        let r = receptive_field(&spec).unwrap();
        let m = build_model(&spec, 2).unwrap();
        let stitched = predict_full(&m, &stack, 16, r).unwrap();
        let whole = predict_whole(&m, &stack, r).unwrap();
        let diff = stitched
            .values
            .iter()
            .zip(&whole.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(diff < 1e-5, "max diff {diff}");
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_oracle(data in prop::collection::vec((0u8..20, any::<bool>()), 2..300)) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 20.0).collect();
            let labels: Vec<f32> = data.iter().map(|(_, y)| *y as u8 as f32).collect();
            let mask = vec![true; scores.len()];
            let pos = labels.iter().filter(|y| **y > 0.5).count();
            prop_assume!(pos > 0 && pos < labels.len());
            let roc = roc_curve(&scores, &labels, &mask).unwrap();
            prop_assert!((roc.auc - pairwise_auc(&scores, &labels)).abs() < 1e-9);
            for w in roc.points.windows(2) {
                prop_assert!(w[0].0 <= w[1].0 && w[0].1 <= w[1].1);
            }
            prop_assert_eq!(*roc.points.last().unwrap(), (1.0, 1.0));
        }

        #[test]
        fn auc_antisymmetry_without_ties(seed in any::<u64>(), n in 2usize..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..n).map(|i| i as f64 + rng.gen::<f64>() * 0.5).collect();
            let labels: Vec<f32> = (0..n).map(|i| if i == 0 { 1.0 } else if i == 1 { 0.0 } else { rng.gen_range(0..2) as f32 }).collect();
            let mask = vec![true; n];
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let a = roc_curve(&scores, &labels, &mask).unwrap().auc;
            let b = roc_curve(&neg, &labels, &mask).unwrap().auc;
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }
}
