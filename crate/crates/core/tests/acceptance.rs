//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the binary exits non-zero if any criterion fails. It runs without the
//! libtest harness so the lines are never captured.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use landslide::alignment::{align_features, AlignmentConfig};
use landslide::evaluation::{constant_nll, nll_metric, predict_full, predict_whole, roc_curve};
use landslide::experiment::{run_experiment, ExperimentConfig, ExperimentReport};
use landslide::models::{build_model, receptive_field, ModelKind, ModelSpec, Normalizer};
use landslide::nn::gradcheck::{grad_check, standard_suite};
use landslide::raster::{FeatureStack, GeoRef, Raster};
use landslide::synthetic::{gen_world, WorldConfig};

struct Outcome {
    passed: bool,
    detail: String,
}

fn report(id: usize, name: &str, start: Instant, o: &Outcome) {
    println!(
        "criterion {id} [{}] {name}: {} ({:.1}s)",
        if o.passed { "PASS" } else { "FAIL" },
        o.detail,
        start.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// 1

fn naive_nll() -> Outcome {
    // 13 positives in 1000 cells: q = 0.013 exactly
    let labels: Vec<f32> = (0..1000)
        .map(|i| if i % 77 == 0 && i < 13 * 77 { 1.0 } else { 0.0 })
        .collect();
    assert_eq!(labels.iter().filter(|y| **y > 0.5).count(), 13);
    let probs = vec![0.013f32; labels.len()];
    let metric = nll_metric(&probs, &labels, &vec![true; labels.len()]).unwrap();
    let closed = constant_nll(0.013, 0.013);
    let passed = (metric - 0.0694).abs() <= 1e-4 && (closed - 0.0694).abs() <= 1e-4;
    Outcome {
        passed,
        detail: format!("nll_metric {metric:.6}, closed form {closed:.6}, target 0.0694 +/- 1e-4"),
    }
}

// ---------------------------------------------------------------------------
// 2

fn gradient_suite() -> (Outcome, Vec<String>) {
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let mut checks = 0;
    let mut passed = true;
    let mut lines = Vec::new();
    for seed in 0..24u64 {
        for op in standard_suite(seed) {
            let r = grad_check(op.as_ref(), 1e-4, seed);
            checks += 1;
            passed &= r.passed && r.max_rel_error < 1e-4;
            // group by layer; names end in the shape
            let layer = r.op.split(" [").next().unwrap_or(&r.op).split(" n=").next().unwrap_or(&r.op);
            let e = worst.entry(layer.to_string()).or_insert(0.0);
            *e = e.max(r.max_rel_error);
            lines.push(format!("{seed}\t{}\t{:e}", r.op, r.max_rel_error));
        }
    }
    let detail = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    (
        Outcome {
            passed,
            detail: format!("{checks} checks over 24 seeds, worst relative error: {detail}"),
        },
        lines,
    )
}

// ---------------------------------------------------------------------------
// 3

/// Random world with integer-valued elevations (many ties) and holes.
fn random_world(rng: &mut ChaCha8Rng) -> (Raster, FeatureStack) {
    let rows = rng.gen_range(8..=128);
    let cols = rng.gen_range(8..=128);
    let g = GeoRef::new(0.0, 0.0, 10.0, rows, cols).unwrap();
    let levels = rng.gen_range(2..=50);
    let hole = rng.gen_range(0.0..0.2);
    let n = rows * cols;
    let dem_vals: Vec<f32> = (0..n).map(|_| rng.gen_range(0..levels) as f32).collect();
    let dem_valid: Vec<bool> = (0..n).map(|_| !rng.gen_bool(hole)).collect();
    let dem = Raster::new(g, dem_vals, dem_valid).unwrap();
    let mut stack = FeatureStack::empty(g);
    for k in 0..3 {
        let vals: Vec<f32> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let valid: Vec<bool> = (0..n).map(|_| !rng.gen_bool(hole / 2.0)).collect();
        stack
            .push(format!("f{k}"), Raster::new(g, vals, valid).unwrap())
            .unwrap();
    }
    (dem, stack)
}

/// Clockwise angle from north in [0, 2pi).
fn bearing(dr: i64, dc: i64) -> f64 {
    let a = (dc as f64).atan2(-(dr as f64));
    if a < 0.0 {
        a + std::f64::consts::TAU
    } else {
        a
    }
}

/// Independent uphill search: scan the bounding square, keep cells at
/// distance in [r - 1/2, r + 1/2), take the highest, break ties by smallest
/// bearing. Returns the target cell of every valid DEM cell.
fn brute_targets(dem: &Raster, radius_px: f64) -> Vec<Option<usize>> {
    let (rows, cols) = (dem.rows() as i64, dem.cols() as i64);
    let ext = radius_px as i64 + 2;
    let mut ring = Vec::new();
    for dr in -ext..=ext {
        for dc in -ext..=ext {
            let d = ((dr * dr + dc * dc) as f64).sqrt();
            if d >= radius_px - 0.5 && d < radius_px + 0.5 {
                ring.push((dr, dc, bearing(dr, dc)));
            }
        }
    }
    let mut out = vec![None; dem.values.len()];
    for r in 0..rows {
        for c in 0..cols {
            let i = (r * cols + c) as usize;
            if !dem.valid[i] {
                continue;
            }
            let mut best: Option<(f32, f64, usize)> = None;
            for &(dr, dc, b) in &ring {
                let (rr, cc) = (r + dr, c + dc);
                if rr < 0 || cc < 0 || rr >= rows || cc >= cols {
                    continue;
                }
                let j = (rr * cols + cc) as usize;
                if !dem.valid[j] {
                    continue;
                }
                let z = dem.values[j];
                let better = match best {
                    None => true,
                    Some((bz, bb, _)) => z > bz || (z == bz && b < bb),
                };
                if better {
                    best = Some((z, b, j));
                }
            }
            out[i] = Some(best.map_or(i, |(_, _, j)| j));
        }
    }
    out
}

fn brute_gather(targets: &[Option<usize>], src: &Raster) -> (Vec<u32>, Vec<bool>) {
    let mut vals = vec![0f32.to_bits(); targets.len()];
    let mut valid = vec![false; targets.len()];
    for (i, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            if src.valid[i] && src.valid[t] {
                vals[i] = src.values[t].to_bits();
                valid[i] = true;
            }
        }
    }
    (vals, valid)
}

fn stack_bits(s: &FeatureStack) -> Vec<(Vec<u32>, Vec<bool>)> {
    s.channels
        .iter()
        .map(|c| {
            (
                c.values
                    .iter()
                    .map(|v| if v.is_nan() { u32::MAX } else { v.to_bits() })
                    .collect(),
                c.valid.clone(),
            )
        })
        .collect()
}

fn masked_bits(s: &FeatureStack) -> Vec<(Vec<u32>, Vec<bool>)> {
    s.channels
        .iter()
        .map(|c| {
            let v = c
                .values
                .iter()
                .zip(&c.valid)
                .map(|(v, ok)| if *ok { v.to_bits() } else { 0f32.to_bits() })
                .collect();
            (v, c.valid.clone())
        })
        .collect()
}

fn alignment_oracle() -> (Outcome, Vec<u8>) {
    let radii = [3.0, 10.0, 30.0];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worlds, mut mismatches, mut invariance_failures) = (0, 0, 0);
    let mut digest = Vec::new();
    for _ in 0..50 {
        let (dem, stack) = random_world(&mut rng);
        let mut config = AlignmentConfig::new(vec![0, 2]);
        config.ranges_m = radii.iter().map(|r| r * dem.georef.pixel_size).collect();
        let aligned = align_features(&stack, &dem, &config).unwrap();
        let got = masked_bits(&aligned);
        let mut ch = 0;
        for &r in &radii {
            let targets = brute_targets(&dem, r);
            for &k in &config.selected_channels {
                if got[ch] != brute_gather(&targets, &stack.channels[k]) {
                    mismatches += 1;
                }
                ch += 1;
            }
        }
        // constant shift and strictly increasing transform of the DEM
        let mut shifted = dem.clone();
        shifted.values.iter_mut().for_each(|z| *z += 1000.0);
        let mut cubed = dem.clone();
        cubed
            .values
            .iter_mut()
            .for_each(|z| *z = *z * *z * *z + 3.0 * *z);
        for variant in [&shifted, &cubed] {
            if stack_bits(&align_features(&stack, variant, &config).unwrap())
                != stack_bits(&aligned)
            {
                invariance_failures += 1;
            }
        }
        for (v, ok) in stack_bits(&aligned) {
            digest.extend(v.iter().flat_map(|x| x.to_le_bytes()));
            digest.extend(ok.iter().map(|b| *b as u8));
        }
        worlds += 1;
    }
    (
        Outcome {
            passed: mismatches == 0 && invariance_failures == 0,
            detail: format!(
                "{worlds} worlds, radii 3/10/30 px: {mismatches} channel mismatches vs brute force, {invariance_failures} invariance failures"
            ),
        },
        digest,
    )
}

// ---------------------------------------------------------------------------
// 4

fn stitching() -> (Outcome, Vec<u8>) {
    let world = WorldConfig {
        rows: 1000,
        cols: 1000,
        seed: 4,
        lithology_classes: 6,
        rock_age_classes: 3,
        ..WorldConfig::default()
    };
    let (_, stack) = gen_world(&world).unwrap();
    let mut spec = ModelSpec::for_stack(ModelKind::Cnn, stack.len(), 0);
    spec.depth = 3;
    spec.widths = vec![4, 6, 8, 8];
    let rf = receptive_field(&spec).unwrap();
    let mut model = build_model(&spec, 4).unwrap();
    model.normalizer = Normalizer::fit(&stack, &stack.valid_mask());
    let stitched = predict_full(&model, &stack, 500, 64).unwrap();
    let whole = predict_whole(&model, &stack, 64).unwrap();
    let mut max_diff = 0f32;
    let mut valid_mismatch = 0;
    for i in 0..stitched.values.len() {
        if stitched.valid[i] != whole.valid[i] {
            valid_mismatch += 1;
        } else if stitched.valid[i] {
            max_diff = max_diff.max((stitched.values[i] - whole.values[i]).abs());
        }
    }
    let digest = stitched
        .values
        .iter()
        .flat_map(|v| v.to_bits().to_le_bytes())
        .collect();
    (
        Outcome {
            passed: rf <= 64 && max_diff <= 1e-5 && valid_mismatch == 0,
            detail: format!("1000x1000, depth 3, receptive field {rf} <= pad 64, max |stitched - whole| = {max_diff:.2e}"),
        },
        digest,
    )
}

// ---------------------------------------------------------------------------
// 5

fn pairwise_auc(scores: &[f64], labels: &[f32]) -> f64 {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, y)| **y > 0.5)
        .map(|(s, _)| *s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, y)| **y <= 0.5)
        .map(|(s, _)| *s)
        .collect();
    let mut wins = 0.0f64;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() as f64 * neg.len() as f64)
}

fn auc_oracle() -> (Outcome, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0f64;
    let mut digest = Vec::new();
    let mut sets = 0;
    while sets < 200 {
        let n = if sets % 10 == 0 {
            10_000
        } else {
            rng.gen_range(2..=3000)
        };
        let q = rng.gen_range(0.01..0.5);
        let levels = if rng.gen_bool(0.5) {
            rng.gen_range(2..20)
        } else {
            0
        };
        let labels: Vec<f32> = (0..n)
            .map(|_| if rng.gen_bool(q) { 1.0 } else { 0.0 })
            .collect();
        let scores: Vec<f64> = labels
            .iter()
            .map(|y| {
                let s = rng.gen_range(0.0..1.0) + 0.3 * *y as f64;
                if levels > 0 {
                    (s * levels as f64).floor() / levels as f64
                } else {
                    s
                }
            })
            .collect();
        let Ok(curve) = roc_curve(&scores, &labels, &vec![true; n]) else {
            continue; // single-class draw
        };
        worst = worst.max((curve.auc - pairwise_auc(&scores, &labels)).abs());
        digest.extend(curve.auc.to_bits().to_le_bytes());
        sets += 1;
    }
    let example = roc_curve(&[0.9, 0.8, 0.3, 0.2], &[1.0, 0.0, 1.0, 0.0], &[true; 4])
        .unwrap()
        .auc;
    (
        Outcome {
            passed: worst <= 1e-9 && example == 0.75,
            detail: format!("200 sets up to 1e4 points, max |auc - pairwise| = {worst:.1e}; worked example {example}"),
        },
        digest,
    )
}

// ---------------------------------------------------------------------------
// 6

const PLANTED_SEEDS: [u64; 3] = [0, 1, 2];

fn planted_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        world: WorldConfig {
            seed,
            lithology_classes: 8,
            rock_age_classes: 4,
            ..WorldConfig::default()
        },
        max_epochs: 3,
        seed,
        models: vec![
            ModelKind::Naive,
            ModelKind::Llr,
            ModelKind::Cnn,
            ModelKind::Lacnn,
        ],
        ..ExperimentConfig::default()
    }
}

/// Report with wall-clock times removed.
fn canonical(report: &ExperimentReport) -> String {
    let mut r = report.clone();
    for o in r.outcomes.values_mut() {
        o.history.records.iter_mut().for_each(|e| e.seconds = 0.0);
    }
    serde_json::to_string(&r).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn planted_ordering() -> (Outcome, Vec<ExperimentReport>) {
    let reports: Vec<ExperimentReport> = PLANTED_SEEDS
        .iter()
        .map(|&s| run_experiment(&planted_config(s)).unwrap())
        .collect();
    let med = |k: ModelKind| median(reports.iter().map(|r| r.auc(k).unwrap()).collect());
    let (naive, llr, cnn, lacnn) = (
        med(ModelKind::Naive),
        med(ModelKind::Llr),
        med(ModelKind::Cnn),
        med(ModelKind::Lacnn),
    );
    for (s, r) in PLANTED_SEEDS.iter().zip(&reports) {
        println!(
            "    seed {s}: naive {:.4}  llr {:.4}  cnn {:.4}  lacnn {:.4}  (positive ratio {:.4})",
            r.auc(ModelKind::Naive).unwrap(),
            r.auc(ModelKind::Llr).unwrap(),
            r.auc(ModelKind::Cnn).unwrap(),
            r.auc(ModelKind::Lacnn).unwrap(),
            r.positive_ratio
        );
    }
    let passed = naive < llr && llr < lacnn && lacnn >= cnn + 0.02 && (naive - 0.5).abs() < 1e-12;
    (
        Outcome {
            passed,
            detail: format!("median test AUC naive {naive:.4} < llr {llr:.4} < lacnn {lacnn:.4}; cnn {cnn:.4} (+0.02 = {:.4})", cnn + 0.02),
        },
        reports,
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let mut all = true;

    let t = Instant::now();
    let o = naive_nll();
    report(1, "closed-form naive NLL", t, &o);
    all &= o.passed;

    let t = Instant::now();
    let (o, grad_lines) = gradient_suite();
    report(2, "layer gradient suite", t, &o);
    all &= o.passed;

    let t = Instant::now();
    let (o3, align_digest) = alignment_oracle();
    report(3, "alignment brute-force oracle", t, &o3);
    all &= o3.passed;

    let t = Instant::now();
    let (o4, stitch_digest) = stitching();
    report(4, "seam-free stitching", t, &o4);
    all &= o4.passed;

    let t = Instant::now();
    let (o5, auc_digest) = auc_oracle();
    report(5, "AUC pairwise oracle", t, &o5);
    all &= o5.passed;

    let t = Instant::now();
    let (o6, reports) = planted_ordering();
    report(6, "planted-world ordering", t, &o6);
    all &= o6.passed;

    let t = Instant::now();
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md"))
        .unwrap_or_default();
    let o = Outcome {
        passed: ["0.046", "0.87", "Veneto"].iter().all(|s| readme.contains(s)),
        detail: "published reference values (LACNN test NLL 0.046, AUC 0.87) are documented in README.md as targets, not asserted".into(),
    };
    report(7, "reference values documented", t, &o);
    all &= o.passed;

    // 8: rerun 3-5 in full and the planted experiment for its first seed
    let t = Instant::now();
    let same_grad = gradient_suite().1 == grad_lines;
    let same_align = alignment_oracle().1 == align_digest;
    let same_stitch = stitching().1 == stitch_digest;
    let same_auc = auc_oracle().1 == auc_digest;
    let rerun = run_experiment(&planted_config(PLANTED_SEEDS[0])).unwrap();
    let same_planted = canonical(&rerun) == canonical(&reports[0]);
    let o = Outcome {
        passed: same_grad && same_align && same_stitch && same_auc && same_planted,
        detail: format!(
            "identical reruns: gradients {same_grad}, alignment {same_align}, stitching {same_stitch}, auc {same_auc}, planted seed {} {same_planted}",
            PLANTED_SEEDS[0]
        ),
    };
    report(8, "determinism", t, &o);
    all &= o.passed;

    if !all {
        eprintln!("at least one acceptance criterion failed");
        std::process::exit(1);
    }
}
