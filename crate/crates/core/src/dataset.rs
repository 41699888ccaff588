//! Patch grid, train/val/test split, oversampling and window extraction.
//!
//! Windows live in global pixel coordinates and may reach past the raster
//! extent; cells outside the extent read as nodata. Every model input window
//! starts on a multiple of the model's pooling period, so all windows share one
//! global pooling grid and overlapping predictions agree exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Normalizer;
use crate::nn::Tensor;
use crate::raster::{FeatureStack, GeoRef, Raster};

pub const DEFAULT_CORE: usize = 500;
pub const DEFAULT_PAD: usize = 64;
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.8, 0.1, 0.1];
pub const DEFAULT_OVERSAMPLE: usize = 5;

/// Half-open rectangle `[row0, row0 + rows) x [col0, col0 + cols)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub row0: i64,
    pub col0: i64,
    pub rows: usize,
    pub cols: usize,
}

fn align_down(v: i64, m: usize) -> i64 {
    v.div_euclid(m as i64) * m as i64
}

fn align_up(v: i64, m: usize) -> i64 {
    -align_down(-v, m)
}

impl Window {
    pub fn new(row0: i64, col0: i64, rows: usize, cols: usize) -> Self {
        Window {
            row0,
            col0,
            rows,
            cols,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The smallest window containing `self` grown by `pad` on every side
    /// whose corners sit on multiples of `multiple`.
    pub fn grown_aligned(&self, pad: usize, multiple: usize) -> Window {
        let m = multiple.max(1);
        let p = pad as i64;
        let r0 = align_down(self.row0 - p, m);
        let c0 = align_down(self.col0 - p, m);
        let r1 = align_up(self.row0 + self.rows as i64 + p, m);
        let c1 = align_up(self.col0 + self.cols as i64 + p, m);
        Window::new(r0, c0, (r1 - r0) as usize, (c1 - c0) as usize)
    }

    pub fn contains(&self, row: i64, col: i64) -> bool {
        row >= self.row0
            && col >= self.col0
            && row < self.row0 + self.rows as i64
            && col < self.col0 + self.cols as i64
    }

    /// Position of `inner`'s origin relative to `self`.
    pub fn offset_of(&self, inner: &Window) -> (usize, usize) {
        (
            (inner.row0 - self.row0) as usize,
            (inner.col0 - self.col0) as usize,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub id: usize,
    /// Cells this patch is responsible for (loss, metrics).
    pub core: Window,
    pub has_positive: bool,
}

impl Patch {
    /// The core grown by exactly `pad` on every side.
    pub fn padded(&self, pad: usize) -> Window {
        let p = pad as i64;
        Window::new(
            self.core.row0 - p,
            self.core.col0 - p,
            self.core.rows + 2 * pad,
            self.core.cols + 2 * pad,
        )
    }
}

/// Cells inside the cores of the listed patches.
pub fn core_mask(georef: &GeoRef, patches: &[Patch], ids: &[usize]) -> Vec<bool> {
    let mut mask = vec![false; georef.len()];
    for &id in ids {
        let core = &patches[id].core;
        for r in core.row0 as usize..core.row0 as usize + core.rows {
            let start = georef.index(r, core.col0 as usize);
            mask[start..start + core.cols]
                .iter_mut()
                .for_each(|m| *m = true);
        }
    }
    mask
}

/// Tiles the extent with `core x core` windows; the last row and column of
/// tiles are clipped to the extent.
pub fn make_patch_grid(georef: &GeoRef, core: usize) -> Result<Vec<Patch>> {
    if core == 0 {
        return Err(Error::Config("patch core size must be positive".into()));
    }
    let mut patches = Vec::new();
    for r0 in (0..georef.rows).step_by(core) {
        for c0 in (0..georef.cols).step_by(core) {
            let rows = core.min(georef.rows - r0);
            let cols = core.min(georef.cols - c0);
            patches.push(Patch {
                id: patches.len(),
                core: Window::new(r0 as i64, c0 as i64, rows, cols),
                has_positive: false,
            });
        }
    }
    Ok(patches)
}

/// Marks patches whose core contains at least one valid positive label.
pub fn mark_positive(patches: &mut [Patch], labels: &Raster) {
    for p in patches {
        p.has_positive = false;
        'scan: for r in p.core.row0..p.core.row0 + p.core.rows as i64 {
            for c in p.core.col0..p.core.col0 + p.core.cols as i64 {
                let i = labels.georef.index(r as usize, c as usize);
                if labels.valid[i] && labels.values[i] > 0.5 {
                    p.has_positive = true;
                    break 'scan;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn get(&self, kind: SplitKind) -> &[usize] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }

    pub fn kind_of(&self, id: usize) -> Option<SplitKind> {
        [SplitKind::Train, SplitKind::Val, SplitKind::Test]
            .into_iter()
            .find(|k| self.get(*k).contains(&id))
    }
}

/// Seeded random split of `n` patch ids: `round(f_train n)` train,
/// `round(f_test n)` test, the remainder validation.
pub fn split_patches(n: usize, fractions: [f64; 3], seed: u64) -> Result<Split> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be >= 0 and sum to 1, got {fractions:?}"
        )));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_test = ((fractions[2] * n as f64).round() as usize).min(n - n_train);
    let mut split = Split {
        train: ids[..n_train].to_vec(),
        test: ids[n_train..n_train + n_test].to_vec(),
        val: ids[n_train + n_test..].to_vec(),
    };
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Training epoch order: every patch once, patches with a positive label
/// `ratio` times in total, shuffled.
pub fn oversample(
    train: &[usize],
    patches: &[Patch],
    ratio: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut order = Vec::new();
    for &id in train {
        let times = if patches[id].has_positive {
            ratio.max(1)
        } else {
            1
        };
        order.extend(std::iter::repeat(id).take(times));
    }
    order.shuffle(rng);
    order
}

// ---------------------------------------------------------------------------
// Extraction

/// Normalized channels over `window`; nodata and out-of-extent cells are 0.
pub fn extract_input(
    stack: &FeatureStack,
    normalizer: &Normalizer,
    window: &Window,
) -> Result<Tensor<f32>> {
    if normalizer.shift.len() != stack.len() {
        return Err(Error::Shape(format!(
            "normalizer has {} channels, stack {}",
            normalizer.shift.len(),
            stack.len()
        )));
    }
    let (rows, cols) = (stack.georef.rows as i64, stack.georef.cols as i64);
    let mut t = Tensor::zeros([1, stack.len(), window.rows, window.cols]);
    // the in-extent part of the window
    let r_lo = window.row0.max(0);
    let r_hi = (window.row0 + window.rows as i64).min(rows);
    let c_lo = window.col0.max(0);
    let c_hi = (window.col0 + window.cols as i64).min(cols);
    for (ch, raster) in stack.channels.iter().enumerate() {
        let dst = t.plane_slice_mut(0, ch);
        for r in r_lo..r_hi {
            let src_row = (r * cols) as usize;
            let dst_row = ((r - window.row0) as usize) * window.cols;
            for c in c_lo..c_hi {
                let i = src_row + c as usize;
                if raster.valid[i] {
                    dst[dst_row + (c - window.col0) as usize] =
                        normalizer.apply(ch, raster.values[i]);
                }
            }
        }
    }
    Ok(t)
}

/// Labels and loss mask over `window`. The mask is set on cells of `core`
/// where both the label and `valid` (typically the stack's valid mask) hold.
pub fn extract_targets(
    labels: &Raster,
    valid: &[bool],
    window: &Window,
    core: &Window,
) -> (Vec<f32>, Vec<bool>) {
    let cols = labels.georef.cols as i64;
    let mut y = vec![0.0f32; window.len()];
    let mut mask = vec![false; window.len()];
    for r in core.row0..core.row0 + core.rows as i64 {
        for c in core.col0..core.col0 + core.cols as i64 {
            if !window.contains(r, c)
                || r < 0
                || c < 0
                || r >= labels.georef.rows as i64
                || c >= cols
            {
                continue;
            }
            let i = (r * cols + c) as usize;
            let o = ((r - window.row0) as usize) * window.cols + (c - window.col0) as usize;
            if labels.valid[i] && valid[i] {
                y[o] = if labels.values[i] > 0.5 { 1.0 } else { 0.0 };
                mask[o] = true;
            }
        }
    }
    (y, mask)
}

/// One training or evaluation example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: Tensor<f32>,
    pub labels: Vec<f32>,
    pub mask: Vec<bool>,
}

impl Sample {
    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Everything needed to cut samples out of one study area.
pub struct PatchSource<'a> {
    pub stack: &'a FeatureStack,
    pub labels: &'a Raster,
    pub valid: Vec<bool>,
    pub normalizer: Normalizer,
    pub pad: usize,
    pub multiple: usize,
}

impl<'a> PatchSource<'a> {
    pub fn new(
        stack: &'a FeatureStack,
        labels: &'a Raster,
        normalizer: Normalizer,
        pad: usize,
        multiple: usize,
    ) -> Result<Self> {
        stack.georef.ensure_same(&labels.georef, "labels")?;
        let mut valid = stack.valid_mask();
        for (v, l) in valid.iter_mut().zip(&labels.valid) {
            *v &= *l;
        }
        Ok(PatchSource {
            stack,
            labels,
            valid,
            normalizer,
            pad,
            multiple,
        })
    }

    pub fn window_for(&self, patch: &Patch) -> Window {
        patch.core.grown_aligned(self.pad, self.multiple)
    }

    pub fn sample(&self, patch: &Patch) -> Result<Sample> {
        let w = self.window_for(patch);
        let input = extract_input(self.stack, &self.normalizer, &w)?;
        let (labels, mask) = extract_targets(self.labels, &self.valid, &w, &patch.core);
        Ok(Sample {
            input,
            labels,
            mask,
        })
    }
}

// ---------------------------------------------------------------------------
// Manifest

/// Tab-separated listing of every patch with its split.
pub fn write_manifest(path: &Path, patches: &[Patch], split: &Split) -> Result<()> {
    let mut out = String::from("id\trow0\tcol0\trows\tcols\thas_positive\tsplit\n");
    for p in patches {
        let kind = split.kind_of(p.id).map_or("none", SplitKind::name);
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            p.id, p.core.row0, p.core.col0, p.core.rows, p.core.cols, p.has_positive as u8, kind
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<(Vec<Patch>, Split)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad =
        |line: usize, why: &str| Error::Config(format!("{}:{}: {why}", path.display(), line + 1));
    let mut patches = Vec::new();
    let mut split = Split::default();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(bad(n, "expected 7 fields"));
        }
        let num = |i: usize| f[i].parse::<i64>().map_err(|_| bad(n, "bad number"));
        let id = num(0)? as usize;
        if id != patches.len() {
            return Err(bad(n, "ids must be consecutive from 0"));
        }
        patches.push(Patch {
            id,
            core: Window::new(num(1)?, num(2)?, num(3)? as usize, num(4)? as usize),
            has_positive: num(5)? != 0,
        });
        match f[6] {
            "train" => split.train.push(id),
            "val" => split.val.push(id),
            "test" => split.test.push(id),
            "none" => {}
            _ => return Err(bad(n, "unknown split")),
        }
    }
    Ok((patches, split))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_covers_extent_once() {
        let g = GeoRef::grid(628, 1100);
        let patches = make_patch_grid(&g, 500).unwrap();
        assert_eq!(patches.len(), 2 * 3);
        let mut hits = vec![0u8; g.len()];
        for p in &patches {
            for r in 0..p.core.rows {
                for c in 0..p.core.cols {
                    hits[g.index(p.core.row0 as usize + r, p.core.col0 as usize + c)] += 1;
                }
            }
        }
        assert!(hits.iter().all(|h| *h == 1));
    }

    #[test]
    fn aligned_growth() {
        let w = Window::new(500, 0, 128, 500).grown_aligned(64, 8);
        assert_eq!((w.row0, w.col0), (432, -64));
        assert_eq!(w.row0 + w.rows as i64, 696);
        assert_eq!(w.col0 + w.cols as i64, 568);
    }

    #[test]
    fn split_counts_and_determinism() {
        let s = split_patches(100, DEFAULT_FRACTIONS, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        assert_eq!(s, split_patches(100, DEFAULT_FRACTIONS, 3).unwrap());
        assert_ne!(s, split_patches(100, DEFAULT_FRACTIONS, 4).unwrap());
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(split_patches(10, [0.5, 0.5, 0.5], 0).is_err());
    }

    #[test]
    fn oversampling_repeats_positive_patches() {
        let patches: Vec<Patch> = (0..4)
            .map(|id| Patch {
                id,
                core: Window::new(0, 0, 1, 1),
                has_positive: id % 2 == 0,
            })
            .collect();
        let order = oversample(
            &[0, 1, 2, 3],
            &patches,
            5,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert_eq!(order.len(), 12);
        assert_eq!(order.iter().filter(|i| **i == 2).count(), 5);
        assert_eq!(order.iter().filter(|i| **i == 3).count(), 1);
    }

    #[test]
    fn positives_only_count_inside_core() {
        let g = GeoRef::grid(4, 4);
        let mut labels = Raster::filled(g, 0.0);
        labels.values[g.index(0, 3)] = 1.0;
        let mut patches = make_patch_grid(&g, 2).unwrap();
        mark_positive(&mut patches, &labels);
        let flags: Vec<bool> = patches.iter().map(|p| p.has_positive).collect();
        assert_eq!(flags, vec![false, true, false, false]);
    }

    #[test]
    fn extraction_fills_outside_with_zero() {
        let g = GeoRef::grid(3, 3);
        let mut stack = FeatureStack::empty(g);
        let mut r = Raster::from_fn(g, |r, c| (r * 3 + c) as f32 + 1.0);
        r.valid[4] = false;
        stack.push("dem", r).unwrap();
        let n = Normalizer::identity(1);
        let t = extract_input(&stack, &n, &Window::new(-1, -1, 4, 4)).unwrap();
        assert_eq!(
            t.data(),
            &[0., 0., 0., 0., 0., 1., 2., 3., 0., 4., 0., 6., 0., 7., 8., 9.]
        );
        let labels = Raster::filled(g, 1.0);
        let (y, m) = extract_targets(
            &labels,
            &stack.valid_mask(),
            &Window::new(-1, -1, 4, 4),
            &Window::new(0, 0, 2, 2),
        );
        assert_eq!(m.iter().filter(|v| **v).count(), 3);
        assert_eq!(y[5], 1.0);
        assert!(!m[10]);
    }

    #[test]
    fn padded_read_cropped_equals_core_read() {
        let g = GeoRef::grid(20, 30);
        let mut stack = FeatureStack::empty(g);
        stack
            .push("dem", Raster::from_fn(g, |r, c| (r * 30 + c) as f32))
            .unwrap();
        let n = Normalizer::identity(1);
        let patches = make_patch_grid(&g, 12).unwrap();
        assert_eq!(patches.len(), 6);
        for p in &patches {
            let padded = extract_input(&stack, &n, &p.padded(5)).unwrap();
            let core = extract_input(&stack, &n, &p.core).unwrap();
            assert_eq!(padded.crop(5, 5, p.core.rows, p.core.cols), core);
        }
        assert_eq!(patches[0].padded(0), patches[0].core);
        let w = make_patch_grid(&GeoRef::grid(1000, 1000), 500).unwrap()[3].padded(64);
        assert_eq!((w.rows, w.cols), (628, 628));
        assert_eq!(
            make_patch_grid(&GeoRef::grid(21005, 19500), 500)
                .unwrap()
                .len(),
            1677
        );
    }

    #[test]
    fn core_mask_marks_listed_cores() {
        let g = GeoRef::grid(4, 4);
        let patches = make_patch_grid(&g, 2).unwrap();
        let m = core_mask(&g, &patches, &[1]);
        assert_eq!(m.iter().filter(|v| **v).count(), 4);
        assert!(m[g.index(0, 2)] && m[g.index(1, 3)] && !m[g.index(2, 2)]);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("patches.tsv");
        let mut patches = make_patch_grid(&GeoRef::grid(30, 20), 10).unwrap();
        patches[2].has_positive = true;
        let split = split_patches(patches.len(), DEFAULT_FRACTIONS, 1).unwrap();
        write_manifest(&path, &patches, &split).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), (patches, split));
    }

    proptest! {
        #[test]
        fn grown_window_is_aligned_and_covers(r0 in -50i64..500, c0 in -50i64..500, rows in 1usize..300,
                                             cols in 1usize..300, pad in 0usize..80, depth in 0u32..5) {
            let m = 1usize << depth;
            let w = Window::new(r0, c0, rows, cols);
            let g = w.grown_aligned(pad, m);
            prop_assert_eq!(g.row0.rem_euclid(m as i64), 0);
            prop_assert_eq!(g.col0.rem_euclid(m as i64), 0);
            prop_assert_eq!(g.rows % m, 0);
            prop_assert_eq!(g.cols % m, 0);
            prop_assert!(g.row0 <= r0 - pad as i64 && g.col0 <= c0 - pad as i64);
            prop_assert!(g.row0 + g.rows as i64 >= r0 + (rows + pad) as i64);
            prop_assert!(g.col0 + g.cols as i64 >= c0 + (cols + pad) as i64);
            prop_assert!(g.row0 > r0 - pad as i64 - m as i64);
        }

        #[test]
        fn split_is_a_partition(n in 0usize..300, seed in any::<u64>()) {
            let s = split_patches(n, DEFAULT_FRACTIONS, seed).unwrap();
            prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            all.dedup();
            prop_assert_eq!(all.len(), n);
        }
    }
}
