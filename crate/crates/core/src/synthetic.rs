//! Seeded synthetic study areas: Gaussian-hill terrain, smooth categorical
//! partitions and labels planted so that the rock type *uphill* of a cell
//! drives its landslide probability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{ring_offsets, uphill_map};
use crate::error::{Error, Result};
use crate::nn::layers::sigmoid;
use crate::raster::{
    build_feature_stack, slope_degrees, CategoricalRaster, FeatureStack, GeoRef, Raster,
    LAND_COVER_VOCABULARY, ROCK_FAMILY_VOCABULARY,
};

/// Channel whose uphill value the planted rule reads.
pub fn weak_rock_channel() -> String {
    format!("lithology:{}", lithology_name(0))
}

fn lithology_name(i: usize) -> String {
    format!("L{i:02}")
}

fn rock_age_name(i: usize) -> String {
    format!("A{i:02}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
    pub pixel_size: f64,
    pub hills: usize,
    /// Peak-to-peak amplitude of the per-cell elevation noise, meters.
    pub noise: f64,
    /// Typical diameter of a categorical patch, pixels.
    pub cell_px: usize,
    pub lithology_classes: usize,
    pub land_cover_classes: usize,
    pub rock_family_classes: usize,
    pub rock_age_classes: usize,
    /// Probability that a lithology patch is the weak-rock class.
    pub weak_fraction: f64,
    /// Weight of local slope (per degree).
    pub a: f64,
    /// Weight of weak rock at the uphill point.
    pub b: f64,
    /// Bias subtracted inside the sigmoid.
    pub c: f64,
    /// Looking distance of the planted uphill term, meters.
    pub uphill_range_m: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            rows: 1024,
            cols: 1024,
            seed: 0,
            pixel_size: 10.0,
            hills: 60,
            noise: 0.5,
            cell_px: 24,
            lithology_classes: 44,
            land_cover_classes: 5,
            rock_family_classes: 5,
            rock_age_classes: 38,
            weak_fraction: 0.15,
            a: 0.1,
            b: 4.0,
            c: 7.0,
            uphill_range_m: 100.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.rows < 64 || self.cols < 64 {
            return bad(format!(
                "world must be at least 64x64, got {}x{}",
                self.rows, self.cols
            ));
        }
        if !(self.pixel_size > 0.0) || self.cell_px == 0 {
            return bad("pixel_size and cell_px must be positive".into());
        }
        if self.lithology_classes == 0
            || self.rock_age_classes == 0
            || !(1..=LAND_COVER_VOCABULARY.len()).contains(&self.land_cover_classes)
            || !(1..=ROCK_FAMILY_VOCABULARY.len()).contains(&self.rock_family_classes)
        {
            return bad("class counts out of range".into());
        }
        if !(0.0..=1.0).contains(&self.weak_fraction) {
            return bad(format!(
                "weak_fraction must lie in [0, 1], got {}",
                self.weak_fraction
            ));
        }
        let coeffs = [self.noise, self.a, self.b, self.c, self.uphill_range_m];
        if coeffs.iter().any(|v| !v.is_finite()) || self.noise < 0.0 || self.uphill_range_m < 0.0 {
            return bad("coefficients must be finite; noise and range non-negative".into());
        }
        Ok(())
    }

    pub fn georef(&self) -> Result<GeoRef> {
        GeoRef::new(0.0, 0.0, self.pixel_size, self.rows, self.cols)
    }

    /// Number of base channels the generated stack will have.
    pub fn base_channels(&self) -> usize {
        self.lithology_classes
            + self.land_cover_classes
            + self.rock_family_classes
            + self.rock_age_classes
            + 2
    }
}

/// Base elevation of every world, meters.
const BASE_ELEVATION: f32 = 100.0;

fn gen_dem(config: &WorldConfig, rng: &mut ChaCha8Rng, georef: GeoRef) -> Raster {
    struct Hill {
        r: f64,
        c: f64,
        amp: f64,
        inv2s2: f64,
    }
    let hills: Vec<Hill> = (0..config.hills)
        .map(|_| {
            let sigma = rng.gen_range(20.0..120.0);
            Hill {
                r: rng.gen_range(0.0..config.rows as f64),
                c: rng.gen_range(0.0..config.cols as f64),
                amp: rng.gen_range(20.0..200.0),
                inv2s2: 1.0 / (2.0 * sigma * sigma),
            }
        })
        .collect();
    let mut dem = Raster::filled(georef, BASE_ELEVATION);
    for (i, v) in dem.values.iter_mut().enumerate() {
        let (r, c) = ((i / config.cols) as f64, (i % config.cols) as f64);
        let mut z = BASE_ELEVATION as f64;
        for h in &hills {
            let d2 = (r - h.r).powi(2) + (c - h.c).powi(2);
            z += h.amp * (-d2 * h.inv2s2).exp();
        }
        if config.noise > 0.0 {
            z += rng.gen_range(-0.5..0.5) * config.noise;
        }
        *v = z as f32;
    }
    dem
}

/// Jittered-grid Voronoi partition: one seed per `cell x cell` block, each
/// seed drawing its class from `pick`.
fn gen_partition(
    config: &WorldConfig,
    rng: &mut ChaCha8Rng,
    georef: GeoRef,
    vocabulary: Vec<String>,
    mut pick: impl FnMut(&mut ChaCha8Rng) -> usize,
) -> Result<CategoricalRaster> {
    let cell = config.cell_px;
    let (gr, gc) = (config.rows.div_ceil(cell), config.cols.div_ceil(cell));
    let seeds: Vec<(f64, f64, i32)> = (0..gr * gc)
        .map(|k| {
            let (br, bc) = ((k / gc) * cell, (k % gc) * cell);
            let r = br as f64 + rng.gen_range(0.0..cell as f64);
            let c = bc as f64 + rng.gen_range(0.0..cell as f64);
            (r, c, pick(rng) as i32)
        })
        .collect();
    let mut codes = vec![0i32; georef.len()];
    for (i, code) in codes.iter_mut().enumerate() {
        let (r, c) = (i / config.cols, i % config.cols);
        let (br, bc) = ((r / cell) as i64, (c / cell) as i64);
        let mut best = (f64::INFINITY, 0);
        for dr in -2..=2i64 {
            for dc in -2..=2i64 {
                let (nr, nc) = (br + dr, bc + dc);
                if nr < 0 || nc < 0 || nr >= gr as i64 || nc >= gc as i64 {
                    continue;
                }
                let s = seeds[nr as usize * gc + nc as usize];
                let d = (s.0 - r as f64).powi(2) + (s.1 - c as f64).powi(2);
                if d < best.0 {
                    best = (d, s.2);
                }
            }
        }
        *code = best.1;
    }
    CategoricalRaster::new(georef, codes, vec![true; georef.len()], vocabulary)
}

/// Generates the DEM and the encoded base feature stack.
pub fn gen_world(config: &WorldConfig) -> Result<(Raster, FeatureStack)> {
    config.validate()?;
    let georef = config.georef()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dem = gen_dem(config, &mut rng, georef);
    let slope = slope_degrees(&dem);

    let n_lith = config.lithology_classes;
    let weak = config.weak_fraction;
    let lithology = gen_partition(
        config,
        &mut rng,
        georef,
        (0..n_lith).map(lithology_name).collect(),
        |rng| {
            if n_lith == 1 || rng.gen_bool(weak) {
                0
            } else {
                rng.gen_range(1..n_lith)
            }
        },
    )?;
    let uniform = |n: usize| move |rng: &mut ChaCha8Rng| rng.gen_range(0..n);
    let land_cover = gen_partition(
        config,
        &mut rng,
        georef,
        LAND_COVER_VOCABULARY[..config.land_cover_classes]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        uniform(config.land_cover_classes),
    )?;
    let rock_family = gen_partition(
        config,
        &mut rng,
        georef,
        ROCK_FAMILY_VOCABULARY[..config.rock_family_classes]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        uniform(config.rock_family_classes),
    )?;
    let rock_age = gen_partition(
        config,
        &mut rng,
        georef,
        (0..config.rock_age_classes).map(rock_age_name).collect(),
        uniform(config.rock_age_classes),
    )?;
    let stack = build_feature_stack(
        &[("dem", &dem), ("slope", &slope)],
        &[
            ("lithology", &lithology),
            ("land_cover", &land_cover),
            ("rock_family", &rock_family),
            ("rock_age", &rock_age),
        ],
    )?;
    Ok((dem, stack))
}

/// Per-cell landslide probability of the planted rule.
pub fn label_probability(
    dem: &Raster,
    stack: &FeatureStack,
    config: &WorldConfig,
) -> Result<Raster> {
    config.validate()?;
    stack.georef.ensure_same(&dem.georef, "dem")?;
    let slope = stack
        .channel_by_name("slope")
        .ok_or_else(|| Error::Config("stack has no slope channel".into()))?;
    let weak_name = weak_rock_channel();
    let weak = stack
        .channel_by_name(&weak_name)
        .ok_or_else(|| Error::Config(format!("stack has no {weak_name} channel")))?;
    let ring = ring_offsets(config.uphill_range_m / dem.georef.pixel_size);
    let uphill = uphill_map(dem, &ring);
    let mut p = Raster::filled(dem.georef, 0.0);
    for i in 0..p.values.len() {
        let (Some(u), true) = (uphill[i], slope.valid[i]) else {
            p.valid[i] = false;
            continue;
        };
        let u = u as usize;
        let w = if weak.valid[u] {
            weak.values[u] as f64
        } else {
            0.0
        };
        let z = config.a * slope.values[i] as f64 + config.b * w - config.c;
        p.values[i] = sigmoid(z) as f32;
    }
    Ok(p)
}

/// Draws binary labels from [`label_probability`] with a seeded uniform threshold.
pub fn plant_labels(dem: &Raster, stack: &FeatureStack, config: &WorldConfig) -> Result<Raster> {
    let p = label_probability(dem, stack, config)?;
    // a stream independent of the one used by gen_world
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_1abe_15u64);
    let mut labels = Raster::filled(dem.georef, 0.0);
    for i in 0..p.values.len() {
        let u: f32 = rng.gen();
        labels.valid[i] = p.valid[i];
        if p.valid[i] && u < p.values[i] {
            labels.values[i] = 1.0;
        }
    }
    Ok(labels)
}

/// Plug-in mutual information (nats) between two binary variables.
pub fn binary_mutual_information(x: &[bool], y: &[bool]) -> f64 {
    let mut counts = [[0f64; 2]; 2];
    for (&a, &b) in x.iter().zip(y) {
        counts[a as usize][b as usize] += 1.0;
    }
    let n = x.len().min(y.len()) as f64;
    let px = [counts[0][0] + counts[0][1], counts[1][0] + counts[1][1]];
    let py = [counts[0][0] + counts[1][0], counts[0][1] + counts[1][1]];
    let mut mi = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            let pab = counts[a][b] / n;
            if pab > 0.0 {
                mi += pab * (pab / (px[a] / n * py[b] / n)).ln();
            }
        }
    }
    mi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{align_features, AlignmentConfig};

    fn small(seed: u64) -> WorldConfig {
        WorldConfig {
            rows: 96,
            cols: 80,
            seed,
            hills: 6,
            lithology_classes: 4,
            rock_age_classes: 3,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn worlds_are_deterministic() {
        let (d1, s1) = gen_world(&small(5)).unwrap();
        let (d2, s2) = gen_world(&small(5)).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(s1, s2);
        let (d3, _) = gen_world(&small(6)).unwrap();
        assert_ne!(d1, d3);
        assert_eq!(s1.len(), small(5).base_channels());
        assert_eq!(
            plant_labels(&d1, &s1, &small(5)).unwrap(),
            plant_labels(&d2, &s2, &small(5)).unwrap()
        );
    }

    #[test]
    fn default_world_has_the_full_channel_count() {
        assert_eq!(WorldConfig::default().base_channels(), 94);
    }

    #[test]
    fn flat_world() {
        let cfg = WorldConfig {
            hills: 0,
            noise: 0.0,
            c: 50.0,
            ..small(1)
        };
        let (dem, stack) = gen_world(&cfg).unwrap();
        assert!(dem.values.iter().all(|v| *v == BASE_ELEVATION));
        assert!(stack
            .channel_by_name("slope")
            .unwrap()
            .values
            .iter()
            .all(|v| *v == 0.0));
        let labels = plant_labels(&dem, &stack, &cfg).unwrap();
        assert_eq!(labels.values.iter().filter(|v| **v > 0.5).count(), 0);
    }

    #[test]
    fn one_hot_groups_are_complete() {
        let (_, stack) = gen_world(&small(2)).unwrap();
        for group in ["lithology", "land_cover", "rock_family", "rock_age"] {
            let idx: Vec<usize> = (0..stack.len())
                .filter(|&i| stack.names[i].starts_with(&format!("{group}:")))
                .collect();
            assert!(!idx.is_empty());
            for cell in 0..stack.georef.len() {
                let s: f32 = idx.iter().map(|&i| stack.channels[i].values[cell]).sum();
                assert_eq!(s, 1.0);
            }
        }
    }

    #[test]
    fn without_uphill_term_labels_follow_slope_only() {
        let cfg = WorldConfig {
            b: 0.0,
            c: 3.0,
            ..small(3)
        };
        let (dem, stack) = gen_world(&cfg).unwrap();
        let p = label_probability(&dem, &stack, &cfg).unwrap();
        let slope = stack.channel_by_name("slope").unwrap();
        for i in 0..p.values.len() {
            let expected = sigmoid(cfg.a * slope.values[i] as f64 - cfg.c) as f32;
            assert_eq!(p.values[i], expected);
        }
    }

    #[test]
    fn default_positive_ratio_in_range() {
        // class counts only change the one-hot width, not the label rule
        let cfg = WorldConfig {
            lithology_classes: 8,
            rock_age_classes: 4,
            ..WorldConfig::default()
        };
        let (dem, stack) = gen_world(&cfg).unwrap();
        let labels = plant_labels(&dem, &stack, &cfg).unwrap();
        let ratio =
            labels.values.iter().filter(|v| **v > 0.5).count() as f64 / labels.values.len() as f64;
        assert!((0.005..=0.03).contains(&ratio), "positive ratio {ratio}");
    }

    #[test]
    fn labels_share_more_information_with_the_uphill_rock() {
        let cfg = WorldConfig {
            rows: 384,
            cols: 384,
            hills: 9,
            lithology_classes: 8,
            rock_age_classes: 4,
            ..WorldConfig::default()
        };
        assert!(cfg.rows * cfg.cols >= 100_000);
        let (dem, stack) = gen_world(&cfg).unwrap();
        let labels = plant_labels(&dem, &stack, &cfg).unwrap();
        let k = stack.index_of(&weak_rock_channel()).unwrap();
        let mut ac = AlignmentConfig::new(vec![k]);
        ac.ranges_m = vec![cfg.uphill_range_m];
        let aligned = align_features(&stack, &dem, &ac).unwrap();
        let y: Vec<bool> = labels.values.iter().map(|v| *v > 0.5).collect();
        let local: Vec<bool> = stack.channels[k].values.iter().map(|v| *v > 0.5).collect();
        let up: Vec<bool> = aligned.channels[0]
            .values
            .iter()
            .map(|v| *v > 0.5)
            .collect();
        let (mi_up, mi_local) = (
            binary_mutual_information(&up, &y),
            binary_mutual_information(&local, &y),
        );
        assert!(mi_up > mi_local, "aligned {mi_up} vs local {mi_local}");
    }

    #[test]
    fn mutual_information_basics() {
        let x = [true, false, true, false];
        assert!((binary_mutual_information(&x, &x) - 2f64.ln()).abs() < 1e-12);
        assert!(binary_mutual_information(&x, &[true, true, false, false]).abs() < 1e-12);
    }

    #[test]
    fn small_worlds_are_rejected() {
        assert!(gen_world(&WorldConfig {
            rows: 32,
            ..small(0)
        })
        .is_err());
    }
}
