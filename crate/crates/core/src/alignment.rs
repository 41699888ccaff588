//! Uphill alignment: for every pixel, locate the highest valid neighbour on a
//! ring at each looking distance and resample selected channels there.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::raster::{FeatureStack, Raster};

pub const DEFAULT_RANGES_M: [f64; 3] = [30.0, 100.0, 300.0];
pub const DEFAULT_WEIGHT_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentConfig {
    /// Looking distances in meters, strictly increasing.
    pub ranges_m: Vec<f64>,
    /// Base-stack channel indices to resample, in canonical order.
    pub selected_channels: Vec<usize>,
    pub weight_threshold: f64,
}

impl AlignmentConfig {
    pub fn new(selected_channels: Vec<usize>) -> Self {
        AlignmentConfig {
            ranges_m: DEFAULT_RANGES_M.to_vec(),
            selected_channels,
            weight_threshold: DEFAULT_WEIGHT_THRESHOLD,
        }
    }

    pub fn validate(&self, stack_channels: usize) -> Result<()> {
        if self.ranges_m.is_empty() {
            return Err(Error::Config("no looking distances".into()));
        }
        if self.ranges_m.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::Config(format!(
                "ranges must be positive: {:?}",
                self.ranges_m
            )));
        }
        if self.ranges_m.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "ranges must be strictly increasing: {:?}",
                self.ranges_m
            )));
        }
        if self.selected_channels.is_empty() {
            return Err(Error::Config("no channels selected for alignment".into()));
        }
        if let Some(bad) = self
            .selected_channels
            .iter()
            .find(|&&i| i >= stack_channels)
        {
            return Err(Error::Config(format!(
                "selected channel {bad} outside stack of {stack_channels}"
            )));
        }
        Ok(())
    }

    pub fn output_channels(&self) -> usize {
        self.ranges_m.len() * self.selected_channels.len()
    }
}

/// Integer displacements at a fixed distance, ordered clockwise from north.
#[derive(Debug, Clone, PartialEq)]
pub struct RingOffsets {
    pub radius_px: f64,
    /// `(drow, dcol)`; north is `(-1, 0)`.
    pub offsets: Vec<(i32, i32)>,
}

/// Clockwise-from-north order on nonzero directions, computed exactly.
fn clockwise_from_north(a: (i32, i32), b: (i32, i32)) -> Ordering {
    // east/north coordinates
    let (ax, ay) = (a.1 as i64, -(a.0 as i64));
    let (bx, by) = (b.1 as i64, -(b.0 as i64));
    let half = |x: i64, y: i64| if x > 0 || (x == 0 && y > 0) { 0 } else { 1 };
    half(ax, ay).cmp(&half(bx, by)).then_with(|| {
        let cross = ax * by - ay * bx;
        // b clockwise of a  <=>  cross < 0
        cross.cmp(&0)
    })
}

/// All offsets whose euclidean length lies in `[r - 0.5, r + 0.5)`.
pub fn ring_offsets(radius_px: f64) -> RingOffsets {
    let radius_px = radius_px.max(0.0);
    let lo = (radius_px - 0.5).max(0.0);
    let hi = radius_px + 0.5;
    let (lo2, hi2) = (lo * lo, hi * hi);
    let extent = hi.ceil() as i32;
    let mut offsets = Vec::new();
    for dr in -extent..=extent {
        for dc in -extent..=extent {
            let d2 = (dr * dr + dc * dc) as f64;
            if d2 >= lo2 && d2 < hi2 {
                offsets.push((dr, dc));
            }
        }
    }
    if offsets.len() > 1 {
        offsets.sort_by(|a, b| clockwise_from_north(*a, *b));
    }
    RingOffsets { radius_px, offsets }
}

#[inline]
fn uphill_index(dem: &Raster, row: usize, col: usize, ring: &RingOffsets) -> usize {
    let (rows, cols) = (dem.rows() as i64, dem.cols() as i64);
    let mut best: Option<(usize, f32)> = None;
    for &(dr, dc) in &ring.offsets {
        let (r, c) = (row as i64 + dr as i64, col as i64 + dc as i64);
        if r < 0 || c < 0 || r >= rows || c >= cols {
            continue;
        }
        let idx = (r * cols + c) as usize;
        if !dem.valid[idx] {
            continue;
        }
        let z = dem.values[idx];
        match best {
            Some((_, bz)) if z <= bz => {}
            _ => best = Some((idx, z)),
        }
    }
    best.map_or(row * dem.cols() + col, |(idx, _)| idx)
}

/// Highest valid in-bounds ring neighbour of `pixel`; the first in ring order
/// wins ties, and the centre itself is returned when no ring cell qualifies.
pub fn find_uphill(
    dem: &Raster,
    pixel: (usize, usize),
    ring: &RingOffsets,
) -> Result<(usize, usize)> {
    let (row, col) = pixel;
    if row >= dem.rows() || col >= dem.cols() || !dem.is_valid(row, col) {
        return Err(Error::InvalidPixel { row, col });
    }
    let idx = uphill_index(dem, row, col, ring);
    Ok((idx / dem.cols(), idx % dem.cols()))
}

/// Flat index of the uphill pixel for every cell, `None` where the DEM is invalid.
pub fn uphill_map(dem: &Raster, ring: &RingOffsets) -> Vec<Option<u32>> {
    let (rows, cols) = (dem.rows(), dem.cols());
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            if dem.is_valid(r, c) {
                out.push(Some(uphill_index(dem, r, c, ring) as u32));
            } else {
                out.push(None);
            }
        }
    }
    out
}

/// Channels `k` with `|w_k| >= threshold`, in channel order.
pub fn select_aligned_channels(llr_weights: &[f32], threshold: f64) -> Result<Vec<usize>> {
    if !(threshold > 0.0) {
        return Err(Error::Config(format!(
            "threshold must be > 0, got {threshold}"
        )));
    }
    let picked: Vec<usize> = llr_weights
        .iter()
        .enumerate()
        .filter(|(_, w)| (w.abs() as f64) >= threshold)
        .map(|(i, _)| i)
        .collect();
    if picked.is_empty() {
        return Err(Error::EmptySelection { threshold });
    }
    Ok(picked)
}

pub fn aligned_name(base: &str, range_m: f64) -> String {
    format!("{base}@{range_m}m")
}

/// Resamples the selected channels at each pixel's uphill point for every range.
///
/// Output is range-major: all selected channels at the first range, then the next.
/// A cell is valid when the DEM and the channel are valid at the centre and the
/// channel is valid at the sampled point.
pub fn align_features(
    stack: &FeatureStack,
    dem: &Raster,
    config: &AlignmentConfig,
) -> Result<FeatureStack> {
    stack.georef.ensure_same(&dem.georef, "dem vs stack")?;
    config.validate(stack.len())?;
    let n = dem.georef.len();
    let mut out = FeatureStack::empty(stack.georef);
    for &range in &config.ranges_m {
        let ring = ring_offsets(range / dem.georef.pixel_size);
        let up = uphill_map(dem, &ring);
        for &k in &config.selected_channels {
            let src = &stack.channels[k];
            let mut values = vec![0.0f32; n];
            let mut valid = vec![false; n];
            for (i, target) in up.iter().enumerate() {
                if let Some(t) = *target {
                    let t = t as usize;
                    if src.valid[i] && src.valid[t] {
                        values[i] = src.values[t];
                        valid[i] = true;
                    }
                }
            }
            out.push(
                aligned_name(&stack.names[k], range),
                Raster {
                    georef: stack.georef,
                    values,
                    valid,
                },
            )?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GeoRef;

    #[test]
    fn zero_radius_is_the_centre() {
        assert_eq!(ring_offsets(0.0).offsets, vec![(0, 0)]);
    }

    #[test]
    fn ring_of_three_contains_the_axes_and_starts_north() {
        let ring = ring_offsets(3.0);
        for o in [(-3, 0), (0, 3), (3, 0), (0, -3)] {
            assert!(ring.offsets.contains(&o), "{o:?}");
        }
        assert_eq!(ring.offsets[0], (-3, 0));
        let east = ring.offsets.iter().position(|o| *o == (0, 3)).unwrap();
        let south = ring.offsets.iter().position(|o| *o == (3, 0)).unwrap();
        let west = ring.offsets.iter().position(|o| *o == (0, -3)).unwrap();
        assert!(east < south && south < west);
    }

    #[test]
    fn ring_lengths_match_brute_force_scan() {
        for r in [3.0f64, 10.0, 30.0, 2.7] {
            let ring = ring_offsets(r);
            let m = (r + 2.0) as i32;
            let mut brute = Vec::new();
            for dr in -m..=m {
                for dc in -m..=m {
                    let len = ((dr * dr + dc * dc) as f64).sqrt();
                    if len >= r - 0.5 && len < r + 0.5 {
                        brute.push((dr, dc));
                    }
                }
            }
            let mut got = ring.offsets.clone();
            got.sort();
            brute.sort();
            assert_eq!(got, brute, "radius {r}");
            // closed under rotation and reflection
            for &(dr, dc) in &ring.offsets {
                assert!(ring.offsets.contains(&(dc, -dr)));
                assert!(ring.offsets.contains(&(-dr, dc)));
            }
        }
    }

    #[test]
    fn ring_angles_increase_clockwise() {
        let ring = ring_offsets(10.0);
        let angle = |(dr, dc): (i32, i32)| {
            let a = (dc as f64).atan2(-dr as f64);
            if a < 0.0 {
                a + std::f64::consts::TAU
            } else {
                a
            }
        };
        for w in ring.offsets.windows(2) {
            assert!(angle(w[0]) < angle(w[1]));
        }
    }

    #[test]
    fn east_ramp_points_east() {
        let dem = Raster::from_fn(GeoRef::grid(9, 9), |_, c| c as f32);
        let ring = ring_offsets(3.0);
        // (3,7), (4,7) and (5,7) tie; the first clockwise from north wins
        assert_eq!(find_uphill(&dem, (4, 4), &ring).unwrap(), (3, 7));
    }

    #[test]
    fn constant_dem_picks_north() {
        let dem = Raster::filled(GeoRef::grid(9, 9), 5.0);
        assert_eq!(
            find_uphill(&dem, (4, 4), &ring_offsets(3.0)).unwrap(),
            (1, 4)
        );
    }

    #[test]
    fn ring_outside_extent_falls_back_to_centre() {
        let dem = Raster::filled(GeoRef::grid(2, 2), 5.0);
        assert_eq!(
            find_uphill(&dem, (0, 0), &ring_offsets(3.0)).unwrap(),
            (0, 0)
        );
        let mut dem = Raster::filled(GeoRef::grid(2, 2), 5.0);
        dem.valid[0] = false;
        assert!(find_uphill(&dem, (0, 0), &ring_offsets(3.0)).is_err());
        assert!(find_uphill(&dem, (5, 0), &ring_offsets(3.0)).is_err());
    }

    #[test]
    fn selection_by_threshold() {
        assert_eq!(
            select_aligned_channels(&[0.25, -0.30, 0.10], 0.2).unwrap(),
            vec![0, 1]
        );
        assert!(matches!(
            select_aligned_channels(&[0.0, 0.0], 0.2),
            Err(Error::EmptySelection { .. })
        ));
    }

    #[test]
    fn constant_world_aligns_to_constant() {
        let g = GeoRef::grid(16, 16);
        let mut stack = FeatureStack::empty(g);
        stack.push("a:x", Raster::filled(g, 0.75)).unwrap();
        stack.push("dem", Raster::filled(g, 1.0)).unwrap();
        let dem = Raster::filled(g, 1.0);
        let out = align_features(&stack, &dem, &AlignmentConfig::new(vec![0])).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out.names, vec!["a:x@30m", "a:x@100m", "a:x@300m"]);
        assert!(out
            .channels
            .iter()
            .all(|c| c.values.iter().all(|v| *v == 0.75)));
    }

    #[test]
    fn config_validation() {
        let mut c = AlignmentConfig::new(vec![0]);
        assert!(c.validate(1).is_ok());
        c.ranges_m = vec![100.0, 30.0];
        assert!(c.validate(1).is_err());
        let c = AlignmentConfig::new(vec![4]);
        assert!(c.validate(2).is_err());
        assert_eq!(
            AlignmentConfig::new((0..22).collect()).output_channels(),
            66
        );
    }
}
