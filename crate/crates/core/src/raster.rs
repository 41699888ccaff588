//! Georeferenced rasters, categorical one-hot encoding and feature stacks.
//!
//! Rasters are stored on disk as a JSON header plus a sibling `.bin` payload of
//! little-endian values in row-major order. Stacks are directories holding one
//! such pair per channel plus a `stack.json` channel list.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical group order of the base stack.
pub const CANONICAL_GROUPS: [&str; 6] = [
    "lithology",
    "land_cover",
    "rock_family",
    "rock_age",
    "dem",
    "slope",
];

pub const LITHOLOGY_CLASSES: usize = 44;
pub const LAND_COVER_CLASSES: usize = 5;
pub const ROCK_FAMILY_CLASSES: usize = 5;
pub const ROCK_AGE_CLASSES: usize = 38;
/// 44 + 5 + 5 + 38 categorical channels, then DEM and slope.
pub const BASE_CHANNELS: usize =
    LITHOLOGY_CLASSES + LAND_COVER_CLASSES + ROCK_FAMILY_CLASSES + ROCK_AGE_CLASSES + 2;

pub const LAND_COVER_VOCABULARY: [&str; LAND_COVER_CLASSES] = [
    "agricultural_areas",
    "artificial_surfaces",
    "forest_and_semi_natural_areas",
    "water_bodies",
    "wetlands",
];

pub const ROCK_FAMILY_VOCABULARY: [&str; ROCK_FAMILY_CLASSES] = [
    "metamorphic",
    "sedimentary",
    "plutonic",
    "volcanic",
    "unknown",
];

/// Default nodata sentinel for continuous layers.
pub const NODATA_F32: f64 = -9999.0;
/// Default nodata sentinel for categorical layers.
pub const NODATA_I32: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoRef {
    pub origin_x: f64,
    pub origin_y: f64,
    /// Meters per pixel.
    pub pixel_size: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GeoRef {
    pub fn new(
        origin_x: f64,
        origin_y: f64,
        pixel_size: f64,
        rows: usize,
        cols: usize,
    ) -> Result<Self> {
        if !(pixel_size > 0.0) || !pixel_size.is_finite() {
            return Err(Error::Config(format!(
                "pixel_size must be > 0, got {pixel_size}"
            )));
        }
        if rows == 0 || cols == 0 {
            return Err(Error::Config(format!(
                "raster extent {rows}x{cols} is empty"
            )));
        }
        Ok(GeoRef {
            origin_x,
            origin_y,
            pixel_size,
            rows,
            cols,
        })
    }

    /// Unreferenced grid with 10 m pixels.
    pub fn grid(rows: usize, cols: usize) -> Self {
        GeoRef::new(0.0, 0.0, 10.0, rows, cols).expect("non-empty grid")
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn ensure_same(&self, other: &GeoRef, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GeoRefMismatch(format!(
                "{what}: {self:?} vs {other:?}"
            )))
        }
    }
}

/// Inclusive interval of physically plausible values for a continuous layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidRange {
    pub min: f64,
    pub max: f64,
}

impl ValidRange {
    pub const SLOPE_DEGREES: ValidRange = ValidRange {
        min: 0.0,
        max: 90.0,
    };
    pub const DEM_METERS: ValidRange = ValidRange {
        min: -500.0,
        max: 9000.0,
    };
    pub const UNBOUNDED: ValidRange = ValidRange {
        min: f64::NEG_INFINITY,
        max: f64::INFINITY,
    };

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }
}

/// Single-channel grid of reals with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub georef: GeoRef,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

impl Raster {
    pub fn new(georef: GeoRef, values: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != georef.len() || valid.len() != georef.len() {
            return Err(Error::Shape(format!(
                "raster {}x{} needs {} cells, got {} values / {} mask cells",
                georef.rows,
                georef.cols,
                georef.len(),
                values.len(),
                valid.len()
            )));
        }
        Ok(Raster {
            georef,
            values,
            valid,
        })
    }

    pub fn filled(georef: GeoRef, value: f32) -> Self {
        Raster {
            georef,
            values: vec![value; georef.len()],
            valid: vec![true; georef.len()],
        }
    }

    pub fn from_fn(georef: GeoRef, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut values = Vec::with_capacity(georef.len());
        for r in 0..georef.rows {
            for c in 0..georef.cols {
                values.push(f(r, c));
            }
        }
        Raster {
            georef,
            values,
            valid: vec![true; georef.len()],
        }
    }

    pub fn rows(&self) -> usize {
        self.georef.rows
    }

    pub fn cols(&self) -> usize {
        self.georef.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[self.georef.index(row, col)]
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[self.georef.index(row, col)]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Marks cells outside `range` (or NaN) invalid.
    pub fn apply_range(&mut self, range: ValidRange) {
        for (v, ok) in self.values.iter().zip(self.valid.iter_mut()) {
            if !range.contains(*v as f64) {
                *ok = false;
            }
        }
    }

    /// Equality on the mask and on values at valid cells only.
    pub fn same_valid_data(&self, other: &Raster) -> bool {
        self.georef == other.georef
            && self.valid == other.valid
            && self
                .values
                .iter()
                .zip(&other.values)
                .zip(&self.valid)
                .all(|((a, b), ok)| !ok || a.to_bits() == b.to_bits())
    }
}

/// Integer-coded categorical layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalRaster {
    pub georef: GeoRef,
    pub codes: Vec<i32>,
    pub valid: Vec<bool>,
    pub vocabulary: Vec<String>,
}

impl CategoricalRaster {
    pub fn new(
        georef: GeoRef,
        codes: Vec<i32>,
        valid: Vec<bool>,
        vocabulary: Vec<String>,
    ) -> Result<Self> {
        if codes.len() != georef.len() || valid.len() != georef.len() {
            return Err(Error::Shape(format!(
                "categorical raster {}x{} needs {} cells, got {} codes / {} mask cells",
                georef.rows,
                georef.cols,
                georef.len(),
                codes.len(),
                valid.len()
            )));
        }
        let cat = CategoricalRaster {
            georef,
            codes,
            valid,
            vocabulary,
        };
        cat.check_codes()?;
        Ok(cat)
    }

    fn check_codes(&self) -> Result<()> {
        let size = self.vocabulary.len();
        for (cell, (&code, &ok)) in self.codes.iter().zip(&self.valid).enumerate() {
            if ok && (code < 0 || code as usize >= size) {
                return Err(Error::CodeOutOfRange { code, cell, size });
            }
        }
        Ok(())
    }
}

/// One-hot encodes a categorical layer: one binary raster per vocabulary entry.
///
/// Invalid cells are 0 and invalid in every output channel.
pub fn encode_categorical(cat: &CategoricalRaster) -> Result<Vec<Raster>> {
    if cat.vocabulary.is_empty() {
        return Err(Error::Config("categorical vocabulary is empty".into()));
    }
    cat.check_codes()?;
    let n = cat.georef.len();
    let mut out: Vec<Raster> = (0..cat.vocabulary.len())
        .map(|_| Raster {
            georef: cat.georef,
            values: vec![0.0; n],
            valid: cat.valid.clone(),
        })
        .collect();
    for (cell, (&code, &ok)) in cat.codes.iter().zip(&cat.valid).enumerate() {
        if ok {
            out[code as usize].values[cell] = 1.0;
        }
    }
    Ok(out)
}

/// Ordered multi-channel raster stack sharing one georeference.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub georef: GeoRef,
    pub channels: Vec<Raster>,
    pub names: Vec<String>,
}

impl FeatureStack {
    pub fn empty(georef: GeoRef) -> Self {
        FeatureStack {
            georef,
            channels: Vec::new(),
            names: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn push(&mut self, name: impl Into<String>, raster: Raster) -> Result<()> {
        let name = name.into();
        self.georef.ensure_same(&raster.georef, &name)?;
        if self.names.contains(&name) {
            return Err(Error::DuplicateChannel(name));
        }
        self.names.push(name);
        self.channels.push(raster);
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn channel_by_name(&self, name: &str) -> Option<&Raster> {
        self.index_of(name).map(|i| &self.channels[i])
    }

    /// Appends every channel of `other` (e.g. aligned channels after the base 94).
    pub fn concat(&self, other: &FeatureStack) -> Result<FeatureStack> {
        let mut out = self.clone();
        for (name, ch) in other.names.iter().zip(&other.channels) {
            out.push(name.clone(), ch.clone())?;
        }
        Ok(out)
    }

    /// Conjunction of all channel masks.
    pub fn valid_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.georef.len()];
        for ch in &self.channels {
            for (m, v) in mask.iter_mut().zip(&ch.valid) {
                *m &= *v;
            }
        }
        mask
    }
}

/// Whether a channel name denotes a one-hot channel (`group:value`, optionally `@<range>m`).
pub fn is_categorical_channel(name: &str) -> bool {
    name.split('@').next().unwrap_or(name).contains(':')
}

fn canonical_rank(group: &str) -> usize {
    CANONICAL_GROUPS
        .iter()
        .position(|g| *g == group)
        .unwrap_or(CANONICAL_GROUPS.len())
}

/// Stacks one-hot categorical groups and continuous layers in canonical order
/// (lithology, land cover, rock family, rock age, DEM, slope). Groups with
/// other names follow, in the order given.
pub fn build_feature_stack(
    continuous: &[(&str, &Raster)],
    categorical: &[(&str, &CategoricalRaster)],
) -> Result<FeatureStack> {
    let georef = continuous
        .first()
        .map(|(_, r)| r.georef)
        .or_else(|| categorical.first().map(|(_, c)| c.georef))
        .ok_or_else(|| Error::Config("no input layers".into()))?;

    enum Source<'a> {
        Cont(&'a Raster),
        Cat(&'a CategoricalRaster),
    }
    let mut layers: Vec<(usize, usize, &str, Source)> = Vec::new();
    for (i, (name, cat)) in categorical.iter().enumerate() {
        georef.ensure_same(&cat.georef, name)?;
        layers.push((canonical_rank(name), i, name, Source::Cat(cat)));
    }
    for (i, (name, r)) in continuous.iter().enumerate() {
        georef.ensure_same(&r.georef, name)?;
        layers.push((
            canonical_rank(name),
            categorical.len() + i,
            name,
            Source::Cont(r),
        ));
    }
    layers.sort_by_key(|(rank, i, _, _)| (*rank, *i));

    let mut seen = HashSet::new();
    let mut stack = FeatureStack::empty(georef);
    for (_, _, name, source) in layers {
        if !seen.insert(name.to_string()) {
            return Err(Error::DuplicateChannel(name.to_string()));
        }
        match source {
            Source::Cont(r) => stack.push(name, r.clone())?,
            Source::Cat(cat) => {
                for (entry, ch) in cat.vocabulary.iter().zip(encode_categorical(cat)?) {
                    stack.push(format!("{name}:{entry}"), ch)?;
                }
            }
        }
    }
    Ok(stack)
}

/// Slope in degrees from central differences (one-sided at the extent border).
///
/// A cell is valid when it and its in-bounds 4-neighbours are valid.
pub fn slope_degrees(dem: &Raster) -> Raster {
    let g = dem.georef;
    let (rows, cols) = (g.rows, g.cols);
    let ps = g.pixel_size;
    let mut values = vec![0.0f32; g.len()];
    let mut valid = vec![false; g.len()];
    let z = |r: usize, c: usize| dem.values[r * cols + c] as f64;
    let ok = |r: usize, c: usize| dem.valid[r * cols + c];
    for r in 0..rows {
        for c in 0..cols {
            if !ok(r, c) {
                continue;
            }
            let (c0, c1) = (c.saturating_sub(1), (c + 1).min(cols - 1));
            let (r0, r1) = (r.saturating_sub(1), (r + 1).min(rows - 1));
            if !(ok(r, c0) && ok(r, c1) && ok(r0, c) && ok(r1, c)) {
                continue;
            }
            let dx = if c1 > c0 {
                (z(r, c1) - z(r, c0)) / ((c1 - c0) as f64 * ps)
            } else {
                0.0
            };
            let dy = if r1 > r0 {
                (z(r1, c) - z(r0, c)) / ((r1 - r0) as f64 * ps)
            } else {
                0.0
            };
            values[r * cols + c] = (dx * dx + dy * dy).sqrt().atan().to_degrees() as f32;
            valid[r * cols + c] = true;
        }
    }
    Raster {
        georef: g,
        values,
        valid,
    }
}

// ---------------------------------------------------------------------------
// Interchange format

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterHeader {
    pub rows: usize,
    pub cols: usize,
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size: f64,
    pub nodata: f64,
    pub valid_min: Option<f64>,
    pub valid_max: Option<f64>,
    pub dtype: String,
    pub order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl RasterHeader {
    pub fn georef(&self) -> Result<GeoRef> {
        GeoRef::new(
            self.origin_x,
            self.origin_y,
            self.pixel_size,
            self.rows,
            self.cols,
        )
    }

    pub fn valid_range(&self) -> ValidRange {
        ValidRange {
            min: self.valid_min.unwrap_or(f64::NEG_INFINITY),
            max: self.valid_max.unwrap_or(f64::INFINITY),
        }
    }

    fn for_georef(g: &GeoRef, nodata: f64, dtype: &str) -> Self {
        RasterHeader {
            rows: g.rows,
            cols: g.cols,
            origin_x: g.origin_x,
            origin_y: g.origin_y,
            pixel_size: g.pixel_size,
            nodata,
            valid_min: None,
            valid_max: None,
            dtype: dtype.into(),
            order: "row-major".into(),
            vocabulary: None,
            name: None,
        }
    }
}

/// `foo.json` -> `foo.bin`.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("bin")
}

pub fn read_header(path: &Path) -> Result<RasterHeader> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: RasterHeader = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: path.into(),
        reason: e.to_string(),
    })?;
    if header.order != "row-major" {
        return Err(Error::Header {
            path: path.into(),
            reason: format!("unsupported order {:?}", header.order),
        });
    }
    header.georef().map_err(|e| Error::Header {
        path: path.into(),
        reason: e.to_string(),
    })?;
    Ok(header)
}

fn read_payload(header_path: &Path, header: &RasterHeader) -> Result<Vec<[u8; 4]>> {
    let path = payload_path(header_path);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = header.rows * header.cols * 4;
    if bytes.len() != expected {
        return Err(Error::PayloadSize {
            path,
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect())
}

fn write_pair(header_path: &Path, header: &RasterHeader, payload: &[u8]) -> Result<()> {
    if let Some(dir) = header_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let text = serde_json::to_string_pretty(header).expect("header serializes");
    fs::write(header_path, text).map_err(|e| Error::io(header_path, e))?;
    let bin = payload_path(header_path);
    fs::write(&bin, payload).map_err(|e| Error::io(&bin, e))
}

/// Loads a continuous raster. Cells equal to the nodata sentinel, NaN, or outside
/// the valid range become invalid. `range` overrides the header's declared range.
pub fn load_raster(path: &Path, range: Option<ValidRange>) -> Result<Raster> {
    let header = read_header(path)?;
    if header.dtype != "f32" {
        return Err(Error::Header {
            path: path.into(),
            reason: format!("expected dtype f32, found {:?}", header.dtype),
        });
    }
    let georef = header.georef()?;
    let nodata = header.nodata as f32;
    let range = range.unwrap_or_else(|| header.valid_range());
    let mut values = Vec::with_capacity(georef.len());
    let mut valid = Vec::with_capacity(georef.len());
    for word in read_payload(path, &header)? {
        let v = f32::from_le_bytes(word);
        let ok = !v.is_nan() && v != nodata && range.contains(v as f64);
        values.push(v);
        valid.push(ok);
    }
    Raster::new(georef, values, valid)
}

/// Writes a continuous raster; invalid cells are written as the nodata sentinel.
pub fn write_raster(
    path: &Path,
    raster: &Raster,
    range: Option<ValidRange>,
    name: Option<&str>,
) -> Result<()> {
    let mut header = RasterHeader::for_georef(&raster.georef, NODATA_F32, "f32");
    if let Some(r) = range {
        header.valid_min = r.min.is_finite().then_some(r.min);
        header.valid_max = r.max.is_finite().then_some(r.max);
    }
    header.name = name.map(str::to_string);
    let nodata = NODATA_F32 as f32;
    let mut payload = Vec::with_capacity(raster.values.len() * 4);
    for (cell, (&v, &ok)) in raster.values.iter().zip(&raster.valid).enumerate() {
        if ok && v == nodata {
            return Err(Error::Header {
                path: path.into(),
                reason: format!("valid cell {cell} collides with the nodata sentinel"),
            });
        }
        let w = if ok { v } else { nodata };
        payload.extend_from_slice(&w.to_le_bytes());
    }
    write_pair(path, &header, &payload)
}

pub fn load_categorical(path: &Path) -> Result<CategoricalRaster> {
    let header = read_header(path)?;
    if header.dtype != "i32" {
        return Err(Error::Header {
            path: path.into(),
            reason: format!("expected dtype i32, found {:?}", header.dtype),
        });
    }
    let vocabulary = header.vocabulary.clone().ok_or_else(|| Error::Header {
        path: path.into(),
        reason: "categorical header lacks a vocabulary".into(),
    })?;
    let georef = header.georef()?;
    let nodata = header.nodata as i32;
    let mut codes = Vec::with_capacity(georef.len());
    let mut valid = Vec::with_capacity(georef.len());
    for word in read_payload(path, &header)? {
        let code = i32::from_le_bytes(word);
        codes.push(code);
        valid.push(code != nodata);
    }
    CategoricalRaster::new(georef, codes, valid, vocabulary)
}

pub fn write_categorical(path: &Path, cat: &CategoricalRaster, name: Option<&str>) -> Result<()> {
    let mut header = RasterHeader::for_georef(&cat.georef, NODATA_I32 as f64, "i32");
    header.vocabulary = Some(cat.vocabulary.clone());
    header.name = name.map(str::to_string);
    let mut payload = Vec::with_capacity(cat.codes.len() * 4);
    for (&code, &ok) in cat.codes.iter().zip(&cat.valid) {
        let w = if ok { code } else { NODATA_I32 };
        payload.extend_from_slice(&w.to_le_bytes());
    }
    write_pair(path, &header, &payload)
}

#[derive(Debug, Serialize, Deserialize)]
struct StackManifest {
    channels: Vec<String>,
}

fn channel_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("ch{i:03}.json"))
}

fn default_range(name: &str) -> Option<ValidRange> {
    match name.split('@').next() {
        Some("slope") => Some(ValidRange::SLOPE_DEGREES),
        Some("dem") => Some(ValidRange::DEM_METERS),
        _ => None,
    }
}

pub fn write_stack(dir: &Path, stack: &FeatureStack) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, (name, ch)) in stack.names.iter().zip(&stack.channels).enumerate() {
        write_raster(&channel_file(dir, i), ch, default_range(name), Some(name))?;
    }
    let manifest = StackManifest {
        channels: stack.names.clone(),
    };
    let path = dir.join("stack.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| Error::io(&path, e))
}

pub fn read_stack(dir: &Path) -> Result<FeatureStack> {
    let path = dir.join("stack.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: StackManifest = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let mut stack: Option<FeatureStack> = None;
    for (i, name) in manifest.channels.iter().enumerate() {
        let ch = load_raster(&channel_file(dir, i), None)?;
        let s = stack.get_or_insert_with(|| FeatureStack::empty(ch.georef));
        s.push(name.clone(), ch)?;
    }
    stack.ok_or_else(|| Error::Header {
        path,
        reason: "stack has no channels".into(),
    })
}
