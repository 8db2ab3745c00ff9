//! Domain data model shared by every other module.
//!
//! All types here are plain values: once constructed they are never mutated
//! in place, so they can be shared freely across threads.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, PeyeError, Result};

/// Dense row-major grid of reals. Used for predictions, weight maps and
/// error maps, none of which are bound to the `[0,1]` range.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(invalid_input!("grid dimensions must be positive, got {rows}x{cols}"));
        }
        if data.len() != rows * cols {
            return Err(invalid_input!(
                "grid {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::new(rows, cols, data)
    }

    /// Builds a grid from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(invalid_input!("ragged grid rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.data.iter()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn ensure_same_dims(&self, other: &Grid, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(invalid_input!(
                "{what}: dimension mismatch {}x{} vs {}x{}",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            ));
        }
        Ok(())
    }
}

/// Normalized contact-pressure map. Values are in `[0,1]`; `raw_peak` is
/// the raw sensor reading that maps to 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct PressureMap {
    grid: Grid,
    raw_peak: f64,
}

impl PressureMap {
    pub fn new(grid: Grid, raw_peak: f64) -> Result<Self> {
        if !(raw_peak > 0.0 && raw_peak.is_finite()) {
            return Err(invalid_input!("raw_peak must be positive and finite, got {raw_peak}"));
        }
        if let Some(bad) = grid.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(invalid_input!("pressure value {bad} outside [0,1]"));
        }
        Ok(Self { grid, raw_peak })
    }

    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>, raw_peak: f64) -> Result<Self> {
        Self::new(Grid::new(rows, cols, values)?, raw_peak)
    }

    /// Wraps a network prediction, clamping into `[0,1]` to absorb rounding.
    pub fn from_prediction(grid: Grid, raw_peak: f64) -> Result<Self> {
        Self::new(grid.map(|v| v.clamp(0.0, 1.0)), raw_peak)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn raw_peak(&self) -> f64 {
        self.raw_peak
    }

    pub fn rows(&self) -> usize {
        self.grid.rows
    }

    pub fn cols(&self) -> usize {
        self.grid.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.grid.data
    }

    /// Values in raw sensor units.
    pub fn to_raw(&self) -> Grid {
        self.grid.map(|v| v * self.raw_peak)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Lwir,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Lwir => 1,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Rgb => "rgb",
            Modality::Lwir => "lwir",
        })
    }
}

impl FromStr for Modality {
    type Err = PeyeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(Modality::Rgb),
            "lwir" | "ir" => Ok(Modality::Lwir),
            other => Err(invalid_input!("unknown modality {other:?}")),
        }
    }
}

/// Normalized vision input stored channel-planar (`C x H x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct VisionImage {
    height: usize,
    width: usize,
    modality: Modality,
    data: Vec<f32>,
}

impl VisionImage {
    pub fn new(height: usize, width: usize, modality: Modality, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid_input!("image dimensions must be positive"));
        }
        let expected = height * width * modality.channels();
        if data.len() != expected {
            return Err(invalid_input!(
                "{modality} image {height}x{width} needs {expected} values, got {}",
                data.len()
            ));
        }
        if let Some(bad) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(invalid_input!("image intensity {bad} outside [0,1]"));
        }
        Ok(Self {
            height,
            width,
            modality,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, modality: Modality) -> Result<Self> {
        Self::new(height, width, modality, vec![0.0; height * width * modality.channels()])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.modality.channels()
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Bilinear resize (pixel-center aligned).
    pub fn resize(&self, height: usize, width: usize) -> Result<VisionImage> {
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        if height == 0 || width == 0 {
            return Err(invalid_input!("resize target must be positive"));
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut out = Vec::with_capacity(height * width * self.channels());
        for c in 0..self.channels() {
            let plane = self.plane(c);
            for y in 0..height {
                let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
                for x in 0..width {
                    let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                    out.push(bilinear(plane, self.height, self.width, fy, fx) as f32);
                }
            }
        }
        VisionImage::new(height, width, self.modality, out)
    }
}

/// Bilinear sample of a single plane at an in-bounds fractional location.
pub(crate) fn bilinear(plane: &[f32], height: usize, width: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let wy = y - y0 as f64;
    let wx = x - x0 as f64;
    let at = |yy: usize, xx: usize| plane[yy * width + xx] as f64;
    let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
    let bottom = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
    top * (1.0 - wy) + bottom * wy
}

/// Physique parameters. Slot order is fixed: weight (kg), height (cm),
/// gender (0 female / 1 male), then seven girths in cm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PhysicalVector {
    entries: Vec<f64>,
}

impl PhysicalVector {
    pub const SLOT_NAMES: [&'static str; 10] = [
        "weight_kg",
        "height_cm",
        "gender",
        "bust_cm",
        "waist_cm",
        "hip_cm",
        "head_cm",
        "arm_cm",
        "thigh_cm",
        "calf_cm",
    ];
    pub const ALLOWED_LENGTHS: [usize; 4] = [1, 2, 3, 10];

    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if !Self::ALLOWED_LENGTHS.contains(&entries.len()) {
            return Err(invalid_input!(
                "physical vector length must be one of {:?}, got {}",
                Self::ALLOWED_LENGTHS,
                entries.len()
            ));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(invalid_input!("physical vector entries must be finite"));
        }
        for (i, &v) in entries.iter().enumerate() {
            match i {
                2 if v != 0.0 && v != 1.0 => {
                    return Err(invalid_input!("gender slot must be 0 or 1, got {v}"));
                }
                2 => {}
                _ if v <= 0.0 => {
                    return Err(invalid_input!("{} must be positive, got {v}", Self::SLOT_NAMES[i]));
                }
                _ => {}
            }
        }
        Ok(Self { entries })
    }

    pub fn weight_kg(&self) -> f64 {
        self.entries[0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Leading `len` entries, e.g. weight-only or weight+height.
    pub fn truncated(&self, len: usize) -> Result<PhysicalVector> {
        if len > self.entries.len() {
            return Err(invalid_input!(
                "cannot take {len} physique entries from a vector of length {}",
                self.entries.len()
            ));
        }
        PhysicalVector::new(self.entries[..len].to_vec())
    }
}

impl TryFrom<Vec<f64>> for PhysicalVector {
    type Error = PeyeError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        PhysicalVector::new(v)
    }
}

impl From<PhysicalVector> for Vec<f64> {
    fn from(v: PhysicalVector) -> Self {
        v.entries
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Posture {
    Supine,
    LeftSide,
    RightSide,
}

impl Posture {
    pub const ALL: [Posture; 3] = [Posture::Supine, Posture::LeftSide, Posture::RightSide];
}

/// A paired sample with every reference resolved into memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub subject_id: String,
    pub pose_id: String,
    pub posture: Posture,
    pub vision: VisionImage,
    pub pressure: PressureMap,
    pub physique: PhysicalVector,
}

impl SampleRecord {
    pub fn id(&self) -> String {
        format!("{}/{}", self.subject_id, self.pose_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line: file locations are relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub pose_id: String,
    pub posture: Posture,
    pub vision_path: PathBuf,
    pub pressure_path: PathBuf,
    pub physique: PhysicalVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub modality: Modality,
    pub pm_rows: usize,
    pub pm_cols: usize,
    /// Raw sensor value that maps to normalized pressure 1.0.
    pub raw_peak: f64,
    /// kg per normalized-pressure unit per pixel.
    pub pixel_area: f64,
    pub samples: Vec<ManifestEntry>,
    pub split: BTreeMap<String, Split>,
}

impl DatasetManifest {
    pub const FORMAT: &'static str = "peye-manifest/1";

    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_area > 0.0 && self.pixel_area.is_finite()) {
            return Err(invalid_input!("pixel_area must be positive, got {}", self.pixel_area));
        }
        if !(self.raw_peak > 0.0) {
            return Err(invalid_input!("raw_peak must be positive, got {}", self.raw_peak));
        }
        for s in &self.samples {
            if !self.split.contains_key(&s.subject_id) {
                return Err(invalid_input!("subject {} has no split assignment", s.subject_id));
            }
        }
        Ok(())
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.samples.iter().map(|s| s.subject_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn split_of(&self, subject_id: &str) -> Option<Split> {
        self.split.get(subject_id).copied()
    }
}

/// Pixels whose ground-truth pressure exceeds a fraction of the map maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveMask {
    rows: usize,
    cols: usize,
    mask: Vec<bool>,
    threshold_fraction: f64,
}

impl EffectiveMask {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn threshold_fraction(&self) -> f64 {
        self.threshold_fraction
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.mask[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub fn effective_mask(gt: &Grid, threshold_fraction: f64) -> Result<EffectiveMask> {
    if !(threshold_fraction > 0.0 && threshold_fraction < 1.0) {
        return Err(invalid_input!(
            "mask threshold fraction must lie in (0,1), got {threshold_fraction}"
        ));
    }
    if gt.is_empty() {
        return Err(invalid_input!("empty ground-truth map"));
    }
    let max = gt.max();
    let cut = threshold_fraction * max;
    let mask = if max > 0.0 {
        gt.iter().map(|&v| v > cut).collect()
    } else {
        vec![false; gt.len()]
    };
    Ok(EffectiveMask {
        rows: gt.rows(),
        cols: gt.cols(),
        mask,
        threshold_fraction,
    })
}
