//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifest.json        DatasetManifest (relative paths)
//! <root>/vision/<id>.png      8-bit grey (LWIR) or RGB image
//! <root>/pressure/<id>.csv    normalized map, 9 significant digits
//! ```
//!
//! Real captures enter through [`super::normalize::normalize_sample`]; once
//! normalized they are written with [`save_dataset`] like synthetic data.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{invalid_input, PeyeError, Result};
use crate::types::{DatasetManifest, Grid, ManifestEntry, Modality, PressureMap, SampleRecord, VisionImage};

use super::Dataset;

/// Text grid, one row per line, values with 9 significant digits. Maps are
/// stored at `f32` precision, for which 9 digits round-trip exactly.
pub fn pressure_to_csv(pm: &PressureMap) -> String {
    let mut out = String::with_capacity(pm.values().len() * 16);
    for r in 0..pm.rows() {
        for c in 0..pm.cols() {
            if c > 0 {
                out.push(',');
            }
            let _ = write!(out, "{:.8e}", pm.grid().get(r, c));
        }
        out.push('\n');
    }
    out
}

pub fn pressure_from_csv(text: &str, raw_peak: f64) -> Result<PressureMap> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f32>()
                    .map(f64::from)
                    .map_err(|e| PeyeError::parse(format!("pressure csv line {}", i + 1), e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    PressureMap::new(Grid::from_rows(&rows)?, raw_peak)
}

pub fn write_pressure(path: &Path, pm: &PressureMap) -> Result<()> {
    std::fs::write(path, pressure_to_csv(pm)).map_err(|e| PeyeError::io(path, e))
}

pub fn read_pressure(path: &Path, raw_peak: f64) -> Result<PressureMap> {
    let text = std::fs::read_to_string(path).map_err(|e| PeyeError::io(path, e))?;
    pressure_from_csv(&text, raw_peak)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_vision(path: &Path, img: &VisionImage) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let result = match img.modality() {
        Modality::Lwir => {
            let buf: GrayImage = ImageBuffer::from_fn(w, h, |x, y| Luma([to_u8(img.get(0, y as usize, x as usize))]));
            buf.save(path)
        }
        Modality::Rgb => {
            let buf: RgbImage = ImageBuffer::from_fn(w, h, |x, y| {
                let (y, x) = (y as usize, x as usize);
                Rgb([
                    to_u8(img.get(0, y, x)),
                    to_u8(img.get(1, y, x)),
                    to_u8(img.get(2, y, x)),
                ])
            });
            buf.save(path)
        }
    };
    result.map_err(|source| PeyeError::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_vision(path: &Path, modality: Modality) -> Result<VisionImage> {
    let dynimg = image::open(path).map_err(|source| PeyeError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let data: Vec<f32> = match modality {
        Modality::Lwir => dynimg.to_luma8().pixels().map(|p| p[0] as f32 / 255.0).collect(),
        Modality::Rgb => {
            let rgb = dynimg.to_rgb8();
            let mut planar = vec![0f32; 3 * w * h];
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    planar[c * w * h + i] = p[c] as f32 / 255.0;
                }
            }
            planar
        }
    };
    VisionImage::new(h, w, modality, data)
}

fn sample_stem(rec: &SampleRecord) -> String {
    format!("{}_{}", rec.subject_id, rec.pose_id)
}

/// Writes `dataset` under `root`, creating directories as needed.
pub fn save_dataset(root: &Path, dataset: &Dataset) -> Result<DatasetManifest> {
    for dir in ["vision", "pressure"] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| PeyeError::io(&d, e))?;
    }
    let mut samples = Vec::with_capacity(dataset.records.len());
    for rec in &dataset.records {
        let stem = sample_stem(rec);
        let vision_path = PathBuf::from("vision").join(format!("{stem}.png"));
        let pressure_path = PathBuf::from("pressure").join(format!("{stem}.csv"));
        write_vision(&root.join(&vision_path), &rec.vision)?;
        write_pressure(&root.join(&pressure_path), &rec.pressure)?;
        samples.push(ManifestEntry {
            subject_id: rec.subject_id.clone(),
            pose_id: rec.pose_id.clone(),
            posture: rec.posture,
            vision_path,
            pressure_path,
            physique: rec.physique.clone(),
        });
    }
    let manifest = DatasetManifest {
        format: DatasetManifest::FORMAT.into(),
        modality: dataset.modality,
        pm_rows: dataset.pm_rows,
        pm_cols: dataset.pm_cols,
        raw_peak: dataset.raw_peak,
        pixel_area: dataset.pixel_area,
        samples,
        split: dataset.split.clone(),
    };
    manifest.validate()?;
    write_manifest(&root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, text).map_err(|e| PeyeError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| PeyeError::io(path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format != DatasetManifest::FORMAT {
        return Err(invalid_input!(
            "unsupported manifest format {:?} (expected {:?})",
            manifest.format,
            DatasetManifest::FORMAT
        ));
    }
    manifest.validate()?;
    Ok(manifest)
}

/// Loads a dataset directory (or a direct path to its manifest).
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (root, manifest_path) = if path.is_dir() {
        (path.to_path_buf(), path.join("manifest.json"))
    } else {
        (
            path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            path.to_path_buf(),
        )
    };
    let manifest = read_manifest(&manifest_path)?;
    let mut records = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let vision = read_vision(&root.join(&entry.vision_path), manifest.modality)?;
        let pressure = read_pressure(&root.join(&entry.pressure_path), manifest.raw_peak)?;
        if (pressure.rows(), pressure.cols()) != (manifest.pm_rows, manifest.pm_cols) {
            return Err(invalid_input!(
                "{} is {}x{}, manifest declares {}x{}",
                entry.pressure_path.display(),
                pressure.rows(),
                pressure.cols(),
                manifest.pm_rows,
                manifest.pm_cols
            ));
        }
        records.push(SampleRecord {
            subject_id: entry.subject_id.clone(),
            pose_id: entry.pose_id.clone(),
            posture: entry.posture,
            vision,
            pressure,
            physique: entry.physique.clone(),
        });
    }
    Ok(Dataset {
        modality: manifest.modality,
        pm_rows: manifest.pm_rows,
        pm_cols: manifest.pm_cols,
        raw_peak: manifest.raw_peak,
        pixel_area: manifest.pixel_area,
        records,
        split: manifest.split,
    })
}
