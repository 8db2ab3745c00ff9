//! Dataset ingestion, alignment, normalization, splitting, batching and
//! the synthetic paired-data generator.

pub mod batch;
pub mod homography;
pub mod io;
pub mod normalize;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Result};
use crate::types::{DatasetManifest, Modality, Posture, SampleRecord, Split};

pub use homography::{estimate_homography, warp_to_pm_frame, Homography};
pub use normalize::{normalize_sample, BetaNormalizer, TrainingRanges};
pub use synth::{generate_synthetic, RenderConfig, SubjectShape, SyntheticBodySpec};

/// Samples resolved into memory together with the dataset-level calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub modality: Modality,
    pub pm_rows: usize,
    pub pm_cols: usize,
    pub raw_peak: f64,
    pub pixel_area: f64,
    pub records: Vec<SampleRecord>,
    pub split: BTreeMap<String, Split>,
}

impl Dataset {
    pub fn records_in(&self, split: Split) -> Vec<&SampleRecord> {
        self.records
            .iter()
            .filter(|r| self.split.get(&r.subject_id) == Some(&split))
            .collect()
    }

    /// Copy holding only the samples of one split.
    pub fn subset(&self, split: Split) -> Dataset {
        Dataset {
            records: self.records_in(split).into_iter().cloned().collect(),
            split: self
                .split
                .iter()
                .filter(|(_, s)| **s == split)
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
            ..self.clone_meta()
        }
    }

    /// First `n` records of a split, e.g. for overfitting checks.
    pub fn take(&self, split: Split, n: usize) -> Dataset {
        let records: Vec<SampleRecord> = self.records_in(split).into_iter().take(n).cloned().collect();
        let subjects: BTreeSet<&String> = records.iter().map(|r| &r.subject_id).collect();
        let split = subjects.into_iter().map(|s| (s.clone(), split)).collect();
        Dataset {
            records,
            split,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            modality: self.modality,
            pm_rows: self.pm_rows,
            pm_cols: self.pm_cols,
            raw_peak: self.raw_peak,
            pixel_area: self.pixel_area,
            records: Vec::new(),
            split: BTreeMap::new(),
        }
    }

    pub fn subjects(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.records.iter().map(|r| &r.subject_id).collect();
        set.into_iter().cloned().collect()
    }
}

/// Sends the last `test_subject_count` subjects (in sorted order) to the
/// test split and the rest to training.
pub fn assign_split(subjects: &[String], test_subject_count: usize) -> Result<BTreeMap<String, Split>> {
    let unique: BTreeSet<&String> = subjects.iter().collect();
    if test_subject_count >= unique.len() {
        return Err(invalid_config!(
            "cannot hold out {test_subject_count} of {} subjects",
            unique.len()
        ));
    }
    let n_train = unique.len() - test_subject_count;
    Ok(unique
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), if i < n_train { Split::Train } else { Split::Test }))
        .collect())
}

/// Subject-level split: no subject appears on both sides.
pub fn split_by_subject(
    manifest: &DatasetManifest,
    test_subject_count: usize,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let split = assign_split(&manifest.subjects(), test_subject_count)?;
    let part = |which: Split| {
        let mut m = manifest.clone();
        m.samples.retain(|s| split[&s.subject_id] == which);
        m.split = split
            .iter()
            .filter(|(_, s)| **s == which)
            .map(|(k, v)| (k.clone(), *v))
            .collect();
        m
    };
    Ok((part(Split::Train), part(Split::Test)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDatasetConfig {
    pub subjects: usize,
    pub poses_per_subject: usize,
    pub test_subjects: usize,
    pub seed: u64,
    pub render: RenderConfig,
}

impl Default for SynthDatasetConfig {
    fn default() -> Self {
        Self {
            subjects: 10,
            poses_per_subject: 6,
            test_subjects: 2,
            seed: 0,
            render: RenderConfig::default(),
        }
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the combined key
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Synthetic dataset; postures cycle supine / left / right across a
/// subject's poses.
pub fn generate_dataset(cfg: &SynthDatasetConfig) -> Result<Dataset> {
    if cfg.subjects == 0 || cfg.poses_per_subject == 0 {
        return Err(invalid_input!("need at least one subject and one pose"));
    }
    let mut records = Vec::with_capacity(cfg.subjects * cfg.poses_per_subject);
    for s in 0..cfg.subjects {
        let subject_id = format!("s{s:03}");
        let mut subject_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, s as u64, u64::MAX));
        let shape = SubjectShape::sample(&mut subject_rng);
        for p in 0..cfg.poses_per_subject {
            let sample_seed = mix(cfg.seed, s as u64, p as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
            let posture = Posture::ALL[p % Posture::ALL.len()];
            let spec = SyntheticBodySpec::sample(&shape, posture, &mut rng)?;
            let mut rec = generate_synthetic(&spec, &cfg.render, sample_seed)?;
            rec.subject_id = subject_id.clone();
            rec.pose_id = format!("p{p:02}");
            records.push(rec);
        }
    }
    let subjects: Vec<String> = (0..cfg.subjects).map(|s| format!("s{s:03}")).collect();
    let split = if cfg.test_subjects == 0 {
        subjects.into_iter().map(|s| (s, Split::Train)).collect()
    } else {
        assign_split(&subjects, cfg.test_subjects)?
    };
    Ok(Dataset {
        modality: cfg.render.modality,
        pm_rows: cfg.render.pm_rows,
        pm_cols: cfg.render.pm_cols,
        raw_peak: cfg.render.raw_peak,
        pixel_area: cfg.render.pixel_area,
        records,
        split,
    })
}
