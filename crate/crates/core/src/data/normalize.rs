//! Dynamic-range normalization of raw captures into the `[0,1]` space the
//! network and all losses operate in.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, PeyeError, Result};
use crate::types::{Grid, Modality, PhysicalVector, Posture, PressureMap, SampleRecord, VisionImage};

/// Normalized physique entries may stray this far outside `[0,1]` before
/// they are clamped.
pub const BETA_MARGIN: f64 = 0.1;

/// Per-entry min-max normalizer for physique vectors, fitted on the
/// training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaNormalizer {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl BetaNormalizer {
    pub fn fit<'a>(vectors: impl IntoIterator<Item = &'a PhysicalVector>, len: usize) -> Result<Self> {
        let mut mins = vec![f64::INFINITY; len];
        let mut maxs = vec![f64::NEG_INFINITY; len];
        let mut n = 0;
        for v in vectors {
            if v.len() < len {
                return Err(invalid_input!(
                    "physique vector of length {} shorter than {len}",
                    v.len()
                ));
            }
            for (i, &x) in v.entries()[..len].iter().enumerate() {
                mins[i] = mins[i].min(x);
                maxs[i] = maxs[i].max(x);
            }
            n += 1;
        }
        if n == 0 {
            return Err(invalid_input!("cannot fit physique ranges without samples"));
        }
        Ok(Self { mins, maxs })
    }

    pub fn len(&self) -> usize {
        self.mins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mins.is_empty()
    }

    /// Min-max scales the leading entries. Entries with no training spread
    /// map to 0.5; values beyond the margin are clamped with a warning.
    pub fn normalize(&self, v: &PhysicalVector) -> Result<Vec<f64>> {
        if v.len() < self.len() {
            return Err(invalid_input!(
                "physique vector has {} entries, the model expects {}",
                v.len(),
                self.len()
            ));
        }
        let mut out = Vec::with_capacity(self.len());
        for (i, &x) in v.entries()[..self.len()].iter().enumerate() {
            let range = self.maxs[i] - self.mins[i];
            let mut z = if range > 0.0 { (x - self.mins[i]) / range } else { 0.5 };
            if !(-BETA_MARGIN..=1.0 + BETA_MARGIN).contains(&z) {
                log::warn!(
                    "{} = {x} normalizes to {z:.3}, outside the training range; clamping",
                    PhysicalVector::SLOT_NAMES[i]
                );
                z = z.clamp(-BETA_MARGIN, 1.0 + BETA_MARGIN);
            }
            out.push(z);
        }
        Ok(out)
    }
}

/// Raw vision capture in arbitrary intensity units, channel-planar.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFrame {
    pub height: usize,
    pub width: usize,
    pub modality: Modality,
    pub data: Vec<f64>,
}

impl RawFrame {
    fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Dynamic ranges measured on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRanges {
    /// `(min, max)` per vision channel.
    pub vision: Vec<(f64, f64)>,
    /// Raw pressure value mapped to 1.0.
    pub pm_peak: f64,
    pub beta: BetaNormalizer,
}

impl TrainingRanges {
    pub fn fit(frames: &[RawFrame], pms: &[Grid], physique: &[PhysicalVector], beta_len: usize) -> Result<Self> {
        let first = frames.first().ok_or_else(|| invalid_input!("no training frames"))?;
        let channels = first.modality.channels();
        let mut vision = vec![(f64::INFINITY, f64::NEG_INFINITY); channels];
        for f in frames {
            if f.modality != first.modality {
                return Err(invalid_input!("mixed modalities in training frames"));
            }
            for (c, range) in vision.iter_mut().enumerate() {
                for &v in f.plane(c) {
                    range.0 = range.0.min(v);
                    range.1 = range.1.max(v);
                }
            }
        }
        let pm_peak = pms.iter().map(Grid::max).fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            vision,
            pm_peak,
            beta: BetaNormalizer::fit(physique, beta_len)?,
        })
    }
}

/// A normalized record plus the network-ready physique entries. The record
/// keeps the physique in physical units since the weight constraint needs kg.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSample {
    pub record: SampleRecord,
    pub beta_normalized: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn normalize_sample(
    subject_id: &str,
    pose_id: &str,
    posture: Posture,
    vision: &RawFrame,
    pm: &Grid,
    physique: &PhysicalVector,
    ranges: &TrainingRanges,
) -> Result<NormalizedSample> {
    let channels = vision.modality.channels();
    if vision.data.len() != channels * vision.height * vision.width {
        return Err(invalid_input!("raw frame size does not match its dimensions"));
    }
    if ranges.vision.len() != channels {
        return Err(invalid_input!(
            "training ranges cover {} channels, frame has {channels}",
            ranges.vision.len()
        ));
    }
    let mut data = Vec::with_capacity(vision.data.len());
    for c in 0..channels {
        let plane = vision.plane(c);
        let (lo, hi) = plane.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        if !(hi > lo) {
            return Err(PeyeError::Degenerate(format!(
                "vision channel {c} of {subject_id}/{pose_id} is constant"
            )));
        }
        let (rlo, rhi) = ranges.vision[c];
        if !(rhi > rlo) {
            return Err(PeyeError::Degenerate(format!(
                "training range of vision channel {c} is empty"
            )));
        }
        data.extend(plane.iter().map(|&v| ((v - rlo) / (rhi - rlo)).clamp(0.0, 1.0) as f32));
    }
    if !(ranges.pm_peak > 0.0) {
        return Err(PeyeError::Degenerate("training pressure range is empty".into()));
    }
    let pm_norm = pm.map(|v| (v / ranges.pm_peak).clamp(0.0, 1.0));
    let record = SampleRecord {
        subject_id: subject_id.to_string(),
        pose_id: pose_id.to_string(),
        posture,
        vision: VisionImage::new(vision.height, vision.width, vision.modality, data)?,
        pressure: PressureMap::new(pm_norm, ranges.pm_peak)?,
        physique: physique.clone(),
    };
    let beta_normalized = ranges.beta.normalize(physique)?;
    Ok(NormalizedSample {
        record,
        beta_normalized,
    })
}
