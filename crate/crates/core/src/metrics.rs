//! Sensing-accuracy metrics: PCS and MSE restricted to the effective area,
//! PSNR, SSIM, and PCS curves over an error-tolerance sweep.
//!
//! The effective area is always derived from the ground truth. When it is
//! empty (an all-zero ground-truth map) the masked metrics return `None`
//! so aggregates can skip the frame instead of counting it as 0 or 1.

use serde::Serialize;

use crate::error::{invalid_input, Result};
use crate::losses::SsimConfig;
use crate::types::{effective_mask, EffectiveMask, Grid};

pub use crate::losses::ssim_value;

/// Tolerances reported in evaluation tables.
pub const REPORT_EPSILONS: [f64; 3] = [0.05, 0.1, 0.2];
/// Effective-area thresholds reported side by side.
pub const REPORT_MASK_FRACTIONS: [f64; 2] = [0.05, 0.1];
/// Mask threshold used when a single headline PCS figure is needed.
pub const HEADLINE_MASK_FRACTION: f64 = 0.1;

/// Signed per-pixel error `pred - gt`, with the rounding bound of each
/// subtraction.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMap(Grid, Vec<f64>);

impl ErrorMap {
    pub fn new(pred: &Grid, gt: &Grid) -> Result<Self> {
        pred.ensure_same_dims(gt, "error map")?;
        let data = pred.iter().zip(gt.iter()).map(|(p, g)| p - g).collect();
        let slack = pred
            .iter()
            .zip(gt.iter())
            .map(|(p, g)| 2.0 * f64::EPSILON * p.abs().max(g.abs()))
            .collect();
        Ok(ErrorMap(Grid::new(pred.rows(), pred.cols(), data)?, slack))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    fn masked_abs(&self, mask: &EffectiveMask) -> impl Iterator<Item = f64> + '_ {
        let mask = mask.as_slice().to_vec();
        self.0.iter().zip(mask).filter_map(|(e, m)| m.then_some(e.abs()))
    }

    /// Fraction of effective pixels with `|E| < epsilon` (strict). An error
    /// within rounding distance of `epsilon` counts as on the boundary, so
    /// `1.0 - 0.9` does not pass `epsilon = 0.1`.
    pub fn pcs(&self, mask: &EffectiveMask, epsilon: f64) -> Option<f64> {
        let n = mask.count();
        if n == 0 {
            return None;
        }
        let hits = self
            .0
            .iter()
            .zip(&self.1)
            .zip(mask.as_slice())
            .filter(|((e, &slack), &m)| m && e.abs() + slack.max(f64::EPSILON * epsilon) < epsilon)
            .count();
        Some(hits as f64 / n as f64)
    }

    pub fn mse(&self, mask: &EffectiveMask) -> Option<f64> {
        let n = mask.count();
        if n == 0 {
            return None;
        }
        Some(self.masked_abs(mask).map(|e| e * e).sum::<f64>() / n as f64)
    }

    pub fn max_abs(&self, mask: &EffectiveMask) -> Option<f64> {
        self.masked_abs(mask).reduce(f64::max)
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(invalid_input!("epsilon must be positive, got {epsilon}"));
    }
    Ok(())
}

pub fn pcs_efs(pred: &Grid, gt: &Grid, mask_threshold_fraction: f64, epsilon: f64) -> Result<Option<f64>> {
    check_epsilon(epsilon)?;
    let err = ErrorMap::new(pred, gt)?;
    let mask = effective_mask(gt, mask_threshold_fraction)?;
    Ok(err.pcs(&mask, epsilon))
}

pub fn mse_efs(pred: &Grid, gt: &Grid, mask_threshold_fraction: f64) -> Result<Option<f64>> {
    let err = ErrorMap::new(pred, gt)?;
    let mask = effective_mask(gt, mask_threshold_fraction)?;
    Ok(err.mse(&mask))
}

/// PSNR in dB over the full map; identical maps give `f64::INFINITY`.
pub fn psnr(pred: &Grid, gt: &Grid, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(invalid_input!("PSNR peak must be positive, got {peak}"));
    }
    let mse = ErrorMap::new(pred, gt)?.0.iter().map(|e| e * e).sum::<f64>() / pred.len() as f64;
    Ok(psnr_from_mse(mse, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PcsCurve {
    epsilons: Vec<f64>,
    pcs: Vec<f64>,
}

impl PcsCurve {
    pub fn epsilons(&self) -> &[f64] {
        &self.epsilons
    }

    pub fn pcs(&self) -> &[f64] {
        &self.pcs
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.epsilons.iter().copied().zip(self.pcs.iter().copied())
    }

    /// Point-wise mean of curves sharing the same tolerances.
    pub fn mean<'a>(curves: impl IntoIterator<Item = &'a PcsCurve>) -> Result<Option<PcsCurve>> {
        let mut acc: Option<PcsCurve> = None;
        let mut n = 0usize;
        for c in curves {
            match &mut acc {
                None => acc = Some(c.clone()),
                Some(a) => {
                    if a.epsilons != c.epsilons {
                        return Err(invalid_input!("cannot average curves over different tolerances"));
                    }
                    for (x, y) in a.pcs.iter_mut().zip(&c.pcs) {
                        *x += y;
                    }
                }
            }
            n += 1;
        }
        Ok(acc.map(|mut a| {
            for v in &mut a.pcs {
                *v /= n as f64;
            }
            a
        }))
    }
}

/// PCS at each tolerance; `None` when the effective area is empty.
pub fn pcs_curve(pred: &Grid, gt: &Grid, mask_threshold_fraction: f64, epsilons: &[f64]) -> Result<Option<PcsCurve>> {
    if epsilons.is_empty() {
        return Err(invalid_input!("no tolerances given"));
    }
    for &e in epsilons {
        check_epsilon(e)?;
    }
    if epsilons.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid_input!("tolerances must be strictly ascending"));
    }
    let err = ErrorMap::new(pred, gt)?;
    let mask = effective_mask(gt, mask_threshold_fraction)?;
    if mask.count() == 0 {
        return Ok(None);
    }
    let pcs = epsilons
        .iter()
        .map(|&e| err.pcs(&mask, e).expect("non-empty mask"))
        .collect();
    Ok(Some(PcsCurve {
        epsilons: epsilons.to_vec(),
        pcs,
    }))
}

/// 0.01, 0.02, ..., 0.30
pub fn default_curve_epsilons() -> Vec<f64> {
    (1..=30).map(|i| i as f64 / 100.0).collect()
}

/// PCS/MSE over one effective-area threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskedScores {
    pub mask_fraction: f64,
    pub mse_efs: Option<f64>,
    /// One entry per [`REPORT_EPSILONS`].
    pub pcs_efs: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    /// One entry per [`REPORT_MASK_FRACTIONS`].
    pub masked: Vec<MaskedScores>,
    pub psnr: f64,
    pub ssim: f64,
}

impl SampleMetrics {
    pub fn compute(sample_id: impl Into<String>, pred: &Grid, gt: &Grid, ssim: &SsimConfig) -> Result<Self> {
        let err = ErrorMap::new(pred, gt)?;
        let masked = REPORT_MASK_FRACTIONS
            .iter()
            .map(|&frac| {
                let mask = effective_mask(gt, frac)?;
                Ok(MaskedScores {
                    mask_fraction: frac,
                    mse_efs: err.mse(&mask),
                    pcs_efs: REPORT_EPSILONS.iter().map(|&e| err.pcs(&mask, e)).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sample_id: sample_id.into(),
            masked,
            psnr: psnr(pred, gt, ssim.peak)?,
            ssim: ssim_value(pred, gt, ssim)?,
        })
    }

    pub fn scores_for(&self, mask_fraction: f64) -> Option<&MaskedScores> {
        self.masked.iter().find(|m| m.mask_fraction == mask_fraction)
    }

    pub fn pcs_at(&self, mask_fraction: f64, epsilon: f64) -> Option<f64> {
        let idx = REPORT_EPSILONS.iter().position(|&e| e == epsilon)?;
        self.scores_for(mask_fraction)?.pcs_efs[idx]
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Aggregate of per-sample metrics; undefined frames are skipped.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsSummary {
    pub samples: usize,
    pub masked: Vec<MaskedScores>,
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricsSummary {
    pub fn from_samples(samples: &[SampleMetrics]) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid_input!("no samples to summarize"));
        }
        let masked = REPORT_MASK_FRACTIONS
            .iter()
            .enumerate()
            .map(|(mi, &frac)| MaskedScores {
                mask_fraction: frac,
                mse_efs: mean_defined(samples.iter().map(|s| s.masked[mi].mse_efs)),
                pcs_efs: (0..REPORT_EPSILONS.len())
                    .map(|ei| mean_defined(samples.iter().map(|s| s.masked[mi].pcs_efs[ei])))
                    .collect(),
            })
            .collect();
        let n = samples.len() as f64;
        Ok(Self {
            samples: samples.len(),
            masked,
            psnr: samples.iter().map(|s| s.psnr).sum::<f64>() / n,
            ssim: samples.iter().map(|s| s.ssim).sum::<f64>() / n,
        })
    }

    pub fn scores_for(&self, mask_fraction: f64) -> Option<&MaskedScores> {
        self.masked.iter().find(|m| m.mask_fraction == mask_fraction)
    }

    pub fn pcs_at(&self, mask_fraction: f64, epsilon: f64) -> Option<f64> {
        let idx = REPORT_EPSILONS.iter().position(|&e| e == epsilon)?;
        self.scores_for(mask_fraction)?.pcs_efs[idx]
    }

    pub fn mse_efs(&self, mask_fraction: f64) -> Option<f64> {
        self.scores_for(mask_fraction)?.mse_efs
    }
}
