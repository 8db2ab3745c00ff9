//! Supervision terms.
//!
//! The functions in this module work on plain [`Grid`]s in f64 and double as
//! the reference implementation for evaluation and testing. [`tensor`] holds
//! the differentiable counterparts used by the training engine; both sides
//! share [`total_loss`] for the weighted combination.

pub mod tensor;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, PeyeError, Result};
use crate::types::Grid;

/// Weights of the individual terms in the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_pwrs: f64,
    pub lambda_phy: f64,
    pub lambda_ssim: f64,
    pub lambda_d: f64,
    pub lambda_base_l2: f64,
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        lambda_pwrs: 0.0,
        lambda_phy: 0.0,
        lambda_ssim: 0.0,
        lambda_d: 0.0,
        lambda_base_l2: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(invalid_config!("loss weight {name} must be >= 0, got {w}"));
            }
        }
        if self.named().iter().all(|(_, w)| *w == 0.0) {
            return Err(invalid_config!("all loss weights are zero"));
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("pwrs", self.lambda_pwrs),
            ("phy", self.lambda_phy),
            ("ssim", self.lambda_ssim),
            ("adv", self.lambda_d),
            ("l2", self.lambda_base_l2),
        ]
    }
}

/// `sum_ij w(i,j) * (pred(i,j) - gt(i,j))^2`
pub fn pwrs_loss(pred: &Grid, gt: &Grid, weights: &Grid) -> Result<f64> {
    pred.ensure_same_dims(gt, "pwrs_loss pred/gt")?;
    pred.ensure_same_dims(weights, "pwrs_loss pred/weights")?;
    Ok(pred
        .iter()
        .zip(gt.iter())
        .zip(weights.iter())
        .map(|((p, g), w)| w * (p - g) * (p - g))
        .sum())
}

pub fn pwrs_loss_grad(pred: &Grid, gt: &Grid, weights: &Grid) -> Result<Grid> {
    pred.ensure_same_dims(gt, "pwrs_loss pred/gt")?;
    pred.ensure_same_dims(weights, "pwrs_loss pred/weights")?;
    let data = pred
        .iter()
        .zip(gt.iter())
        .zip(weights.iter())
        .map(|((p, g), w)| 2.0 * w * (p - g))
        .collect();
    Grid::new(pred.rows(), pred.cols(), data)
}

/// Plain sum-of-squares reconstruction loss.
pub fn l2_loss(pred: &Grid, gt: &Grid) -> Result<f64> {
    pred.ensure_same_dims(gt, "l2_loss")?;
    Ok(pred.iter().zip(gt.iter()).map(|(p, g)| (p - g) * (p - g)).sum())
}

/// `(c * sum(pred) - weight_kg)^2`: integrated pressure should equal body weight.
pub fn physical_loss(pred: &Grid, weight_kg: f64, pixel_area: f64) -> Result<f64> {
    if !(pixel_area > 0.0) {
        return Err(invalid_input!("pixel area must be positive, got {pixel_area}"));
    }
    let r = pixel_area * pred.sum() - weight_kg;
    Ok(r * r)
}

/// The gradient is the same at every pixel: `2c(c*sum - w)`.
pub fn physical_loss_grad(pred: &Grid, weight_kg: f64, pixel_area: f64) -> Result<Grid> {
    if !(pixel_area > 0.0) {
        return Err(invalid_input!("pixel area must be positive, got {pixel_area}"));
    }
    let g = 2.0 * pixel_area * (pixel_area * pred.sum() - weight_kg);
    Grid::filled(pred.rows(), pred.cols(), g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    /// Odd side length of the Gaussian window.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.peak).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.peak).powi(2)
    }

    pub(crate) fn check(&self, rows: usize, cols: usize) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(invalid_input!("SSIM window must be odd, got {}", self.window));
        }
        if self.window > rows.min(cols) {
            return Err(invalid_input!(
                "SSIM window {} larger than map {rows}x{cols}",
                self.window
            ));
        }
        if !(self.sigma > 0.0 && self.peak > 0.0) {
            return Err(invalid_input!("SSIM sigma and peak must be positive"));
        }
        Ok(())
    }

    /// Normalized 2-D Gaussian window, row-major.
    pub fn kernel(&self) -> Vec<f64> {
        let half = (self.window / 2) as f64;
        let g: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - half;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = g.iter().sum();
        let g: Vec<f64> = g.iter().map(|v| v / s).collect();
        let mut k = Vec::with_capacity(self.window * self.window);
        for a in &g {
            for b in &g {
                k.push(a * b);
            }
        }
        k
    }
}

/// Mean SSIM over all fully-contained Gaussian windows.
pub fn ssim_value(a: &Grid, b: &Grid, cfg: &SsimConfig) -> Result<f64> {
    a.ensure_same_dims(b, "ssim")?;
    cfg.check(a.rows(), a.cols())?;
    let kernel = cfg.kernel();
    let win = cfg.window;
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=a.rows() - win {
        for c0 in 0..=a.cols() - win {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dr in 0..win {
                for dc in 0..win {
                    let w = kernel[dr * win + dc];
                    let x = a.get(r0 + dr, c0 + dc);
                    let y = b.get(r0 + dr, c0 + dc);
                    ma += w * x;
                    mb += w * y;
                    saa += w * x * x;
                    sbb += w * y * y;
                    sab += w * x * y;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn ssim_loss(pred: &Grid, gt: &Grid, cfg: &SsimConfig) -> Result<f64> {
    Ok(1.0 - ssim_value(pred, gt, cfg)?)
}

/// Least-squares GAN objectives over patch scores: `(d_loss, g_loss)`.
pub fn adversarial_losses(real: &Grid, fake: &Grid) -> Result<(f64, f64)> {
    if real.is_empty() || fake.is_empty() {
        return Err(invalid_input!("empty patch grid"));
    }
    let mean = |g: &Grid, f: &dyn Fn(f64) -> f64| g.iter().map(|&v| f(v)).sum::<f64>() / g.len() as f64;
    let d = 0.5 * mean(real, &|v| (v - 1.0).powi(2)) + 0.5 * mean(fake, &|v| v * v);
    let g = mean(fake, &|v| (v - 1.0).powi(2));
    Ok((d, g))
}

/// A loss value that can be scaled and summed: `f64` for evaluation,
/// a scalar tensor for training.
pub trait LossValue: Clone {
    fn to_f64(&self) -> Result<f64>;
    fn scaled(&self, factor: f64) -> Result<Self>;
    fn plus(&self, other: &Self) -> Result<Self>;
}

impl LossValue for f64 {
    fn to_f64(&self) -> Result<f64> {
        Ok(*self)
    }

    fn scaled(&self, factor: f64) -> Result<Self> {
        Ok(self * factor)
    }

    fn plus(&self, other: &Self) -> Result<Self> {
        Ok(self + other)
    }
}

/// Individual term values computed on one prediction. Terms that are not
/// computed stay `None`; their weight must then be zero.
#[derive(Debug, Clone)]
pub struct LossComponents<T> {
    pub pwrs: Option<T>,
    pub phy: Option<T>,
    pub ssim: Option<T>,
    /// Generator-side adversarial term.
    pub adv: Option<T>,
    pub l2: Option<T>,
}

impl<T> Default for LossComponents<T> {
    fn default() -> Self {
        Self {
            pwrs: None,
            phy: None,
            ssim: None,
            adv: None,
            l2: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossTermValue {
    pub name: &'static str,
    pub raw: f64,
    pub weighted: f64,
}

#[derive(Debug, Clone)]
pub struct TotalLoss<T> {
    pub total: T,
    pub breakdown: Vec<LossTermValue>,
}

/// `lambda_pwrs*L_pwrs + lambda_phy*L_phy + lambda_ssim*L_ssim + lambda_D*L_adv + lambda_l2*L_2`
pub fn total_loss<T: LossValue>(components: &LossComponents<T>, weights: &LossWeights) -> Result<TotalLoss<T>> {
    weights.validate()?;
    let terms = [
        ("pwrs", weights.lambda_pwrs, &components.pwrs),
        ("phy", weights.lambda_phy, &components.phy),
        ("ssim", weights.lambda_ssim, &components.ssim),
        ("adv", weights.lambda_d, &components.adv),
        ("l2", weights.lambda_base_l2, &components.l2),
    ];
    let mut total: Option<T> = None;
    let mut breakdown = Vec::new();
    for (name, weight, value) in terms {
        if weight == 0.0 {
            continue;
        }
        let value = value.as_ref().ok_or_else(|| {
            PeyeError::Precondition(format!("loss term {name} has weight {weight} but was not computed"))
        })?;
        let weighted = value.scaled(weight)?;
        let raw = value.to_f64()?;
        breakdown.push(LossTermValue {
            name,
            raw,
            weighted: raw * weight,
        });
        total = Some(match total {
            None => weighted,
            Some(t) => t.plus(&weighted)?,
        });
    }
    // validate() guarantees at least one active term
    let total = total.expect("at least one active loss term");
    Ok(TotalLoss { total, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(rows: usize, cols: usize, v: Vec<f64>) -> Grid {
        Grid::new(rows, cols, v).unwrap()
    }

    #[test]
    fn pwrs_examples() {
        let gt = g(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        let w = Grid::filled(2, 2, 2.0).unwrap();
        assert_eq!(pwrs_loss(&gt, &gt, &w).unwrap(), 0.0);
        let v = pwrs_loss(&g(1, 1, vec![0.5]), &g(1, 1, vec![0.2]), &g(1, 1, vec![3.0])).unwrap();
        assert!((v - 0.27).abs() < 1e-12);
        let pred = g(2, 2, vec![0.0, 0.5, 0.5, 1.0]);
        let lhs = pwrs_loss(&pred, &gt, &Grid::filled(2, 2, 7.0).unwrap()).unwrap();
        assert!((lhs - 7.0 * l2_loss(&pred, &gt).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pwrs_dimension_mismatch() {
        let a = Grid::filled(2, 2, 0.0).unwrap();
        let b = Grid::filled(2, 3, 0.0).unwrap();
        assert!(matches!(pwrs_loss(&a, &b, &a), Err(PeyeError::InvalidInput(_))));
        assert!(pwrs_loss(&a, &a, &b).is_err());
    }

    #[test]
    fn physical_examples() {
        let sum_to = |s: f64| g(1, 2, vec![s / 2.0, s / 2.0]);
        assert_eq!(physical_loss(&sum_to(70.0), 70.0, 1.0).unwrap(), 0.0);
        assert!((physical_loss(&sum_to(10.0), 12.0, 1.0).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(physical_loss(&sum_to(140.0), 70.0, 0.5).unwrap(), 0.0);
        assert!(physical_loss(&sum_to(1.0), 1.0, 0.0).is_err());
    }

    #[test]
    fn physical_gradient_is_uniform() {
        let pred = g(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let grad = physical_loss_grad(&pred, 8.0, 0.5).unwrap();
        assert!(grad.iter().all(|&v| (v - 2.0 * 0.5 * (5.0 - 8.0)).abs() < 1e-12));
    }

    #[test]
    fn ssim_examples() {
        let cfg = SsimConfig::default();
        let a = Grid::from_fn(16, 16, |r, c| ((r * 7 + c * 3) % 11) as f64 / 10.0).unwrap();
        assert!((ssim_value(&a, &a, &cfg).unwrap() - 1.0).abs() < 1e-9);
        let half = Grid::filled(16, 12, 0.5).unwrap();
        let quarter = Grid::filled(16, 12, 0.25).unwrap();
        let expected = (2.0 * 0.5 * 0.25 + 1e-4) / (0.25 + 0.0625 + 1e-4);
        let v = ssim_value(&half, &quarter, &cfg).unwrap();
        assert!((v - expected).abs() < 1e-9, "{v} vs {expected}");
        assert!((v - 0.8001).abs() < 1e-3);
        assert!((ssim_loss(&half, &quarter, &cfg).unwrap() - 0.1999).abs() < 1e-3);
        let zero = Grid::filled(12, 12, 0.0).unwrap();
        assert!((ssim_value(&zero, &zero, &cfg).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_window_too_large() {
        let a = Grid::filled(8, 20, 0.1).unwrap();
        assert!(matches!(
            ssim_value(&a, &a, &SsimConfig::default()),
            Err(PeyeError::InvalidInput(_))
        ));
        let even = SsimConfig {
            window: 4,
            ..SsimConfig::default()
        };
        assert!(ssim_value(&a, &a, &even).is_err());
    }

    #[test]
    fn adversarial_examples() {
        let ones = Grid::filled(2, 2, 1.0).unwrap();
        let zeros = Grid::filled(2, 2, 0.0).unwrap();
        let halves = Grid::filled(2, 2, 0.5).unwrap();
        assert_eq!(adversarial_losses(&ones, &zeros).unwrap().0, 0.0);
        assert_eq!(adversarial_losses(&zeros, &ones).unwrap().1, 0.0);
        assert!((adversarial_losses(&halves, &halves).unwrap().0 - 0.25).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let weights = LossWeights {
            lambda_pwrs: 100.0,
            ..LossWeights::ZERO
        };
        let comps = LossComponents {
            pwrs: Some(0.02),
            ..Default::default()
        };
        let t = total_loss(&comps, &weights).unwrap();
        assert!((t.total - 2.0).abs() < 1e-12);
        assert_eq!(t.breakdown.len(), 1);
        assert_eq!(t.breakdown[0].name, "pwrs");

        let all = LossWeights {
            lambda_pwrs: 100.0,
            lambda_phy: 1e-6,
            lambda_ssim: 10.0,
            lambda_d: 1.0,
            lambda_base_l2: 0.0,
        };
        let zeros = LossComponents {
            pwrs: Some(0.0),
            phy: Some(0.0),
            ssim: Some(0.0),
            adv: Some(0.0),
            l2: None,
        };
        assert_eq!(total_loss(&zeros, &all).unwrap().total, 0.0);
    }

    #[test]
    fn total_loss_errors() {
        let comps = LossComponents {
            pwrs: Some(1.0),
            ..Default::default()
        };
        assert!(matches!(
            total_loss(&comps, &LossWeights::ZERO),
            Err(PeyeError::InvalidConfig(_))
        ));
        let phy_only = LossWeights {
            lambda_phy: 1.0,
            ..LossWeights::ZERO
        };
        assert!(matches!(total_loss(&comps, &phy_only), Err(PeyeError::Precondition(_))));
    }

    proptest! {
        #[test]
        fn physical_loss_ignores_pixel_order(
            mut values in proptest::collection::vec(0.0f64..1.0, 16),
            w in 1.0f64..100.0,
        ) {
            let a = physical_loss(&g(4, 4, values.clone()), w, 0.7).unwrap();
            values.reverse();
            values.rotate_left(5);
            let b = physical_loss(&g(4, 4, values), w, 0.7).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }

        #[test]
        fn pwrs_zero_iff_equal(
            gt in proptest::collection::vec(0.0f64..1.0, 9),
            delta in proptest::collection::vec(-0.5f64..0.5, 9),
            w in proptest::collection::vec(0.1f64..5.0, 9),
        ) {
            let gt = g(3, 3, gt);
            let w = g(3, 3, w);
            let pred = g(3, 3, gt.iter().zip(&delta).map(|(a, d)| a + d).collect());
            let v = pwrs_loss(&pred, &gt, &w).unwrap();
            prop_assert!(v >= 0.0);
            let moved = delta.iter().any(|d| *d != 0.0);
            prop_assert_eq!(v > 0.0, moved);
        }

        #[test]
        fn ssim_is_symmetric(
            a in proptest::collection::vec(0.0f64..1.0, 144),
            b in proptest::collection::vec(0.0f64..1.0, 144),
        ) {
            let cfg = SsimConfig::default();
            let (a, b) = (g(12, 12, a), g(12, 12, b));
            let ab = ssim_value(&a, &b, &cfg).unwrap();
            let ba = ssim_value(&b, &a, &cfg).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab));
            let loss = ssim_loss(&a, &b, &cfg).unwrap();
            prop_assert!((0.0..=2.0).contains(&loss));
        }
    }
}
