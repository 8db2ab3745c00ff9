//! Pixel-value density over training pressure maps and the resampling
//! weights derived from it.
//!
//! Pixels are treated as independent draws, so the density is a single
//! pooled histogram over every pixel of every training map. A pixel's weight
//! is inversely proportional to the (smoothed) probability of its
//! ground-truth value's bin, which up-weights the rare high-pressure values.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, PeyeError, Result};
use crate::types::{Grid, PressureMap};

pub const DEFAULT_BINS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct PixelValueDensity {
    edges: Vec<f64>,
    probabilities: Vec<f64>,
}

impl PixelValueDensity {
    /// Equal-width bins over `[0,1]` with explicit probabilities.
    pub fn from_probabilities(probabilities: Vec<f64>) -> Result<Self> {
        let bins = probabilities.len();
        if bins < 2 {
            return Err(invalid_input!("density needs at least 2 bins, got {bins}"));
        }
        if probabilities.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(invalid_input!("probabilities must be finite and non-negative"));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid_input!("probabilities sum to {total}, expected 1"));
        }
        Ok(Self {
            edges: uniform_edges(bins),
            probabilities,
        })
    }

    pub fn bins(&self) -> usize {
        self.probabilities.len()
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    /// Bin holding `value`; 1.0 lands in the last bin, out-of-range values
    /// are clamped to the end bins.
    pub fn bin_index(&self, value: f64) -> usize {
        let bins = self.bins();
        let idx = (value * bins as f64).floor();
        if idx.is_nan() || idx < 0.0 {
            0
        } else {
            (idx as usize).min(bins - 1)
        }
    }

    pub fn probability_of(&self, value: f64) -> f64 {
        self.probabilities[self.bin_index(value)]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# peye pixel-value density\nbin_low,bin_high,probability\n");
        for (i, p) in self.probabilities.iter().enumerate() {
            let _ = writeln!(out, "{:.17e},{:.17e},{:.17e}", self.edges[i], self.edges[i + 1], p);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut probabilities = Vec::new();
        let mut lows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("bin_low") {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(PeyeError::parse(
                    format!("density line {}", lineno + 1),
                    "expected 3 comma-separated fields",
                ));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| PeyeError::parse(format!("density line {}", lineno + 1), e.to_string()))
            };
            lows.push(parse(fields[0])?);
            probabilities.push(parse(fields[2])?);
        }
        let density = Self::from_probabilities(probabilities)?;
        let uniform = density.edges.iter().zip(&lows).all(|(a, b)| (a - b).abs() < 1e-12);
        if !uniform {
            return Err(PeyeError::parse("density", "only equal-width [0,1] bins are supported"));
        }
        Ok(density)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| PeyeError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PeyeError::io(path, e))?;
        Self::from_text(&text)
    }
}

fn uniform_edges(bins: usize) -> Vec<f64> {
    (0..=bins).map(|i| i as f64 / bins as f64).collect()
}

/// Pooled histogram of all pixel values.
pub fn fit_density<'a>(maps: impl IntoIterator<Item = &'a PressureMap>, bins: usize) -> Result<PixelValueDensity> {
    if bins < 2 {
        return Err(invalid_input!("density needs at least 2 bins, got {bins}"));
    }
    let edges = uniform_edges(bins);
    let mut counts = vec![0u64; bins];
    let mut total = 0u64;
    let probe = PixelValueDensity {
        edges: edges.clone(),
        probabilities: vec![0.0; bins],
    };
    for map in maps {
        for &v in map.values() {
            counts[probe.bin_index(v)] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(invalid_input!("cannot fit a density to an empty map collection"));
    }
    let probabilities = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(PixelValueDensity { edges, probabilities })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightMapConfig {
    pub lambda_l2: f64,
    /// Hallucinated weight added to each bin probability.
    pub xi: f64,
    pub normalize_mean_to_one: bool,
}

impl Default for WeightMapConfig {
    fn default() -> Self {
        Self {
            lambda_l2: 1.0,
            xi: 0.01,
            normalize_mean_to_one: true,
        }
    }
}

impl WeightMapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l2 > 0.0 && self.lambda_l2.is_finite()) {
            return Err(invalid_config!("lambda_l2 must be positive, got {}", self.lambda_l2));
        }
        if !(self.xi >= 0.0 && self.xi.is_finite()) {
            return Err(invalid_config!("xi must be non-negative, got {}", self.xi));
        }
        Ok(())
    }
}

/// Per-pixel weights `lambda_l2 / (p(bin(gt)) + xi)`.
///
/// With `normalize_mean_to_one` the weights are rescaled to mean 1 first and
/// `lambda_l2` is then applied as an overall factor, so the returned grid has
/// mean `lambda_l2`.
pub fn weight_map(gt: &Grid, density: &PixelValueDensity, cfg: &WeightMapConfig) -> Result<Grid> {
    cfg.validate()?;
    let mut raw = Vec::with_capacity(gt.len());
    for &v in gt.iter() {
        let bin = density.bin_index(v);
        let p = density.probabilities[bin] + cfg.xi;
        if p <= 0.0 {
            return Err(PeyeError::DivisionGuard { bin });
        }
        raw.push(1.0 / p);
    }
    let scale = if cfg.normalize_mean_to_one {
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        cfg.lambda_l2 / mean
    } else {
        cfg.lambda_l2
    };
    Grid::new(gt.rows(), gt.cols(), raw.into_iter().map(|w| w * scale).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pm(rows: usize, cols: usize, values: Vec<f64>) -> PressureMap {
        PressureMap::from_values(rows, cols, values, 1.0).unwrap()
    }

    fn raw_cfg(lambda_l2: f64, xi: f64) -> WeightMapConfig {
        WeightMapConfig {
            lambda_l2,
            xi,
            normalize_mean_to_one: false,
        }
    }

    #[test]
    fn all_zero_map_puts_mass_in_first_bin() {
        let d = fit_density([&pm(2, 2, vec![0.0; 4])], 10).unwrap();
        let mut expected = vec![0.0; 10];
        expected[0] = 1.0;
        assert_eq!(d.probabilities(), expected.as_slice());
        assert_eq!(d.edges().first(), Some(&0.0));
        assert_eq!(d.edges().last(), Some(&1.0));
    }

    #[test]
    fn hand_binned_example() {
        let a = pm(1, 2, vec![0.05, 0.15]);
        let b = pm(1, 2, vec![0.15, 0.95]);
        let d = fit_density([&a, &b], 10).unwrap();
        let mut expected = vec![0.0; 10];
        expected[0] = 0.25;
        expected[1] = 0.5;
        expected[9] = 0.25;
        for (p, e) in d.probabilities().iter().zip(&expected) {
            assert!((p - e).abs() < 1e-12);
        }
    }

    #[test]
    fn one_lands_in_last_bin() {
        let d = fit_density([&pm(1, 1, vec![1.0])], 4).unwrap();
        assert_eq!(d.probabilities(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn uniform_values_give_uniform_density() {
        let bins = 20;
        let values: Vec<f64> = (0..bins).map(|i| (i as f64 + 0.5) / bins as f64).collect();
        let d = fit_density([&pm(1, bins, values)], bins).unwrap();
        for p in d.probabilities() {
            assert!((p - 1.0 / bins as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn fit_rejects_empty_and_bad_bins() {
        let none: Vec<&PressureMap> = vec![];
        assert!(fit_density(none, 10).is_err());
        assert!(fit_density([&pm(1, 1, vec![0.2])], 1).is_err());
    }

    #[test]
    fn uniform_density_without_smoothing_is_constant() {
        let bins = 8;
        let d = PixelValueDensity::from_probabilities(vec![1.0 / bins as f64; bins]).unwrap();
        let gt = Grid::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        let w = weight_map(&gt, &d, &raw_cfg(1.0, 0.0)).unwrap();
        for v in w.iter() {
            assert!((v - bins as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_direct_substitution() {
        let mut probs = vec![0.0; 4];
        probs[0] = 0.25;
        probs[1] = 0.75;
        let d = PixelValueDensity::from_probabilities(probs).unwrap();
        let gt = Grid::new(1, 2, vec![0.1, 0.9]).unwrap();
        let w = weight_map(&gt, &d, &raw_cfg(1.0, 0.05)).unwrap();
        assert!((w.get(0, 0) - 1.0 / 0.30).abs() < 1e-12);
        let w = weight_map(&gt, &d, &raw_cfg(1.0, 0.01)).unwrap();
        assert!((w.get(0, 1) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn zero_probability_bin_needs_positive_xi() {
        let d = PixelValueDensity::from_probabilities(vec![1.0, 0.0]).unwrap();
        let gt = Grid::new(1, 1, vec![0.9]).unwrap();
        let err = weight_map(&gt, &d, &raw_cfg(1.0, 0.0)).unwrap_err();
        assert!(matches!(err, PeyeError::DivisionGuard { bin: 1 }));
    }

    #[test]
    fn mean_one_normalization_then_lambda() {
        let d = PixelValueDensity::from_probabilities(vec![0.9, 0.1]).unwrap();
        let gt = Grid::new(1, 4, vec![0.1, 0.2, 0.3, 0.8]).unwrap();
        let cfg = WeightMapConfig {
            lambda_l2: 3.0,
            xi: 0.01,
            normalize_mean_to_one: true,
        };
        let w = weight_map(&gt, &d, &cfg).unwrap();
        assert!((w.mean() - 3.0).abs() < 1e-12);
        assert!(w.get(0, 3) > w.get(0, 0));
    }

    #[test]
    fn text_round_trip() {
        let d = fit_density([&pm(1, 3, vec![0.05, 0.33, 0.91])], 7).unwrap();
        let back = PixelValueDensity::from_text(&d.to_text()).unwrap();
        assert_eq!(back, d);
    }

    proptest! {
        #[test]
        fn weights_bounded_for_positive_xi(
            raw in proptest::collection::vec(0.0f64..1.0, 5),
            values in proptest::collection::vec(0.0f64..=1.0, 16),
            xi in 0.001f64..2.0,
            lambda in 0.1f64..10.0,
        ) {
            let total: f64 = raw.iter().sum::<f64>() + 1e-9;
            let mut probs: Vec<f64> = raw.iter().map(|r| r / total).collect();
            let s: f64 = probs.iter().sum();
            probs[0] += 1.0 - s;
            let d = PixelValueDensity::from_probabilities(probs).unwrap();
            let gt = Grid::new(4, 4, values).unwrap();
            let w = weight_map(&gt, &d, &raw_cfg(lambda, xi)).unwrap();
            for &v in w.iter() {
                prop_assert!(v.is_finite() && v > 0.0);
                prop_assert!(v >= lambda / (1.0 + xi) * (1.0 - 1e-12));
                prop_assert!(v <= lambda / xi * (1.0 + 1e-12));
            }
        }

        #[test]
        fn rarer_bins_never_weigh_less(values in proptest::collection::vec(0.0f64..=1.0, 64)) {
            let map = PressureMap::from_values(8, 8, values, 1.0).unwrap();
            let d = fit_density([&map], 10).unwrap();
            let w = weight_map(map.grid(), &d, &raw_cfg(1.0, 0.01)).unwrap();
            let pairs: Vec<(f64, f64)> = map
                .values()
                .iter()
                .zip(w.iter())
                .map(|(&v, &wt)| (d.probability_of(v), wt))
                .collect();
            for a in &pairs {
                for b in &pairs {
                    if a.0 < b.0 {
                        prop_assert!(a.1 >= b.1);
                    }
                }
            }
        }
    }
}
