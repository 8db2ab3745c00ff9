//! Differentiable loss terms over `(B, 1, M, N)` prediction tensors.
//!
//! Per-sample sums are averaged over the batch, so a batch of one matches
//! the grid functions in the parent module exactly.

use candle_core::{DType, Tensor};

use super::{LossValue, SsimConfig};
use crate::error::{invalid_input, Result};

fn batch_size(t: &Tensor) -> Result<usize> {
    let dims = t.dims();
    if dims.is_empty() || dims[0] == 0 {
        return Err(invalid_input!("empty batch tensor"));
    }
    Ok(dims[0])
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(invalid_input!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.dims(),
            b.dims()
        ));
    }
    Ok(())
}

pub fn pwrs(pred: &Tensor, gt: &Tensor, weights: &Tensor) -> Result<Tensor> {
    check_same(pred, gt, "pwrs pred/gt")?;
    check_same(pred, weights, "pwrs pred/weights")?;
    let b = batch_size(pred)?;
    let per_pixel = (pred - gt)?.sqr()?.mul(weights)?;
    Ok(per_pixel.sum_all()?.affine(1.0 / b as f64, 0.0)?)
}

pub fn l2(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_same(pred, gt, "l2 pred/gt")?;
    let b = batch_size(pred)?;
    Ok((pred - gt)?.sqr()?.sum_all()?.affine(1.0 / b as f64, 0.0)?)
}

/// `weight_kg` has shape `(B,)`.
pub fn physical(pred: &Tensor, weight_kg: &Tensor, pixel_area: f64) -> Result<Tensor> {
    let b = batch_size(pred)?;
    if weight_kg.dims() != [b] {
        return Err(invalid_input!(
            "body weights shape {:?} does not match batch {b}",
            weight_kg.dims()
        ));
    }
    if !(pixel_area > 0.0) {
        return Err(invalid_input!("pixel area must be positive, got {pixel_area}"));
    }
    let integral = pred.flatten_from(1)?.sum(1)?.affine(pixel_area, 0.0)?;
    Ok((integral - weight_kg)?.sqr()?.mean_all()?)
}

/// Mean SSIM over valid Gaussian windows and over the batch.
pub fn ssim_value(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> Result<Tensor> {
    check_same(a, b, "ssim")?;
    let (_, ch, rows, cols) = a.dims4()?;
    if ch != 1 {
        return Err(invalid_input!("ssim expects single-channel maps, got {ch} channels"));
    }
    cfg.check(rows, cols)?;
    let kernel = Tensor::from_vec(cfg.kernel(), (1, 1, cfg.window, cfg.window), a.device())?.to_dtype(a.dtype())?;
    let blur = |t: &Tensor| t.conv2d(&kernel, 0, 1, 1, 1);
    let mu_a = blur(a)?;
    let mu_b = blur(b)?;
    let var_a = (blur(&a.sqr()?)? - mu_a.sqr()?)?;
    let var_b = (blur(&b.sqr()?)? - mu_b.sqr()?)?;
    let cov = (blur(&a.mul(b)?)? - mu_a.mul(&mu_b)?)?;
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let num = mu_a.mul(&mu_b)?.affine(2.0, c1)?.mul(&cov.affine(2.0, c2)?)?;
    let den = (mu_a.sqr()? + mu_b.sqr()?)?
        .affine(1.0, c1)?
        .mul(&(var_a + var_b)?.affine(1.0, c2)?)?;
    Ok(num.div(&den)?.mean_all()?)
}

pub fn ssim_loss(pred: &Tensor, gt: &Tensor, cfg: &SsimConfig) -> Result<Tensor> {
    Ok(ssim_value(pred, gt, cfg)?.affine(-1.0, 1.0)?)
}

/// Least-squares discriminator objective.
pub fn lsgan_discriminator(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    if real.elem_count() == 0 || fake.elem_count() == 0 {
        return Err(invalid_input!("empty patch grid"));
    }
    let real_term = real.affine(1.0, -1.0)?.sqr()?.mean_all()?;
    let fake_term = fake.sqr()?.mean_all()?;
    Ok((real_term + fake_term)?.affine(0.5, 0.0)?)
}

/// Least-squares generator objective.
pub fn lsgan_generator(fake: &Tensor) -> Result<Tensor> {
    if fake.elem_count() == 0 {
        return Err(invalid_input!("empty patch grid"));
    }
    Ok(fake.affine(1.0, -1.0)?.sqr()?.mean_all()?)
}

impl LossValue for Tensor {
    fn to_f64(&self) -> Result<f64> {
        Ok(self.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }

    fn scaled(&self, factor: f64) -> Result<Self> {
        Ok(self.affine(factor, 0.0)?)
    }

    fn plus(&self, other: &Self) -> Result<Self> {
        Ok((self + other)?)
    }
}
