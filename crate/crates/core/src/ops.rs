//! Layer primitives with explicit backward passes.
//!
//! The CPU backend computes input gradients of `conv2d` with a direct
//! transposed-convolution loop, and reduces per-channel gradients of
//! broadcasts over strided dimensions; together these dominate training
//! time. Here a convolution is `W @ unfold(x)` and a transposed convolution
//! is `fold(W^T @ x)`. `unfold` and `fold` are adjoint, so each one is the
//! other's backward and every pass stays on the GEMM path. Per-channel
//! affine maps reduce their gradients over contiguous trailing dimensions.

use std::ops::{Add, AddAssign, Mul};

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp3, Layout, Result, Shape, Tensor};

/// Patch geometry of an image of `c x h x w` under a `k x k` window.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        }
    }

    fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    fn cols_len(&self) -> usize {
        self.c * self.k * self.k * self.ho * self.wo
    }

    /// Output columns `[lo, hi)` whose tap `kk` lands inside `0..n`.
    fn valid(&self, kk: usize, n: usize, outs: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kk).div_ceil(self.stride);
        let hi = if n + self.pad > kk {
            ((n - 1 + self.pad - kk) / self.stride + 1).min(outs)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Calls `f(col, pixel, len)` for every run of `len` column entries
    /// reading image pixels `pixel, pixel + stride, ...` of one sample.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let mut col = 0;
        for ch in 0..self.c {
            for ky in 0..self.k {
                let (y0, y1) = self.valid(ky, self.h, self.ho);
                for kx in 0..self.k {
                    let (x0, x1) = self.valid(kx, self.w, self.wo);
                    if x1 > x0 {
                        for oy in y0..y1 {
                            let iy = oy * self.stride + ky - self.pad;
                            let ix = x0 * self.stride + kx - self.pad;
                            f(col + oy * self.wo + x0, (ch * self.h + iy) * self.w + ix, x1 - x0);
                        }
                    }
                    col += self.ho * self.wo;
                }
            }
        }
    }

    fn unfold<T: Copy + Default>(&self, src: &[T], batch: usize) -> Vec<T> {
        let s = self.stride;
        let mut out = vec![T::default(); batch * self.cols_len()];
        for (img, cols) in src
            .chunks_exact(self.image_len())
            .zip(out.chunks_exact_mut(self.cols_len()))
        {
            self.for_each_run(|c, p, len| {
                if s == 1 {
                    cols[c..c + len].copy_from_slice(&img[p..p + len]);
                } else {
                    for (i, dst) in cols[c..c + len].iter_mut().enumerate() {
                        *dst = img[p + i * s];
                    }
                }
            });
        }
        out
    }

    fn fold<T: Copy + Default + AddAssign>(&self, src: &[T], batch: usize) -> Vec<T> {
        let s = self.stride;
        let mut out = vec![T::default(); batch * self.image_len()];
        for (cols, img) in src
            .chunks_exact(self.cols_len())
            .zip(out.chunks_exact_mut(self.image_len()))
        {
            self.for_each_run(|c, p, len| {
                for (i, &v) in cols[c..c + len].iter().enumerate() {
                    img[p + i * s] += v;
                }
            });
        }
        out
    }
}

fn contiguous<'a>(storage: &'a CpuStorage, layout: &Layout, op: &str) -> Result<(&'a CpuStorage, usize, usize)> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok((storage, start, end)),
        None => bail!("{op} needs a contiguous input"),
    }
}

/// `(B, C, H, W)` to `(B, C*k*k, Ho*Wo)`.
struct Unfold(Geometry);

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let (s, start, end) = contiguous(storage, layout, "unfold")?;
        let b = layout.dims()[0];
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(g.unfold(&v[start..end], b)),
            CpuStorage::F64(v) => CpuStorage::F64(g.unfold(&v[start..end], b)),
            _ => bail!("unfold supports f32 and f64"),
        };
        Ok((out, Shape::from((b, g.c * g.k * g.k, g.ho * g.wo))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Fold(self.0))?))
    }
}

/// `(B, C*k*k, Ho*Wo)` to `(B, C, H, W)`, summing overlapping patches.
struct Fold(Geometry);

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let (s, start, end) = contiguous(storage, layout, "fold")?;
        let b = layout.dims()[0];
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(g.fold(&v[start..end], b)),
            CpuStorage::F64(v) => CpuStorage::F64(g.fold(&v[start..end], b)),
            _ => bail!("fold supports f32 and f64"),
        };
        Ok((out, Shape::from((b, g.c, g.h, g.w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Unfold(self.0))?))
    }
}

/// Same as `x.conv2d(w, padding, stride, 1, 1)`; `w` is `(O, C, k, k)`.
pub fn conv2d(x: &Tensor, w: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (o, _, k, _) = w.dims4()?;
    let g = Geometry::new(c, h, wd, k, stride, padding);
    let cols = if k == 1 && stride == 1 && padding == 0 {
        x.reshape((b, c, h * wd))?
    } else {
        x.contiguous()?.apply_op1(Unfold(g))?
    };
    w.reshape((o, ()))?.broadcast_matmul(&cols)?.reshape((b, o, g.ho, g.wo))
}

/// Same as `x.conv_transpose2d(w, 1, 0, 2, 1)` with `w` of shape
/// `(C, O, 4, 4)`: doubles H and W.
pub fn conv_transpose2d_k4s2p1(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (_, o, k, _) = w.dims4()?;
    let g = Geometry::new(o, 2 * h, 2 * wd, k, 2, 1);
    let cols = w.reshape((c, ()))?.t()?.broadcast_matmul(&x.reshape((b, c, h * wd))?)?;
    cols.apply_op1(Fold(g))
}

fn channel_affine_slice<T: Copy + Mul<Output = T> + Add<Output = T>>(
    x: &[T],
    scale: &[T],
    shift: &[T],
    plane: usize,
) -> Vec<T> {
    let c = scale.len();
    let mut out = Vec::with_capacity(x.len());
    for (i, chunk) in x.chunks_exact(plane).enumerate() {
        let (a, b) = (scale[i % c], shift[i % c]);
        out.extend(chunk.iter().map(|&v| v * a + b));
    }
    out
}

/// `y[b, c, ..] = x[b, c, ..] * scale[c] + shift[c]`.
struct ChannelAffine;

impl CustomOp3 for ChannelAffine {
    fn name(&self) -> &'static str {
        "channel-affine"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (x, x0, x1) = contiguous(s1, l1, "channel-affine")?;
        let (a, a0, a1) = contiguous(s2, l2, "channel-affine")?;
        let (b, b0, b1) = contiguous(s3, l3, "channel-affine")?;
        let dims = l1.dims();
        let plane: usize = dims[2..].iter().product();
        let out = match (x, a, b) {
            (CpuStorage::F32(x), CpuStorage::F32(a), CpuStorage::F32(b)) => {
                CpuStorage::F32(channel_affine_slice(&x[x0..x1], &a[a0..a1], &b[b0..b1], plane))
            }
            (CpuStorage::F64(x), CpuStorage::F64(a), CpuStorage::F64(b)) => {
                CpuStorage::F64(channel_affine_slice(&x[x0..x1], &a[a0..a1], &b[b0..b1], plane))
            }
            _ => bail!("channel-affine needs matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        scale: &Tensor,
        _shift: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let grad_x = channel_affine(&grad, scale, &scale.zeros_like()?)?;
        let grad_scale = channel_sum(&(&grad * x)?)?;
        let grad_shift = channel_sum(&grad)?;
        Ok((Some(grad_x), Some(grad_scale), Some(grad_shift)))
    }
}

/// Per-channel `x * scale + shift` for `(B, C, ...)` input and `(C,)`
/// scale and shift.
pub fn channel_affine(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)?;
    if scale.dims() != [c] || shift.dims() != [c] {
        bail!(
            "channel-affine expects ({c},) scale and shift, got {:?} and {:?}",
            scale.dims(),
            shift.dims()
        );
    }
    x.contiguous()?
        .apply_op3(&scale.contiguous()?, &shift.contiguous()?, ChannelAffine)
}

/// Sum over every dimension but the channel one: `(B, C, ...)` to `(C,)`.
pub fn channel_sum(x: &Tensor) -> Result<Tensor> {
    let (b, c) = (x.dim(0)?, x.dim(1)?);
    x.reshape((b, c, ()))?.sum(2)?.sum(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        assert_eq!(a.dims(), b.dims());
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar()
            .unwrap()
    }

    #[test]
    fn conv2d_matches_backend() {
        for (k, stride, padding, h, w) in [
            (3, 1, 1, 9, 7),
            (4, 2, 1, 8, 6),
            (4, 2, 1, 9, 7),
            (1, 1, 0, 5, 4),
            (3, 1, 1, 4, 4),
            (3, 1, 0, 5, 6),
        ] {
            let x = rand(&[2, 3, h, w], 1);
            let wt = rand(&[5, 3, k, k], 2);
            let ours = conv2d(&x, &wt, padding, stride).unwrap();
            let theirs = x.conv2d(&wt, padding, stride, 1, 1).unwrap();
            assert!(max_diff(&ours, &theirs) < 1e-12, "k{k} s{stride}");
        }
    }

    #[test]
    fn conv_transpose_matches_backend() {
        let x = rand(&[2, 3, 5, 4], 3);
        let wt = rand(&[3, 6, 4, 4], 4);
        let ours = conv_transpose2d_k4s2p1(&x, &wt).unwrap();
        let theirs = x.conv_transpose2d(&wt, 1, 0, 2, 1).unwrap();
        assert!(max_diff(&ours, &theirs) < 1e-12);
    }

    #[test]
    fn channel_affine_matches_broadcasts() {
        let x = Var::from_tensor(&rand(&[2, 3, 4, 5], 9)).unwrap();
        let a = Var::from_tensor(&rand(&[3], 10)).unwrap();
        let b = Var::from_tensor(&rand(&[3], 11)).unwrap();
        let probe = rand(&[2, 3, 4, 5], 12);
        let run = |ours: bool| {
            let y = if ours {
                channel_affine(x.as_tensor(), a.as_tensor(), b.as_tensor()).unwrap()
            } else {
                let r = |t: &Var| t.as_tensor().reshape((1, 3, 1, 1)).unwrap();
                x.as_tensor()
                    .broadcast_mul(&r(&a))
                    .unwrap()
                    .broadcast_add(&r(&b))
                    .unwrap()
            };
            let g = (&y * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            (y, [&x, &a, &b].map(|v| g.get(v.as_tensor()).unwrap().clone()))
        };
        let ((y1, g1), (y2, g2)) = (run(true), run(false));
        assert!(max_diff(&y1, &y2) < 1e-12);
        for (p, q) in g1.iter().zip(g2.iter()) {
            assert!(max_diff(p, q) < 1e-12);
        }
        assert_eq!(channel_sum(&probe).unwrap().dims(), &[3]);
    }

    #[test]
    fn gradients_match_backend() {
        let x = Var::from_tensor(&rand(&[2, 3, 8, 6], 5)).unwrap();
        let wc = Var::from_tensor(&rand(&[4, 3, 4, 4], 6)).unwrap();
        let wt = Var::from_tensor(&rand(&[4, 2, 4, 4], 7)).unwrap();
        let probe = rand(&[2, 2, 8, 6], 8);
        let run = |ours: bool| {
            let (mid, out) = if ours {
                let mid = conv2d(x.as_tensor(), wc.as_tensor(), 1, 2).unwrap();
                let out = conv_transpose2d_k4s2p1(&mid, wt.as_tensor()).unwrap();
                (mid, out)
            } else {
                let mid = x.as_tensor().conv2d(wc.as_tensor(), 1, 2, 1, 1).unwrap();
                let out = mid.conv_transpose2d(wt.as_tensor(), 1, 0, 2, 1).unwrap();
                (mid, out)
            };
            drop(mid);
            let g = (out * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            [&x, &wc, &wt].map(|v| g.get(v.as_tensor()).unwrap().clone())
        };
        for (a, b) in run(true).iter().zip(run(false).iter()) {
            assert!(max_diff(a, b) < 1e-10);
        }
    }
}
