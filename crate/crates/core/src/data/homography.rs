//! Planar homography between a camera frame and the pressure-mat frame.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, PeyeError, Result};
use crate::types::{bilinear, VisionImage};

const MIN_DET: f64 = 1e-12;

/// 3x3 projective map with `h33 = 1`, acting on `(x, y)` pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(invalid_input!("homography has non-finite entries"));
        }
        let s = m[(2, 2)];
        if s.abs() < MIN_DET {
            return Err(invalid_input!("homography h33 is zero and cannot be normalized"));
        }
        let m = m / s;
        if m.determinant().abs() < MIN_DET {
            return Err(PeyeError::Degenerate("homography is not invertible".into()));
        }
        Ok(Self { m })
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            m: Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .m
            .try_inverse()
            .ok_or_else(|| PeyeError::Degenerate("homography is not invertible".into()))?;
        Self::from_matrix(inv)
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let v = self.m * Vector3::new(p[0], p[1], 1.0);
        [v[0] / v[2], v[1] / v[2]]
    }
}

impl TryFrom<[[f64; 3]; 3]> for Homography {
    type Error = PeyeError;

    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self> {
        Homography::from_matrix(Matrix3::from_fn(|r, c| rows[r][c]))
    }
}

impl From<Homography> for [[f64; 3]; 3] {
    fn from(h: Homography) -> Self {
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = h.m[(r, c)];
            }
        }
        out
    }
}

/// Translate to the centroid and scale to mean distance sqrt(2).
fn hartley_normalize(pts: &[[f64; 2]]) -> (Vec<[f64; 2]>, Matrix3<f64>) {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_dist = pts
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean_dist > 1e-12 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    let out = pts.iter().map(|p| [s * (p[0] - cx), s * (p[1] - cy)]).collect();
    (out, t)
}

fn collinear(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
    let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    let scale = [(b[0] - a[0]).hypot(b[1] - a[1]), (c[0] - a[0]).hypot(c[1] - a[1])]
        .iter()
        .fold(1e-300f64, |m, v| m.max(*v));
    cross.abs() <= 1e-10 * scale * scale
}

/// Direct linear transform with Hartley normalization; least squares when
/// more than four correspondences are given. Maps `src` onto `dst`.
pub fn estimate_homography(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<Homography> {
    if src.len() != dst.len() {
        return Err(invalid_input!(
            "point count mismatch: {} source vs {} destination",
            src.len(),
            dst.len()
        ));
    }
    if src.len() < 4 {
        return Err(invalid_input!("need at least 4 correspondences, got {}", src.len()));
    }
    if src.len() == 4 {
        for pts in [src, dst] {
            for (i, j, k) in [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)] {
                if collinear(pts[i], pts[j], pts[k]) {
                    return Err(PeyeError::RankDeficient(format!("points {i}, {j}, {k} are collinear")));
                }
            }
        }
    }
    let (s, ts) = hartley_normalize(src);
    let (d, td) = hartley_normalize(dst);

    // Pad to at least 9 rows so the SVD exposes the full right null space.
    let n = src.len();
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for k in 0..n {
        let [x, y] = s[k];
        let [u, v] = d[k];
        let r = 2 * k;
        a[(r, 0)] = -x;
        a[(r, 1)] = -y;
        a[(r, 2)] = -1.0;
        a[(r, 6)] = u * x;
        a[(r, 7)] = u * y;
        a[(r, 8)] = u;
        a[(r + 1, 3)] = -x;
        a[(r + 1, 4)] = -y;
        a[(r + 1, 5)] = -1.0;
        a[(r + 1, 6)] = v * x;
        a[(r + 1, 7)] = v * y;
        a[(r + 1, 8)] = v;
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| PeyeError::RankDeficient("SVD failed to converge".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let largest = svd.singular_values[order[0]];
    // The 8th singular value must be clearly non-zero for a unique solution.
    if svd.singular_values[order[7]] <= 1e-10 * largest {
        return Err(PeyeError::RankDeficient(
            "correspondences do not determine a unique homography".into(),
        ));
    }
    let h = v_t.row(order[8]);
    let hn = Matrix3::from_row_slice(&[h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| PeyeError::RankDeficient("degenerate destination points".into()))?;
    Homography::from_matrix(td_inv * hn * ts)
}

/// Maximum reprojection distance of `src` mapped through `h` against `dst`.
pub fn reprojection_error(h: &Homography, src: &[[f64; 2]], dst: &[[f64; 2]]) -> f64 {
    src.iter()
        .zip(dst)
        .map(|(s, d)| {
            let p = h.apply(*s);
            (p[0] - d[0]).hypot(p[1] - d[1])
        })
        .fold(0.0, f64::max)
}

/// Resamples `img` into the destination frame of `h` (image -> PM frame),
/// bilinearly; destination pixels whose preimage falls outside the source
/// are zero.
pub fn warp_to_pm_frame(img: &VisionImage, h: &Homography, out_size: (usize, usize)) -> Result<VisionImage> {
    let (out_h, out_w) = out_size;
    if out_h == 0 || out_w == 0 {
        return Err(invalid_input!("output size must be positive"));
    }
    let inv = h.inverse()?;
    let (in_h, in_w) = (img.height(), img.width());
    let max_x = (in_w - 1) as f64;
    let max_y = (in_h - 1) as f64;
    let mut data = vec![0f32; img.channels() * out_h * out_w];
    for y in 0..out_h {
        for x in 0..out_w {
            let [sx, sy] = inv.apply([x as f64, y as f64]);
            // tolerate rounding noise on the border
            const EDGE: f64 = 1e-9;
            if !(sx >= -EDGE && sy >= -EDGE && sx <= max_x + EDGE && sy <= max_y + EDGE) {
                continue;
            }
            let (sx, sy) = (sx.clamp(0.0, max_x), sy.clamp(0.0, max_y));
            for c in 0..img.channels() {
                let v = bilinear(img.plane(c), in_h, in_w, sy, sx);
                data[(c * out_h + y) * out_w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    VisionImage::new(out_h, out_w, img.modality(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Modality;

    const SQUARE: [[f64; 2]; 4] = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];

    fn assert_matrix_close(h: &Homography, want: Matrix3<f64>, tol: f64) {
        for (a, b) in h.matrix().iter().zip(want.iter()) {
            assert!((a - b).abs() < tol, "{} vs {want}", h.matrix());
        }
    }

    #[test]
    fn identical_points_give_identity() {
        let h = estimate_homography(&SQUARE, &SQUARE).unwrap();
        assert_matrix_close(&h, Matrix3::identity(), 1e-9);
    }

    #[test]
    fn scaled_square_gives_diagonal() {
        let dst: Vec<[f64; 2]> = SQUARE.iter().map(|p| [2.0 * p[0], 2.0 * p[1]]).collect();
        let h = estimate_homography(&SQUARE, &dst).unwrap();
        assert_matrix_close(&h, Matrix3::new(2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0), 1e-9);
    }

    #[test]
    fn collinear_points_are_rejected() {
        let src = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [0.0, 1.0]];
        let err = estimate_homography(&src, &SQUARE).unwrap_err();
        assert!(matches!(err, PeyeError::RankDeficient(_)));
    }

    #[test]
    fn overdetermined_least_squares() {
        let truth = Homography::from_matrix(Matrix3::new(1.1, 0.05, 3.0, -0.02, 0.95, -2.0, 1e-4, -2e-4, 1.0)).unwrap();
        let src: Vec<[f64; 2]> = (0..12).map(|i| [(i * 37 % 50) as f64, (i * 53 % 41) as f64]).collect();
        let dst: Vec<[f64; 2]> = src.iter().map(|p| truth.apply(*p)).collect();
        let h = estimate_homography(&src, &dst).unwrap();
        assert!(reprojection_error(&h, &src, &dst) < 1e-8);
    }

    #[test]
    fn too_few_or_mismatched_points() {
        assert!(estimate_homography(&SQUARE[..3], &SQUARE[..3]).is_err());
        assert!(estimate_homography(&SQUARE, &SQUARE[..3]).is_err());
    }

    #[test]
    fn singular_matrix_rejected() {
        let m = Matrix3::new(1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Homography::from_matrix(m).is_err());
    }

    fn ramp(h: usize, w: usize) -> VisionImage {
        let data = (0..h * w)
            .map(|i| ((i % w) + (i / w)) as f32 / (h + w) as f32)
            .collect();
        VisionImage::new(h, w, Modality::Lwir, data).unwrap()
    }

    #[test]
    fn identity_warp_is_lossless() {
        let img = ramp(9, 7);
        let out = warp_to_pm_frame(&img, &Homography::identity(), (9, 7)).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn integer_translation_shifts_exactly() {
        let img = ramp(10, 8);
        let out = warp_to_pm_frame(&img, &Homography::translation(2.0, 3.0), (10, 8)).unwrap();
        for y in 0..10 {
            for x in 0..8 {
                let v = out.get(0, y, x);
                if x >= 2 && y >= 3 {
                    assert_eq!(v, img.get(0, y - 3, x - 2));
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_image_stays_zero() {
        let img = VisionImage::zeros(6, 6, Modality::Rgb).unwrap();
        let h = estimate_homography(&SQUARE, &[[0.0, 0.0], [1.2, 0.1], [1.1, 1.3], [-0.1, 0.9]]).unwrap();
        let out = warp_to_pm_frame(&img, &h, (5, 4)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn serde_round_trip() {
        let h = Homography::translation(1.5, -2.0);
        let json = serde_json::to_string(&h).unwrap();
        assert_eq!(serde_json::from_str::<Homography>(&json).unwrap(), h);
    }
}
