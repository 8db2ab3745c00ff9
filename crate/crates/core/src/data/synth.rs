//! Synthetic paired vision / pressure data.
//!
//! A body is a set of ellipses (head, torso, four limbs) laid out on a
//! 1 m x 2 m bed. The pressure map is a low plateau under every part plus
//! sharp peaks at load-bearing sites (shoulders, hips, heels, elbows), scaled
//! so that the pressure integral equals the body weight exactly. The vision
//! image renders the same layout as a shaded pseudo-RGB picture or a
//! body-hot / background-cold pseudo-LWIR frame.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, PeyeError, Result};
use crate::types::{Grid, Modality, PhysicalVector, Posture, PressureMap, SampleRecord, VisionImage};

/// Bed extent in metres: `x` across (map columns), `y` along (map rows).
pub const BED_WIDTH_M: f64 = 1.0;
pub const BED_LENGTH_M: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartKind {
    Head,
    Torso,
    LeftArm,
    RightArm,
    LeftLeg,
    RightLeg,
}

impl PartKind {
    fn is_skin(self) -> bool {
        matches!(self, PartKind::Head | PartKind::LeftArm | PartKind::RightArm)
    }

    /// Pressure plateau level before weight scaling.
    fn base_level(self) -> f64 {
        match self {
            PartKind::Head => 0.12,
            PartKind::Torso => 0.16,
            PartKind::LeftArm | PartKind::RightArm => 0.10,
            PartKind::LeftLeg | PartKind::RightLeg => 0.13,
        }
    }
}

/// Ellipse in bed coordinates (metres). `angle` rotates the major axis away
/// from the bed's long axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyPart {
    pub kind: PartKind,
    pub center: [f64; 2],
    /// (along the major axis, across it)
    pub semi_axes: [f64; 2],
    pub angle: f64,
}

impl BodyPart {
    /// Squared normalized ellipse radius of `p`; `< 1` means inside.
    fn radius2(&self, p: [f64; 2]) -> f64 {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let (s, c) = self.angle.sin_cos();
        // major axis direction is (sin a, cos a) in (x, y)
        let along = dx * s + dy * c;
        let across = dx * c - dy * s;
        (along / self.semi_axes[0]).powi(2) + (across / self.semi_axes[1]).powi(2)
    }

    /// Axis-aligned bounding box `(min_x, min_y, max_x, max_y)`.
    fn bounds(&self) -> [f64; 4] {
        let (s, c) = self.angle.sin_cos();
        let [a, b] = self.semi_axes;
        let hx = ((a * s).powi(2) + (b * c).powi(2)).sqrt();
        let hy = ((a * c).powi(2) + (b * s).powi(2)).sqrt();
        [
            self.center[0] - hx,
            self.center[1] - hy,
            self.center[0] + hx,
            self.center[1] + hy,
        ]
    }

    /// Point at fraction `t` in `[-1,1]` along the major axis.
    fn along(&self, t: f64) -> [f64; 2] {
        let (s, c) = self.angle.sin_cos();
        [
            self.center[0] + t * self.semi_axes[0] * s,
            self.center[1] + t * self.semi_axes[0] * c,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Head,
    Shoulder,
    Elbow,
    Hip,
    Knee,
    Heel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakSite {
    pub kind: SiteKind,
    pub center: [f64; 2],
    pub radius: f64,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBodySpec {
    pub posture: Posture,
    pub weight_kg: f64,
    pub height_cm: f64,
    /// 0 female, 1 male
    pub gender: u8,
    pub parts: Vec<BodyPart>,
    pub peaks: Vec<PeakSite>,
    /// Clothing colour used by the pseudo-RGB renderer.
    pub clothing_rgb: [f64; 3],
    pub skin_rgb: [f64; 3],
}

/// Per-subject constants shared by all of a subject's poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectShape {
    pub weight_kg: f64,
    pub height_cm: f64,
    pub gender: u8,
    pub clothing_rgb: [f64; 3],
    pub skin_rgb: [f64; 3],
}

impl SubjectShape {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let gender = rng.random_range(0..=1u8);
        let height_cm: f64 = if gender == 1 {
            rng.random_range(165.0..192.0)
        } else {
            rng.random_range(152.0..180.0)
        };
        let bmi: f64 = rng.random_range(18.5..31.0);
        let weight_kg = bmi * (height_cm / 100.0).powi(2);
        let skin = rng.random_range(0.35..0.9);
        Self {
            weight_kg,
            height_cm,
            gender,
            clothing_rgb: [
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
            ],
            skin_rgb: [skin, skin * 0.78, skin * 0.62],
        }
    }

    fn bmi(&self) -> f64 {
        self.weight_kg / (self.height_cm / 100.0).powi(2)
    }
}

impl SyntheticBodySpec {
    /// Random in-frame layout for `shape` lying in `posture`.
    pub fn sample(shape: &SubjectShape, posture: Posture, rng: &mut impl Rng) -> Result<Self> {
        for _ in 0..64 {
            let spec = Self::layout(shape, posture, rng);
            if spec.validate().is_ok() {
                return Ok(spec);
            }
        }
        Err(PeyeError::InvalidSpec(format!(
            "could not place a {:.0} cm body inside the bed frame",
            shape.height_cm
        )))
    }

    fn layout(shape: &SubjectShape, posture: Posture, rng: &mut impl Rng) -> Self {
        let h = shape.height_cm / 100.0;
        let build = (shape.bmi() / 22.0).sqrt();
        let shoulder = if shape.gender == 1 { 1.08 } else { 0.96 };
        let side = posture != Posture::Supine;
        // +1 when the body faces +x (lying on the left side), -1 mirrored.
        let facing = match posture {
            Posture::RightSide => -1.0,
            _ => 1.0,
        };
        let torso_half = if side { 0.10 } else { 0.15 } * build * shoulder;

        let top = rng.random_range(0.06..(BED_LENGTH_M - h - 0.06).max(0.07));
        let cx = rng.random_range(0.40..0.60);
        let tilt: f64 = rng.random_range(-0.12..0.12);
        let arm_spread = rng.random_range(0.0..0.35);
        let leg_spread = rng.random_range(0.0..0.12);
        let bend = if side { rng.random_range(0.15..0.45) } else { 0.0 };

        let head_r = 0.105 * h / 1.7;
        let mut parts = vec![
            BodyPart {
                kind: PartKind::Head,
                center: [cx + if side { 0.02 * facing } else { 0.0 }, top + head_r],
                semi_axes: [head_r, 0.078 * h / 1.7],
                angle: 0.0,
            },
            BodyPart {
                kind: PartKind::Torso,
                center: [cx, top + 0.34 * h],
                semi_axes: [0.16 * h, torso_half],
                angle: 0.0,
            },
        ];
        let arm_len = 0.17 * h;
        let arm_w = 0.038 * build;
        let hip_y = top + 0.52 * h;
        let leg_len = 0.245 * h;
        let leg_w = 0.062 * build;
        if side {
            // both arms in front of the chest, legs stacked and bent forward
            for (i, kind) in [PartKind::LeftArm, PartKind::RightArm].into_iter().enumerate() {
                let a = facing * (0.35 + arm_spread + 0.25 * i as f64);
                parts.push(BodyPart {
                    kind,
                    center: [
                        cx + facing * (torso_half * 0.6) + arm_len * a.sin(),
                        top + 0.2 * h + arm_len * a.cos(),
                    ],
                    semi_axes: [arm_len, arm_w],
                    angle: a,
                });
            }
            for (i, kind) in [PartKind::LeftLeg, PartKind::RightLeg].into_iter().enumerate() {
                let a = facing * (bend + 0.08 * i as f64);
                parts.push(BodyPart {
                    kind,
                    center: [cx + leg_len * a.sin(), hip_y + leg_len * a.cos()],
                    semi_axes: [leg_len, leg_w],
                    angle: a,
                });
            }
        } else {
            for (sign, kind) in [(-1.0, PartKind::LeftArm), (1.0, PartKind::RightArm)] {
                let a = sign * (0.08 + arm_spread);
                parts.push(BodyPart {
                    kind,
                    center: [
                        cx + sign * (torso_half + 0.015) + arm_len * a.sin(),
                        top + 0.2 * h + arm_len * a.cos(),
                    ],
                    semi_axes: [arm_len, arm_w],
                    angle: a,
                });
            }
            for (sign, kind) in [(-1.0, PartKind::LeftLeg), (1.0, PartKind::RightLeg)] {
                let a = sign * (0.02 + leg_spread);
                parts.push(BodyPart {
                    kind,
                    center: [cx + sign * 0.07 * build + leg_len * a.sin(), hip_y + leg_len * a.cos()],
                    semi_axes: [leg_len, leg_w],
                    angle: a,
                });
            }
        }

        let part = |k: PartKind| *parts.iter().find(|p| p.kind == k).expect("part present");
        let torso = part(PartKind::Torso);
        let head = part(PartKind::Head);
        let mut peaks = Vec::new();
        let mut site = |kind, center, radius, strength| {
            peaks.push(PeakSite {
                kind,
                center,
                radius,
                strength,
            })
        };
        if side {
            site(SiteKind::Head, head.center, 0.035, 0.45);
            site(SiteKind::Shoulder, torso.along(-0.72), 0.05, 0.8);
            site(SiteKind::Hip, torso.along(0.95), 0.06, 1.0);
            let lower = part(PartKind::LeftLeg);
            site(SiteKind::Knee, lower.along(-0.05), 0.035, 0.65);
            site(SiteKind::Heel, lower.along(0.9), 0.03, 0.7);
            site(SiteKind::Elbow, part(PartKind::LeftArm).along(0.1), 0.03, 0.5);
        } else {
            site(SiteKind::Head, head.along(-0.2), 0.035, 0.5);
            for sign in [-1.0, 1.0] {
                let s = torso.along(-0.72);
                site(SiteKind::Shoulder, [s[0] + sign * 0.6 * torso_half, s[1]], 0.045, 0.75);
            }
            site(SiteKind::Hip, torso.along(0.9), 0.065, 1.0);
            for k in [PartKind::LeftLeg, PartKind::RightLeg] {
                site(SiteKind::Heel, part(k).along(0.88), 0.028, 0.85);
            }
            for k in [PartKind::LeftArm, PartKind::RightArm] {
                site(SiteKind::Elbow, part(k).along(0.05), 0.028, 0.55);
            }
        }

        // Rigid tilt of the whole layout about the torso centre.
        let pivot = torso.center;
        let rotate = |p: [f64; 2]| {
            let (s, c) = tilt.sin_cos();
            let (dx, dy) = (p[0] - pivot[0], p[1] - pivot[1]);
            [pivot[0] + c * dx - s * dy, pivot[1] + s * dx + c * dy]
        };
        for p in &mut parts {
            p.center = rotate(p.center);
            p.angle -= tilt;
        }
        for s in &mut peaks {
            s.center = rotate(s.center);
        }

        Self {
            posture,
            weight_kg: shape.weight_kg,
            height_cm: shape.height_cm,
            gender: shape.gender,
            parts,
            peaks,
            clothing_rgb: shape.clothing_rgb,
            skin_rgb: shape.skin_rgb,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight_kg > 0.0 && self.weight_kg.is_finite()) {
            return Err(PeyeError::InvalidSpec(format!(
                "weight must be positive, got {}",
                self.weight_kg
            )));
        }
        if !(self.height_cm > 0.0) {
            return Err(PeyeError::InvalidSpec("height must be positive".into()));
        }
        if self.gender > 1 {
            return Err(PeyeError::InvalidSpec("gender must be 0 or 1".into()));
        }
        if self.parts.is_empty() {
            return Err(PeyeError::InvalidSpec("no body parts".into()));
        }
        for p in &self.parts {
            if p.semi_axes.iter().any(|a| !(*a > 0.0)) {
                return Err(PeyeError::InvalidSpec(format!("{:?} has a non-positive axis", p.kind)));
            }
            let [x0, y0, x1, y1] = p.bounds();
            if x0 < 0.0 || y0 < 0.0 || x1 > BED_WIDTH_M || y1 > BED_LENGTH_M {
                return Err(PeyeError::InvalidSpec(format!(
                    "{:?} extends outside the bed frame",
                    p.kind
                )));
            }
        }
        Ok(())
    }

    fn part(&self, kind: PartKind) -> Option<&BodyPart> {
        self.parts.iter().find(|p| p.kind == kind)
    }

    /// `[weight, height, gender, bust, waist, hip, head, arm, thigh, calf]`
    pub fn physique(&self) -> Result<PhysicalVector> {
        let girth = |a: f64, b: f64| 100.0 * PI * (2.0 * (a * a + b * b)).sqrt() / 2.0_f64.sqrt();
        let torso = self.part(PartKind::Torso).map_or(0.15, |p| p.semi_axes[1]);
        let depth = 0.6 * torso;
        let head = self.part(PartKind::Head).map_or([0.1, 0.08], |p| p.semi_axes);
        let arm = self.part(PartKind::RightArm).map_or(0.04, |p| p.semi_axes[1]);
        let leg = self.part(PartKind::RightLeg).map_or(0.06, |p| p.semi_axes[1]);
        let side_scale = if self.posture == Posture::Supine { 1.0 } else { 1.5 };
        let bust = girth(torso * side_scale, depth * side_scale) * if self.gender == 1 { 1.0 } else { 1.04 };
        PhysicalVector::new(vec![
            self.weight_kg,
            self.height_cm,
            self.gender as f64,
            bust,
            bust * 0.84,
            bust * if self.gender == 1 { 0.98 } else { 1.06 },
            girth(head[0], head[1]) * 0.8,
            girth(arm, arm),
            girth(leg, leg),
            girth(leg, leg) * 0.62,
        ])
    }
}

/// Rendering geometry and calibration shared by a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub pm_rows: usize,
    pub pm_cols: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub modality: Modality,
    /// kg per normalized-pressure unit per pixel.
    pub pixel_area: f64,
    /// Nominal raw sensor value at normalized 1.0.
    pub raw_peak: f64,
    /// Relative multiplicative pressure jitter.
    pub pm_jitter: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            pm_rows: 64,
            pm_cols: 32,
            image_height: 128,
            image_width: 128,
            modality: Modality::Rgb,
            pixel_area: DEFAULT_PIXEL_AREA_64X32,
            raw_peak: 100.0,
            pm_jitter: 0.04,
        }
    }
}

/// Calibration for a 64x32 map: keeps normalized peaks well below 1 for
/// the whole range of sampled subjects.
pub const DEFAULT_PIXEL_AREA_64X32: f64 = 1.9;

impl RenderConfig {
    /// Pixel area scaled for a map of a different resolution so the
    /// pressure levels stay comparable.
    pub fn pixel_area_for(rows: usize, cols: usize) -> f64 {
        DEFAULT_PIXEL_AREA_64X32 * (64.0 * 32.0) / (rows * cols) as f64
    }

    fn validate(&self) -> Result<()> {
        if self.pm_rows == 0 || self.pm_cols == 0 || self.image_height == 0 || self.image_width == 0 {
            return Err(invalid_input!("render sizes must be positive"));
        }
        if !(self.pixel_area > 0.0 && self.raw_peak > 0.0) {
            return Err(invalid_input!("pixel_area and raw_peak must be positive"));
        }
        if !(0.0..0.5).contains(&self.pm_jitter) {
            return Err(invalid_input!("pm_jitter must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

fn bed_point(row: usize, col: usize, rows: usize, cols: usize) -> [f64; 2] {
    [
        (col as f64 + 0.5) / cols as f64 * BED_WIDTH_M,
        (row as f64 + 0.5) / rows as f64 * BED_LENGTH_M,
    ]
}

/// Coverage in `[0,1]`: 1 well inside, smooth falloff near the boundary.
fn coverage(r2: f64) -> f64 {
    let t = ((1.0 - r2) / 0.25).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn render_pressure(spec: &SyntheticBodySpec, cfg: &RenderConfig, rng: &mut ChaCha8Rng) -> Result<Grid> {
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let torso = spec.part(PartKind::Torso).copied();
    let raw = Grid::from_fn(cfg.pm_rows, cfg.pm_cols, |r, c| {
        let p = bed_point(r, c, cfg.pm_rows, cfg.pm_cols);
        let mut body = 0.0f64;
        let mut base = 0.0f64;
        for part in &spec.parts {
            let cov = coverage(part.radius2(p));
            let mut level = part.kind.base_level();
            if part.kind == PartKind::Torso && spec.posture == Posture::Supine {
                // lumbar arch carries little load
                let rel = torso.map_or(0.0, |t| {
                    let (s, cth) = t.angle.sin_cos();
                    ((p[0] - t.center[0]) * s + (p[1] - t.center[1]) * cth) / t.semi_axes[0]
                });
                level *= 1.0 - 0.55 * (-((rel - 0.3) / 0.2).powi(2)).exp();
            }
            body = body.max(cov);
            base = base.max(cov * level);
        }
        let peaks: f64 = spec
            .peaks
            .iter()
            .map(|s| {
                let d2 = (p[0] - s.center[0]).powi(2) + (p[1] - s.center[1]).powi(2);
                s.strength * (-d2 / (2.0 * s.radius * s.radius)).exp()
            })
            .sum();
        let value = base + body * peaks;
        if value > 0.0 {
            (value * (1.0 + cfg.pm_jitter * noise.sample(rng))).max(0.0)
        } else {
            0.0
        }
    })?;
    let total = raw.sum();
    if !(total > 0.0) {
        return Err(PeyeError::InvalidSpec("body leaves no pressure footprint".into()));
    }
    let scale = spec.weight_kg / (cfg.pixel_area * total);
    let pm = raw.map(|v| (v * scale) as f32 as f64);
    if pm.max() > 1.0 {
        return Err(PeyeError::InvalidSpec(format!(
            "pressure peak {:.3} exceeds the normalized range; increase pixel_area",
            pm.max()
        )));
    }
    Ok(pm)
}

fn render_vision(spec: &SyntheticBodySpec, cfg: &RenderConfig, rng: &mut ChaCha8Rng) -> Result<VisionImage> {
    let (h, w) = (cfg.image_height, cfg.image_width);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let channels = cfg.modality.channels();
    let mut data = vec![0f32; channels * h * w];
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    // painter's order: legs, torso, arms, head
    let order = [
        PartKind::LeftLeg,
        PartKind::RightLeg,
        PartKind::Torso,
        PartKind::LeftArm,
        PartKind::RightArm,
        PartKind::Head,
    ];
    for y in 0..h {
        for x in 0..w {
            let p = bed_point(y, x, h, w);
            let n = noise.sample(rng);
            let mut px: [f64; 3] = match cfg.modality {
                Modality::Rgb => {
                    let weave = 0.04 * (2.0 * PI * (p[0] * 9.0 + p[1] * 4.0) + phase).sin();
                    let v = 0.82 + weave + 0.015 * n;
                    [v, v, v + 0.05]
                }
                Modality::Lwir => {
                    let v = 0.12 + 0.02 * (p[1] * 1.7 + phase).sin() + 0.01 * n;
                    [v; 3]
                }
            };
            for kind in order {
                let Some(part) = spec.part(kind) else { continue };
                let r2 = part.radius2(p);
                let cov = coverage(r2);
                if cov <= 0.0 {
                    continue;
                }
                let shade = 0.62 + 0.38 * (1.0 - r2.min(1.0));
                let color: [f64; 3] = match cfg.modality {
                    Modality::Rgb => {
                        let base = if kind.is_skin() {
                            spec.skin_rgb
                        } else {
                            spec.clothing_rgb
                        };
                        base.map(|c| c * shade)
                    }
                    Modality::Lwir => {
                        let temp = if kind.is_skin() { 0.88 } else { 0.7 };
                        [temp * (0.8 + 0.2 * shade); 3]
                    }
                };
                for ch in 0..3 {
                    px[ch] = px[ch] * (1.0 - cov) + color[ch] * cov;
                }
            }
            for ch in 0..channels {
                data[(ch * h + y) * w + x] = px[ch].clamp(0.0, 1.0) as f32;
            }
        }
    }
    VisionImage::new(h, w, cfg.modality, data)
}

/// Renders one paired record. Deterministic for a given `(spec, cfg, seed)`;
/// the pressure integral `pixel_area * sum(pm)` equals `spec.weight_kg`.
pub fn generate_synthetic(spec: &SyntheticBodySpec, cfg: &RenderConfig, seed: u64) -> Result<SampleRecord> {
    spec.validate()?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pm = render_pressure(spec, cfg, &mut rng)?;
    let vision = render_vision(spec, cfg, &mut rng)?;
    Ok(SampleRecord {
        subject_id: "synthetic".into(),
        pose_id: format!("seed{seed}"),
        posture: spec.posture,
        vision,
        pressure: PressureMap::new(pm, cfg.raw_peak)?,
        physique: spec.physique()?,
    })
}
