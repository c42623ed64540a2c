//! Deterministic "structured sprite" pairs.
//!
//! A sprite has four parts (torso, head, two arms) placed by five keypoints.
//! Appearance (per-part colors, torso stripes) and pose are sampled
//! independently, so a pair shares appearance while the geometry differs.
//! Parts are painted in a fixed z-order and each part's mask is its visible
//! silhouette, which makes masks of distinct parts disjoint.

use std::collections::BTreeSet;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::Grid;
use crate::tensor::{Real, Tensor};

pub const KEYPOINTS: usize = 5;
pub const BACKGROUND: [f64; 3] = [0.12, 0.12, 0.16];

/// Keypoint indices into [`Pose::keypoints`].
pub mod kp {
    pub const HEAD: usize = 0;
    pub const NECK: usize = 1;
    pub const PELVIS: usize = 2;
    pub const LEFT_HAND: usize = 3;
    pub const RIGHT_HAND: usize = 4;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Torso,
    Head,
    LeftArm,
    RightArm,
}

impl Part {
    /// Painting order; later parts occlude earlier ones.
    pub const ALL: [Part; 4] = [Part::Torso, Part::Head, Part::LeftArm, Part::RightArm];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Part::Torso => "torso",
            Part::Head => "head",
            Part::LeftArm => "left_arm",
            Part::RightArm => "right_arm",
        }
    }

    pub fn from_name(name: &str) -> Option<Part> {
        Part::ALL.into_iter().find(|p| p.name() == name)
    }
}

/// Per-part texture: a base color with optional stripes of a second color.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: [f64; 3],
    pub stripe: Option<Stripes>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stripes {
    pub color: [f64; 3],
    /// Stripes per unit of canvas height.
    pub frequency: f64,
    pub phase: f64,
}

impl Texture {
    /// Color at vertical offset `dy` (canvas units) from the part's anchor.
    fn at(&self, dy: f64) -> [f64; 3] {
        match self.stripe {
            Some(s) if ((dy * s.frequency + s.phase).floor() as i64).rem_euclid(2) == 1 => s.color,
            _ => self.base,
        }
    }

    pub fn palette(&self) -> Vec<[f64; 3]> {
        let mut p = vec![self.base];
        if let Some(s) = self.stripe {
            p.push(s.color);
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub textures: [Texture; 4],
}

impl Appearance {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let color = |rng: &mut dyn rand::RngCore| -> [f64; 3] {
            [0.0; 3].map(|_| rng.random_range(0.25..1.0))
        };
        let torso_base = color(rng);
        let torso_alt = color(rng);
        let torso = Texture {
            base: torso_base,
            stripe: Some(Stripes {
                color: torso_alt,
                frequency: rng.random_range(10.0..18.0),
                phase: rng.random_range(0.0..2.0),
            }),
        };
        let head = Texture { base: color(rng), stripe: None };
        let left = Texture { base: color(rng), stripe: None };
        let right = Texture { base: color(rng), stripe: None };
        Appearance {
            textures: [torso, head, left, right],
        }
    }

    pub fn texture(&self, part: Part) -> &Texture {
        &self.textures[part.index()]
    }
}

/// Keypoints in normalized `[0, 1]` canvas coordinates, `(x, y)` with y down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub keypoints: [[f64; 2]; KEYPOINTS],
}

const HEAD_RADIUS: f64 = 0.09;
const TORSO_HALF_WIDTH: f64 = 0.12;
const ARM_RADIUS: f64 = 0.045;
const SHOULDER_OFFSET: f64 = 0.09;

impl Pose {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let cx = rng.random_range(0.3..0.7);
        let neck_y = rng.random_range(0.25..0.42);
        let torso_len = rng.random_range(0.25..0.38);
        let neck = [cx, neck_y];
        let head = [cx + rng.random_range(-0.04..0.04), neck_y - rng.random_range(0.09..0.13)];
        let pelvis = [cx + rng.random_range(-0.03..0.03), neck_y + torso_len];
        let hand = |side: f64, rng: &mut dyn rand::RngCore| {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let len: f64 = rng.random_range(0.18..0.3);
            let sx = cx + side * SHOULDER_OFFSET;
            [
                (sx + len * angle.cos()).clamp(0.04, 0.96),
                (neck_y + 0.03 + len * angle.sin()).clamp(0.04, 0.96),
            ]
        };
        let left = hand(-1.0, rng);
        let right = hand(1.0, rng);
        Pose {
            keypoints: [head, neck, pelvis, left, right],
        }
    }

    fn shoulder(&self, side: f64) -> [f64; 2] {
        let n = self.keypoints[kp::NECK];
        [n[0] + side * SHOULDER_OFFSET, n[1] + 0.03]
    }
}

/// Full description of one rendered sprite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpriteSpec {
    pub canvas: usize,
    pub appearance: Appearance,
    pub pose: Pose,
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (qx * qx + qy * qy).sqrt()
}

impl SpriteSpec {
    pub fn grid(&self) -> Grid {
        Grid::square(self.canvas)
    }

    /// Whether the part's silhouette covers point `p` (canvas units).
    fn covers(&self, part: Part, p: [f64; 2]) -> bool {
        let k = &self.pose.keypoints;
        match part {
            Part::Torso => {
                let (n, pe) = (k[kp::NECK], k[kp::PELVIS]);
                if p[1] < n[1] || p[1] > pe[1] {
                    return false;
                }
                let t = (p[1] - n[1]) / (pe[1] - n[1]);
                let cx = n[0] + t * (pe[0] - n[0]);
                (p[0] - cx).abs() <= TORSO_HALF_WIDTH
            }
            Part::Head => {
                let h = k[kp::HEAD];
                let (dx, dy) = (p[0] - h[0], (p[1] - h[1]) / 1.15);
                dx * dx + dy * dy <= HEAD_RADIUS * HEAD_RADIUS
            }
            Part::LeftArm => segment_distance(p, self.pose.shoulder(-1.0), k[kp::LEFT_HAND]) <= ARM_RADIUS,
            Part::RightArm => segment_distance(p, self.pose.shoulder(1.0), k[kp::RIGHT_HAND]) <= ARM_RADIUS,
        }
    }

    fn anchor_y(&self, part: Part) -> f64 {
        let k = &self.pose.keypoints;
        match part {
            Part::Torso => k[kp::NECK][1],
            Part::Head => k[kp::HEAD][1],
            Part::LeftArm | Part::RightArm => k[kp::NECK][1],
        }
    }

    /// Visible part index per pixel, `None` for background.
    pub fn labels(&self) -> Vec<Option<Part>> {
        let n = self.canvas;
        let inv = 1.0 / n as f64;
        let mut out = vec![None; n * n];
        for y in 0..n {
            for x in 0..n {
                let p = [(x as f64 + 0.5) * inv, (y as f64 + 0.5) * inv];
                for part in Part::ALL {
                    if self.covers(part, p) {
                        out[y * n + x] = Some(part);
                    }
                }
            }
        }
        out
    }

    /// `(canvas^2) x 3` RGB image in `[0, 1]`.
    pub fn render<T: Real>(&self) -> Tensor<T> {
        let n = self.canvas;
        let inv = 1.0 / n as f64;
        let labels = self.labels();
        let mut data = Vec::with_capacity(n * n * 3);
        for (i, label) in labels.iter().enumerate() {
            let color = match label {
                Some(part) => {
                    let y = ((i / n) as f64 + 0.5) * inv;
                    self.appearance.texture(*part).at(y - self.anchor_y(*part))
                }
                None => BACKGROUND,
            };
            data.extend(color.iter().map(|v| T::from_f64(*v)));
        }
        Tensor::from_vec(&[n * n, 3], data).expect("sprite image")
    }

    /// One `(canvas^2) x 1` 0/1 mask per part, in [`Part::ALL`] order.
    pub fn masks<T: Real>(&self) -> [Tensor<T>; 4] {
        let labels = self.labels();
        Part::ALL.map(|part| {
            let data = labels
                .iter()
                .map(|l| if *l == Some(part) { T::one() } else { T::zero() })
                .collect();
            Tensor::from_vec(&[labels.len(), 1], data).expect("part mask")
        })
    }

    /// `(canvas^2) x K` Gaussian keypoint heatmaps.
    pub fn heatmaps<T: Real>(&self, sigma_px: f64) -> Tensor<T> {
        let n = self.canvas;
        let mut data = Vec::with_capacity(n * n * KEYPOINTS);
        let denom = 2.0 * sigma_px * sigma_px;
        for y in 0..n {
            for x in 0..n {
                for k in &self.pose.keypoints {
                    let dx = x as f64 + 0.5 - k[0] * n as f64;
                    let dy = y as f64 + 0.5 - k[1] * n as f64;
                    data.push(T::from_f64((-(dx * dx + dy * dy) / denom).exp()));
                }
            }
        }
        Tensor::from_vec(&[n * n, KEYPOINTS], data).expect("heatmaps")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub canvas: usize,
    /// Heatmap standard deviation in pixels.
    pub sigma_px: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            canvas: 64,
            sigma_px: 1.5,
        }
    }
}

/// One rendered view.
#[derive(Debug, Clone)]
pub struct Sample<T: Real = f64> {
    pub spec: SpriteSpec,
    pub image: Tensor<T>,
    pub heatmaps: Tensor<T>,
    pub masks: [Tensor<T>; 4],
}

impl<T: Real> Sample<T> {
    pub fn render(spec: SpriteSpec, sigma_px: f64) -> Self {
        Sample {
            image: spec.render(),
            heatmaps: spec.heatmaps(sigma_px),
            masks: spec.masks(),
            spec,
        }
    }

    pub fn mask(&self, part: Part) -> &Tensor<T> {
        &self.masks[part.index()]
    }
}

/// Same appearance at two poses.
#[derive(Debug, Clone)]
pub struct Pair<T: Real = f64> {
    pub seed: u64,
    pub reference: Sample<T>,
    pub target: Sample<T>,
}

pub fn generate_pair<T: Real>(seed: u64, cfg: &SynthConfig) -> Pair<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let appearance = Appearance::sample(&mut rng);
    let ref_pose = Pose::sample(&mut rng);
    let tgt_pose = Pose::sample(&mut rng);
    let spec = |pose| SpriteSpec {
        canvas: cfg.canvas,
        appearance,
        pose,
    };
    Pair {
        seed,
        reference: Sample::render(spec(ref_pose), cfg.sigma_px),
        target: Sample::render(spec(tgt_pose), cfg.sigma_px),
    }
}

pub const MANIFEST_VERSION: u32 = 1;

/// Reconstructable train/test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub canvas: usize,
    pub keypoints: usize,
    pub sigma_px: f64,
    pub train_seeds: Vec<u64>,
    pub test_seeds: Vec<u64>,
}

impl Manifest {
    pub fn new(cfg: &SynthConfig, train_seeds: Vec<u64>, test_seeds: Vec<u64>) -> Result<Self> {
        let m = Manifest {
            version: MANIFEST_VERSION,
            canvas: cfg.canvas,
            keypoints: KEYPOINTS,
            sigma_px: cfg.sigma_px,
            train_seeds,
            test_seeds,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Config(format!("unsupported manifest version {}", self.version)));
        }
        if self.keypoints != KEYPOINTS {
            return Err(Error::Config(format!("manifest expects {} keypoints", self.keypoints)));
        }
        let train: BTreeSet<u64> = self.train_seeds.iter().copied().collect();
        if train.len() != self.train_seeds.len() {
            return Err(Error::Overlap("duplicate train seed".into()));
        }
        let test: BTreeSet<u64> = self.test_seeds.iter().copied().collect();
        if test.len() != self.test_seeds.len() {
            return Err(Error::Overlap("duplicate test seed".into()));
        }
        if let Some(s) = train.intersection(&test).next() {
            return Err(Error::Overlap(format!("seed {s} is in both splits")));
        }
        Ok(())
    }

    pub fn config(&self) -> SynthConfig {
        SynthConfig {
            canvas: self.canvas,
            sigma_px: self.sigma_px,
        }
    }

    pub fn pair<T: Real>(&self, seed: u64) -> Pair<T> {
        generate_pair(seed, &self.config())
    }
}

/// Contiguous, disjoint seed ranges derived from `seed`.
pub fn generate_split(n_train: usize, n_test: usize, seed: u64, cfg: &SynthConfig) -> Result<Manifest> {
    if n_test == 0 {
        warn!("test split is empty");
    }
    let total = (n_train + n_test) as u64;
    let base = seed
        .checked_mul(1 << 20)
        .filter(|b| b.checked_add(total).is_some())
        .ok_or_else(|| Error::Overlap(format!("seed {seed} leaves no room for {total} samples")))?;
    let train = (0..n_train as u64).map(|i| base + i).collect();
    let test = (0..n_test as u64).map(|i| base + n_train as u64 + i).collect();
    Manifest::new(cfg, train, test)
}
