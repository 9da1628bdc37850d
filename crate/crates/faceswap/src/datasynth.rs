//! Procedural face dataset with exact identity/attribute ground truth.
//!
//! A face is a pure function of a [`FaceSpec`]: an identity vector (geometry
//! ratios and base colors), an attribute vector (yaw, mouth curvature,
//! illumination, background), and a per-image noise seed. Rendering composes
//! anti-aliased ellipses and a mouth curve, then applies a directional
//! lighting gain. Every factor lives in `[0,1]`.
//!
//! Identity factors:  0 face width/height ratio, 1 eye spacing, 2 eye size,
//! 3 nose length, 4 mouth width, 5-7 skin RGB, 8-10 hair band RGB.
//! Attribute factors: 0 head yaw (maps to [-30, 30] degrees as a horizontal
//! shift/shear), 1 mouth openness (smile curvature), 2 illumination
//! direction, 3 illumination strength, 4 background shade.
//!
//! The lighting transform is `lit = color * gain(strength, g)` with
//! `gain = 0.5 + 0.5 * strength * (0.3 + 0.7 * g)` and `g in [0,1]` a fixed
//! directional gradient, so the mean pixel value is strictly increasing in
//! the illumination strength and two renders differing only in strength
//! differ exactly by a per-pixel gain ratio.

use crate::error::{Error, Result};
use crate::rng::{mix, Frng};
use crate::tensor::{Element, Tensor};

pub const ID_FACTORS: usize = 11;
pub const ATTR_FACTORS: usize = 5;

/// Minimum pairwise L2 distance between identity vectors, enforced by
/// rejection sampling in [`sample_dataset`].
pub const MIN_IDENTITY_SEPARATION: f64 = 0.15;

/// Amplitude of the per-image color noise.
const NOISE_AMPLITUDE: f64 = 0.015;

/// Ground truth for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceSpec {
    pub identity: Vec<f64>,
    pub attributes: Vec<f64>,
    pub seed: u64,
}

impl FaceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.identity.len() != ID_FACTORS || self.attributes.len() != ATTR_FACTORS {
            return Err(Error::InvalidConfig {
                what: format!(
                    "face spec needs {ID_FACTORS} identity and {ATTR_FACTORS} attribute factors"
                ),
            });
        }
        for v in self.identity.iter().chain(self.attributes.iter()) {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::InvalidConfig {
                    what: format!("face factor {v} outside [0,1]"),
                });
            }
        }
        Ok(())
    }
}

/// Ellipse in normalized [0,1]^2 image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

/// Geometry derived from the identity factors alone, before any attribute
/// transform is applied. Two specs sharing an identity share this exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceGeometry {
    pub head: Ellipse,
    pub left_eye: Ellipse,
    pub right_eye: Ellipse,
    pub nose: Ellipse,
    pub mouth_half_width: f64,
    pub hair_band: Ellipse,
    pub skin: [f64; 3],
    pub hair: [f64; 3],
}

impl FaceGeometry {
    /// Pure function of the identity vector.
    pub fn from_identity(identity: &[f64]) -> FaceGeometry {
        let ratio = identity[0];
        let eye_spacing = identity[1];
        let eye_size = identity[2];
        let nose_len = identity[3];
        let mouth_width = identity[4];
        let head = Ellipse {
            cx: 0.5,
            cy: 0.52,
            rx: 0.24 + 0.12 * ratio,
            ry: 0.40 - 0.06 * ratio,
        };
        let eye_dx = head.rx * (0.30 + 0.35 * eye_spacing);
        let eye_y = head.cy - 0.12;
        let eye_r = 0.025 + 0.035 * eye_size;
        let left_eye = Ellipse {
            cx: head.cx - eye_dx,
            cy: eye_y,
            rx: eye_r,
            ry: eye_r * 0.8,
        };
        let right_eye = Ellipse {
            cx: head.cx + eye_dx,
            cy: eye_y,
            rx: eye_r,
            ry: eye_r * 0.8,
        };
        let nose = Ellipse {
            cx: head.cx,
            cy: head.cy + 0.02,
            rx: 0.018,
            ry: 0.04 + 0.07 * nose_len,
        };
        let hair_band = Ellipse {
            cx: head.cx,
            cy: head.cy - head.ry * 0.78,
            rx: head.rx * 0.95,
            ry: head.ry * 0.30,
        };
        // Colors kept away from the extremes so lighting never clips.
        let skin = [
            0.35 + 0.5 * identity[5],
            0.30 + 0.45 * identity[6],
            0.25 + 0.45 * identity[7],
        ];
        let hair = [
            0.05 + 0.6 * identity[8],
            0.05 + 0.6 * identity[9],
            0.05 + 0.6 * identity[10],
        ];
        FaceGeometry {
            head,
            left_eye,
            right_eye,
            nose,
            mouth_half_width: head.rx * (0.25 + 0.4 * mouth_width),
            hair_band,
            skin,
            hair,
        }
    }
}

/// Directional lighting gradient `g(x, y) in [0,1]` for normalized
/// coordinates; pure function of the illumination direction factor.
pub fn lighting_gradient(direction: f64, x: f64, y: f64) -> f64 {
    let angle = direction * std::f64::consts::TAU;
    let dot = (x - 0.5) * angle.cos() + (y - 0.5) * angle.sin();
    // dot ranges over about [-0.707, 0.707]; map to [0,1]
    (dot / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0)
}

/// Per-pixel lighting gain; strictly increasing in `strength`.
pub fn lighting_gain(strength: f64, g: f64) -> f64 {
    0.5 + 0.5 * strength * (0.3 + 0.7 * g)
}

fn ellipse_coverage(e: &Ellipse, x: f64, y: f64, px: f64) -> f64 {
    // Signed "radius" distance; soft edge roughly one pixel wide.
    let dx = (x - e.cx) / e.rx;
    let dy = (y - e.cy) / e.ry;
    let d = (dx * dx + dy * dy).sqrt();
    let edge = px / e.rx.min(e.ry);
    ((1.0 - d) / edge + 0.5).clamp(0.0, 1.0)
}

/// Renders a spec to a `[3, size, size]` tensor with values in [-1, 1].
/// Bitwise deterministic for a given spec.
pub fn render<E: Element>(spec: &FaceSpec, size: usize) -> Result<Tensor<E>> {
    if size < 16 {
        return Err(Error::InvalidConfig {
            what: format!("render size must be >= 16, got {size}"),
        });
    }
    spec.validate()?;
    let geo = FaceGeometry::from_identity(&spec.identity);
    let yaw = (spec.attributes[0] - 0.5) * 2.0; // [-1, 1] ~ [-30, 30] degrees
    let mouth_open = spec.attributes[1];
    let illum_dir = spec.attributes[2];
    let illum_strength = spec.attributes[3];
    let bg_shade = 0.15 + 0.6 * spec.attributes[4];

    // Yaw shifts the whole head a little and the inner features more,
    // approximating a turn; shear leans the head sideways.
    let head_shift = 0.06 * yaw;
    let feature_shift = 0.10 * yaw;
    let shear = 0.12 * yaw;

    let px = 1.0 / size as f64;
    let mut noise = Frng::from_seed(spec.seed);
    let mut data = vec![E::zero(); 3 * size * size];
    let mouth_cy = geo.head.cy + geo.head.ry * 0.45;
    let mouth_curv = (mouth_open - 0.5) * 0.12;
    let mouth_thick = 0.014 + 0.012 * mouth_open;

    for iy in 0..size {
        let y = (iy as f64 + 0.5) * px;
        for ix in 0..size {
            let x = (ix as f64 + 0.5) * px;
            // Positions in face space, undoing yaw shift and shear.
            let lean = shear * (geo.head.cy - y);
            let xh = x - head_shift - lean;
            let xf = x - feature_shift - lean;

            let head_cov = ellipse_coverage(&geo.head, xh, y, px);
            let hair_cov = ellipse_coverage(&geo.hair_band, xh, y, px) * head_cov;
            let le = ellipse_coverage(&geo.left_eye, xf, y, px);
            let re = ellipse_coverage(&geo.right_eye, xf, y, px);
            let eye_cov = (le + re).min(1.0) * head_cov;
            let nose_cov = ellipse_coverage(&geo.nose, xf, y, px) * head_cov;

            // Mouth: quadratic curve y = mouth_cy + curv * (u^2 - 1) over
            // u in [-1, 1] across the mouth width.
            let u = (xf - geo.head.cx) / geo.mouth_half_width;
            let mouth_cov = if u.abs() <= 1.0 {
                let curve_y = mouth_cy + mouth_curv * (u * u - 1.0);
                (((mouth_thick - (y - curve_y).abs()) / px) + 0.5).clamp(0.0, 1.0) * head_cov
            } else {
                0.0
            };

            let g = lighting_gradient(illum_dir, x, y);
            let gain = lighting_gain(illum_strength, g);
            for ch in 0..3 {
                let mut c = bg_shade;
                c = c + head_cov * (geo.skin[ch] - c);
                c = c + hair_cov * (geo.hair[ch] - c);
                c = c + nose_cov * (geo.skin[ch] * 0.55 - c);
                c = c + mouth_cov * ([0.55, 0.15, 0.15][ch] - c);
                c = c + eye_cov * (0.06 - c);
                c += NOISE_AMPLITUDE * (noise.uniform() - 0.5);
                let lit = (c.clamp(0.02, 1.0) * gain).clamp(0.0, 1.0);
                data[(ch * size + iy) * size + ix] = E::from_f64(2.0 * lit - 1.0);
            }
        }
    }
    Tensor::from_vec(&[3, size, size], data)
}

/// A sampled dataset: one identity vector per id, fresh attributes per
/// image, and a disjoint 80/20 train/held-out split over identities.
pub struct SyntheticDataset {
    pub items: Vec<(FaceSpec, usize)>,
    pub n_ids: usize,
    pub n_per_id: usize,
    /// Identities `0..n_train_ids` are the training split; the rest are
    /// held out.
    pub n_train_ids: usize,
}

impl SyntheticDataset {
    pub fn train_items(&self) -> Vec<&(FaceSpec, usize)> {
        self.items
            .iter()
            .filter(|(_, id)| *id < self.n_train_ids)
            .collect()
    }

    pub fn heldout_items(&self) -> Vec<&(FaceSpec, usize)> {
        self.items
            .iter()
            .filter(|(_, id)| *id >= self.n_train_ids)
            .collect()
    }
}

fn draw_factors(rng: &mut Frng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform()).collect()
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Samples `n_ids * n_per_id` specs. Identity vectors are drawn once per id
/// with rejection sampling enforcing [`MIN_IDENTITY_SEPARATION`]; attributes
/// are drawn per image; per-image noise seeds come from a SplitMix64 of
/// `(seed, image index)`.
pub fn sample_dataset(n_ids: usize, n_per_id: usize, seed: u64) -> Result<SyntheticDataset> {
    if n_ids < 2 {
        return Err(Error::InvalidConfig {
            what: format!("need at least 2 identities, got {n_ids}"),
        });
    }
    let mut id_rng = Frng::from_seed(mix(seed, 0x1D));
    let mut identities: Vec<Vec<f64>> = Vec::with_capacity(n_ids);
    let mut rejections = 0usize;
    while identities.len() < n_ids {
        let cand = draw_factors(&mut id_rng, ID_FACTORS);
        if identities
            .iter()
            .all(|v| l2_distance(v, &cand) >= MIN_IDENTITY_SEPARATION)
        {
            identities.push(cand);
        } else {
            rejections += 1;
            if rejections > 100_000 {
                return Err(Error::InvalidConfig {
                    what: format!(
                        "cannot place {n_ids} identities with separation {MIN_IDENTITY_SEPARATION}"
                    ),
                });
            }
        }
    }
    let mut attr_rng = Frng::from_seed(mix(seed, 0xA7));
    let mut items = Vec::with_capacity(n_ids * n_per_id);
    for id in 0..n_ids {
        for _ in 0..n_per_id {
            let index = items.len() as u64;
            items.push((
                FaceSpec {
                    identity: identities[id].clone(),
                    attributes: draw_factors(&mut attr_rng, ATTR_FACTORS),
                    seed: mix(seed, 0x1000 + index),
                },
                id,
            ));
        }
    }
    let n_train_ids = ((n_ids * 4) / 5).max(1).min(n_ids - 1);
    Ok(SyntheticDataset {
        items,
        n_ids,
        n_per_id,
        n_train_ids,
    })
}
